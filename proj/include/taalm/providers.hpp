#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "taalm/twl.hpp"
#include "taalm/world.hpp"

namespace taalm {

// Source of per-document token weights for the training phase. Providers see
// the current parameters each time; their output is used as constants.
template <typename T>
class WeightProvider {
  public:
    virtual ~WeightProvider() = default;
    virtual TokenWeights<T> weights(const ParamSet<T>& theta, const Document& doc) = 0;
    virtual std::string name() const = 0;
};

template <typename T>
class UniformProvider final : public WeightProvider<T> {
  public:
    TokenWeights<T> weights(const ParamSet<T>&, const Document& doc) override {
        return TokenWeights<T>{std::vector<T>(doc.tokens.size() - 1, T(1))};
    }
    std::string name() const override { return "uniform"; }
};

// Weight 1 exactly on the object label's predicted positions, 0 elsewhere.
template <typename T>
class OracleProvider final : public WeightProvider<T> {
  public:
    TokenWeights<T> weights(const ParamSet<T>&, const Document& doc) override {
        if (doc.span_lo < 1 || doc.span_hi <= doc.span_lo ||
            doc.span_hi > static_cast<int>(doc.tokens.size())) {
            throw NumericError("oracle weights: document has no usable object span");
        }
        TokenWeights<T> w{std::vector<T>(doc.tokens.size() - 1, T(0))};
        for (int pos = doc.span_lo; pos < doc.span_hi; ++pos) {
            w.values[static_cast<std::size_t>(pos - 1)] = T(1);
        }
        return w;
    }
    std::string name() const override { return "oracle"; }
};

// Frozen Train-Attention: weights predicted by phi, no gradient flows back.
template <typename T>
class FrozenTaProvider final : public WeightProvider<T> {
  public:
    FrozenTaProvider(ParamSet<T> phi, TransformerConfig ta_cfg)
        : phi_(std::move(phi)), ta_cfg_(std::move(ta_cfg)) {
        ta_cfg_.head_kind = HeadKind::TA;
    }
    TokenWeights<T> weights(const ParamSet<T>&, const Document& doc) override {
        return ta_forward(phi_, ta_cfg_, doc.tokens);
    }
    std::string name() const override { return "ta"; }

  private:
    ParamSet<T> phi_;
    TransformerConfig ta_cfg_;
};

// Binary selection of the top ceil(ratio * positions) by excess loss
// (current-model NLL minus frozen-reference NLL), ties to lower index.
template <typename T>
class Rho1Provider final : public WeightProvider<T> {
  public:
    Rho1Provider(const ParamSet<T>& reference, TransformerConfig cfg, T ratio)
        : ref_(reference), cfg_(std::move(cfg)), ratio_(ratio) {
        if (!(ratio_ > T(0) && ratio_ <= T(1))) {
            throw ConfigError("rho1: ratio must lie in (0, 1]");
        }
    }

    TokenWeights<T> weights(const ParamSet<T>& theta, const Document& doc) override {
        const std::vector<T>& ref_losses = ref_losses_for(doc);
        const auto targets = std::vector<int>(doc.tokens.begin() + 1, doc.tokens.end());
        const auto cur = nll_per_position(lm_forward(theta, cfg_, doc.tokens), targets);
        const std::size_t n = cur.values.size();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::vector<T> excess(n);
        for (std::size_t i = 0; i < n; ++i) {
            excess[i] = cur.values[i] - ref_losses[i];
        }
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return excess[a] > excess[b];  // stable: ties keep lower index first
        });
        const std::size_t keep = static_cast<std::size_t>(
            std::ceil(static_cast<double>(ratio_) * static_cast<double>(n)));
        TokenWeights<T> w{std::vector<T>(n, T(0))};
        for (std::size_t i = 0; i < keep && i < n; ++i) {
            w.values[order[i]] = T(1);
        }
        return w;
    }
    std::string name() const override { return "rho1"; }

  private:
    const std::vector<T>& ref_losses_for(const Document& doc) {
        auto it = cache_.find(doc.uid);
        if (it != cache_.end()) {
            return it->second;
        }
        const auto targets = std::vector<int>(doc.tokens.begin() + 1, doc.tokens.end());
        auto losses = nll_per_position(lm_forward(ref_, cfg_, doc.tokens), targets);
        return cache_.emplace(doc.uid, std::move(losses.values)).first->second;
    }

    ParamSet<T> ref_;
    TransformerConfig cfg_;
    T ratio_;
    std::map<int, std::vector<T>> cache_;
};

// Zeroes the weights of positions the current model already predicts correctly.
template <typename T>
TokenWeights<T> known_token_mask(const ParamSet<T>& theta, const TransformerConfig& cfg,
                                 const Document& doc, TokenWeights<T> w) {
    w.validate(doc.tokens.size() - 1);
    const Tensor<T> lp = lm_forward(theta, cfg, doc.tokens);
    for (std::size_t i = 0; i < w.values.size(); ++i) {
        const int pred = argmax_row(lp, static_cast<int>(i));
        if (pred == doc.tokens[i + 1]) {
            w.values[i] = T(0);
        }
    }
    return w;
}

// Keeps the top (100-k)% of weights by value (ties to lower index); k=0 is the
// identity, larger k drops more of the low end.
template <typename T>
TokenWeights<T> drop_below_topk(TokenWeights<T> w, double k_percent) {
    if (k_percent < 0.0 || k_percent > 100.0) {
        throw ConfigError("drop_below_topk: k must lie in [0, 100]");
    }
    if (k_percent == 0.0) {
        return w;
    }
    const std::size_t n = w.values.size();
    const std::size_t keep = static_cast<std::size_t>(
        std::ceil((100.0 - k_percent) / 100.0 * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return w.values[a] > w.values[b]; });
    std::vector<T> out(n, T(0));
    for (std::size_t i = 0; i < keep && i < n; ++i) {
        out[order[i]] = w.values[order[i]];
    }
    w.values = std::move(out);
    return w;
}

// Ablation wrapper, fixed composition order: TA -> drop -> mask.
template <typename T>
class AblatedTaProvider final : public WeightProvider<T> {
  public:
    AblatedTaProvider(ParamSet<T> phi, TransformerConfig ta_cfg, TransformerConfig lm_cfg,
                      double drop_k, bool mask)
        : inner_(std::move(phi), std::move(ta_cfg)), lm_cfg_(std::move(lm_cfg)), drop_k_(drop_k),
          mask_(mask) {}

    TokenWeights<T> weights(const ParamSet<T>& theta, const Document& doc) override {
        TokenWeights<T> w = inner_.weights(theta, doc);
        if (drop_k_ > 0.0) {
            w = drop_below_topk(std::move(w), drop_k_);
        }
        if (mask_) {
            w = known_token_mask(theta, lm_cfg_, doc, std::move(w));
        }
        return w;
    }
    std::string name() const override {
        std::string n = "ta";
        if (drop_k_ > 0.0) {
            n += "+drop" + std::to_string(static_cast<int>(drop_k_));
        }
        if (mask_) {
            n += "+mask";
        }
        return n;
    }

  private:
    FrozenTaProvider<T> inner_;
    TransformerConfig lm_cfg_;
    double drop_k_;
    bool mask_;
};

// base_loss + lambda * ||theta - theta0||^2 over all parameters.
template <typename T>
T l2_anchor_loss(const ParamSet<T>& theta, const ParamSet<T>& theta0, T lambda, T base_loss) {
    if (lambda < T(0)) {
        throw ConfigError("l2 anchor: lambda must be non-negative");
    }
    T penalty = 0;
    if (theta.entries.size() != theta0.entries.size()) {
        throw NumericError("l2 anchor: parameter set shape mismatch");
    }
    for (std::size_t k = 0; k < theta.entries.size(); ++k) {
        const Tensor<T>& a = theta.entries[k].second;
        const Tensor<T>& b = theta0.entries[k].second;
        if (!a.same_shape(b)) {
            throw NumericError("l2 anchor: parameter set shape mismatch");
        }
        for (std::size_t i = 0; i < a.size(); ++i) {
            const T d = a[i] - b[i];
            penalty += d * d;
        }
    }
    return base_loss + lambda * penalty;
}

// Epoch stream for rehearsal: train documents interleaved with replay documents
// sampled from the pretraining corpus so that replay makes up `review_ratio` of
// the stream. Entries index into (is_replay ? corpus : train).
struct StreamEntry {
    bool is_replay = false;
    std::size_t index = 0;
};

inline std::vector<StreamEntry> rehearsal_mix(std::size_t n_train, std::size_t corpus_size,
                                              double review_ratio, Rng& epoch_rng) {
    if (review_ratio < 0.0 || review_ratio >= 1.0) {
        throw ConfigError("rehearsal: review_ratio must lie in [0, 1)");
    }
    std::vector<StreamEntry> stream;
    std::vector<std::size_t> train_order(n_train);
    std::iota(train_order.begin(), train_order.end(), 0);
    epoch_rng.shuffle(train_order);
    for (std::size_t i : train_order) {
        stream.push_back({false, i});
    }
    if (review_ratio > 0.0) {
        if (corpus_size == 0) {
            throw ConfigError("rehearsal: review_ratio > 0 with an empty replay corpus");
        }
        const auto n_replay = static_cast<std::size_t>(
            std::llround(static_cast<double>(n_train) * review_ratio / (1.0 - review_ratio)));
        for (std::size_t i = 0; i < n_replay; ++i) {
            stream.push_back({true, static_cast<std::size_t>(epoch_rng.below(corpus_size))});
        }
        epoch_rng.shuffle(stream);
    }
    return stream;
}

}  // namespace taalm
