#pragma once

#include <functional>
#include <span>
#include <vector>

#include "taalm/model.hpp"

namespace taalm {

// Per-position negative log-likelihoods: values[i] = -log p(x_{i+1} | x_{<=i}).
template <typename T>
struct PerPositionLosses {
    std::vector<T> values;

    void validate() const {
        for (T v : values) {
            if (!(v >= T(0)) || !std::isfinite(static_cast<double>(v))) {
                throw NumericError("per-position losses must be finite and non-negative");
            }
        }
    }
};

template <typename T>
PerPositionLosses<T> nll_per_position(const Tensor<T>& logprobs, std::span<const int> targets) {
    if (static_cast<int>(targets.size()) != logprobs.shape[0]) {
        throw NumericError("nll: target count must match logprob rows");
    }
    PerPositionLosses<T> out;
    out.values.reserve(targets.size());
    for (int i = 0; i < logprobs.shape[0]; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t < 0 || t >= logprobs.shape[1]) {
            throw NumericError("nll: target id out of vocab");
        }
        out.values.push_back(-logprobs.at(i, t));
    }
    return out;
}

// Mean NLL; the uniform-weight objective.
template <typename T>
T ppl_loss(const PerPositionLosses<T>& losses) {
    if (losses.values.empty()) {
        throw NumericError("ppl_loss: empty loss vector");
    }
    T s = 0;
    for (T v : losses.values) {
        s += v;
    }
    return s / static_cast<T>(losses.values.size());
}

// Normalized token-weighted objective: sum(w*l) / sum(w).
template <typename T>
T twppl(const PerPositionLosses<T>& losses, const TokenWeights<T>& weights) {
    if (losses.values.size() != weights.values.size()) {
        throw NumericError("twppl: weight/loss length mismatch");
    }
    T sw = 0, swl = 0;
    for (std::size_t i = 0; i < losses.values.size(); ++i) {
        sw += weights.values[i];
        swl += weights.values[i] * losses.values[i];
    }
    if (static_cast<double>(sw) < kWeightSumFloor) {
        throw DegenerateWeightsError("twppl: weight sum below floor");
    }
    return swl / sw;
}

// Analytic d(twppl)/dw_i = (l_i - twppl) / sum(w).
template <typename T>
std::vector<T> twppl_weight_grad(const PerPositionLosses<T>& losses,
                                 const TokenWeights<T>& weights) {
    const T mean = twppl(losses, weights);
    T sw = 0;
    for (T w : weights.values) {
        sw += w;
    }
    std::vector<T> g(losses.values.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = (losses.values[i] - mean) / sw;
    }
    return g;
}

// Gradient of twppl w.r.t. parameters via one backward pass: seeding the
// per-position loss vector with w/sum(w) contracts the Jacobian exactly.
template <typename T>
struct InnerGrad {
    std::vector<Tensor<T>> grads;  // aligned with ParamSet entries
    T inner_loss = 0;              // twppl value at the base point
    T weight_sum = 0;
};

template <typename T>
InnerGrad<T> twppl_param_grad(const ParamSet<T>& theta, const TransformerConfig& cfg,
                              std::span<const int> tokens, const TokenWeights<T>& weights,
                              ForwardGraph<T>* keep_graph = nullptr) {
    ForwardGraph<T> local;
    ForwardGraph<T>& g = keep_graph ? *keep_graph : local;
    g = build_forward(theta, cfg, tokens, true);
    const Tensor<T>& losses = g.tape.val(g.losses);
    weights.validate(losses.size());
    T sw = 0, swl = 0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        sw += weights.values[i];
        swl += weights.values[i] * losses[i];
    }
    if (static_cast<double>(sw) < kWeightSumFloor) {
        throw DegenerateWeightsError("inner update: weight sum below floor");
    }
    Tensor<T> seed({static_cast<int>(losses.size())});
    for (std::size_t i = 0; i < losses.size(); ++i) {
        seed[i] = weights.values[i] / sw;
    }
    InnerGrad<T> out;
    out.grads = g.tape.backward(g.losses, seed, g.params);
    out.inner_loss = swl / sw;
    out.weight_sum = sw;
    return out;
}

// theta' = theta - alpha * grad(twppl). theta itself is untouched.
template <typename T>
ParamSet<T> inner_update_sgd(const ParamSet<T>& theta, const TransformerConfig& cfg,
                             std::span<const int> tokens, const TokenWeights<T>& weights,
                             T alpha) {
    if (!(alpha >= T(0))) {
        throw NumericError("inner update: alpha must be non-negative");
    }
    const InnerGrad<T> ig = twppl_param_grad(theta, cfg, tokens, weights);
    ParamSet<T> updated = theta;
    for (std::size_t k = 0; k < updated.entries.size(); ++k) {
        Tensor<T>& t = updated.entries[k].second;
        const Tensor<T>& gk = ig.grads[k];
        for (std::size_t i = 0; i < t.size(); ++i) {
            t[i] -= alpha * gk[i];
        }
    }
    return updated;
}

// --- adaptive-moment optimizer ---------------------------------------------

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m, v;
    long long t = 0;

    void ensure(const ParamSet<T>& p) {
        if (m.empty()) {
            for (const auto& [name, tns] : p.entries) {
                m.emplace_back(tns.shape);
                v.emplace_back(tns.shape);
            }
        }
    }
};

template <typename T>
struct AdamHyper {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0);  // decoupled, applied directly to parameters
};

template <typename T>
void adam_step(ParamSet<T>& p, const std::vector<Tensor<T>>& grads, AdamState<T>& st,
               const AdamHyper<T>& hp) {
    st.ensure(p);
    st.t += 1;
    const T bc1 = T(1) - std::pow(hp.beta1, static_cast<T>(st.t));
    const T bc2 = T(1) - std::pow(hp.beta2, static_cast<T>(st.t));
    for (std::size_t k = 0; k < p.entries.size(); ++k) {
        Tensor<T>& w = p.entries[k].second;
        const Tensor<T>& g = grads[k];
        Tensor<T>& m = st.m[k];
        Tensor<T>& v = st.v[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = hp.beta1 * m[i] + (T(1) - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (T(1) - hp.beta2) * g[i] * g[i];
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            if (hp.weight_decay != T(0)) {
                w[i] -= hp.lr * hp.weight_decay * w[i];
            }
            w[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
        }
    }
}

// --- finetune step ----------------------------------------------------------

template <typename T>
struct WeightedDoc {
    std::span<const int> tokens;
    TokenWeights<T> weights;  // treated as constants; no gradient reaches the provider
};

template <typename T>
struct FinetuneHyper {
    AdamHyper<T> adam;
    T anchor_lambda = T(0);
    const ParamSet<T>* anchor = nullptr;  // required when anchor_lambda > 0
};

// One adaptive-moment step on the mean per-document twppl over the batch, plus
// an optional L2 anchor toward a reference parameter set. Returns the batch loss
// (anchor term included when active).
template <typename T>
T finetune_step(ParamSet<T>& theta, const TransformerConfig& cfg,
                std::span<const WeightedDoc<T>> batch, AdamState<T>& state,
                const FinetuneHyper<T>& hp) {
    if (batch.empty()) {
        throw NumericError("finetune_step: empty batch");
    }
    std::vector<Tensor<T>> grads;
    grads.reserve(theta.entries.size());
    for (const auto& [name, t] : theta.entries) {
        grads.emplace_back(t.shape);
    }
    const T inv_b = T(1) / static_cast<T>(batch.size());
    T loss = 0;
    for (const WeightedDoc<T>& doc : batch) {
        const InnerGrad<T> ig = twppl_param_grad(theta, cfg, doc.tokens, doc.weights);
        loss += ig.inner_loss * inv_b;
        for (std::size_t k = 0; k < grads.size(); ++k) {
            for (std::size_t i = 0; i < grads[k].size(); ++i) {
                grads[k][i] += ig.grads[k][i] * inv_b;
            }
        }
    }
    if (hp.anchor_lambda > T(0)) {
        if (hp.anchor == nullptr) {
            throw ConfigError("finetune_step: anchor_lambda set without an anchor");
        }
        for (std::size_t k = 0; k < grads.size(); ++k) {
            const Tensor<T>& w = theta.entries[k].second;
            const Tensor<T>& w0 = hp.anchor->entries[k].second;
            if (!w.same_shape(w0)) {
                throw NumericError("finetune_step: anchor shape mismatch");
            }
            for (std::size_t i = 0; i < w.size(); ++i) {
                const T d = w[i] - w0[i];
                loss += hp.anchor_lambda * d * d;
                grads[k][i] += T(2) * hp.anchor_lambda * d;
            }
        }
    }
    if (!std::isfinite(static_cast<double>(loss))) {
        throw NumericError("finetune_step: non-finite batch loss");
    }
    adam_step(theta, grads, state, hp.adam);
    return loss;
}

}  // namespace taalm
