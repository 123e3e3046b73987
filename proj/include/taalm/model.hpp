#pragma once

#include <span>
#include <string>
#include <vector>

#include "taalm/params.hpp"
#include "taalm/rng.hpp"
#include "taalm/tape.hpp"

namespace taalm {

// Per-predicted-position training weights: values[i] weights the prediction of
// token i+1 from its prefix, so a document of N tokens carries N-1 weights.
template <typename T>
struct TokenWeights {
    std::vector<T> values;

    void validate(std::size_t expected_len) const {
        if (values.size() != expected_len) {
            throw NumericError("token weights length does not match predicted positions");
        }
        for (T v : values) {
            if (!(v >= T(0) && v <= T(1))) {
                throw NumericError("token weights must lie in [0,1]");
            }
        }
    }

    T sum() const {
        T s = 0;
        for (T v : values) {
            s += v;
        }
        return s;
    }
};

inline constexpr double kTrunkInitStd = 0.02;
inline constexpr double kTaHeadInitStd = 1e-4;
inline constexpr double kLayerNormEps = 1e-5;

// Deterministic initialization. Trunk uses std 0.02 with residual output
// projections scaled by 1/sqrt(2*n_layers); the TA head is near zero so that a
// fresh Train-Attention emits weights indistinguishable from uniform.
template <typename T>
ParamSet<T> init_params(const TransformerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed, 0xa11);
    ParamSet<T> p;
    const T std_base = static_cast<T>(kTrunkInitStd);
    const T std_resid = static_cast<T>(kTrunkInitStd / std::sqrt(2.0 * cfg.n_layers));
    p.add("tok_embed", Tensor<T>::randn({cfg.vocab_size, cfg.d_model}, rng, std_base));
    p.add("pos_embed", Tensor<T>::randn({cfg.max_seq_len, cfg.d_model}, rng, std_base));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        p.add(pre + "ln1.gamma", Tensor<T>({cfg.d_model}, T(1)));
        p.add(pre + "ln1.beta", Tensor<T>({cfg.d_model}));
        p.add(pre + "attn.wqkv", Tensor<T>::randn({cfg.d_model, 3 * cfg.d_model}, rng, std_base));
        p.add(pre + "attn.bqkv", Tensor<T>({3 * cfg.d_model}));
        p.add(pre + "attn.wout", Tensor<T>::randn({cfg.d_model, cfg.d_model}, rng, std_resid));
        p.add(pre + "attn.bout", Tensor<T>({cfg.d_model}));
        p.add(pre + "ln2.gamma", Tensor<T>({cfg.d_model}, T(1)));
        p.add(pre + "ln2.beta", Tensor<T>({cfg.d_model}));
        p.add(pre + "ffn.w1", Tensor<T>::randn({cfg.d_model, cfg.d_ff}, rng, std_base));
        p.add(pre + "ffn.b1", Tensor<T>({cfg.d_ff}));
        p.add(pre + "ffn.w2", Tensor<T>::randn({cfg.d_ff, cfg.d_model}, rng, std_resid));
        p.add(pre + "ffn.b2", Tensor<T>({cfg.d_model}));
    }
    p.add("final_ln.gamma", Tensor<T>({cfg.d_model}, T(1)));
    p.add("final_ln.beta", Tensor<T>({cfg.d_model}));
    if (cfg.head_kind == HeadKind::LM) {
        p.add("lm_head.w", Tensor<T>::randn({cfg.d_model, cfg.vocab_size}, rng, std_base));
        p.add("lm_head.b", Tensor<T>({cfg.vocab_size}));
    } else {
        p.add("ta_head.w", Tensor<T>::randn({cfg.d_model, 1}, rng, static_cast<T>(kTaHeadInitStd)));
        p.add("ta_head.b", Tensor<T>::randn({1}, rng, static_cast<T>(kTaHeadInitStd)));
    }
    return p;
}

// Transplants a trunk into the other head configuration: trunk tensors are
// copied, the head is freshly initialized for the requested kind.
template <typename T>
ParamSet<T> with_head(const ParamSet<T>& src, const TransformerConfig& src_cfg, HeadKind head,
                      std::uint64_t head_seed) {
    TransformerConfig cfg = src_cfg;
    cfg.head_kind = head;
    ParamSet<T> fresh = init_params<T>(cfg, head_seed);
    for (auto& [name, t] : fresh.entries) {
        if (name.rfind("lm_head.", 0) == 0 || name.rfind("ta_head.", 0) == 0) {
            continue;
        }
        t = src.at(name);
    }
    return fresh;
}

// Recorded forward pass. `params` holds the leaf id of every ParamSet entry in
// order; heads populate `logits`/`losses` (LM) or `weights` (TA).
template <typename T>
struct ForwardGraph {
    Tape<T> tape;
    std::vector<int> params;
    int hidden = -1;   // [N-1, d_model] rows that feed the head
    int logits = -1;   // [N-1, vocab]
    int losses = -1;   // [N-1] per-position NLL (only when targets requested)
    int weights = -1;  // [N-1, 1] TA head output
};

template <typename T>
void check_tokens(const TransformerConfig& cfg, std::span<const int> tokens) {
    if (tokens.size() < 2) {
        throw NumericError("sequence must have at least 2 tokens");
    }
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len) {
        throw NumericError("sequence longer than max_seq_len");
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw NumericError("unknown token id " + std::to_string(t));
        }
    }
}

template <typename T>
ForwardGraph<T> build_forward(const ParamSet<T>& p, const TransformerConfig& cfg,
                              std::span<const int> tokens, bool with_losses = true) {
    check_tokens<T>(cfg, tokens);
    const int n = static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    const int dh = d / cfg.n_heads;

    ForwardGraph<T> g;
    Tape<T>& tape = g.tape;
    g.params.reserve(p.entries.size());
    for (const auto& [name, t] : p.entries) {
        g.params.push_back(tape.leaf(t));
    }
    auto leaf_of = [&](const std::string& name) {
        for (std::size_t i = 0; i < p.entries.size(); ++i) {
            if (p.entries[i].first == name) {
                return g.params[i];
            }
        }
        throw ConfigError("forward: missing parameter " + name);
    };

    // causal mask: large negative finite value; exp underflows to exactly zero
    Tensor<T> mask({n, n});
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            mask.at(i, j) = T(-1e9);
        }
    }
    const int mask_node = tape.constant(std::move(mask));

    int x = tape.add(tape.embed(leaf_of("tok_embed"), std::vector<int>(tokens.begin(), tokens.end())),
                     tape.slice(leaf_of("pos_embed"), 0, n, 0, d));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        const int a_in = tape.layer_norm(x, leaf_of(pre + "ln1.gamma"), leaf_of(pre + "ln1.beta"),
                                         static_cast<T>(kLayerNormEps));
        const int qkv = tape.add(tape.matmul(a_in, leaf_of(pre + "attn.wqkv")),
                                 leaf_of(pre + "attn.bqkv"));
        std::vector<int> head_outs;
        head_outs.reserve(cfg.n_heads);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int q = tape.slice(qkv, 0, n, h * dh, (h + 1) * dh);
            const int k = tape.slice(qkv, 0, n, d + h * dh, d + (h + 1) * dh);
            const int v = tape.slice(qkv, 0, n, 2 * d + h * dh, 2 * d + (h + 1) * dh);
            const int scores = tape.add(
                tape.scale(tape.matmul(q, k, false, true), T(1) / std::sqrt(static_cast<T>(dh))),
                mask_node);
            head_outs.push_back(tape.matmul(tape.softmax(scores), v));
        }
        const int attn = tape.add(
            tape.matmul(tape.concat_cols(head_outs), leaf_of(pre + "attn.wout")),
            leaf_of(pre + "attn.bout"));
        x = tape.add(x, attn);
        const int f_in = tape.layer_norm(x, leaf_of(pre + "ln2.gamma"), leaf_of(pre + "ln2.beta"),
                                         static_cast<T>(kLayerNormEps));
        const int ff = tape.add(
            tape.matmul(tape.gelu(tape.add(tape.matmul(f_in, leaf_of(pre + "ffn.w1")),
                                           leaf_of(pre + "ffn.b1"))),
                        leaf_of(pre + "ffn.w2")),
            leaf_of(pre + "ffn.b2"));
        x = tape.add(x, ff);
    }
    const int h_final = tape.layer_norm(x, leaf_of("final_ln.gamma"), leaf_of("final_ln.beta"),
                                        static_cast<T>(kLayerNormEps));
    g.hidden = tape.slice(h_final, 0, n - 1, 0, d);  // position i predicts token i+1

    if (cfg.head_kind == HeadKind::LM) {
        g.logits = tape.add(tape.matmul(g.hidden, leaf_of("lm_head.w")), leaf_of("lm_head.b"));
        if (with_losses) {
            g.losses = tape.cross_entropy(g.logits,
                                          std::vector<int>(tokens.begin() + 1, tokens.end()));
        }
    } else {
        g.weights = tape.sigmoid(tape.add(tape.matmul(g.hidden, leaf_of("ta_head.w")),
                                          leaf_of("ta_head.b")));
    }
    return g;
}

// Per-position next-token log-probabilities; row i (0-based) is the
// log-distribution over the token at position i+1. Rows log-sum-exp to zero.
template <typename T>
Tensor<T> lm_forward(const ParamSet<T>& p, const TransformerConfig& cfg,
                     std::span<const int> tokens) {
    ForwardGraph<T> g = build_forward(p, cfg, tokens, false);
    Tensor<T> out = g.tape.val(g.logits);
    const int m = out.shape[0], v = out.shape[1];
    for (int i = 0; i < m; ++i) {
        T* row = &out.at(i, 0);
        T mx = row[0];
        for (int j = 1; j < v; ++j) {
            mx = std::max(mx, row[j]);
        }
        T s = 0;
        for (int j = 0; j < v; ++j) {
            s += std::exp(row[j] - mx);
        }
        const T lse = mx + std::log(s);
        for (int j = 0; j < v; ++j) {
            row[j] -= lse;
        }
    }
    return out;
}

template <typename T>
TokenWeights<T> ta_forward(const ParamSet<T>& p, const TransformerConfig& cfg,
                           std::span<const int> tokens) {
    TransformerConfig ta_cfg = cfg;
    ta_cfg.head_kind = HeadKind::TA;
    ForwardGraph<T> g = build_forward(p, ta_cfg, tokens, false);
    TokenWeights<T> w;
    w.values = g.tape.val(g.weights).data;
    return w;
}

// Greedy argmax with lowest-id tie-break.
template <typename T>
int argmax_row(const Tensor<T>& m, int row) {
    const T* r = &m.at(row, 0);
    int best = 0;
    for (int j = 1; j < m.shape[1]; ++j) {
        if (r[j] > r[best]) {
            best = j;
        }
    }
    return best;
}

struct LabelPrediction {
    std::vector<int> predicted;
    std::vector<bool> correct;

    double accuracy() const {
        if (correct.empty()) {
            return 0.0;
        }
        int hits = 0;
        for (bool c : correct) {
            hits += c ? 1 : 0;
        }
        return static_cast<double>(hits) / static_cast<double>(correct.size());
    }
};

// Teacher-forced prediction at each label position: the model sees the gold
// prefix and must produce the gold token by greedy argmax.
template <typename T>
LabelPrediction predict_labels(const ParamSet<T>& p, const TransformerConfig& cfg,
                               std::span<const int> tokens, std::span<const int> label_span) {
    if (label_span.empty()) {
        throw NumericError("predict_labels: empty label span");
    }
    for (int pos : label_span) {
        if (pos < 1 || pos >= static_cast<int>(tokens.size())) {
            throw NumericError("predict_labels: label position out of bounds");
        }
    }
    const Tensor<T> logprobs = lm_forward(p, cfg, tokens);
    LabelPrediction out;
    for (int pos : label_span) {
        const int pred = argmax_row(logprobs, pos - 1);
        out.predicted.push_back(pred);
        out.correct.push_back(pred == tokens[static_cast<std::size_t>(pos)]);
    }
    return out;
}

}  // namespace taalm
