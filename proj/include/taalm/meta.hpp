#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "taalm/twl.hpp"

namespace taalm {

// positions*parameters cap for materializing the per-token gradient matrix;
// above it the directional-derivative path is used instead.
inline constexpr std::size_t kPerTokenGradCap = std::size_t(1) << 26;

// Evidence document paired with the task it makes solvable.
struct MetaPair {
    std::vector<int> evidence;
    std::vector<int> task_tokens;
    std::vector<int> task_label_positions;  // token indices of the answer span
};

template <typename T>
struct MetaStepReport {
    T inner_loss = 0;
    T task_loss_before = 0;
    T task_loss_after = 0;
    T weight_grad_norm = 0;

    void check_finite() const {
        for (T v : {inner_loss, task_loss_before, task_loss_after, weight_grad_norm}) {
            if (!std::isfinite(static_cast<double>(v))) {
                throw NumericError("meta step produced a non-finite quantity");
            }
        }
    }
};

// Rows of the per-position loss Jacobian: row i is grad_theta of loss_i, flattened.
template <typename T>
std::vector<std::vector<T>> per_token_grads(const ParamSet<T>& theta, const TransformerConfig& cfg,
                                            std::span<const int> tokens) {
    const std::size_t total = theta.total_count();
    const std::size_t positions = tokens.size() - 1;
    if (positions * total > kPerTokenGradCap) {
        throw NumericError("per_token_grads: positions x parameters exceeds cap; use the jvp path");
    }
    ForwardGraph<T> g = build_forward(theta, cfg, tokens, true);
    std::vector<std::vector<T>> rows;
    rows.reserve(positions);
    Workspace<T> ws;
    Tensor<T> seed({static_cast<int>(positions)});
    for (std::size_t i = 0; i < positions; ++i) {
        seed.fill(T(0));
        seed[i] = T(1);
        g.tape.backward(g.losses, seed, g.params, ws);
        std::vector<T> flat;
        flat.reserve(total);
        for (int id : g.params) {
            const Tensor<T>& gt = ws.grad[static_cast<std::size_t>(id)];
            flat.insert(flat.end(), gt.data.begin(), gt.data.end());
        }
        rows.push_back(std::move(flat));
    }
    return rows;
}

// Directional derivatives of each per-position loss along h: value i equals
// h . grad_theta(loss_i), computed in a single forward-mode sweep.
template <typename T>
std::vector<T> jvp_dot_products(const ParamSet<T>& theta, const TransformerConfig& cfg,
                                std::span<const int> tokens, const std::vector<T>& h_flat) {
    if (h_flat.size() != theta.total_count()) {
        throw NumericError("jvp_dot_products: direction length mismatch");
    }
    ForwardGraph<T> g = build_forward(theta, cfg, tokens, true);
    std::vector<Tensor<T>> chunks;
    chunks.reserve(theta.entries.size());
    std::size_t off = 0;
    for (const auto& [name, t] : theta.entries) {
        Tensor<T> c(t.shape);
        std::copy(h_flat.begin() + static_cast<std::ptrdiff_t>(off),
                  h_flat.begin() + static_cast<std::ptrdiff_t>(off + t.size()), c.data.begin());
        off += t.size();
        chunks.push_back(std::move(c));
    }
    std::vector<std::pair<int, const Tensor<T>*>> tangents;
    tangents.reserve(chunks.size());
    for (std::size_t k = 0; k < chunks.size(); ++k) {
        tangents.emplace_back(g.params[k], &chunks[k]);
    }
    return g.tape.jvp(g.losses, tangents).data;
}

// Exact gradient of the post-update task loss w.r.t. the token weights, for a
// single plain-SGD inner step. theta' is affine in W through the normalized
// weighted gradient ghat = sum(w_j G_j)/S, so no Hessian term appears:
//   dL/dw_i = -(alpha/S) * h^T (G_i - ghat)
// which only needs the dot products d_i = h^T G_i.
template <typename T>
std::vector<T> weight_grads_from_dots(const std::vector<T>& dots, const TokenWeights<T>& weights,
                                      T alpha) {
    T sw = 0;
    for (T w : weights.values) {
        sw += w;
    }
    if (static_cast<double>(sw) < kWeightSumFloor) {
        throw DegenerateWeightsError("weight gradient: weight sum below floor");
    }
    T h_dot_ghat = 0;
    for (std::size_t i = 0; i < dots.size(); ++i) {
        h_dot_ghat += weights.values[i] * dots[i];
    }
    h_dot_ghat /= sw;
    std::vector<T> out(dots.size());
    for (std::size_t i = 0; i < dots.size(); ++i) {
        out[i] = -(alpha / sw) * (dots[i] - h_dot_ghat);
    }
    return out;
}

template <typename T>
std::vector<T> weight_grads_analytic(const std::vector<std::vector<T>>& per_token,
                                     const TokenWeights<T>& weights, const std::vector<T>& h_flat,
                                     T alpha) {
    std::vector<T> dots(per_token.size());
    for (std::size_t i = 0; i < per_token.size(); ++i) {
        if (per_token[i].size() != h_flat.size()) {
            throw NumericError("weight_grads_analytic: row length mismatch");
        }
        T d = 0;
        for (std::size_t j = 0; j < h_flat.size(); ++j) {
            d += h_flat[j] * per_token[i][j];
        }
        dots[i] = d;
    }
    return weight_grads_from_dots(dots, weights, alpha);
}

// Mean NLL over the task's label positions at the given parameters.
template <typename T>
T task_loss_value(const ParamSet<T>& theta, const TransformerConfig& cfg, const MetaPair& pair) {
    const Tensor<T> lp = lm_forward(theta, cfg, pair.task_tokens);
    T s = 0;
    for (int pos : pair.task_label_positions) {
        if (pos < 1 || pos >= static_cast<int>(pair.task_tokens.size())) {
            throw NumericError("task label position out of bounds");
        }
        s += -lp.at(pos - 1, pair.task_tokens[static_cast<std::size_t>(pos)]);
    }
    return s / static_cast<T>(pair.task_label_positions.size());
}

// One optimization unit of the Train-Attention loop: predict weights, take the
// inner token-weighted step, measure the task at theta', push the exact weight
// gradient back through the TA, and leave theta0 untouched (the reset).
template <typename T>
MetaStepReport<T> meta_step(const ParamSet<T>& phi, const TransformerConfig& ta_cfg,
                            const ParamSet<T>& theta0, const TransformerConfig& lm_cfg,
                            const MetaPair& pair, T alpha, std::vector<Tensor<T>>& phi_grad_sink) {
    if (!(alpha >= T(0))) {
        throw NumericError("meta_step: alpha must be non-negative");
    }
    MetaStepReport<T> report;

    // (1) W = phi(evidence)
    ForwardGraph<T> ta_graph = build_forward(phi, ta_cfg, pair.evidence, false);
    TokenWeights<T> w;
    w.values = ta_graph.tape.val(ta_graph.weights).data;

    // (2) inner gradient at theta0 and the updated point theta'
    ForwardGraph<T> lm_graph;
    const InnerGrad<T> ig = twppl_param_grad(theta0, lm_cfg, pair.evidence, w, &lm_graph);
    report.inner_loss = ig.inner_loss;
    ParamSet<T> theta_prime = theta0;
    for (std::size_t k = 0; k < theta_prime.entries.size(); ++k) {
        Tensor<T>& t = theta_prime.entries[k].second;
        for (std::size_t i = 0; i < t.size(); ++i) {
            t[i] -= alpha * ig.grads[k][i];
        }
    }

    // (3) task loss and its parameter gradient at theta'
    report.task_loss_before = task_loss_value(theta0, lm_cfg, pair);
    ForwardGraph<T> task_graph = build_forward(theta_prime, lm_cfg, pair.task_tokens, true);
    const std::size_t task_positions = pair.task_tokens.size() - 1;
    Tensor<T> span_w({static_cast<int>(task_positions)});
    for (int pos : pair.task_label_positions) {
        if (pos < 1 || pos > static_cast<int>(task_positions)) {
            throw NumericError("task label position out of bounds");
        }
        span_w[static_cast<std::size_t>(pos - 1)] = T(1);
    }
    const int span_node = task_graph.tape.constant(std::move(span_w));
    const int loss_node = task_graph.tape.weighted_mean(task_graph.losses, span_node);
    report.task_loss_after = task_graph.tape.val(loss_node)[0];
    const auto h_tensors =
        task_graph.tape.backward(loss_node, Tensor<T>({1}, {T(1)}), task_graph.params);
    std::vector<T> h_flat;
    h_flat.reserve(theta0.total_count());
    for (const auto& t : h_tensors) {
        h_flat.insert(h_flat.end(), t.data.begin(), t.data.end());
    }

    // (4) dot products h^T G_i: explicit rows under the cap, jvp above it.
    const std::size_t positions = pair.evidence.size() - 1;
    std::vector<T> dots(positions);
    if (positions * theta0.total_count() <= kPerTokenGradCap) {
        Workspace<T> ws;
        Tensor<T> seed({static_cast<int>(positions)});
        for (std::size_t i = 0; i < positions; ++i) {
            seed.fill(T(0));
            seed[i] = T(1);
            lm_graph.tape.backward(lm_graph.losses, seed, lm_graph.params, ws);
            T d = 0;
            std::size_t off = 0;
            for (std::size_t k = 0; k < lm_graph.params.size(); ++k) {
                const Tensor<T>& gt = ws.grad[static_cast<std::size_t>(lm_graph.params[k])];
                for (std::size_t j = 0; j < gt.size(); ++j) {
                    d += gt[j] * h_flat[off + j];
                }
                off += gt.size();
            }
            dots[i] = d;
        }
    } else {
        dots = jvp_dot_products(theta0, lm_cfg, pair.evidence, h_flat);
    }

    // (5) dL/dW, then back through the TA to phi.
    const std::vector<T> dw = weight_grads_from_dots(dots, w, alpha);
    Tensor<T> w_seed(ta_graph.tape.val(ta_graph.weights).shape);
    double norm_sq = 0;
    for (std::size_t i = 0; i < dw.size(); ++i) {
        w_seed[i] = dw[i];
        norm_sq += static_cast<double>(dw[i]) * static_cast<double>(dw[i]);
    }
    report.weight_grad_norm = static_cast<T>(std::sqrt(norm_sq));
    const auto phi_grads = ta_graph.tape.backward(ta_graph.weights, w_seed, ta_graph.params);
    if (phi_grad_sink.empty()) {
        for (const auto& [name, t] : phi.entries) {
            phi_grad_sink.emplace_back(t.shape);
        }
    }
    for (std::size_t k = 0; k < phi_grads.size(); ++k) {
        for (std::size_t i = 0; i < phi_grads[k].size(); ++i) {
            phi_grad_sink[k][i] += phi_grads[k][i];
        }
    }
    report.check_finite();
    return report;
}

// --- Train-Attention optimization loop ---------------------------------------

template <typename T>
struct MetaConfig {
    T alpha = T(0.5);          // inner SGD learning rate
    T beta = T(2e-4);          // outer Adam learning rate on phi
    int accumulation = 16;     // meta steps per outer update
    int max_outer_steps = 150;
    int eval_every = 5;        // outer steps between validation passes
    int patience = 8;          // validation passes without improvement
    int inner_steps = 1;       // exactness of the weight gradient requires 1
    std::uint64_t shuffle_seed = 42;

    void validate() const {
        if (inner_steps != 1) {
            throw ConfigError("meta config: inner step count is fixed to 1");
        }
        if (accumulation < 1 || max_outer_steps < 1 || eval_every < 1 || patience < 1) {
            throw ConfigError("meta config: counts must be positive");
        }
        if (!(alpha > T(0)) || !(beta > T(0))) {
            throw ConfigError("meta config: learning rates must be positive");
        }
    }
};

struct TelemetryRow {
    long long step = 0;
    double inner_loss = 0;
    double task_loss_after = 0;
    double val_loss = -1;  // negative means "not evaluated at this step"
    double weight_grad_norm = 0;
};

template <typename T>
struct TrainTaResult {
    ParamSet<T> phi;
    std::vector<TelemetryRow> telemetry;
    std::vector<double> val_history;
    double initial_val_loss = 0;
    double best_val_loss = 0;
    int outer_steps_run = 0;
    bool early_stopped = false;
};

template <typename T>
double validation_loss(const ParamSet<T>& phi, const TransformerConfig& ta_cfg,
                       const ParamSet<T>& theta0, const TransformerConfig& lm_cfg,
                       std::span<const MetaPair> pairs, T alpha) {
    double s = 0;
    for (const MetaPair& pair : pairs) {
        const TokenWeights<T> w = ta_forward(phi, ta_cfg, pair.evidence);
        const ParamSet<T> theta_prime = inner_update_sgd(theta0, lm_cfg, pair.evidence, w, alpha);
        s += static_cast<double>(task_loss_value(theta_prime, lm_cfg, pair));
    }
    return s / static_cast<double>(pairs.size());
}

// Meta-optimizes phi over shuffled pairs with gradient accumulation, a held-out
// validation split, early stopping, and a divergence guard. Deterministic given
// the seed; the best-validation parameters are returned.
template <typename T>
TrainTaResult<T> train_ta(ParamSet<T> phi, const TransformerConfig& ta_cfg,
                          const ParamSet<T>& theta0, const TransformerConfig& lm_cfg,
                          std::vector<MetaPair> pairs, const MetaConfig<T>& mc) {
    mc.validate();
    if (pairs.empty()) {
        throw ConfigError("train_ta: empty pair dataset");
    }
    Rng rng(mc.shuffle_seed, 0x7a);
    rng.shuffle(pairs);
    const std::size_t val_n =
        std::min(pairs.size() / 2, std::max<std::size_t>(8, pairs.size() / 40));
    if (val_n == 0 || val_n >= pairs.size()) {
        throw ConfigError("train_ta: dataset too small to split validation");
    }
    const std::vector<MetaPair> val(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(val_n));
    std::vector<MetaPair> train(pairs.begin() + static_cast<std::ptrdiff_t>(val_n), pairs.end());

    TrainTaResult<T> result;
    result.initial_val_loss = validation_loss(phi, ta_cfg, theta0, lm_cfg, val, mc.alpha);
    result.val_history.push_back(result.initial_val_loss);
    result.best_val_loss = result.initial_val_loss;
    ParamSet<T> best_phi = phi;

    AdamState<T> adam;
    AdamHyper<T> hyper;
    hyper.lr = mc.beta;
    std::vector<Tensor<T>> grad_sink;
    long long meta_steps = 0;
    int since_best = 0;
    int diverged_checks = 0;
    std::size_t cursor = train.size();  // forces an initial shuffle

    for (int outer = 0; outer < mc.max_outer_steps; ++outer) {
        for (auto& g : grad_sink) {
            g.fill(T(0));
        }
        double window_inner = 0, window_task = 0, window_norm = 0;
        for (int a = 0; a < mc.accumulation; ++a) {
            if (cursor >= train.size()) {
                rng.shuffle(train);
                cursor = 0;
            }
            const MetaPair& pair = train[cursor++];
            const MetaStepReport<T> rep =
                meta_step(phi, ta_cfg, theta0, lm_cfg, pair, mc.alpha, grad_sink);
            ++meta_steps;
            window_inner += static_cast<double>(rep.inner_loss);
            window_task += static_cast<double>(rep.task_loss_after);
            window_norm += static_cast<double>(rep.weight_grad_norm);
        }
        const T inv = T(1) / static_cast<T>(mc.accumulation);
        for (auto& g : grad_sink) {
            for (auto& v : g.data) {
                v *= inv;
            }
        }
        adam_step(phi, grad_sink, adam, hyper);
        result.outer_steps_run = outer + 1;

        TelemetryRow row;
        row.step = outer + 1;
        row.inner_loss = window_inner / mc.accumulation;
        row.task_loss_after = window_task / mc.accumulation;
        row.weight_grad_norm = window_norm / mc.accumulation;

        if ((outer + 1) % mc.eval_every == 0) {
            const double vl = validation_loss(phi, ta_cfg, theta0, lm_cfg, val, mc.alpha);
            result.val_history.push_back(vl);
            row.val_loss = vl;
            if (vl > 10.0 * result.initial_val_loss) {
                if (++diverged_checks >= 3) {
                    throw NumericError(
                        "train_ta diverged: validation loss exceeded 10x its initial value on 3 "
                        "consecutive checks (initial " +
                        std::to_string(result.initial_val_loss) + ", current " +
                        std::to_string(vl) + ")");
                }
            } else {
                diverged_checks = 0;
            }
            if (vl < result.best_val_loss) {
                result.best_val_loss = vl;
                best_phi = phi;
                since_best = 0;
            } else {
                ++since_best;
                if (since_best >= mc.patience) {
                    result.telemetry.push_back(row);
                    result.early_stopped = true;
                    break;
                }
            }
        }
        result.telemetry.push_back(row);
    }

    result.phi = std::move(best_phi);
    return result;
}

}  // namespace taalm
