#pragma once

#include <array>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "taalm/tensor.hpp"

namespace taalm {

// Sum floor below which a weight vector makes the normalized weighted mean undefined.
inline constexpr double kWeightSumFloor = 1e-8;

enum class OpKind {
    Leaf,
    Constant,
    MatMul,        // optional transpose on either input
    Add,           // same shape, or [m,n] + [n] row broadcast
    Mul,           // elementwise, same shape
    Softmax,       // last axis, max-subtracted
    LayerNorm,     // per row: gamma * (x - mu)/sqrt(var + eps) + beta
    Embed,         // gather rows of a table by token id
    Gelu,          // exact erf form
    Sigmoid,
    Scale,         // multiply by a compile-time constant scalar
    Concat,        // along columns
    Slice,         // rectangular [r0,r1) x [c0,c1)
    CrossEntropy,  // per-row negative log softmax picked at target ids
    WeightedMean,  // sum(w*v)/sum(w), scalar output
};

// One recorded operation. Saved activations live in `value` (every node keeps
// its output) plus op-specific scratch such as softmax probabilities.
template <typename T>
struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<int> inputs;
    Tensor<T> value;
    bool trans_a = false, trans_b = false;  // MatMul
    T scalar = T(0);                        // Scale constant, LayerNorm eps
    int r0 = 0, r1 = 0, c0 = 0, c1 = 0;     // Slice bounds
    std::vector<int> ids;                   // Embed tokens / CrossEntropy targets
    Tensor<T> scratch;                      // CrossEntropy: per-row softmax probs
};

template <typename T>
struct Workspace {
    std::vector<Tensor<T>> grad;      // adjoint per node
    std::vector<char> live;           // node participates in this backward pass
    std::vector<Tensor<T>> tangent;   // forward-mode buffers
};

// Append-only computation record. Forward values are computed eagerly as nodes
// are appended; backward and jvp replay the record without mutating it, so the
// same record can be re-seeded any number of times.
template <typename T>
class Tape {
  public:
    int leaf(Tensor<T> v) { return push_input(OpKind::Leaf, std::move(v)); }

    // Untracked input: participates in forward values but never receives a gradient.
    int constant(Tensor<T> v) { return push_input(OpKind::Constant, std::move(v)); }

    const Tensor<T>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    std::size_t node_count() const { return nodes_.size(); }

    int matmul(int a, int b, bool trans_a = false, bool trans_b = false) {
        const Tensor<T>& A = val(a);
        const Tensor<T>& B = val(b);
        require(A.shape.size() == 2 && B.shape.size() == 2, "matmul expects matrices");
        const int m = trans_a ? A.shape[1] : A.shape[0];
        const int ka = trans_a ? A.shape[0] : A.shape[1];
        const int kb = trans_b ? B.shape[1] : B.shape[0];
        const int n = trans_b ? B.shape[0] : B.shape[1];
        require(ka == kb, "matmul inner dimensions differ");
        Node<T> node;
        node.kind = OpKind::MatMul;
        node.inputs = {a, b};
        node.trans_a = trans_a;
        node.trans_b = trans_b;
        node.value = Tensor<T>({m, n});
        gemm(A, trans_a, B, trans_b, node.value, false);
        return push(std::move(node));
    }

    int add(int a, int b) {
        const Tensor<T>& A = val(a);
        const Tensor<T>& B = val(b);
        Node<T> node;
        node.kind = OpKind::Add;
        node.inputs = {a, b};
        if (A.same_shape(B)) {
            node.value = A;
            for (std::size_t i = 0; i < B.size(); ++i) {
                node.value[i] += B[i];
            }
        } else if (A.shape.size() == 2 && B.shape.size() == 1 && A.shape[1] == B.shape[0]) {
            node.value = A;
            const int m = A.shape[0], n = A.shape[1];
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    node.value.at(i, j) += B[static_cast<std::size_t>(j)];
                }
            }
        } else {
            require(false, "add shapes incompatible");
        }
        return push(std::move(node));
    }

    int mul(int a, int b) {
        const Tensor<T>& A = val(a);
        const Tensor<T>& B = val(b);
        require(A.same_shape(B), "mul expects matching shapes");
        Node<T> node;
        node.kind = OpKind::Mul;
        node.inputs = {a, b};
        node.value = A;
        for (std::size_t i = 0; i < B.size(); ++i) {
            node.value[i] *= B[i];
        }
        return push(std::move(node));
    }

    int softmax(int a) {
        const Tensor<T>& A = val(a);
        require(A.shape.size() == 2, "softmax expects a matrix");
        Node<T> node;
        node.kind = OpKind::Softmax;
        node.inputs = {a};
        node.value = A;
        const int m = A.shape[0], n = A.shape[1];
        for (int i = 0; i < m; ++i) {
            T* row = &node.value.at(i, 0);
            T mx = row[0];
            for (int j = 1; j < n; ++j) {
                mx = std::max(mx, row[j]);
            }
            T s = 0;
            for (int j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] - mx);
                s += row[j];
            }
            const T inv = T(1) / s;
            for (int j = 0; j < n; ++j) {
                row[j] *= inv;
            }
        }
        return push(std::move(node));
    }

    int layer_norm(int x, int gamma, int beta, T eps) {
        const Tensor<T>& X = val(x);
        require(X.shape.size() == 2, "layer_norm expects a matrix");
        const int n = X.shape[1];
        require(val(gamma).shape == std::vector<int>{n} && val(beta).shape == std::vector<int>{n},
                "layer_norm gamma/beta must match feature dim");
        Node<T> node;
        node.kind = OpKind::LayerNorm;
        node.inputs = {x, gamma, beta};
        node.scalar = eps;
        node.value = Tensor<T>(X.shape);
        const Tensor<T>& G = val(gamma);
        const Tensor<T>& B = val(beta);
        const int m = X.shape[0];
        for (int i = 0; i < m; ++i) {
            const T* row = &X.at(i, 0);
            T mu = 0;
            for (int j = 0; j < n; ++j) {
                mu += row[j];
            }
            mu /= static_cast<T>(n);
            T var = 0;
            for (int j = 0; j < n; ++j) {
                const T v = row[j] - mu;
                var += v * v;
            }
            var /= static_cast<T>(n);
            const T inv_sd = T(1) / std::sqrt(var + eps);
            T* out = &node.value.at(i, 0);
            for (int j = 0; j < n; ++j) {
                out[j] = G[static_cast<std::size_t>(j)] * (row[j] - mu) * inv_sd +
                         B[static_cast<std::size_t>(j)];
            }
        }
        return push(std::move(node));
    }

    int embed(int table, std::vector<int> ids) {
        const Tensor<T>& E = val(table);
        require(E.shape.size() == 2, "embed expects a table matrix");
        Node<T> node;
        node.kind = OpKind::Embed;
        node.inputs = {table};
        for (int id : ids) {
            if (id < 0 || id >= E.shape[0]) {
                throw NumericError("embed: token id out of range");
            }
        }
        node.ids = std::move(ids);
        const int n = E.shape[1];
        node.value = Tensor<T>({static_cast<int>(node.ids.size()), n});
        for (std::size_t i = 0; i < node.ids.size(); ++i) {
            const T* src = &E.at(node.ids[i], 0);
            T* dst = &node.value.at(static_cast<int>(i), 0);
            for (int j = 0; j < n; ++j) {
                dst[j] = src[j];
            }
        }
        return push(std::move(node));
    }

    int gelu(int a) {
        Node<T> node;
        node.kind = OpKind::Gelu;
        node.inputs = {a};
        node.value = val(a);
        for (auto& v : node.value.data) {
            v = gelu_fn(v);
        }
        return push(std::move(node));
    }

    int sigmoid(int a) {
        Node<T> node;
        node.kind = OpKind::Sigmoid;
        node.inputs = {a};
        node.value = val(a);
        for (auto& v : node.value.data) {
            v = sigmoid_fn(v);
        }
        return push(std::move(node));
    }

    int scale(int a, T c) {
        Node<T> node;
        node.kind = OpKind::Scale;
        node.inputs = {a};
        node.scalar = c;
        node.value = val(a);
        for (auto& v : node.value.data) {
            v *= c;
        }
        return push(std::move(node));
    }

    int concat_cols(const std::vector<int>& parts) {
        require(!parts.empty(), "concat of nothing");
        int rows = val(parts[0]).shape[0];
        int cols = 0;
        for (int p : parts) {
            require(val(p).shape.size() == 2 && val(p).shape[0] == rows,
                    "concat parts must share row count");
            cols += val(p).shape[1];
        }
        Node<T> node;
        node.kind = OpKind::Concat;
        node.inputs = parts;
        node.value = Tensor<T>({rows, cols});
        int off = 0;
        for (int p : parts) {
            const Tensor<T>& P = val(p);
            const int pc = P.shape[1];
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < pc; ++j) {
                    node.value.at(i, off + j) = P.at(i, j);
                }
            }
            off += pc;
        }
        return push(std::move(node));
    }

    int slice(int a, int r0, int r1, int c0, int c1) {
        const Tensor<T>& A = val(a);
        require(A.shape.size() == 2, "slice expects a matrix");
        require(0 <= r0 && r0 < r1 && r1 <= A.shape[0] && 0 <= c0 && c0 < c1 && c1 <= A.shape[1],
                "slice bounds out of range");
        Node<T> node;
        node.kind = OpKind::Slice;
        node.inputs = {a};
        node.r0 = r0;
        node.r1 = r1;
        node.c0 = c0;
        node.c1 = c1;
        node.value = Tensor<T>({r1 - r0, c1 - c0});
        for (int i = r0; i < r1; ++i) {
            for (int j = c0; j < c1; ++j) {
                node.value.at(i - r0, j - c0) = A.at(i, j);
            }
        }
        return push(std::move(node));
    }

    // Per-row negative log softmax of the target id. Output is the vector of
    // per-position losses; each row can be seeded independently in backward.
    int cross_entropy(int logits, std::vector<int> targets) {
        const Tensor<T>& L = val(logits);
        require(L.shape.size() == 2, "cross_entropy expects logits matrix");
        require(static_cast<int>(targets.size()) == L.shape[0],
                "cross_entropy targets must match logits rows");
        const int m = L.shape[0], n = L.shape[1];
        for (int t : targets) {
            if (t < 0 || t >= n) {
                throw NumericError("cross_entropy: target id out of range");
            }
        }
        Node<T> node;
        node.kind = OpKind::CrossEntropy;
        node.inputs = {logits};
        node.ids = std::move(targets);
        node.value = Tensor<T>({m});
        node.scratch = Tensor<T>({m, n});
        for (int i = 0; i < m; ++i) {
            const T* row = &L.at(i, 0);
            T mx = row[0];
            for (int j = 1; j < n; ++j) {
                mx = std::max(mx, row[j]);
            }
            T s = 0;
            T* p = &node.scratch.at(i, 0);
            for (int j = 0; j < n; ++j) {
                p[j] = std::exp(row[j] - mx);
                s += p[j];
            }
            const T inv = T(1) / s;
            for (int j = 0; j < n; ++j) {
                p[j] *= inv;
            }
            node.value[static_cast<std::size_t>(i)] =
                mx + std::log(s) - row[node.ids[static_cast<std::size_t>(i)]];
        }
        return push(std::move(node));
    }

    // sum(w*v)/sum(w). Throws DegenerateWeightsError when sum(w) < kWeightSumFloor.
    int weighted_mean(int values, int weights) {
        const Tensor<T>& V = val(values);
        const Tensor<T>& W = val(weights);
        require(V.same_shape(W) && V.shape.size() == 1, "weighted_mean expects matching vectors");
        T sw = 0, swv = 0;
        for (std::size_t i = 0; i < V.size(); ++i) {
            sw += W[i];
            swv += W[i] * V[i];
        }
        if (static_cast<double>(sw) < kWeightSumFloor) {
            throw DegenerateWeightsError("weighted_mean: weight sum below floor");
        }
        Node<T> node;
        node.kind = OpKind::WeightedMean;
        node.inputs = {values, weights};
        node.value = Tensor<T>({1});
        node.value[0] = swv / sw;
        node.scalar = sw;
        return push(std::move(node));
    }

    // Reverse sweep. `seed` is contracted with the output's Jacobian; gradients are
    // returned for each node id in `wrt` (Leaf nodes only). The record itself is
    // never modified, so repeated calls replay identically.
    std::vector<Tensor<T>> backward(int out, const Tensor<T>& seed, std::span<const int> wrt) const {
        Workspace<T> ws;
        backward(out, seed, wrt, ws);
        std::vector<Tensor<T>> result;
        result.reserve(wrt.size());
        for (int id : wrt) {
            result.push_back(ws.grad[static_cast<std::size_t>(id)]);
        }
        return result;
    }

    void backward(int out, const Tensor<T>& seed, std::span<const int> wrt, Workspace<T>& ws) const {
        const auto n = nodes_.size();
        require(seed.same_shape(val(out)), "backward seed shape must match output");
        for (int id : wrt) {
            if (nodes_[static_cast<std::size_t>(id)].kind != OpKind::Leaf) {
                throw NumericError("backward: requested gradient of an untracked node");
            }
        }
        if (ws.grad.size() != n) {
            ws.grad.assign(n, Tensor<T>());
            ws.live.assign(n, 0);
        }
        // Mark the sub-graph reachable from `out`, then sweep in reverse order.
        std::fill(ws.live.begin(), ws.live.end(), 0);
        ws.live[static_cast<std::size_t>(out)] = 1;
        for (int i = out; i >= 0; --i) {
            if (!ws.live[static_cast<std::size_t>(i)]) {
                continue;
            }
            for (int in : nodes_[static_cast<std::size_t>(i)].inputs) {
                ws.live[static_cast<std::size_t>(in)] = 1;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!ws.live[i]) {
                continue;
            }
            if (!ws.grad[i].same_shape(nodes_[i].value)) {
                ws.grad[i] = Tensor<T>(nodes_[i].value.shape);
            } else {
                ws.grad[i].fill(T(0));
            }
        }
        ws.grad[static_cast<std::size_t>(out)] = seed;
        for (int i = out; i >= 0; --i) {
            if (ws.live[static_cast<std::size_t>(i)]) {
                backprop_node(i, ws);
            }
        }
        // Leaves never touched by the live sweep still owe a zero gradient.
        for (int id : wrt) {
            if (!ws.live[static_cast<std::size_t>(id)]) {
                ws.grad[static_cast<std::size_t>(id)] =
                    Tensor<T>(nodes_[static_cast<std::size_t>(id)].value.shape);
            }
        }
    }

    // Forward-mode sweep: directional derivative of node `out` along the leaf
    // tangents given in `tangents` (absent leaves get a zero tangent).
    Tensor<T> jvp(int out, const std::vector<std::pair<int, const Tensor<T>*>>& tangents) const {
        Workspace<T> ws;
        return jvp(out, tangents, ws);
    }

    Tensor<T> jvp(int out, const std::vector<std::pair<int, const Tensor<T>*>>& tangents,
                  Workspace<T>& ws) const {
        const auto n = nodes_.size();
        ws.tangent.assign(n, Tensor<T>());
        for (auto& [id, tan] : tangents) {
            require(tan->same_shape(val(id)), "jvp tangent shape mismatch");
            ws.tangent[static_cast<std::size_t>(id)] = *tan;
        }
        for (std::size_t i = 0; i <= static_cast<std::size_t>(out); ++i) {
            const Node<T>& node = nodes_[i];
            if (node.kind == OpKind::Leaf || node.kind == OpKind::Constant) {
                if (ws.tangent[i].size() == 0) {
                    ws.tangent[i] = Tensor<T>(node.value.shape);
                }
                continue;
            }
            ws.tangent[i] = tangent_of(node, ws);
        }
        return ws.tangent[static_cast<std::size_t>(out)];
    }

    static T gelu_fn(T x) {
        return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475)));
    }
    static T gelu_grad(T x) {
        const T phi = T(0.3989422804014327) * std::exp(T(-0.5) * x * x);
        return T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475))) + x * phi;
    }
    static T sigmoid_fn(T x) {
        return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    }

  private:
    static void require(bool ok, const char* msg) {
        if (!ok) {
            throw NumericError(msg);
        }
    }

    int push(Node<T>&& node) {
        nodes_.push_back(std::move(node));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int push_input(OpKind kind, Tensor<T> v) {
        v.assert_finite("tape input");
        Node<T> node;
        node.kind = kind;
        node.value = std::move(v);
        return push(std::move(node));
    }

    // C (+)= op(A, ta) * op(B, tb)
    static void gemm(const Tensor<T>& A, bool ta, const Tensor<T>& B, bool tb, Tensor<T>& C,
                     bool accumulate) {
        const int m = C.shape[0], n = C.shape[1];
        const int kk = ta ? A.shape[0] : A.shape[1];
        if (!accumulate) {
            C.fill(T(0));
        }
        if (!ta && !tb) {
            for (int i = 0; i < m; ++i) {
                const T* a = &A.at(i, 0);
                T* c = &C.at(i, 0);
                for (int k = 0; k < kk; ++k) {
                    const T av = a[k];
                    const T* b = &B.at(k, 0);
                    for (int j = 0; j < n; ++j) {
                        c[j] += av * b[j];
                    }
                }
            }
        } else if (ta && !tb) {
            for (int k = 0; k < kk; ++k) {
                const T* a = &A.at(k, 0);
                const T* b = &B.at(k, 0);
                for (int i = 0; i < m; ++i) {
                    const T av = a[i];
                    T* c = &C.at(i, 0);
                    for (int j = 0; j < n; ++j) {
                        c[j] += av * b[j];
                    }
                }
            }
        } else if (!ta && tb) {
            for (int i = 0; i < m; ++i) {
                const T* a = &A.at(i, 0);
                T* c = &C.at(i, 0);
                for (int j = 0; j < n; ++j) {
                    const T* b = &B.at(j, 0);
                    T s = 0;
                    for (int k = 0; k < kk; ++k) {
                        s += a[k] * b[k];
                    }
                    c[j] += s;
                }
            }
        } else {
            for (int k = 0; k < kk; ++k) {
                const T* a = &A.at(k, 0);
                for (int i = 0; i < m; ++i) {
                    const T av = a[i];
                    T* c = &C.at(i, 0);
                    const T* b = &B.at(0, k);
                    const int ldb = B.shape[1];
                    for (int j = 0; j < n; ++j) {
                        c[j] += av * b[static_cast<std::size_t>(j) * ldb];
                    }
                }
            }
        }
    }

    void add_grad(Workspace<T>& ws, int id, const Tensor<T>& g) const {
        Tensor<T>& dst = ws.grad[static_cast<std::size_t>(id)];
        for (std::size_t i = 0; i < g.size(); ++i) {
            dst[i] += g[i];
        }
    }

    void backprop_node(int idx, Workspace<T>& ws) const {
        const Node<T>& node = nodes_[static_cast<std::size_t>(idx)];
        const Tensor<T>& gy = ws.grad[static_cast<std::size_t>(idx)];
        switch (node.kind) {
            case OpKind::Leaf:
            case OpKind::Constant:
                return;
            case OpKind::MatMul: {
                const int a = node.inputs[0], b = node.inputs[1];
                const Tensor<T>& A = val(a);
                const Tensor<T>& B = val(b);
                Tensor<T>& dA = ws.grad[static_cast<std::size_t>(a)];
                Tensor<T>& dB = ws.grad[static_cast<std::size_t>(b)];
                if (!node.trans_a && !node.trans_b) {
                    gemm(gy, false, B, true, dA, true);
                    gemm(A, true, gy, false, dB, true);
                } else if (node.trans_a && !node.trans_b) {
                    gemm(B, false, gy, true, dA, true);
                    gemm(A, false, gy, false, dB, true);
                } else if (!node.trans_a && node.trans_b) {
                    gemm(gy, false, B, false, dA, true);
                    gemm(gy, true, A, false, dB, true);
                } else {
                    gemm(B, true, gy, true, dA, true);
                    gemm(gy, true, A, true, dB, true);
                }
                return;
            }
            case OpKind::Add: {
                const int a = node.inputs[0], b = node.inputs[1];
                add_grad(ws, a, gy);
                Tensor<T>& dB = ws.grad[static_cast<std::size_t>(b)];
                if (val(b).same_shape(gy)) {
                    add_grad(ws, b, gy);
                } else {
                    const int m = gy.shape[0], n = gy.shape[1];
                    for (int i = 0; i < m; ++i) {
                        for (int j = 0; j < n; ++j) {
                            dB[static_cast<std::size_t>(j)] += gy.at(i, j);
                        }
                    }
                }
                return;
            }
            case OpKind::Mul: {
                const int a = node.inputs[0], b = node.inputs[1];
                const Tensor<T>& A = val(a);
                const Tensor<T>& B = val(b);
                Tensor<T>& dA = ws.grad[static_cast<std::size_t>(a)];
                Tensor<T>& dB = ws.grad[static_cast<std::size_t>(b)];
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    dA[i] += gy[i] * B[i];
                    dB[i] += gy[i] * A[i];
                }
                return;
            }
            case OpKind::Softmax: {
                const int a = node.inputs[0];
                const Tensor<T>& Y = node.value;
                Tensor<T>& dX = ws.grad[static_cast<std::size_t>(a)];
                const int m = Y.shape[0], n = Y.shape[1];
                for (int i = 0; i < m; ++i) {
                    const T* y = &Y.at(i, 0);
                    const T* g = &gy.at(i, 0);
                    T s = 0;
                    for (int j = 0; j < n; ++j) {
                        s += g[j] * y[j];
                    }
                    T* dx = &dX.at(i, 0);
                    for (int j = 0; j < n; ++j) {
                        dx[j] += y[j] * (g[j] - s);
                    }
                }
                return;
            }
            case OpKind::LayerNorm: {
                const int x = node.inputs[0], gm = node.inputs[1], bt = node.inputs[2];
                const Tensor<T>& X = val(x);
                const Tensor<T>& G = val(gm);
                Tensor<T>& dX = ws.grad[static_cast<std::size_t>(x)];
                Tensor<T>& dG = ws.grad[static_cast<std::size_t>(gm)];
                Tensor<T>& dB = ws.grad[static_cast<std::size_t>(bt)];
                const int m = X.shape[0], n = X.shape[1];
                const T eps = node.scalar;
                for (int i = 0; i < m; ++i) {
                    const T* row = &X.at(i, 0);
                    const T* g = &gy.at(i, 0);
                    T mu = 0;
                    for (int j = 0; j < n; ++j) {
                        mu += row[j];
                    }
                    mu /= static_cast<T>(n);
                    T var = 0;
                    for (int j = 0; j < n; ++j) {
                        const T v = row[j] - mu;
                        var += v * v;
                    }
                    var /= static_cast<T>(n);
                    const T inv_sd = T(1) / std::sqrt(var + eps);
                    // xhat_j = (x_j - mu) * inv_sd; dxhat_j = g_j * gamma_j
                    T mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (int j = 0; j < n; ++j) {
                        const T xhat = (row[j] - mu) * inv_sd;
                        const T dxhat = g[j] * G[static_cast<std::size_t>(j)];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dG[static_cast<std::size_t>(j)] += g[j] * xhat;
                        dB[static_cast<std::size_t>(j)] += g[j];
                    }
                    mean_dxhat /= static_cast<T>(n);
                    mean_dxhat_xhat /= static_cast<T>(n);
                    T* dx = &dX.at(i, 0);
                    for (int j = 0; j < n; ++j) {
                        const T xhat = (row[j] - mu) * inv_sd;
                        const T dxhat = g[j] * G[static_cast<std::size_t>(j)];
                        dx[j] += inv_sd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                return;
            }
            case OpKind::Embed: {
                const int table = node.inputs[0];
                Tensor<T>& dE = ws.grad[static_cast<std::size_t>(table)];
                const int n = gy.shape[1];
                for (std::size_t i = 0; i < node.ids.size(); ++i) {
                    const T* g = &gy.at(static_cast<int>(i), 0);
                    T* d = &dE.at(node.ids[i], 0);
                    for (int j = 0; j < n; ++j) {
                        d[j] += g[j];
                    }
                }
                return;
            }
            case OpKind::Gelu: {
                const Tensor<T>& X = val(node.inputs[0]);
                Tensor<T>& dX = ws.grad[static_cast<std::size_t>(node.inputs[0])];
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    dX[i] += gy[i] * gelu_grad(X[i]);
                }
                return;
            }
            case OpKind::Sigmoid: {
                const Tensor<T>& Y = node.value;
                Tensor<T>& dX = ws.grad[static_cast<std::size_t>(node.inputs[0])];
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    dX[i] += gy[i] * Y[i] * (T(1) - Y[i]);
                }
                return;
            }
            case OpKind::Scale: {
                Tensor<T>& dX = ws.grad[static_cast<std::size_t>(node.inputs[0])];
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    dX[i] += gy[i] * node.scalar;
                }
                return;
            }
            case OpKind::Concat: {
                int off = 0;
                const int rows = gy.shape[0];
                for (int p : node.inputs) {
                    Tensor<T>& dP = ws.grad[static_cast<std::size_t>(p)];
                    const int pc = dP.shape[1];
                    for (int i = 0; i < rows; ++i) {
                        for (int j = 0; j < pc; ++j) {
                            dP.at(i, j) += gy.at(i, off + j);
                        }
                    }
                    off += pc;
                }
                return;
            }
            case OpKind::Slice: {
                Tensor<T>& dX = ws.grad[static_cast<std::size_t>(node.inputs[0])];
                for (int i = node.r0; i < node.r1; ++i) {
                    for (int j = node.c0; j < node.c1; ++j) {
                        dX.at(i, j) += gy.at(i - node.r0, j - node.c0);
                    }
                }
                return;
            }
            case OpKind::CrossEntropy: {
                const Tensor<T>& P = node.scratch;
                Tensor<T>& dL = ws.grad[static_cast<std::size_t>(node.inputs[0])];
                const int m = P.shape[0], n = P.shape[1];
                for (int i = 0; i < m; ++i) {
                    const T s = gy[static_cast<std::size_t>(i)];
                    if (s == T(0)) {
                        continue;
                    }
                    const T* p = &P.at(i, 0);
                    T* d = &dL.at(i, 0);
                    for (int j = 0; j < n; ++j) {
                        d[j] += s * p[j];
                    }
                    d[node.ids[static_cast<std::size_t>(i)]] -= s;
                }
                return;
            }
            case OpKind::WeightedMean: {
                const int v = node.inputs[0], w = node.inputs[1];
                const Tensor<T>& V = val(v);
                const Tensor<T>& W = val(w);
                Tensor<T>& dV = ws.grad[static_cast<std::size_t>(v)];
                Tensor<T>& dW = ws.grad[static_cast<std::size_t>(w)];
                const T s = gy[0];
                const T sw = node.scalar;
                const T mean = node.value[0];
                for (std::size_t i = 0; i < V.size(); ++i) {
                    dV[i] += s * W[i] / sw;
                    dW[i] += s * (V[i] - mean) / sw;
                }
                return;
            }
        }
    }

    Tensor<T> tangent_of(const Node<T>& node, const Workspace<T>& ws) const {
        auto tan = [&](int id) -> const Tensor<T>& { return ws.tangent[static_cast<std::size_t>(id)]; };
        switch (node.kind) {
            case OpKind::MatMul: {
                Tensor<T> out(node.value.shape);
                gemm(tan(node.inputs[0]), node.trans_a, val(node.inputs[1]), node.trans_b, out, false);
                gemm(val(node.inputs[0]), node.trans_a, tan(node.inputs[1]), node.trans_b, out, true);
                return out;
            }
            case OpKind::Add: {
                Tensor<T> out = tan(node.inputs[0]);
                const Tensor<T>& tb = tan(node.inputs[1]);
                if (out.same_shape(tb)) {
                    for (std::size_t i = 0; i < out.size(); ++i) {
                        out[i] += tb[i];
                    }
                } else {
                    const int m = out.shape[0], n = out.shape[1];
                    for (int i = 0; i < m; ++i) {
                        for (int j = 0; j < n; ++j) {
                            out.at(i, j) += tb[static_cast<std::size_t>(j)];
                        }
                    }
                }
                return out;
            }
            case OpKind::Mul: {
                const Tensor<T>& A = val(node.inputs[0]);
                const Tensor<T>& B = val(node.inputs[1]);
                const Tensor<T>& dA = tan(node.inputs[0]);
                const Tensor<T>& dB = tan(node.inputs[1]);
                Tensor<T> out(node.value.shape);
                for (std::size_t i = 0; i < out.size(); ++i) {
                    out[i] = dA[i] * B[i] + A[i] * dB[i];
                }
                return out;
            }
            case OpKind::Softmax: {
                const Tensor<T>& Y = node.value;
                const Tensor<T>& dX = tan(node.inputs[0]);
                Tensor<T> out(Y.shape);
                const int m = Y.shape[0], n = Y.shape[1];
                for (int i = 0; i < m; ++i) {
                    const T* y = &Y.at(i, 0);
                    const T* dx = &dX.at(i, 0);
                    T s = 0;
                    for (int j = 0; j < n; ++j) {
                        s += y[j] * dx[j];
                    }
                    T* o = &out.at(i, 0);
                    for (int j = 0; j < n; ++j) {
                        o[j] = y[j] * (dx[j] - s);
                    }
                }
                return out;
            }
            case OpKind::LayerNorm: {
                const Tensor<T>& X = val(node.inputs[0]);
                const Tensor<T>& G = val(node.inputs[1]);
                const Tensor<T>& dXin = tan(node.inputs[0]);
                const Tensor<T>& dG = tan(node.inputs[1]);
                const Tensor<T>& dB = tan(node.inputs[2]);
                Tensor<T> out(X.shape);
                const int m = X.shape[0], n = X.shape[1];
                const T eps = node.scalar;
                for (int i = 0; i < m; ++i) {
                    const T* row = &X.at(i, 0);
                    const T* dr = &dXin.at(i, 0);
                    T mu = 0, dmu = 0;
                    for (int j = 0; j < n; ++j) {
                        mu += row[j];
                        dmu += dr[j];
                    }
                    mu /= static_cast<T>(n);
                    dmu /= static_cast<T>(n);
                    T var = 0, cov = 0;
                    for (int j = 0; j < n; ++j) {
                        const T v = row[j] - mu;
                        var += v * v;
                        cov += v * (dr[j] - dmu);
                    }
                    var /= static_cast<T>(n);
                    cov /= static_cast<T>(n);
                    const T inv_sd = T(1) / std::sqrt(var + eps);
                    const T dsd = cov * inv_sd;  // d(sqrt(var+eps)) along tangent
                    T* o = &out.at(i, 0);
                    for (int j = 0; j < n; ++j) {
                        const T xhat = (row[j] - mu) * inv_sd;
                        const T dxhat = (dr[j] - dmu) * inv_sd - xhat * dsd * inv_sd;
                        o[j] = G[static_cast<std::size_t>(j)] * dxhat +
                               dG[static_cast<std::size_t>(j)] * xhat + dB[static_cast<std::size_t>(j)];
                    }
                }
                return out;
            }
            case OpKind::Embed: {
                const Tensor<T>& dE = tan(node.inputs[0]);
                Tensor<T> out(node.value.shape);
                const int n = out.shape[1];
                for (std::size_t i = 0; i < node.ids.size(); ++i) {
                    const T* src = &dE.at(node.ids[i], 0);
                    T* dst = &out.at(static_cast<int>(i), 0);
                    for (int j = 0; j < n; ++j) {
                        dst[j] = src[j];
                    }
                }
                return out;
            }
            case OpKind::Gelu: {
                const Tensor<T>& X = val(node.inputs[0]);
                const Tensor<T>& dX = tan(node.inputs[0]);
                Tensor<T> out(X.shape);
                for (std::size_t i = 0; i < out.size(); ++i) {
                    out[i] = dX[i] * gelu_grad(X[i]);
                }
                return out;
            }
            case OpKind::Sigmoid: {
                const Tensor<T>& Y = node.value;
                const Tensor<T>& dX = tan(node.inputs[0]);
                Tensor<T> out(Y.shape);
                for (std::size_t i = 0; i < out.size(); ++i) {
                    out[i] = dX[i] * Y[i] * (T(1) - Y[i]);
                }
                return out;
            }
            case OpKind::Scale: {
                Tensor<T> out = tan(node.inputs[0]);
                for (auto& v : out.data) {
                    v *= node.scalar;
                }
                return out;
            }
            case OpKind::Concat: {
                Tensor<T> out(node.value.shape);
                int off = 0;
                const int rows = out.shape[0];
                for (int p : node.inputs) {
                    const Tensor<T>& tp = tan(p);
                    const int pc = tp.shape[1];
                    for (int i = 0; i < rows; ++i) {
                        for (int j = 0; j < pc; ++j) {
                            out.at(i, off + j) = tp.at(i, j);
                        }
                    }
                    off += pc;
                }
                return out;
            }
            case OpKind::Slice: {
                const Tensor<T>& tp = tan(node.inputs[0]);
                Tensor<T> out(node.value.shape);
                for (int i = node.r0; i < node.r1; ++i) {
                    for (int j = node.c0; j < node.c1; ++j) {
                        out.at(i - node.r0, j - node.c0) = tp.at(i, j);
                    }
                }
                return out;
            }
            case OpKind::CrossEntropy: {
                const Tensor<T>& P = node.scratch;
                const Tensor<T>& dL = tan(node.inputs[0]);
                Tensor<T> out(node.value.shape);
                const int m = P.shape[0], n = P.shape[1];
                for (int i = 0; i < m; ++i) {
                    const T* p = &P.at(i, 0);
                    const T* d = &dL.at(i, 0);
                    T s = 0;
                    for (int j = 0; j < n; ++j) {
                        s += p[j] * d[j];
                    }
                    out[static_cast<std::size_t>(i)] = s - d[node.ids[static_cast<std::size_t>(i)]];
                }
                return out;
            }
            case OpKind::WeightedMean: {
                const Tensor<T>& V = val(node.inputs[0]);
                const Tensor<T>& dV = tan(node.inputs[0]);
                const Tensor<T>& dW = tan(node.inputs[1]);
                const Tensor<T>& W = val(node.inputs[1]);
                Tensor<T> out({1});
                const T sw = node.scalar;
                const T mean = node.value[0];
                T acc = 0;
                for (std::size_t i = 0; i < V.size(); ++i) {
                    acc += W[i] * dV[i] + dW[i] * (V[i] - mean);
                }
                out[0] = acc / sw;
                return out;
            }
            case OpKind::Leaf:
            case OpKind::Constant:
                break;
        }
        throw NumericError("jvp: unexpected node kind");
    }

    std::vector<Node<T>> nodes_;
};

}  // namespace taalm
