#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "taalm/grad_check.hpp"
#include "taalm/rng.hpp"
#include "taalm/tape.hpp"

using namespace taalm;

namespace {

Tensor<double> rand_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

// Scalarizes an op through a fixed random projection so grad_check applies.
// `build` maps (tape, input-leaf-id) to an output node id.
double check_op(const std::function<int(Tape<double>&, int)>& build, const Tensor<double>& x0,
                Rng& rng, double step = 1e-5) {
    Tape<double> probe;
    const int leaf0 = probe.leaf(x0);
    const int out0 = build(probe, leaf0);
    Tensor<double> proj = rand_tensor(probe.val(out0).shape, rng, -1.0, 1.0);

    auto value = [&](const Tensor<double>& x) {
        Tape<double> tape;
        const int leaf = tape.leaf(x);
        const int out = build(tape, leaf);
        return dot(tape.val(out), proj);
    };
    auto grad = [&](const Tensor<double>& x) {
        Tape<double> tape;
        const int leaf = tape.leaf(x);
        const int out = build(tape, leaf);
        const int wrt[] = {leaf};
        return tape.backward(out, proj, wrt)[0];
    };
    return grad_check<double>(value, grad, x0, step);
}

}  // namespace

TEST_CASE("softmax rows normalize") {
    Rng rng(11);
    Tape<double> tape;
    const int x = tape.leaf(rand_tensor({5, 9}, rng, -4.0, 4.0));
    const int y = tape.softmax(x);
    for (int i = 0; i < 5; ++i) {
        double s = 0;
        for (int j = 0; j < 9; ++j) {
            s += tape.val(y).at(i, j);
        }
        REQUIRE(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("sigmoid at zero") {
    Tape<double> tape;
    const int x = tape.leaf(Tensor<double>({1}, {0.0}));
    const int y = tape.sigmoid(x);
    REQUIRE(tape.val(y)[0] == 0.5);
}

TEST_CASE("matmul by identity") {
    Rng rng(12);
    Tape<double> tape;
    const Tensor<double> a = rand_tensor({4, 4}, rng);
    const int ai = tape.leaf(a);
    const int ii = tape.constant(Tensor<double>::identity(4));
    const int y = tape.matmul(ii, ai);
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(tape.val(y)[i] == a[i]);
    }
}

TEST_CASE("backward of x*x") {
    Tape<double> tape;
    const int x = tape.leaf(Tensor<double>({1}, {3.0}));
    const int y = tape.mul(x, x);
    const int wrt[] = {x};
    const auto grads = tape.backward(y, Tensor<double>({1}, {1.0}), wrt);
    REQUIRE(grads[0][0] == 6.0);
}

TEST_CASE("constant has zero gradient") {
    Tape<double> tape;
    const int x = tape.leaf(Tensor<double>({3}, {1.0, 2.0, 3.0}));
    const int c = tape.constant(Tensor<double>({3}, {5.0, 5.0, 5.0}));
    const int y = tape.mul(c, c);
    const int wrt[] = {x};
    const auto grads = tape.backward(y, Tensor<double>({3}, {1.0, 1.0, 1.0}), wrt);
    for (double g : grads[0].data) {
        REQUIRE(g == 0.0);
    }
}

TEST_CASE("two-layer MLP gradients match finite differences") {
    // 17 parameters: W1 [3x3]=9, b1 [3]=3, W2 [3x1]=3, b2... keep it at 9+3+3+2=17
    // via a 2->3->1 net: W1 [2x3]=6, b1 [3]=3, W2 [3x1]=3, b2 [1]=1, x [2]=2, plus
    // a scale constant; parameters flattened into one vector of 17 = 6+3+3+1+2+2.
    // Simpler: optimize over a single flat leaf of 17 entries reshaped manually.
    Rng rng(13);
    const Tensor<double> x0 = rand_tensor({17}, rng, -1.0, 1.0);
    const Tensor<double> input = rand_tensor({1, 2}, rng);

    // Build the MLP from separate leaves and check the concatenated gradient
    // against FD over the same flattened 17-entry layout.
    auto value_at = [&](const Tensor<double>& flat) {
        Tape<double> tape;
        Tensor<double> w1({2, 3});
        Tensor<double> b1({3});
        Tensor<double> w2({3, 1});
        Tensor<double> b2({1});
        Tensor<double> w3({1, 2});  // extra head to reach 17 params: 6+3+3+1+2 = 15... see below
        // Layout (17): w1 6 | b1 3 | w2 3 | b2 1 | w3 2 | b3 2 (b3 only first used)
        Tensor<double> b3({2});
        std::size_t k = 0;
        for (auto* t : {&w1.data, &b1.data, &w2.data, &b2.data, &w3.data, &b3.data}) {
            for (auto& v : *t) {
                v = flat[k++];
            }
        }
        REQUIRE(k == 17);
        const int in = tape.constant(input);
        const int h = tape.gelu(tape.add(tape.matmul(in, tape.leaf(w1)), tape.leaf(b1)));
        const int o = tape.add(tape.matmul(h, tape.leaf(w2)), tape.leaf(b2));
        const int extra = tape.matmul(o, tape.leaf(w3));            // [1,2]
        const int out = tape.add(extra, tape.leaf(b3));             // [1,2]
        const int sig = tape.sigmoid(out);
        return std::pair<Tape<double>, int>(std::move(tape), sig);
    };

    auto value = [&](const Tensor<double>& flat) {
        auto [tape, out] = value_at(flat);
        return tape.val(out)[0] + 2.0 * tape.val(out)[1];
    };
    auto grad = [&](const Tensor<double>& flat) {
        Tape<double> tape;
        Tensor<double> w1({2, 3});
        Tensor<double> b1({3});
        Tensor<double> w2({3, 1});
        Tensor<double> b2({1});
        Tensor<double> w3({1, 2});
        Tensor<double> b3({2});
        std::size_t k = 0;
        for (auto* t : {&w1.data, &b1.data, &w2.data, &b2.data, &w3.data, &b3.data}) {
            for (auto& v : *t) {
                v = flat[k++];
            }
        }
        const int in = tape.constant(input);
        const int l_w1 = tape.leaf(w1), l_b1 = tape.leaf(b1), l_w2 = tape.leaf(w2),
                  l_b2 = tape.leaf(b2), l_w3 = tape.leaf(w3), l_b3 = tape.leaf(b3);
        const int h = tape.gelu(tape.add(tape.matmul(in, l_w1), l_b1));
        const int o = tape.add(tape.matmul(h, l_w2), l_b2);
        const int out = tape.add(tape.matmul(o, l_w3), l_b3);
        const int sig = tape.sigmoid(out);
        const int wrt[] = {l_w1, l_b1, l_w2, l_b2, l_w3, l_b3};
        const auto grads = tape.backward(sig, Tensor<double>({1, 2}, {1.0, 2.0}), wrt);
        Tensor<double> flat_grad({17});
        std::size_t j = 0;
        for (const auto& g : grads) {
            for (double v : g.data) {
                flat_grad[j++] = v;
            }
        }
        return flat_grad;
    };

    REQUIRE(grad_check<double>(value, grad, x0, 1e-5) < 1e-6);
}

TEST_CASE("grad_check reference behaviors") {
    // linear: FD is exact
    Tensor<double> p({4}, {0.3, -1.2, 0.7, 2.0});
    auto lin = [](const Tensor<double>& x) {
        return 2.0 * x[0] - 3.0 * x[1] + 0.5 * x[2] + x[3];
    };
    auto lin_grad = [](const Tensor<double>&) {
        return Tensor<double>({4}, {2.0, -3.0, 0.5, 1.0});
    };
    REQUIRE(grad_check<double>(lin, lin_grad, p, 1e-5) < 1e-10);

    // exp at x=1
    Tensor<double> one({1}, {1.0});
    auto ex = [](const Tensor<double>& x) { return std::exp(x[0]); };
    auto ex_grad = [](const Tensor<double>& x) {
        return Tensor<double>({1}, {std::exp(x[0])});
    };
    REQUIRE(grad_check<double>(ex, ex_grad, one, 1e-5) < 1e-8);

    // quadratic: second-order FD error vanishes
    auto quad = [](const Tensor<double>& x) {
        return 1.5 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1] * x[1];
    };
    auto quad_grad = [](const Tensor<double>& x) {
        return Tensor<double>({2}, {3.0 * x[0] - 2.0 * x[1], -2.0 * x[0] + 2.0 * x[1]});
    };
    Tensor<double> q({2}, {0.8, -0.4});
    REQUIRE(grad_check<double>(quad, quad_grad, q, 1e-5) < 1e-9);

    // non-determinism is detected
    int calls = 0;
    auto shifty = [&calls](const Tensor<double>& x) { return x[0] + 1e-9 * (calls++); };
    REQUIRE_THROWS_AS(
        grad_check<double>(shifty, lin_grad, Tensor<double>({4}, {1.0, 1.0, 1.0, 1.0}), 1e-5),
        NumericError);
}

TEST_CASE("every op passes randomized grad_check") {
    Rng rng(17);
    std::vector<std::pair<const char*, double>> results;

    const Tensor<double> m54 = rand_tensor({5, 4}, rng);
    const Tensor<double> m43 = rand_tensor({4, 3}, rng);
    const Tensor<double> v6 = rand_tensor({6}, rng);
    const Tensor<double> v6pos = rand_tensor({6}, rng, 0.5, 1.5);
    const Tensor<double> v6w = rand_tensor({6}, rng, 0.1, 1.0);
    const Tensor<double> m46 = rand_tensor({4, 6}, rng);
    const Tensor<double> m32 = rand_tensor({3, 2}, rng);

    results.emplace_back("matmul", check_op(
        [&](Tape<double>& t, int x) { return t.matmul(x, t.constant(m54)); },
        rand_tensor({3, 5}, rng), rng));

    // matmul gradient through either operand, all transpose combinations
    for (int mode = 0; mode < 4; ++mode) {
        Rng local(100 + mode);
        const bool ta = mode & 1, tb = mode & 2;
        Tensor<double> a0 = ta ? rand_tensor({4, 3}, local) : rand_tensor({3, 4}, local);
        const Tensor<double> bfix = tb ? rand_tensor({5, 4}, local) : rand_tensor({4, 5}, local);
        const double err_a = check_op(
            [&](Tape<double>& t, int x) { return t.matmul(x, t.constant(bfix), ta, tb); }, a0,
            local);
        REQUIRE(err_a < 1e-5);
        const double err_b = check_op(
            [&](Tape<double>& t, int x) { return t.matmul(t.constant(a0), x, ta, tb); },
            bfix, local);
        REQUIRE(err_b < 1e-5);
    }

    results.emplace_back("add", check_op(
        [&](Tape<double>& t, int x) { return t.add(x, t.constant(m43)); },
        rand_tensor({4, 3}, rng), rng));
    results.emplace_back("add_broadcast", check_op(
        [&](Tape<double>& t, int x) { return t.add(t.constant(m43), x); },
        rand_tensor({3}, rng), rng));
    results.emplace_back("mul", check_op(
        [&](Tape<double>& t, int x) { return t.mul(x, t.mul(x, t.constant(v6))); },
        rand_tensor({6}, rng), rng));
    results.emplace_back("softmax", check_op(
        [&](Tape<double>& t, int x) { return t.softmax(x); }, rand_tensor({3, 7}, rng), rng));
    results.emplace_back("layer_norm_x", check_op(
        [&](Tape<double>& t, int x) {
            return t.layer_norm(x, t.constant(v6pos), t.constant(v6), 1e-5);
        },
        rand_tensor({4, 6}, rng), rng));
    results.emplace_back("layer_norm_gamma", check_op(
        [&](Tape<double>& t, int x) {
            return t.layer_norm(t.constant(m46), x, t.constant(v6), 1e-5);
        },
        rand_tensor({6}, rng, 0.5, 1.5), rng));
    results.emplace_back("layer_norm_beta", check_op(
        [&](Tape<double>& t, int x) {
            return t.layer_norm(t.constant(m46), t.constant(v6pos), x, 1e-5);
        },
        rand_tensor({6}, rng), rng));
    results.emplace_back("embed", check_op(
        [&](Tape<double>& t, int x) { return t.embed(x, {0, 2, 2, 1}); },
        rand_tensor({3, 5}, rng), rng));
    results.emplace_back("gelu", check_op(
        [&](Tape<double>& t, int x) { return t.gelu(x); }, rand_tensor({8}, rng), rng));
    results.emplace_back("sigmoid", check_op(
        [&](Tape<double>& t, int x) { return t.sigmoid(x); }, rand_tensor({8}, rng), rng));
    results.emplace_back("scale", check_op(
        [&](Tape<double>& t, int x) { return t.scale(x, 0.37); }, rand_tensor({8}, rng), rng));
    results.emplace_back("concat", check_op(
        [&](Tape<double>& t, int x) { return t.concat_cols({x, t.constant(m32), x}); },
        rand_tensor({3, 4}, rng), rng));
    results.emplace_back("slice", check_op(
        [&](Tape<double>& t, int x) { return t.slice(x, 1, 3, 0, 2); }, rand_tensor({4, 3}, rng),
        rng));
    results.emplace_back("cross_entropy", check_op(
        [&](Tape<double>& t, int x) { return t.cross_entropy(x, {2, 0, 4}); },
        rand_tensor({3, 5}, rng), rng));
    results.emplace_back("weighted_mean_values", check_op(
        [&](Tape<double>& t, int x) { return t.weighted_mean(x, t.constant(v6w)); },
        rand_tensor({6}, rng), rng));
    results.emplace_back("weighted_mean_weights", check_op(
        [&](Tape<double>& t, int x) { return t.weighted_mean(t.constant(v6), x); },
        rand_tensor({6}, rng, 0.1, 1.0), rng));

    for (const auto& [name, err] : results) {
        INFO(name);
        REQUIRE(err < 1e-5);
    }
}

TEST_CASE("backward is linear in the seed") {
    Rng rng(19);
    Tape<double> tape;
    const int x = tape.leaf(rand_tensor({3, 4}, rng));
    const int w = tape.leaf(rand_tensor({4, 2}, rng));
    const int y = tape.sigmoid(tape.matmul(x, w));

    const Tensor<double> s1 = rand_tensor({3, 2}, rng);
    const Tensor<double> s2 = rand_tensor({3, 2}, rng);
    const double a = 1.7, b = -0.6;
    Tensor<double> mix({3, 2});
    for (std::size_t i = 0; i < mix.size(); ++i) {
        mix[i] = a * s1[i] + b * s2[i];
    }
    const int wrt[] = {x, w};
    const auto g1 = tape.backward(y, s1, wrt);
    const auto g2 = tape.backward(y, s2, wrt);
    const auto gm = tape.backward(y, mix, wrt);
    for (int leaf = 0; leaf < 2; ++leaf) {
        for (std::size_t i = 0; i < gm[leaf].size(); ++i) {
            REQUIRE(std::abs(gm[leaf][i] - (a * g1[leaf][i] + b * g2[leaf][i])) < 1e-10);
        }
    }
}

TEST_CASE("replaying backward is bitwise identical") {
    Rng rng(23);
    Tape<double> tape;
    const int x = tape.leaf(rand_tensor({4, 4}, rng));
    const int g = tape.leaf(rand_tensor({4}, rng, 0.5, 1.5));
    const int bnode = tape.leaf(rand_tensor({4}, rng));
    const int y = tape.softmax(tape.layer_norm(tape.gelu(x), g, bnode, 1e-5));
    const Tensor<double> seed = rand_tensor({4, 4}, rng);
    const int wrt[] = {x, g, bnode};
    const auto first = tape.backward(y, seed, wrt);
    const auto second = tape.backward(y, seed, wrt);
    for (int leaf = 0; leaf < 3; ++leaf) {
        REQUIRE(first[leaf].data == second[leaf].data);
    }
}

TEST_CASE("per-row cross entropy rows seed independently") {
    Rng rng(29);
    Tape<double> tape;
    const Tensor<double> logits = rand_tensor({4, 6}, rng);
    const int x = tape.leaf(logits);
    const int ce = tape.cross_entropy(x, {1, 5, 0, 3});
    // seeding row 2 only must reproduce the gradient of that row's loss alone
    Tensor<double> seed({4});
    seed[2] = 1.0;
    const int wrt[] = {x};
    const auto g = tape.backward(ce, seed, wrt)[0];
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 6; ++j) {
            if (i != 2) {
                REQUIRE(g.at(i, j) == 0.0);
            }
        }
    }
}

TEST_CASE("jvp matches backward for a scalar output") {
    Rng rng(31);
    Tape<double> tape;
    const int x = tape.leaf(rand_tensor({3, 5}, rng));
    const int w = tape.leaf(rand_tensor({5, 1}, rng));
    const int out = tape.weighted_mean(
        tape.cross_entropy(tape.matmul(tape.gelu(tape.matmul(x, w)), tape.constant(rand_tensor({1, 4}, rng))),
                           {1, 3, 0}),
        tape.constant(Tensor<double>({3}, {0.2, 0.5, 0.3})));
    const Tensor<double> tx = rand_tensor({3, 5}, rng);
    const Tensor<double> tw = rand_tensor({5, 1}, rng);
    const Tensor<double> fwd = tape.jvp(out, {{x, &tx}, {w, &tw}});
    const int wrt[] = {x, w};
    const auto g = tape.backward(out, Tensor<double>({1}, {1.0}), wrt);
    const double via_grad = dot(g[0], tx) + dot(g[1], tw);
    REQUIRE(std::abs(fwd[0] - via_grad) < 1e-12 * (1.0 + std::abs(via_grad)));
}

TEST_CASE("degenerate weights raise") {
    Tape<double> tape;
    const int v = tape.leaf(Tensor<double>({3}, {1.0, 2.0, 3.0}));
    const int w = tape.constant(Tensor<double>({3}, {0.0, 0.0, 0.0}));
    REQUIRE_THROWS_AS(tape.weighted_mean(v, w), DegenerateWeightsError);
}

TEST_CASE("non-finite input rejected") {
    Tape<double> tape;
    Tensor<double> bad({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
    REQUIRE_THROWS_AS(tape.leaf(std::move(bad)), NumericError);
}
