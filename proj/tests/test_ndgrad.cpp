#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mtlse/graph.hpp"
#include "mtlse/tensor.hpp"
#include "oracles.hpp"

using mtlse::ndgrad::Graph;
using mtlse::ndgrad::Tensor;
using mtlse::ndgrad::Var;

namespace {

// Worst relative error of analytic vs central-finite-difference gradients
// for a scalar loss defined by `build` over `params`.
double gradcheck(const std::function<Var(Graph&)>& build, const std::vector<Tensor*>& params,
                 double eps = 1e-5) {
    for (Tensor* p : params) {
        p->requires_grad = true;
        p->zero_grad();
    }
    Graph g;
    g.backward(build(g));
    auto numeric = oracle::finite_diff(
        [&] {
            Graph g2;
            return g2.value(build(g2)).item();
        },
        params, eps);
    return oracle::max_grad_rel_err(params, numeric);
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Graph g;
    Tensor I = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor A = Tensor::matrix(2, 2, {3.5, -1, 2, 7});
    Var prod = g.matmul(g.constant(I), g.constant(A));
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.value(prod).data[i] == A.data[i]);

    Var p2 = g.matmul(g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})),
                      g.constant(Tensor::matrix(2, 1, {5, 6})));
    CHECK(g.value(p2).at(0, 0) == 17);
    CHECK(g.value(p2).at(1, 0) == 39);
}

TEST_CASE("matmul matches triple-loop oracle") {
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor a = oracle::random_tensor({4, 5}, rng);
        Tensor b = oracle::random_tensor({5, 3}, rng);
        Graph g;
        const Tensor& c = g.value(g.matmul(g.constant(a), g.constant(b)));
        Tensor ref = oracle::matmul_ref(a, b);
        for (std::size_t i = 0; i < c.size(); ++i)
            CHECK(std::abs(c.data[i] - ref.data[i]) <= 1e-12);
    }
}

TEST_CASE("matmul shape mismatch") {
    Graph g;
    Var a = g.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    Var b = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    CHECK_THROWS_AS(g.matmul(a, b), std::invalid_argument);
}

TEST_CASE("softmax basics") {
    Graph g;
    Var s = g.softmax(g.constant(Tensor::vec({0, 0})));
    CHECK(g.value(s).data[0] == doctest::Approx(0.5).epsilon(1e-12));

    Var s2 = g.softmax(g.constant(Tensor::vec({std::log(1.0), std::log(3.0)})));
    CHECK(g.value(s2).data[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(g.value(s2).data[1] == doctest::Approx(0.75).epsilon(1e-12));

    // stability limit: no overflow for huge inputs
    Var s3 = g.softmax(g.constant(Tensor::vec({1000, 0})));
    CHECK(std::abs(g.value(s3).data[0] - 1.0) <= 1e-12);
    CHECK(std::abs(g.value(s3).data[1] - 0.0) <= 1e-12);
}

TEST_CASE("softmax sums to one along the reduced axis") {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor x = oracle::random_tensor({4, 3}, rng, -30, 30);
        Graph g;
        const Tensor& y0 = g.value(g.softmax(g.constant(x), 0));
        for (std::size_t j = 0; j < 3; ++j) {
            double col = y0.at(0, j) + y0.at(1, j) + y0.at(2, j) + y0.at(3, j);
            CHECK(std::abs(col - 1.0) <= 1e-12);
        }
        const Tensor& y1 = g.value(g.softmax(g.constant(x), 1));
        for (std::size_t i = 0; i < 4; ++i) {
            double row = y1.at(i, 0) + y1.at(i, 1) + y1.at(i, 2);
            CHECK(std::abs(row - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("cross entropy values") {
    Graph g;
    for (std::size_t C : {2, 3, 7}) {
        Var ce = g.cross_entropy(g.constant(Tensor({C})), 0);
        CHECK(g.value(ce).item() ==
              doctest::Approx(std::log(static_cast<double>(C))).epsilon(1e-12));
    }
    Var ce = g.cross_entropy(g.constant(Tensor::vec({0, std::log(3.0)})), 1);
    CHECK(g.value(ce).item() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));

    CHECK_THROWS_AS(g.cross_entropy(g.constant(Tensor::vec({0, 1})), 2), std::invalid_argument);
}

TEST_CASE("cross entropy matches direct exp/sum/log reference") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<std::size_t> pick(0, 4);
    for (int rep = 0; rep < 100; ++rep) {
        Tensor logits = oracle::random_tensor({5}, rng, -8, 8);
        std::size_t label = pick(rng);
        Graph g;
        double got = g.value(g.cross_entropy(g.constant(logits), label)).item();
        CHECK(std::abs(got - oracle::cross_entropy_ref(logits.data, label)) <= 1e-12);
    }
}

TEST_CASE("cross entropy batch version averages rows") {
    std::mt19937_64 rng(23);
    Tensor logits = oracle::random_tensor({4, 3}, rng);
    std::vector<int> labels{0, 2, 1, 1};
    Graph g;
    double got = g.value(g.cross_entropy_rows(g.constant(logits), labels)).item();
    double want = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        std::vector<double> row(logits.data.begin() + i * 3, logits.data.begin() + (i + 1) * 3);
        want += oracle::cross_entropy_ref(row, static_cast<std::size_t>(labels[i]));
    }
    want /= 4.0;
    CHECK(std::abs(got - want) <= 1e-12);
}

TEST_CASE("backward: square function") {
    Tensor x = Tensor::vec({3.0});
    x.requires_grad = true;
    Graph g;
    Var vx = g.leaf(x);
    g.backward(g.sum(vx * vx));
    CHECK(x.grad[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward: max routes to unique argmax") {
    Tensor x = Tensor::vec({1, 5, 2});
    x.requires_grad = true;
    Graph g;
    g.backward(g.reduce_max(g.leaf(x)));
    CHECK(x.grad == std::vector<double>{0, 1, 0});
}

TEST_CASE("backward: max tie routes to first index") {
    Tensor x = Tensor::vec({4, 4, 1});
    x.requires_grad = true;
    Graph g;
    g.backward(g.reduce_max(g.leaf(x)));
    CHECK(x.grad == std::vector<double>{1, 0, 0});
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::vec({1, 2});
    x.requires_grad = true;
    Graph g;
    Var vx = g.leaf(x);
    CHECK_THROWS_AS(g.backward(vx), std::invalid_argument);
}

TEST_CASE("shared subexpressions accumulate gradients") {
    // loss = sum(s) + sum(s) with s shared must equal the duplicated-subgraph
    // oracle where s is built twice.
    std::mt19937_64 rng(31);
    Tensor x = oracle::random_tensor({4}, rng);
    x.requires_grad = true;

    x.zero_grad();
    {
        Graph g;
        Var s = g.sigmoid(g.leaf(x));
        g.backward(g.add(g.sum(s), g.sum(s)));
    }
    std::vector<double> shared_grad = x.grad;

    x.zero_grad();
    {
        Graph g;
        Var s1 = g.sigmoid(g.leaf(x));
        Var s2 = g.sigmoid(g.leaf(x));
        g.backward(g.add(g.sum(s1), g.sum(s2)));
    }
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(shared_grad[i] == doctest::Approx(x.grad[i]).epsilon(1e-14));
}

TEST_CASE("unreached parameters keep zero gradient") {
    Tensor x = Tensor::vec({1, 2});
    Tensor y = Tensor::vec({3, 4});
    x.requires_grad = y.requires_grad = true;
    x.zero_grad();
    y.zero_grad();
    Graph g;
    Var vx = g.leaf(x);
    g.leaf(y);  // registered but not used by the loss
    g.backward(g.sum(vx));
    CHECK(y.grad == std::vector<double>{0, 0});
}

TEST_CASE("identical graphs produce bit-identical outputs") {
    std::mt19937_64 rng(41);
    Tensor a = oracle::random_tensor({6, 6}, rng);
    Tensor b = oracle::random_tensor({6, 6}, rng);
    auto run = [&] {
        Graph g;
        Var r = g.softmax(g.matmul(g.constant(a), g.constant(b)), 0);
        return g.value(g.sum(g.tanh(r))).item();
    };
    double first = run();
    for (int i = 0; i < 5; ++i) CHECK(run() == first);
}

TEST_CASE("gradient check: every differentiable op") {
    std::mt19937_64 rng(7);
    Tensor A = oracle::random_tensor({3, 4}, rng);
    Tensor B = oracle::random_tensor({4, 2}, rng);
    Tensor v = oracle::random_tensor({4}, rng);
    Tensor w = oracle::random_tensor({4}, rng);
    Tensor W = oracle::random_tensor({3, 4}, rng);
    Tensor b3 = oracle::random_tensor({3}, rng);

    auto leafs = [&](Graph& g) {
        return std::tuple{g.leaf(A), g.leaf(B), g.leaf(v), g.leaf(w), g.leaf(W), g.leaf(b3)};
    };

    SUBCASE("add/sub/mul/emax") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            Var m = g.emax(g.mul(g.add(vv, ww), g.sub(vv, ww)), ww);
            return g.sum(m);
        };
        CHECK(gradcheck(build, {&v, &w}) < 1e-6);
    }
    SUBCASE("sigmoid/tanh/scale") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            return g.sum(g.scale(g.tanh(g.sigmoid(vv)), 2.5));
        };
        CHECK(gradcheck(build, {&v}) < 1e-6);
    }
    SUBCASE("matmul/transpose") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            return g.sum(g.tanh(g.matmul(g.transpose(a), g.matmul(a, bb))));
        };
        CHECK(gradcheck(build, {&A, &B}) < 1e-5);
    }
    SUBCASE("linear") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            return g.sum(g.sigmoid(g.linear(Wl, vv, bl)));
        };
        CHECK(gradcheck(build, {&W, &v, &b3}) < 1e-6);
    }
    SUBCASE("affine_rows") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            return g.sum(g.tanh(g.affine_rows(g.transpose(Wl), g.transpose(a), vv)));
        };
        CHECK(gradcheck(build, {&W, &A, &v}) < 1e-5);
    }
    SUBCASE("concat/slice/row stacking") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            Var cat = g.concat({vv, ww, g.slice(vv, 1, 3)});
            Var stacked = g.concat_rows({g.row(a, 0), g.row(a, 2), g.slice(cat, 0, 4)});
            Var sides = g.hconcat({stacked, g.slice_rows(a, 0, 3)});
            return g.sum(g.tanh(g.slice_cols(sides, 1, 7)));
        };
        CHECK(gradcheck(build, {&A, &v, &w}) < 1e-6);
    }
    SUBCASE("reductions") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            Var per_col = g.concat({g.reduce_max(a), g.reduce_min(a), g.reduce_mean(a)});
            return g.add(g.sum(g.tanh(per_col)), g.reduce_mean(vv));
        };
        CHECK(gradcheck(build, {&A, &v}) < 1e-5);
    }
    SUBCASE("softmax and cross entropy") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            Var sm = g.softmax(a, 0);
            Var ce = g.cross_entropy(vv, 2);
            Var cer = g.cross_entropy_rows(bb, {1, 0, 1, 0});
            return g.add(g.add(g.sum(g.mul(sm, sm)), ce), cer);
        };
        CHECK(gradcheck(build, {&A, &B, &v}) < 1e-5);
    }
    SUBCASE("normalize_rows") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            return g.sum(g.tanh(g.normalize_rows(a)));
        };
        CHECK(gradcheck(build, {&A}) < 1e-5);
    }
    SUBCASE("masked_fill") {
        auto build = [&](Graph& g) {
            auto [a, bb, vv, ww, Wl, bl] = leafs(g);
            return g.sum(g.sigmoid(g.masked_fill(vv, {1, 0, 0, 1}, -3.0)));
        };
        CHECK(gradcheck(build, {&v}) < 1e-6);
    }
}

TEST_CASE("grad_reverse: identity forward, negated scaled backward") {
    std::mt19937_64 rng(59);
    Tensor x = oracle::random_tensor({5}, rng);
    Tensor y = x;
    x.requires_grad = y.requires_grad = true;

    x.zero_grad();
    Graph g;
    Var vr = g.grad_reverse(g.leaf(x), 0.7);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(g.value(vr).data[i] == x.data[i]);
    g.backward(g.sum(g.sigmoid(vr)));

    y.zero_grad();
    Graph g2;
    g2.backward(g2.sum(g2.sigmoid(g2.leaf(y))));

    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(x.grad[i] == doctest::Approx(-0.7 * y.grad[i]).epsilon(1e-14));
}

TEST_CASE("replay_shifted reproduces the recorded forward at zero shift") {
    std::mt19937_64 rng(71);
    Tensor A = oracle::random_tensor({3, 4}, rng);
    Tensor v = oracle::random_tensor({4}, rng);
    A.requires_grad = v.requires_grad = true;
    Graph g;
    Var a = g.leaf(A);
    Var x = g.leaf(v);
    Var loss = g.add(g.cross_entropy(g.softmax(g.linear(a, x, g.slice(x, 0, 3))), 1),
                     g.sum(g.normalize_rows(a)));
    double base = g.value(loss).item();
    CHECK(static_cast<double>(g.replay_shifted(loss, &A, 0, 0.0L)) ==
          doctest::Approx(base).epsilon(1e-15));

    // a replayed shift agrees with rebuilding the graph at the shifted value
    double keep = v.data[2];
    v.data[2] = keep + 1e-3;
    Graph g2;
    Var a2 = g2.leaf(A);
    Var x2 = g2.leaf(v);
    Var loss2 = g2.add(g2.cross_entropy(g2.softmax(g2.linear(a2, x2, g2.slice(x2, 0, 3))), 1),
                       g2.sum(g2.normalize_rows(a2)));
    double rebuilt = g2.value(loss2).item();
    v.data[2] = keep;
    CHECK(static_cast<double>(g.replay_shifted(loss, &v, 2, 1e-3L)) ==
          doctest::Approx(rebuilt).epsilon(1e-12));
}

TEST_CASE("backward flags non-finite loss") {
    Tensor x = Tensor::vec({800.0});
    x.requires_grad = true;
    Graph g;
    // exp overflow via softmax-free path: x*x*x ... keep simple: scale to inf
    Var inf = g.scale(g.leaf(x), std::numeric_limits<double>::max());
    Var loss = g.mul(inf, inf);  // overflows to inf
    CHECK_THROWS_AS(g.backward(g.sum(loss)), mtlse::numeric_error);
}
