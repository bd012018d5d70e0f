#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dynvocab/diff/gradcheck.hpp"

using namespace dynvocab;
using namespace dynvocab::diff;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (double& v : m.values()) v = scale * standard_normal(rng);
    return m;
}

double worst_error(const Computation& f, ParameterSet& ps, GraphOptions graph = {}) {
    GradCheckOptions opt;
    opt.epsilon = 1e-5;
    opt.graph = graph;
    return finite_difference_check(f, ps, opt).worst();
}

}  // namespace

TEST_CASE("sum has a gradient of ones for any shape") {
    ParameterSet ps;
    ps.add("x", Matrix(3, 4, 0.5));
    const auto e = evaluate_with_gradients([&](Graph& g) { return sum(g.param(ps.at("x"))); }, ps);
    CHECK(e.value == doctest::Approx(6.0));
    for (double v : e.gradients.at("x").values()) CHECK(v == 1.0);
}

TEST_CASE("sum(x*x) at [1,2] has gradient [2,4]") {
    ParameterSet ps;
    ps.add("x", Matrix(1, 2, std::vector<double>{1.0, 2.0}));
    const auto e = evaluate_with_gradients(
        [&](Graph& g) {
            Var x = g.param(ps.at("x"));
            return sum(mul(x, x));
        },
        ps);
    CHECK(e.value == 5.0);
    CHECK(e.gradients.at("x")[0] == 4.0 / 2.0);
    CHECK(e.gradients.at("x")[1] == 4.0);
}

TEST_CASE("non-scalar outputs and non-finite values are rejected") {
    ParameterSet ps;
    ps.add("x", Matrix(2, 2, 1.0));
    CHECK_THROWS_AS(evaluate_with_gradients([&](Graph& g) { return g.param(ps.at("x")); }, ps),
                    std::invalid_argument);
    ps.at("x").value.fill(-1.0);
    try {
        evaluate_with_gradients([&](Graph& g) { return sum(log(g.param(ps.at("x")))); }, ps);
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(e.primitive() == "log");
    }
}

TEST_CASE("finite differences are essentially exact on a linear map") {
    Rng rng(1);
    ParameterSet ps;
    ps.add("w", random_matrix(rng, 4, 3));
    const Matrix a = random_matrix(rng, 5, 4);
    const auto f = [&](Graph& g) { return sum(matmul(g.constant(a), g.param(ps.at("w")))); };
    CHECK(worst_error(f, ps) < 1e-9);
}

TEST_CASE("softmax cross-entropy on random 5-way logits passes the checker") {
    Rng rng(2);
    ParameterSet ps;
    ps.add("z", random_matrix(rng, 6, 5, 2.0));
    const std::vector<int> targets{0, 4, 2, 2, 1, 3};
    const std::vector<double> weights{1, 1, 1, 1, 1, 1};
    const auto f = [&](Graph& g) {
        return softmax_cross_entropy(g.param(ps.at("z")), targets, weights, 6.0);
    };
    CHECK(worst_error(f, ps) < 1e-6);
}

TEST_CASE("finite_difference_check rejects a zero step") {
    ParameterSet ps;
    ps.add("x", Matrix(1, 1, 1.0));
    GradCheckOptions opt;
    opt.epsilon = 0.0;
    CHECK_THROWS(finite_difference_check([&](Graph& g) { return sum(g.param(ps.at("x"))); }, ps, opt));
    opt.epsilon = 1e-5;
    opt.order = 3;
    CHECK_THROWS(finite_difference_check([&](Graph& g) { return sum(g.param(ps.at("x"))); }, ps, opt));
}

TEST_CASE("frozen arrays are skipped by the checker") {
    ParameterSet ps;
    ps.add("x", Matrix(1, 2, 1.0));
    ps.add("y", Matrix(1, 2, 1.0)).requires_grad = false;
    const auto report = finite_difference_check(
        [&](Graph& g) { return sum(mul(g.param(ps.at("x")), g.param(ps.at("y")))); }, ps, {});
    CHECK(report.max_relative_error.count("x") == 1);
    CHECK(report.max_relative_error.count("y") == 0);
}

TEST_CASE("every primitive's adjoint agrees with finite differences") {
    Rng rng(3);
    ParameterSet ps;
    ps.add("a", random_matrix(rng, 5, 6));
    ps.add("b", random_matrix(rng, 6, 4));
    ps.add("c", random_matrix(rng, 5, 6));
    ps.add("row", random_matrix(rng, 1, 6));
    ps.add("g", random_matrix(rng, 1, 6, 0.3));
    const std::vector<int> ids{3, 0, 0, 2};
    const std::vector<double> readout_w = [&] {
        std::vector<double> w(64);
        for (double& v : w) v = standard_normal(rng);
        return w;
    }();
    // a fixed random readout turns each matrix output into a scalar
    auto readout = [&](Graph& g, Var x) {
        Matrix w(x.rows(), x.cols());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = readout_w[i % readout_w.size()];
        return sum(mul(x, g.constant(w)));
    };
    auto P = [&](Graph& g, const char* n) { return g.param(ps.at(n)); };

    const std::vector<std::pair<std::string, Computation>> cases{
        {"matmul", [&](Graph& g) { return readout(g, matmul(P(g, "a"), P(g, "b"))); }},
        {"transpose", [&](Graph& g) { return readout(g, transpose(P(g, "a"))); }},
        {"add/mul/scale", [&](Graph& g) { return readout(g, scale(mul(add(P(g, "a"), P(g, "c")), P(g, "a")), 0.7)); }},
        {"add_row", [&](Graph& g) { return readout(g, add_row(P(g, "a"), P(g, "row"))); }},
        {"concat", [&](Graph& g) {
             const Var rows[] = {P(g, "a"), P(g, "c")};
             const Var cols[] = {P(g, "a"), P(g, "c")};
             return add(readout(g, concat_rows(rows)), readout(g, concat_cols(cols)));
         }},
        {"slice/gather", [&](Graph& g) { return readout(g, gather_rows(slice_rows(P(g, "a"), 1, 4), {ids.data(), 3})); }},
        {"layer_norm", [&](Graph& g) { return readout(g, layer_norm(P(g, "a"), P(g, "g"), P(g, "row"))); }},
        {"gelu", [&](Graph& g) { return readout(g, gelu(P(g, "a"))); }},
        {"attention", [&](Graph& g) { return readout(g, causal_self_attention(P(g, "a"), P(g, "c"), scale(P(g, "c"), -0.5), 2)); }},
        {"softmax/log", [&](Graph& g) { return readout(g, log(softmax_rows(P(g, "a")))); }},
        {"mean/mean_rows", [&](Graph& g) { return add(mean(mul(P(g, "a"), P(g, "a"))), readout(g, mean_rows(P(g, "c")))); }},
        {"normalize/cosine", [&](Graph& g) { return add(readout(g, normalize_rows(P(g, "a"))), readout(g, cosine_similarity(P(g, "a"), P(g, "c")))); }},
    };
    for (const auto& [name, f] : cases) {
        CAPTURE(name);
        CHECK(worst_error(f, ps) < 1e-6);
    }
    SUBCASE("dropout with a fixed mask") {
        const auto f = [&](Graph& g) { return readout(g, dropout(P(g, "a"), 0.3)); };
        CHECK(worst_error(f, ps, GraphOptions{true, true, 5}) < 1e-6);
    }
}

TEST_CASE("softmax rows are positive and sum to one") {
    Rng rng(4);
    Graph g;
    const Matrix s = softmax_rows(g.constant(random_matrix(rng, 7, 9, 30.0))).value();
    for (std::size_t r = 0; r < s.rows(); ++r) {
        double total = 0.0;
        for (double v : s.row(r)) {
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-9);
    }
}

TEST_CASE("masked softmax zeroes excluded columns") {
    const Matrix logits(1, 4, std::vector<double>{1.0, 1.0, 1.0, 1.0});
    const Matrix p = masked_softmax(logits, {true, false, true, true});
    CHECK(p(0, 1) == 0.0);
    CHECK(p(0, 0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("causal attention ignores later positions") {
    Rng rng(5);
    Matrix q = random_matrix(rng, 6, 8), k = random_matrix(rng, 6, 8), v = random_matrix(rng, 6, 8);
    Graph g0;
    const Matrix base =
        causal_self_attention(g0.constant(q), g0.constant(k), g0.constant(v), 2).value();
    for (std::size_t r = 3; r < 6; ++r) {
        for (std::size_t c = 0; c < 8; ++c) {
            q(r, c) += 1.0;
            k(r, c) -= 2.0;
            v(r, c) *= 3.0;
        }
    }
    Graph g1;
    const Matrix moved =
        causal_self_attention(g1.constant(q), g1.constant(k), g1.constant(v), 2).value();
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 8; ++c) CHECK(moved(r, c) == base(r, c));
    }
    CHECK(moved(5, 0) != base(5, 0));
}

TEST_CASE("dropout is the identity outside training and seed-deterministic inside") {
    Rng rng(6);
    const Matrix x = random_matrix(rng, 4, 5);
    Graph eval;
    CHECK(dropout(eval.constant(x), 0.5).value() == x);
    Graph t1(GraphOptions{true, true, 9}), t2(GraphOptions{true, true, 9}), t3(GraphOptions{true, true, 10});
    const Matrix a = dropout(t1.constant(x), 0.5).value();
    CHECK(a == dropout(t2.constant(x), 0.5).value());
    CHECK(a != dropout(t3.constant(x), 0.5).value());
    CHECK(a != x);
}
