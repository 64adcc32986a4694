#include <cmath>
#include <functional>

#include "doctest.h"
#include "qalas/autodiff.hpp"
#include "qalas/errors.hpp"
#include "test_support.hpp"

using namespace qalas;
using namespace qalas::ad;

namespace {

NDArray random_array(std::vector<int> shape, testing::Rng& rng, double lo, double hi)
{
    NDArray a(std::move(shape));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

using Graph = std::function<Var(Tape&, const std::vector<Var>&)>;

// Reduces an op's output to a scalar with fixed random weights so every
// output element contributes to the gradient.
Var weighted_sum(Var y, std::uint64_t seed)
{
    testing::Rng rng(seed);
    NDArray w(y.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-1.0, 1.0);
    return sum(mul(y, y.tape->constant(std::move(w))));
}

double evaluate(const Graph& g, const std::vector<NDArray>& inputs)
{
    Tape t;
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(t.leaf(x));
    return g(t, leaves).value()[0];
}

// Worst relative error of reverse-mode gradients against central
// differences with a relative step h. Entries far below the array's largest
// gradient are measured against 1% of that largest entry; below that, the
// difference quotient is dominated by cancellation in the loss.
double gradient_check(const Graph& g, std::vector<NDArray> inputs, double h = 1e-6)
{
    Tape t;
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(t.leaf(x));
    t.backward(g(t, leaves));

    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const NDArray analytic = leaves[k].grad();
        double scale = 0.0;
        for (std::size_t i = 0; i < analytic.size(); ++i) scale = std::max(scale, std::abs(analytic[i]));
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double x0 = inputs[k][i];
            const double step = h * std::max(1.0, std::abs(x0));
            inputs[k][i] = x0 + step;
            const double up = evaluate(g, inputs);
            inputs[k][i] = x0 - step;
            const double down = evaluate(g, inputs);
            inputs[k][i] = x0;
            const double fd = (up - down) / (2.0 * step);
            worst = std::max(worst, testing::rel_err(analytic[i], fd, 1e-2 * scale + 1e-12));
        }
    }
    return worst;
}

Graph unary_graph(std::function<Var(Var)> op, std::uint64_t seed)
{
    return [op, seed](Tape&, const std::vector<Var>& x) { return weighted_sum(op(x[0]), seed); };
}

Graph binary_graph(std::function<Var(Var, Var)> op, std::uint64_t seed)
{
    return [op, seed](Tape&, const std::vector<Var>& x) { return weighted_sum(op(x[0], x[1]), seed); };
}

} // namespace

TEST_CASE("trivial values")
{
    Tape t;
    const Var z = t.leaf(NDArray({1}, {0.0}));
    const Var s = sigmoid(z);
    CHECK(s.value()[0] == 0.5);
    t.backward(sum(s));
    CHECK(z.grad()[0] == 0.25);

    Tape t2;
    const Var x = t2.leaf(NDArray({1}, {-2.0}));
    CHECK(leaky_relu(x, 0.01).value()[0] == doctest::Approx(-0.02).epsilon(1e-15));

    Tape t3;
    const Var w = t3.leaf(NDArray({3}, {1.0, -2.0, 4.0}));
    t3.backward(sum(w));
    CHECK(w.grad().values() == std::vector<double>{1.0, 1.0, 1.0});

    Tape t4;
    const Var w2 = t4.leaf(NDArray({3}, {1.0, -2.0, 4.0}));
    t4.backward(sum(square(w2)));
    CHECK(w2.grad().values() == std::vector<double>{2.0, -4.0, 8.0});

    Tape t5;
    const Var m = t5.leaf(NDArray({2, 2}, {1.0, 2.0, 3.0, 4.0}));
    CHECK_THROWS_AS(t5.backward(m), ContractError);
}

TEST_CASE("primitive gradients match central differences")
{
    testing::Rng rng(1);
    constexpr double kTol = 1e-7;
    for (int trial = 0; trial < 5; ++trial) {
        const int c = 1 + static_cast<int>(rng.next() % 4);
        const int v = 2 + static_cast<int>(rng.next() % 9);
        const std::vector<int> shape{c, v};
        const std::uint64_t seed = rng.next();
        auto any = [&] { return random_array(shape, rng, -2.0, 2.0); };
        auto positive = [&] { return random_array(shape, rng, 0.5, 2.5); };
        CAPTURE(c);
        CAPTURE(v);

        CHECK(gradient_check(binary_graph(ad::add, seed), {any(), any()}) < kTol);
        CHECK(gradient_check(binary_graph(ad::sub, seed), {any(), any()}) < kTol);
        CHECK(gradient_check(binary_graph(ad::mul, seed), {any(), any()}) < kTol);
        CHECK(gradient_check(binary_graph(ad::div, seed), {any(), positive()}) < kTol);
        CHECK(gradient_check(unary_graph(neg, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return exp(a); }, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return sin_const(a, 0.7); }, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return cos_const(a, 1.3); }, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return power(a, 1.7); }, seed), {positive()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return power(a, 3.0); }, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph(square, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return affine(a, -1.5, 0.25); }, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return leaky_relu(a, 0.01); }, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph(sigmoid, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph(abs_smoothless, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return sum(a); }, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return mean(a); }, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return instance_norm(a); }, seed), {any()}) < kTol);
        CHECK(gradient_check(unary_graph([](Var a) { return row(a, 0); }, seed), {any()}) < kTol);

        const int cout = 1 + static_cast<int>(rng.next() % 5);
        auto matmul = [](Tape&, const std::vector<Var>& x) { return weighted_sum(matmul_channels(x[0], x[1], x[2]), 9); };
        CHECK(gradient_check(matmul, {random_array({cout, c}, rng, -1, 1), random_array({cout}, rng, -1, 1), any()}) <
              kTol);
    }
}

TEST_CASE("spatial primitives")
{
    testing::Rng rng(2);
    const int nx = 5, ny = 4, cin = 2, cout = 3;
    const std::vector<int> slice{nx * ny};
    for (int axis : {0, 1}) {
        auto g = [=](Tape&, const std::vector<Var>& x) { return weighted_sum(spatial_diff(x[0], nx, ny, axis), 3); };
        CHECK(gradient_check(g, {random_array(slice, rng, -1, 1)}) < 1e-7);
    }

    Tape t;
    NDArray ramp(slice);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) ramp[y * nx + x] = 2.0 * x + 10.0 * y;
    const Var r = t.constant(ramp);
    for (double d : spatial_diff(r, nx, ny, 0).value().values()) CHECK(d == 2.0);
    for (double d : spatial_diff(r, nx, ny, 1).value().values()) CHECK(d == 10.0);
    CHECK(spatial_diff(r, nx, ny, 0).value().size() == 16);
    CHECK(spatial_diff(r, nx, ny, 1).value().size() == 15);

    auto conv = [=](Tape&, const std::vector<Var>& x) { return weighted_sum(conv3x3(x[0], x[1], x[2], nx, ny), 4); };
    CHECK(gradient_check(conv, {random_array({cout, cin, 3, 3}, rng, -1, 1), random_array({cout}, rng, -1, 1),
                                random_array({cin, nx * ny}, rng, -1, 1)}) < 1e-7);

    // A centre-tap kernel is a 1x1 map.
    Tape t2;
    NDArray w({1, 1, 3, 3});
    w[4] = 2.0;
    const Var x = t2.constant(random_array({1, nx * ny}, rng, -1, 1));
    const Var y = conv3x3(t2.constant(w), t2.constant(NDArray({1}, {0.5})), x, nx, ny);
    for (int i = 0; i < nx * ny; ++i) CHECK(y.value()[i] == 2.0 * x.value()[i] + 0.5);
}

TEST_CASE("instance_norm forward")
{
    Tape t;
    const Var x = t.constant(NDArray({2, 4}, {1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0}));
    const NDArray y = instance_norm(x, 0.0).value();
    const double s = 1.0 / std::sqrt(1.25);
    CHECK(y[0] == doctest::Approx(-1.5 * s).epsilon(1e-15));
    CHECK(y[3] == doctest::Approx(1.5 * s).epsilon(1e-15));
    // Constant channel: zero output (epsilon keeps the scale finite).
    const NDArray z = instance_norm(x).value();
    for (int i = 4; i < 8; ++i) CHECK(z[i] == 0.0);
    CHECK_THROWS_AS(instance_norm(t.constant(NDArray({3, 1}))), DegenerateError);
}

TEST_CASE("shape errors")
{
    Tape t;
    const Var a = t.constant(NDArray({2, 3}));
    const Var b = t.constant(NDArray({3, 2}));
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(matmul_channels(t.constant(NDArray({4, 3})), t.constant(NDArray({4})), a), ShapeError);
    CHECK_THROWS_AS(matmul_channels(t.constant(NDArray({4, 2})), t.constant(NDArray({3})), a), ShapeError);
    CHECK_THROWS_AS(NDArray({2, 2}, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("signal_model_node")
{
    const SequenceTiming timing;
    testing::Rng rng(5);
    const int v = 6;
    std::vector<double> b1(v);
    for (auto& x : b1) x = rng.uniform(0.7, 1.3);
    auto params = [&] {
        std::vector<NDArray> p{NDArray({v}), NDArray({v}), NDArray({v}), NDArray({v})};
        for (int i = 0; i < v; ++i) {
            p[0][i] = rng.log_uniform(300.0, 3000.0);
            p[1][i] = rng.log_uniform(30.0, 300.0);
            p[2][i] = rng.uniform(0.3, 1.5);
            p[3][i] = rng.uniform(0.6, 0.95);
        }
        return p;
    };

    SUBCASE("forward equals simulate")
    {
        Tape t;
        const auto p = params();
        const auto s = signal_model_node(t.constant(p[0]), t.constant(p[1]), t.constant(p[2]), t.constant(p[3]), b1,
                                         timing);
        for (int i = 0; i < v; ++i) {
            const auto want = simulate(timing, {p[0][i], p[1][i], p[2][i], p[3][i]}, b1[i]);
            for (int c = 0; c < 5; ++c) CHECK(s[c].value()[i] == want[c]);
        }
    }

    SUBCASE("gradient matches finite differences through simulate")
    {
        auto g = [&](Tape&, const std::vector<Var>& x) {
            const auto s = signal_model_node(x[0], x[1], x[2], x[3], b1, timing);
            Var acc = weighted_sum(s[0], 10);
            for (int c = 1; c < 5; ++c) acc = add(acc, weighted_sum(s[c], 10 + c));
            return acc;
        };
        CHECK(gradient_check(g, params(), 1e-4) < 1e-6);
    }

    SUBCASE("pd gradient is linear in the other factor and S1 rises with T2")
    {
        const auto p = params();
        Tape t;
        const Var t1 = t.leaf(p[0]), t2 = t.leaf(p[1]), pd = t.leaf(p[2]), ie = t.leaf(p[3]);
        const auto s = signal_model_node(t1, t2, pd, ie, b1, timing);
        t.backward(sum(s[0]));
        for (int i = 0; i < v; ++i) {
            CHECK(t2.grad()[i] > 0.0);
            // S is linear in PD, so dS/dPD = S / PD.
            CHECK(pd.grad()[i] == doctest::Approx(s[0].value()[i] / p[2][i]).epsilon(1e-12));
        }

        auto doubled = p;
        for (int i = 0; i < v; ++i) doubled[2][i] *= 2.0;
        Tape t2b;
        const Var pd2 = t2b.leaf(doubled[2]);
        const Var t1b = t2b.leaf(p[0]);
        const auto s2 = signal_model_node(t1b, t2b.constant(p[1]), pd2, t2b.constant(p[3]), b1, timing);
        t2b.backward(sum(s2[0]));
        for (int i = 0; i < v; ++i) {
            CHECK(pd2.grad()[i] == doctest::Approx(pd.grad()[i]).epsilon(1e-12));
            CHECK(t1b.grad()[i] == doctest::Approx(2.0 * t1.grad()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("replay and determinism")
{
    testing::Rng rng(8);
    const auto w = random_array({4, 3}, rng, -1, 1);
    const auto b = random_array({4}, rng, -1, 1);
    const auto x = random_array({3, 50}, rng, -1, 1);
    auto run = [&] {
        Tape t;
        const Var wv = t.leaf(w), bv = t.leaf(b);
        const Var y = leaky_relu(instance_norm(matmul_channels(wv, bv, t.constant(x))), 0.01);
        t.backward(mean(square(y)));
        return std::make_pair(y.value().values(), wv.grad().values());
    };
    const auto first = run();
    const auto second = run();
    CHECK(first.first == second.first);
    CHECK(first.second == second.second);
}
