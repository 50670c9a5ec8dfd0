#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "oaflow/gradcheck.hpp"
#include "oaflow/mlp.hpp"
#include "oaflow/tensor.hpp"

using namespace oaflow;
using T = Tensor<double>;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                               double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

// independent row-major matmul oracle
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t r, std::size_t k, std::size_t c) {
    std::vector<double> out(r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t l = 0; l < k; ++l) out[i * c + j] += a[i * k + l] * b[l * c + j];
    return out;
}

double fd_unary(const std::function<T(const T&)>& op, Shape shape, std::mt19937_64& rng,
                double lo = -1.0, double hi = 1.0) {
    T x = T::leaf(shape, random_vec(shape_numel(shape), rng, lo, hi), true);
    return finite_diff_check<double>([&] { return sum_all(square(op(x))); }, {x}, 1e-6);
}

}  // namespace

TEST_CASE("elementwise arithmetic values and gradients") {
    std::mt19937_64 rng(7);
    T a = T::leaf({2, 3}, random_vec(6, rng), true);
    T b = T::leaf({2, 3}, random_vec(6, rng, 0.5, 2.0), true);

    auto check = [&](const T& out, double expect0) {
        REQUIRE(out.shape() == Shape{2, 3});
        REQUIRE(out.value()[0] == Catch::Approx(expect0));
    };
    check(add(a, b), a.value()[0] + b.value()[0]);
    check(sub(a, b), a.value()[0] - b.value()[0]);
    check(mul(a, b), a.value()[0] * b.value()[0]);
    check(div(a, b), a.value()[0] / b.value()[0]);

    for (auto f : {0, 1, 2, 3}) {
        double err = finite_diff_check<double>(
            [&] {
                T c = f == 0   ? add(a, b)
                      : f == 1 ? sub(a, b)
                      : f == 2 ? mul(a, b)
                               : div(a, b);
                return sum_all(square(c));
            },
            {a, b}, 1e-6);
        REQUIRE(err < 1e-8);
    }
}

TEST_CASE("shape mismatch raises dimension error with shapes") {
    T a = T::leaf({2, 3}, std::vector<double>(6, 1.0), false);
    T b = T::leaf({3, 2}, std::vector<double>(6, 1.0), false);
    REQUIRE_THROWS_WITH(add(a, b), Catch::Matchers::ContainsSubstring("[2,3]") &&
                                       Catch::Matchers::ContainsSubstring("[3,2]"));
}

TEST_CASE("unary op gradients vs finite differences") {
    std::mt19937_64 rng(11);
    REQUIRE(fd_unary([](const T& x) { return relu(x); }, {4, 3}, rng) < 1e-7);
    REQUIRE(fd_unary([](const T& x) { return sigmoid(x); }, {4, 3}, rng) < 1e-7);
    REQUIRE(fd_unary([](const T& x) { return exp_t(x); }, {4, 3}, rng) < 1e-7);
    REQUIRE(fd_unary([](const T& x) { return log_t(x); }, {4, 3}, rng, 0.5, 2.0) < 1e-7);
    REQUIRE(fd_unary([](const T& x) { return square(x); }, {4, 3}, rng) < 1e-6);
    REQUIRE(fd_unary([](const T& x) { return sqrt_t(x); }, {4, 3}, rng, 0.5, 2.0) < 1e-7);
    REQUIRE(fd_unary([](const T& x) { return abs_t(x); }, {4, 3}, rng, 0.2, 1.0) < 1e-7);
    REQUIRE(fd_unary([](const T& x) { return mul_scalar(x, 2.5); }, {4, 3}, rng) < 1e-7);
    REQUIRE(fd_unary([](const T& x) { return add_scalar(x, -1.5); }, {4, 3}, rng) < 1e-7);
    REQUIRE(fd_unary([](const T& x) { return clamp(x, -0.5, 0.5); }, {4, 3}, rng, 0.1, 0.4) <
            1e-7);
}

TEST_CASE("sigmoid values") {
    T x = T::leaf({3}, {0.0, 100.0, std::log(3.0)}, false);
    T y = sigmoid(x);
    REQUIRE(y.value()[0] == Catch::Approx(0.5));
    REQUIRE(y.value()[1] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(y.value()[2] == Catch::Approx(0.75).margin(1e-12));
    for (double v : y.value()) {
        REQUIRE(v > 0.0);
        REQUIRE(v <= 1.0);
    }
}

TEST_CASE("softmax values and invariants") {
    SECTION("symmetry [0,0]") {
        T x = T::leaf({2}, {0.0, 0.0}, false);
        auto y = softmax(x, 0).value();
        REQUIRE(y[0] == Catch::Approx(0.5));
        REQUIRE(y[1] == Catch::Approx(0.5));
    }
    SECTION("constant rows -> uniform") {
        T x = T::leaf({3}, {4.2, 4.2, 4.2}, false);
        T y = softmax(x, 0);
        for (double v : y.value()) REQUIRE(v == Catch::Approx(1.0 / 3.0));
    }
    SECTION("hand-evaluated [0, ln 3]") {
        T x = T::leaf({2}, {0.0, std::log(3.0)}, false);
        auto y = softmax(x, 0).value();
        REQUIRE(y[0] == Catch::Approx(0.25).margin(1e-12));
        REQUIRE(y[1] == Catch::Approx(0.75).margin(1e-12));
    }
    SECTION("sums to one and shift invariance on random input") {
        std::mt19937_64 rng(3);
        auto base = random_vec(4 * 5, rng, -3.0, 3.0);
        T x = T::leaf({4, 5}, base, false);
        auto shifted = base;
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 5; ++c) shifted[r * 5 + c] += 7.25;
        T xs = T::leaf({4, 5}, shifted, false);
        auto y = softmax(x, 1).value();
        auto ys = softmax(xs, 1).value();
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 5; ++c) {
                s += y[r * 5 + c];
                REQUIRE(y[r * 5 + c] == Catch::Approx(ys[r * 5 + c]).margin(1e-6));
            }
            REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
        }
    }
    SECTION("axis out of range") {
        T x = T::leaf({2, 2}, {1, 2, 3, 4}, false);
        REQUIRE_THROWS(softmax(x, 2));
    }
    SECTION("gradient") {
        std::mt19937_64 rng(5);
        T x = T::leaf({3, 4}, random_vec(12, rng), true);
        T w = T::leaf({3, 4}, random_vec(12, rng), false);
        double err = finite_diff_check<double>(
            [&] { return sum_all(mul(softmax(x, 1), w)); }, {x}, 1e-6);
        REQUIRE(err < 1e-8);
    }
}

TEST_CASE("matmul matches oracle and differentiates") {
    std::mt19937_64 rng(13);
    auto av = random_vec(4 * 3, rng), bv = random_vec(3 * 5, rng);
    T a = T::leaf({4, 3}, av, true);
    T b = T::leaf({3, 5}, bv, true);
    T c = matmul(a, b);
    auto expect = matmul_oracle(av, bv, 4, 3, 5);
    for (std::size_t i = 0; i < expect.size(); ++i)
        REQUIRE(c.value()[i] == Catch::Approx(expect[i]).margin(1e-12));
    double err =
        finite_diff_check<double>([&] { return sum_all(square(matmul(a, b))); }, {a, b}, 1e-6);
    REQUIRE(err < 1e-8);
}

TEST_CASE("broadcast helpers") {
    std::mt19937_64 rng(17);
    T x = T::leaf({3, 4}, random_vec(12, rng), true);
    T v = T::leaf({4}, random_vec(4, rng), true);
    T m = T::leaf({3, 1}, random_vec(3, rng), true);
    T s = T::leaf({1}, {1.7}, true);

    SECTION("add_rowvec") {
        T y = add_rowvec(x, v);
        REQUIRE(y.value()[5] == Catch::Approx(x.value()[5] + v.value()[1]));
        REQUIRE(finite_diff_check<double>([&] { return sum_all(square(add_rowvec(x, v))); },
                                          {x, v}, 1e-6) < 1e-8);
    }
    SECTION("mul_rowwise") {
        T y = mul_rowwise(x, m);
        REQUIRE(y.value()[7] == Catch::Approx(x.value()[7] * m.value()[1]));
        REQUIRE(finite_diff_check<double>([&] { return sum_all(square(mul_rowwise(x, m))); },
                                          {x, m}, 1e-6) < 1e-8);
    }
    SECTION("expand_scalar") {
        T y = expand_scalar(s, {2, 3});
        for (double val : y.value()) REQUIRE(val == Catch::Approx(1.7));
        REQUIRE(finite_diff_check<double>(
                    [&] { return sum_all(mul(expand_scalar(s, {3, 4}), x)); }, {s}, 1e-6) <
                1e-8);
    }
}

TEST_CASE("reductions and shape ops") {
    std::mt19937_64 rng(19);
    auto xv = random_vec(2 * 3 * 4, rng);
    T x = T::leaf({2, 3, 4}, xv, true);

    SECTION("sum_axis values") {
        T s = sum_axis(x, 1);
        REQUIRE(s.shape() == Shape{2, 4});
        double manual = xv[0 * 12 + 0 * 4 + 2] + xv[0 * 12 + 1 * 4 + 2] + xv[0 * 12 + 2 * 4 + 2];
        REQUIRE(s.value()[2] == Catch::Approx(manual));
    }
    SECTION("max_axis routes gradient to argmax") {
        T mx = max_axis(x, 2);
        REQUIRE(mx.shape() == Shape{2, 3});
        double err = finite_diff_check<double>(
            [&] { return sum_all(square(max_axis(x, 2))); }, {x}, 1e-7);
        REQUIRE(err < 1e-6);
    }
    SECTION("sum/mean/reshape/slice/concat gradients") {
        T w = T::leaf({2, 3, 4}, random_vec(24, rng), false);
        REQUIRE(finite_diff_check<double>([&] { return mean_all(square(x)); }, {x}, 1e-6) <
                1e-8);
        REQUIRE(finite_diff_check<double>(
                    [&] { return sum_all(mul(reshape(x, {6, 4}), reshape(w, {6, 4}))); }, {x},
                    1e-6) < 1e-8);
        REQUIRE(finite_diff_check<double>(
                    [&] { return sum_all(square(slice_last(x, 1, 2))); }, {x}, 1e-6) < 1e-8);
        REQUIRE(finite_diff_check<double>(
                    [&] {
                        return sum_all(square(concat_last<double>(
                            {slice_last(x, 0, 2), slice_last(x, 2, 2)})));
                    },
                    {x}, 1e-6) < 1e-8);
    }
    SECTION("gather_rows values and gradient") {
        T g = T::leaf({4, 2}, random_vec(8, rng), true);
        std::vector<std::size_t> idx{3, 0, 1, 1, 2, 0};
        T got = gather_rows(g, idx, {3, 2});
        REQUIRE(got.shape() == Shape{3, 2, 2});
        REQUIRE(got.value()[0] == Catch::Approx(g.value()[6]));
        REQUIRE(finite_diff_check<double>(
                    [&] { return sum_all(square(gather_rows(g, idx, {3, 2}))); }, {g}, 1e-6) <
                1e-8);
    }
    SECTION("weighted_gather matches manual combination") {
        T g = T::leaf({5, 2}, random_vec(10, rng), true);
        std::vector<std::array<std::size_t, 3>> idx{{0, 2, 4}, {1, 1, 3}};
        std::vector<std::array<double, 3>> w{{0.2, 0.3, 0.5}, {0.1, 0.6, 0.3}};
        T got = weighted_gather(g, idx, w);
        double expect =
            0.2 * g.value()[0 * 2 + 1] + 0.3 * g.value()[2 * 2 + 1] + 0.5 * g.value()[4 * 2 + 1];
        REQUIRE(got.value()[1] == Catch::Approx(expect));
        REQUIRE(finite_diff_check<double>(
                    [&] { return sum_all(square(weighted_gather(g, idx, w))); }, {g}, 1e-6) <
                1e-8);
    }
}

TEST_CASE("quaternion tensor ops differentiate") {
    std::mt19937_64 rng(23);
    T q = T::leaf({1, 4}, random_vec(4, rng, 0.2, 1.0), true);
    T p = T::leaf({5, 4}, random_vec(20, rng), true);
    REQUIRE(finite_diff_check<double>(
                [&] { return sum_all(square(quat_mul(q, p))); }, {q, p}, 1e-6) < 1e-8);
    REQUIRE(finite_diff_check<double>(
                [&] { return sum_all(square(quat_mul(p, quat_conj(q)))); }, {q, p}, 1e-6) <
            1e-8);
    T w = T::leaf({1, 4}, random_vec(4, rng), false);
    REQUIRE(finite_diff_check<double>(
                [&] { return sum_all(mul(quat_normalize(q), w)); }, {q}, 1e-6) < 1e-7);
    T qn = quat_normalize(q);
    double n2 = 0;
    for (double v : qn.value()) n2 += v * v;
    REQUIRE(std::sqrt(n2) == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("backward basics") {
    SECTION("root = x^2 at x = 3 gives grad 6") {
        T x = T::leaf({1}, {3.0}, true);
        T y = square(x);
        backward(y);
        REQUIRE(x.grad()[0] == Catch::Approx(6.0));
    }
    SECTION("sum(sigmoid(x)) at 0 gives 0.25 per element") {
        T x = T::leaf({4}, {0, 0, 0, 0}, true);
        backward(sum_all(sigmoid(x)));
        for (double g : x.grad()) REQUIRE(g == Catch::Approx(0.25));
    }
    SECTION("second backward without reset accumulates") {
        T x = T::leaf({1}, {3.0}, true);
        backward(square(x));
        backward(square(x));
        REQUIRE(x.grad()[0] == Catch::Approx(12.0));
        x.clear_grad();
        backward(square(x));
        REQUIRE(x.grad()[0] == Catch::Approx(6.0));
    }
    SECTION("fan-out accumulates within one pass") {
        T x = T::leaf({1}, {2.0}, true);
        T y = add(square(x), mul_scalar(x, 3.0));  // x^2 + 3x -> 2x + 3 = 7
        backward(y);
        REQUIRE(x.grad()[0] == Catch::Approx(7.0));
    }
    SECTION("non-scalar root is rejected") {
        T x = T::leaf({2}, {1.0, 2.0}, true);
        REQUIRE_THROWS(backward(x));
    }
    SECTION("random 3-op chain matches finite differences") {
        std::mt19937_64 rng(29);
        T x = T::leaf({4, 3}, random_vec(12, rng), true);
        T w = T::leaf({3, 3}, random_vec(9, rng), true);
        double err = finite_diff_check<double>(
            [&] { return sum_all(square(sigmoid(matmul(x, w)))); }, {x, w}, 1e-6);
        REQUIRE(err < 1e-6);
    }
}

TEST_CASE("finite_diff_check harness") {
    SECTION("identity sum is exact") {
        T x = T::leaf({8}, std::vector<double>(8, 0.37), true);
        REQUIRE(finite_diff_check<double>([&] { return sum_all(x); }, {x}, 1e-5) < 1e-10);
    }
    SECTION("deliberately wrong gradient is detected") {
        T x = T::leaf({3}, {0.4, -0.2, 0.9}, true);
        double err = finite_diff_check<double>(
            [&] {
                // forward x^2 but backward claims d/dx = 2x + 1
                return sum_all(custom_unary<double>(
                    x, [](double v) { return v * v; }, [](double v) { return 2 * v + 1; }));
            },
            {x}, 1e-5);
        REQUIRE(err > 0.1);
    }
    SECTION("rejects non-finite output and bad eps") {
        T x = T::leaf({1}, {-1.0}, true);
        REQUIRE_THROWS(finite_diff_check<double>([&] { return log_t(x); }, {x}, 1e-5));
        REQUIRE_THROWS(finite_diff_check<double>([&] { return sum_all(x); }, {x}, 0.0));
    }
}

TEST_CASE("mlp_forward") {
    SECTION("zero weights give broadcast bias") {
        ParamStore<double> store(0);
        MlpSpec spec = MlpSpec::fc(3, 2);
        register_mlp(store, "f", spec);
        auto& w = store.get("f/w0").mutable_value();
        std::fill(w.begin(), w.end(), 0.0);
        store.get("f/b0").mutable_value() = {1.5, -2.5};
        T x = T::leaf({4, 3}, std::vector<double>(12, 3.3), false);
        T y = mlp_forward(x, spec, store, "f");
        for (std::size_t r = 0; r < 4; ++r) {
            REQUIRE(y.value()[r * 2 + 0] == Catch::Approx(1.5));
            REQUIRE(y.value()[r * 2 + 1] == Catch::Approx(-2.5));
        }
    }
    SECTION("identity weights pass input through") {
        ParamStore<double> store(0);
        MlpSpec spec = MlpSpec::fc(2, 2);
        register_mlp(store, "f", spec);
        store.get("f/w0").mutable_value() = {1, 0, 0, 1};
        store.get("f/b0").mutable_value() = {0, 0};
        T x = T::leaf({1, 2}, {1.0, 2.0}, false);
        T y = mlp_forward(x, spec, store, "f");
        REQUIRE(y.value()[0] == Catch::Approx(1.0));
        REQUIRE(y.value()[1] == Catch::Approx(2.0));
    }
    SECTION("random 1-layer spec matches matmul oracle to 1e-12") {
        std::mt19937_64 rng(31);
        ParamStore<double> store(42);
        MlpSpec spec = MlpSpec::fc(3, 5);
        register_mlp(store, "f", spec);
        auto xv = random_vec(4 * 3, rng);
        T x = T::leaf({4, 3}, xv, false);
        T y = mlp_forward(x, spec, store, "f");
        auto expect = matmul_oracle(xv, store.get("f/w0").value(), 4, 3, 5);
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 5; ++c)
                REQUIRE(y.value()[r * 5 + c] ==
                        Catch::Approx(expect[r * 5 + c] + store.get("f/b0").value()[c])
                            .margin(1e-12));
    }
    SECTION("trailing-dim mismatch raises with expected/actual") {
        ParamStore<double> store(0);
        MlpSpec spec = MlpSpec::fc(3, 2);
        register_mlp(store, "f", spec);
        T x = T::leaf({4, 5}, std::vector<double>(20, 0.0), false);
        REQUIRE_THROWS_WITH(mlp_forward(x, spec, store, "f"),
                            Catch::Matchers::ContainsSubstring("[4,3]") &&
                                Catch::Matchers::ContainsSubstring("[4,5]"));
    }
    SECTION("linear in x at zero bias when activations disabled") {
        std::mt19937_64 rng(37);
        ParamStore<double> store(7);
        MlpSpec spec = MlpSpec::fc(3, 4);
        register_mlp(store, "f", spec);
        std::fill(store.get("f/b0").mutable_value().begin(),
                  store.get("f/b0").mutable_value().end(), 0.0);
        auto xv = random_vec(6, rng), yv = random_vec(6, rng);
        const double a = 1.7, b = -0.4;
        std::vector<double> comb(6);
        for (int i = 0; i < 6; ++i) comb[i] = a * xv[i] + b * yv[i];
        T fx = mlp_forward(T::leaf({2, 3}, xv, false), spec, store, "f");
        T fy = mlp_forward(T::leaf({2, 3}, yv, false), spec, store, "f");
        T fc = mlp_forward(T::leaf({2, 3}, comb, false), spec, store, "f");
        for (std::size_t i = 0; i < fc.numel(); ++i)
            REQUIRE(fc.value()[i] ==
                    Catch::Approx(a * fx.value()[i] + b * fy.value()[i]).margin(1e-10));
    }
    SECTION("multi-layer relu chain differentiates") {
        std::mt19937_64 rng(41);
        ParamStore<double> store(3);
        MlpSpec spec = MlpSpec::mlp(3, {6, 2});
        register_mlp(store, "f", spec);
        T x = T::leaf({5, 3}, random_vec(15, rng), true);
        std::vector<T> params{x};
        for (auto& [name, t] : store.all()) params.push_back(t);
        double err = finite_diff_check<double>(
            [&] { return sum_all(square(mlp_forward(x, spec, store, "f"))); }, params, 1e-6);
        REQUIRE(err < 1e-6);
    }
}

TEST_CASE("dropout") {
    std::mt19937_64 rng(43);
    T x = T::leaf({100, 2}, std::vector<double>(200, 1.0), true);
    SECTION("eval mode is identity") {
        T y = dropout(x, 0.5, rng, false);
        REQUIRE(y.node() == x.node());
    }
    SECTION("training mode zeroes and rescales") {
        T y = dropout(x, 0.5, rng, true);
        std::size_t zeros = 0;
        for (double v : y.value()) {
            if (v == 0.0)
                ++zeros;
            else
                REQUIRE(v == Catch::Approx(2.0));
        }
        REQUIRE(zeros > 50);
        REQUIRE(zeros < 150);
    }
    SECTION("seeded mask is reproducible") {
        std::mt19937_64 r1(9), r2(9);
        T y1 = dropout(x, 0.3, r1, true);
        T y2 = dropout(x, 0.3, r2, true);
        REQUIRE(y1.value() == y2.value());
    }
    SECTION("invalid rate") { REQUIRE_THROWS(dropout(x, 1.0, rng, true)); }
}
