#include <cmath>
#include <functional>
#include <vector>

#include <doctest.h>

#include "liverformer/ad/ops.hpp"
#include "liverformer/ad/tensor.hpp"
#include "liverformer/rng.hpp"
#include "support.hpp"

using namespace liverformer;
using ad::Shape;
using ad::Tensor;

namespace {

Tensor<double> random_param(Shape shape, Rng& rng, const char* name) {
    std::vector<double> data(ad::numel(shape));
    for (double& x : data) x = rng.normal();
    return Tensor<double>::parameter(std::move(shape), std::move(data), name);
}

Tensor<double> random_const(Shape shape, Rng& rng, const char* name) {
    std::vector<double> data(ad::numel(shape));
    for (double& x : data) x = rng.normal();
    return Tensor<double>::constant(std::move(shape), std::move(data), name);
}

// Fixed projection weights turn any op output into a scalar loss that is
// sensitive to every output coordinate.
Tensor<double> weighted_sum(const Tensor<double>& out, Rng& rng) {
    std::vector<double> w(out.numel());
    for (double& x : w) x = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    Tensor<double> wt = Tensor<double>::constant(out.shape(), std::move(w), "probe");
    return ad::sum(ad::mul(out, wt));
}

// FD check for a unary op through a fixed probe. The probe weights are drawn
// once so every rebuild computes the identical loss function.
void check_unary(Shape shape, const std::function<Tensor<double>(const Tensor<double>&)>& op,
                 std::uint64_t seed, double tol = 1e-6) {
    Rng rng(seed);
    Tensor<double> x = random_param(shape, rng, "x");
    Rng probe_rng(seed + 5000);
    std::vector<double> w;
    {
        Tensor<double> probe_shape_holder = op(x);
        w.resize(probe_shape_holder.numel());
        for (double& v : w) v = probe_rng.uniform(-1.0, 1.0);
    }
    auto build = [&]() {
        Tensor<double> out = op(x);
        Tensor<double> wt = Tensor<double>::constant(out.shape(), w, "probe");
        return ad::sum(ad::mul(out, wt));
    };
    testsupport::GradCheck gc{tol};
    CHECK(testsupport::fd_check_tensor(x, build, gc));
    INFO("worst relative error ", gc.worst_rel);
    CHECK(gc.worst_rel <= tol);
}

}  // namespace

TEST_CASE("relu values on the canonical triple") {
    Tensor<double> x = Tensor<double>::constant({3}, {-1.0, 0.0, 2.0}, "x");
    Tensor<double> y = ad::relu(x);
    CHECK(y.value()[0] == 0.0);
    CHECK(y.value()[1] == 0.0);
    CHECK(y.value()[2] == 2.0);
}

TEST_CASE("gelu values at anchor points") {
    Tensor<double> x = Tensor<double>::constant({3}, {0.0, 10.0, -10.0}, "x");
    Tensor<double> y = ad::gelu(x);
    CHECK(y.value()[0] == doctest::Approx(0.0));
    CHECK(y.value()[1] == doctest::Approx(10.0).epsilon(1e-6));       // ~identity far right
    CHECK(std::abs(y.value()[2]) < 1e-6);                             // ~zero far left
}

TEST_CASE("sum backward fills ones; reuse doubles; repeat sweeps accumulate") {
    SUBCASE("plain sum") {
        Rng rng(41);
        Tensor<double> x = random_param({4}, rng, "x");
        Tensor<double> loss = ad::sum(x);
        ad::backward(loss);
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    SUBCASE("same tensor used twice") {
        Rng rng(42);
        Tensor<double> x = random_param({4}, rng, "x");
        Tensor<double> loss = ad::sum(ad::add(x, x));
        ad::backward(loss);
        for (double g : x.grad()) CHECK(g == 2.0);
    }
    SUBCASE("two sweeps without zero_grad double the leaf gradient") {
        Rng rng(43);
        Tensor<double> x = random_param({3}, rng, "x");
        Tensor<double> loss = ad::sum(x);
        ad::backward(loss);
        ad::backward(loss);
        for (double g : x.grad()) CHECK(g == 2.0);
        x.zero_grad();
        ad::backward(loss);
        for (double g : x.grad()) CHECK(g == 1.0);
    }
}

TEST_CASE("backward requires a scalar loss") {
    Rng rng(44);
    Tensor<double> x = random_param({2, 2}, rng, "x");
    CHECK_THROWS_AS(ad::backward(x), ad::NonScalarLoss);
}

TEST_CASE("elementwise ops match finite differences") {
    check_unary({3, 4}, [](const Tensor<double>& x) { return ad::relu(x); }, 51);
    check_unary({3, 4}, [](const Tensor<double>& x) { return ad::gelu(x); }, 52);
    check_unary({3, 4}, [](const Tensor<double>& x) { return ad::scale(x, 1.7); }, 53);
    check_unary({3, 4}, [](const Tensor<double>& x) { return ad::add_scalar(x, -2.3); }, 54);
    check_unary({2, 6}, [](const Tensor<double>& x) { return ad::softmax(x); }, 55);

    Rng rng(56);
    Tensor<double> other = random_const({3, 4}, rng, "other");
    // keep |other| away from 0 so div stays well conditioned
    for (double& v : other.value()) v = (v < 0 ? -1.0 : 1.0) * (std::abs(v) + 0.5);
    check_unary({3, 4}, [&](const Tensor<double>& x) { return ad::add(x, other); }, 57);
    check_unary({3, 4}, [&](const Tensor<double>& x) { return ad::sub(other, x); }, 58);
    check_unary({3, 4}, [&](const Tensor<double>& x) { return ad::mul(x, other); }, 59);
    check_unary({3, 4}, [&](const Tensor<double>& x) { return ad::div(other, x); }, 60, 1e-5);
    check_unary({3, 4}, [&](const Tensor<double>& x) { return ad::div(x, other); }, 61);
}

TEST_CASE("both sides of binary ops receive gradients") {
    Rng rng(62);
    Tensor<double> a = random_param({2, 3}, rng, "a");
    Tensor<double> b = random_param({2, 3}, rng, "b");
    Tensor<double> loss = ad::sum(ad::mul(a, b));
    ad::backward(loss);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(a.grad()[i] == doctest::Approx(b.value()[i]));
        CHECK(b.grad()[i] == doctest::Approx(a.value()[i]));
    }
}

TEST_CASE("data movement ops are value-exact and gradient-exact") {
    SUBCASE("reshape round trip") {
        Rng rng(63);
        Tensor<double> x = random_param({2, 6}, rng, "x");
        Tensor<double> y = ad::reshape(x, {3, 4});
        CHECK(y.value() == x.value());
        check_unary({2, 6}, [](const Tensor<double>& t) { return ad::reshape(t, {12}); }, 64);
    }
    SUBCASE("transpose2d") {
        Tensor<double> x =
            Tensor<double>::constant({2, 3}, {1, 2, 3, 4, 5, 6}, "x");
        Tensor<double> y = ad::transpose2d(x);
        CHECK(y.shape() == Shape{3, 2});
        CHECK(y.value() == std::vector<double>{1, 4, 2, 5, 3, 6});
        check_unary({3, 5}, [](const Tensor<double>& t) { return ad::transpose2d(t); }, 65);
    }
    SUBCASE("slice_cols") {
        Tensor<double> x =
            Tensor<double>::constant({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}, "x");
        Tensor<double> y = ad::slice_cols(x, 1, 3);
        CHECK(y.value() == std::vector<double>{2, 3, 6, 7});
        check_unary({3, 6}, [](const Tensor<double>& t) { return ad::slice_cols(t, 2, 5); },
                    66);
        CHECK_THROWS_AS(ad::slice_cols(x, 3, 3), ad::ShapeMismatch);
        CHECK_THROWS_AS(ad::slice_cols(x, 0, 5), ad::ShapeMismatch);
    }
    SUBCASE("concat along both axes") {
        Tensor<double> a = Tensor<double>::constant({1, 2}, {1, 2}, "a");
        Tensor<double> b = Tensor<double>::constant({1, 2}, {3, 4}, "b");
        Tensor<double> rows = ad::concat<double>({a, b}, 0);
        CHECK(rows.shape() == Shape{2, 2});
        CHECK(rows.value() == std::vector<double>{1, 2, 3, 4});
        Tensor<double> cols = ad::concat<double>({a, b}, 1);
        CHECK(cols.shape() == Shape{1, 4});
        CHECK(cols.value() == std::vector<double>{1, 2, 3, 4});

        Rng rng(67);
        Tensor<double> fixed = random_const({2, 3}, rng, "fixed");
        check_unary({2, 2},
                    [&](const Tensor<double>& t) { return ad::concat<double>({t, fixed}, 1); },
                    68);
        check_unary({4, 3},
                    [&](const Tensor<double>& t) { return ad::concat<double>({fixed, t}, 0); },
                    69);
    }
}

TEST_CASE("colsum sums rows and routes gradients back per column") {
    Tensor<double> x = Tensor<double>::constant({2, 3}, {1, 2, 3, 10, 20, 30}, "x");
    Tensor<double> y = ad::colsum(x);
    CHECK(y.value() == std::vector<double>{11, 22, 33});
    check_unary({4, 3}, [](const Tensor<double>& t) { return ad::colsum(t); }, 70);
}

TEST_CASE("matmul against a hand-computed product") {
    Tensor<double> a = Tensor<double>::constant({2, 3}, {1, 2, 3, 4, 5, 6}, "a");
    Tensor<double> b = Tensor<double>::constant({3, 2}, {7, 8, 9, 10, 11, 12}, "b");
    Tensor<double> c = ad::matmul(a, b);
    CHECK(c.shape() == Shape{2, 2});
    CHECK(c.value() == std::vector<double>{58, 64, 139, 154});
    CHECK_THROWS_AS(ad::matmul(a, a), ad::ShapeMismatch);
}

TEST_CASE("matmul gradients for both operands match finite differences") {
    Rng rng(71);
    Tensor<double> b = random_const({4, 3}, rng, "b");
    check_unary({2, 4}, [&](const Tensor<double>& t) { return ad::matmul(t, b); }, 72);
    Tensor<double> a = random_const({2, 4}, rng, "a");
    check_unary({4, 3}, [&](const Tensor<double>& t) { return ad::matmul(a, t); }, 73);
}

TEST_CASE("linear with bias matches the hand example") {
    Tensor<double> x = Tensor<double>::constant({2, 2}, {1, 2, 3, 4}, "x");
    Tensor<double> w = Tensor<double>::constant({2, 2}, {1, 0, 0, 1}, "w");
    Tensor<double> b = Tensor<double>::constant({2}, {1, 1}, "b");
    Tensor<double> y = ad::linear(x, w, b);
    CHECK(y.value() == std::vector<double>{2, 3, 4, 5});

    Rng rng(74);
    Tensor<double> xc = random_const({3, 2}, rng, "xc");
    Tensor<double> wc = random_const({2, 2}, rng, "wc");
    check_unary({2}, [&](const Tensor<double>& t) { return ad::linear(xc, wc, t); }, 75);
}

TEST_CASE("softmax rows are distributions and uniform rows stay uniform") {
    Tensor<double> x = Tensor<double>::constant({2, 4}, {3, 3, 3, 3, 0, 1, 2, 3}, "x");
    Tensor<double> y = ad::softmax(x);
    for (std::size_t c = 0; c < 4; ++c) CHECK(y.value()[c] == doctest::Approx(0.25));
    double s0 = 0, s1 = 0;
    for (std::size_t c = 0; c < 4; ++c) {
        s0 += y.value()[c];
        s1 += y.value()[4 + c];
    }
    CHECK(s0 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s1 == doctest::Approx(1.0).epsilon(1e-12));
    // monotone within the second row
    for (std::size_t c = 1; c < 4; ++c) CHECK(y.value()[4 + c] > y.value()[4 + c - 1]);
}

TEST_CASE("softmax is shift invariant") {
    Tensor<double> x = Tensor<double>::constant({1, 3}, {1.0, 2.0, 3.0}, "x");
    Tensor<double> xs = Tensor<double>::constant({1, 3}, {101.0, 102.0, 103.0}, "xs");
    Tensor<double> y = ad::softmax(x), ys = ad::softmax(xs);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(y.value()[c] == doctest::Approx(ys.value()[c]).epsilon(1e-12));
    }
}

TEST_CASE("layer_norm standardizes each row") {
    Rng rng(76);
    const std::size_t rows = 3, d = 8;
    Tensor<double> x = random_param({rows, d}, rng, "x");
    Tensor<double> gamma = Tensor<double>::full({d}, 1.0, "gamma");
    Tensor<double> beta = Tensor<double>::zeros({d}, "beta");
    Tensor<double> y = ad::layer_norm(x, gamma, beta);

    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += y.value()[r * d + c];
        mean /= double(d);
        CHECK(std::abs(mean) < 1e-9);
        double var = 0;
        for (std::size_t c = 0; c < d; ++c) {
            var += (y.value()[r * d + c] - mean) * (y.value()[r * d + c] - mean);
        }
        var /= double(d);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("layer_norm maps constant rows to beta") {
    Tensor<double> x = Tensor<double>::full({2, 4}, 7.0, "x");
    Tensor<double> gamma = Tensor<double>::full({4}, 2.0, "gamma");
    Tensor<double> beta = Tensor<double>::constant({4}, {1, 2, 3, 4}, "beta");
    Tensor<double> y = ad::layer_norm(x, gamma, beta);
    for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(y.value()[r * 4 + c] == doctest::Approx(beta.value()[c]).epsilon(1e-6));
        }
    }
}

TEST_CASE("layer_norm gradients for input and affine parameters") {
    Rng rng(77);
    Tensor<double> gamma = random_const({5}, rng, "gamma");
    Tensor<double> beta = random_const({5}, rng, "beta");
    check_unary({3, 5},
                [&](const Tensor<double>& t) { return ad::layer_norm(t, gamma, beta); }, 78,
                1e-5);
    Tensor<double> x = random_const({3, 5}, rng, "x");
    check_unary({5}, [&](const Tensor<double>& t) { return ad::layer_norm(x, t, beta); }, 79);
    check_unary({5}, [&](const Tensor<double>& t) { return ad::layer_norm(x, gamma, t); },
                80);
}

TEST_CASE("instance_norm3d standardizes per channel and checks gradients") {
    Rng rng(81);
    Tensor<double> x = random_param({2, 2, 3, 3}, rng, "x");
    Tensor<double> gamma = Tensor<double>::full({2}, 1.0, "gamma");
    Tensor<double> beta = Tensor<double>::zeros({2}, "beta");
    Tensor<double> y = ad::instance_norm3d(x, gamma, beta);

    const std::size_t m = 2 * 3 * 3;
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0;
        for (std::size_t i = 0; i < m; ++i) mean += y.value()[c * m + i];
        mean /= double(m);
        CHECK(std::abs(mean) < 1e-9);
    }

    Tensor<double> g2 = random_const({2}, rng, "g2");
    Tensor<double> b2 = random_const({2}, rng, "b2");
    check_unary({2, 2, 3, 3},
                [&](const Tensor<double>& t) { return ad::instance_norm3d(t, g2, b2); }, 82,
                1e-5);
    Tensor<double> xc = random_const({2, 2, 3, 3}, rng, "xc");
    check_unary({2}, [&](const Tensor<double>& t) { return ad::instance_norm3d(xc, t, b2); },
                83);
    check_unary({2}, [&](const Tensor<double>& t) { return ad::instance_norm3d(xc, g2, t); },
                84);
}

// ------------------------------------------------------------------- conv3d

namespace {

// Direct six-loop cross-correlation with zero padding.
std::vector<double> conv_oracle(const std::vector<double>& x, std::size_t cin,
                                std::size_t in_d, std::size_t in_h, std::size_t in_w,
                                const std::vector<double>& k, std::size_t cout,
                                std::size_t kk, const std::vector<double>* bias,
                                std::size_t stride, std::size_t pad, std::size_t& od,
                                std::size_t& oh, std::size_t& ow) {
    od = (in_d + 2 * pad - kk) / stride + 1;
    oh = (in_h + 2 * pad - kk) / stride + 1;
    ow = (in_w + 2 * pad - kk) / stride + 1;
    std::vector<double> out(cout * od * oh * ow, 0.0);
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t d = 0; d < od; ++d)
            for (std::size_t h = 0; h < oh; ++h)
                for (std::size_t w = 0; w < ow; ++w) {
                    double acc = bias ? (*bias)[co] : 0.0;
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t kd = 0; kd < kk; ++kd)
                            for (std::size_t kh = 0; kh < kk; ++kh)
                                for (std::size_t kw = 0; kw < kk; ++kw) {
                                    const std::ptrdiff_t id =
                                        static_cast<std::ptrdiff_t>(d * stride + kd) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    const std::ptrdiff_t ih =
                                        static_cast<std::ptrdiff_t>(h * stride + kh) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    const std::ptrdiff_t iw =
                                        static_cast<std::ptrdiff_t>(w * stride + kw) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (id < 0 || ih < 0 || iw < 0 ||
                                        id >= static_cast<std::ptrdiff_t>(in_d) ||
                                        ih >= static_cast<std::ptrdiff_t>(in_h) ||
                                        iw >= static_cast<std::ptrdiff_t>(in_w))
                                        continue;
                                    acc += x[((ci * in_d + static_cast<std::size_t>(id)) *
                                                  in_h +
                                              static_cast<std::size_t>(ih)) *
                                                 in_w +
                                             static_cast<std::size_t>(iw)] *
                                           k[(((co * cin + ci) * kk + kd) * kk + kh) * kk +
                                             kw];
                                }
                    out[((co * od + d) * oh + h) * ow + w] = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("conv3d with a 1x1x1 identity kernel copies the input") {
    Rng rng(85);
    Tensor<double> x = random_param({1, 3, 3, 3}, rng, "x");
    Tensor<double> k = Tensor<double>::constant({1, 1, 1, 1, 1}, {1.0}, "k");
    Tensor<double> y = ad::conv3d(x, k, std::size_t{1}, 0);
    CHECK(y.shape() == Shape{1, 3, 3, 3});
    CHECK(y.value() == x.value());
}

TEST_CASE("conv3d all-ones 3x3x3 kernel sums the full neighborhood") {
    Tensor<double> x = Tensor<double>::full({1, 5, 5, 5}, 1.0, "x");
    Tensor<double> k = Tensor<double>::full({1, 1, 3, 3, 3}, 1.0, "k");
    Tensor<double> y = ad::conv3d(x, k, std::size_t{1}, 1);
    CHECK(y.shape() == Shape{1, 5, 5, 5});
    // interior sees all 27 taps, the very corner only 8
    CHECK(y.value()[((0 * 5 + 2) * 5 + 2) * 5 + 2] == doctest::Approx(27.0));
    CHECK(y.value()[0] == doctest::Approx(8.0));
}

TEST_CASE("conv3d output extents use floor division") {
    Tensor<double> x = Tensor<double>::full({1, 5, 5, 5}, 1.0, "x");
    Tensor<double> k = Tensor<double>::full({1, 1, 3, 3, 3}, 1.0, "k");
    // (5 + 0 - 3) / 2 + 1 = 2
    CHECK(ad::conv3d(x, k, std::size_t{2}, 0).shape() == Shape{1, 2, 2, 2});
    // (5 + 2 - 3) / 2 + 1 = 3
    CHECK(ad::conv3d(x, k, std::size_t{2}, 1).shape() == Shape{1, 3, 3, 3});
}

TEST_CASE("conv3d rejects even kernels and kernels beyond the padded extent") {
    Rng rng(86);
    Tensor<double> x = random_const({1, 4, 4, 4}, rng, "x");
    Tensor<double> even = Tensor<double>::zeros({1, 1, 2, 2, 2}, "even");
    CHECK_THROWS_AS(ad::conv3d(x, even, std::size_t{1}, 0), ad::ShapeMismatch);
    Tensor<double> huge = Tensor<double>::zeros({1, 1, 7, 7, 7}, "huge");
    CHECK_THROWS_AS(ad::conv3d(x, huge, std::size_t{1}, 0), ad::NonIntegralOutput);
}

TEST_CASE("conv3d matches the six-loop oracle over strides and paddings") {
    Rng rng(87);
    for (const std::size_t stride : {std::size_t{1}, std::size_t{2}}) {
        for (const std::size_t pad : {std::size_t{0}, std::size_t{1}}) {
            const std::size_t cin = 2, cout = 3, kk = 3, D = 5, H = 4, W = 6;
            Tensor<double> x = random_const({cin, D, H, W}, rng, "x");
            Tensor<double> k = random_const({cout, cin, kk, kk, kk}, rng, "k");
            Tensor<double> b = random_const({cout}, rng, "b");
            Tensor<double> y = ad::conv3d(x, k, b, stride, pad);

            std::size_t od, oh, ow;
            const auto expect =
                conv_oracle(x.value(), cin, D, H, W, k.value(), cout, kk, &b.value(),
                            stride, pad, od, oh, ow);
            REQUIRE(y.shape() == Shape{cout, od, oh, ow});
            for (std::size_t i = 0; i < expect.size(); ++i) {
                CHECK(y.value()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("conv3d gradients for input, kernel, and bias") {
    Rng rng(88);
    Tensor<double> kc = random_const({2, 1, 3, 3, 3}, rng, "kc");
    Tensor<double> bc = random_const({2}, rng, "bc");
    check_unary({1, 4, 4, 4},
                [&](const Tensor<double>& t) { return ad::conv3d(t, kc, bc, std::size_t{1}, 1); },
                89, 1e-5);
    Tensor<double> xc = random_const({1, 4, 4, 4}, rng, "xc");
    check_unary({2, 1, 3, 3, 3},
                [&](const Tensor<double>& t) { return ad::conv3d(xc, t, bc, std::size_t{1}, 1); },
                90, 1e-5);
    check_unary({2},
                [&](const Tensor<double>& t) { return ad::conv3d(xc, kc, t, std::size_t{1}, 1); },
                91);
    // strided case too
    check_unary({1, 5, 5, 5},
                [&](const Tensor<double>& t) { return ad::conv3d(t, kc, bc, std::size_t{2}, 1); },
                92, 1e-5);
}

TEST_CASE("patchify lays tokens out patch-major, features (c, d, h, w)") {
    // [1, 2, 2, 2] with P=2: one token carrying the voxels in index order
    Tensor<double> x =
        Tensor<double>::constant({1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7}, "x");
    Tensor<double> t = ad::patchify(x, 2);
    CHECK(t.shape() == Shape{1, 8});
    CHECK(t.value() == std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7});

    // [1, 4, 4, 4] with P=2: 8 tokens of width 8; token (pd,ph,pw) row-major
    Rng rng(93);
    Tensor<double> big = random_const({1, 4, 4, 4}, rng, "big");
    Tensor<double> tok = ad::patchify(big, 2);
    CHECK(tok.shape() == Shape{8, 8});
    // token 3 is (pd,ph,pw) = (0,1,1); its first feature is voxel (0, 2, 2)
    CHECK(tok.value()[3 * 8 + 0] == big.value()[(0 * 4 + 2) * 4 + 2]);
    // token 4 is (1,0,0); first feature is voxel (2, 0, 0)
    CHECK(tok.value()[4 * 8 + 0] == big.value()[(2 * 4 + 0) * 4 + 0]);
}

TEST_CASE("unpatchify inverts patchify and both route gradients") {
    Rng rng(94);
    Tensor<double> x = random_const({3, 4, 4, 4}, rng, "x");
    Tensor<double> back = ad::unpatchify(ad::patchify(x, 2), {3, 4, 4, 4}, 2);
    CHECK(back.value() == x.value());

    check_unary({2, 4, 4, 4}, [](const Tensor<double>& t) { return ad::patchify(t, 2); }, 95);
    check_unary({8, 16},
                [](const Tensor<double>& t) { return ad::unpatchify(t, {2, 4, 4, 4}, 2); },
                96);
    CHECK_THROWS_AS(ad::patchify(x, 3), ad::NotDivisibleByPatch);
}

TEST_CASE("upsample factor 1 is the identity and constants stay constant") {
    Rng rng(97);
    Tensor<double> x = random_const({2, 3, 3, 3}, rng, "x");
    Tensor<double> same = ad::upsample_trilinear(x, 1);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(same.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-12));
    }

    Tensor<double> flat = Tensor<double>::full({1, 2, 2, 2}, 3.25, "flat");
    Tensor<double> up = ad::upsample_trilinear(flat, 2);
    CHECK(up.shape() == Shape{1, 4, 4, 4});
    for (double v : up.value()) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("upsample matches the align-corners-false sample positions") {
    // Variation along w only: values 0, 1 -> centers at c = (i+0.5)/2 - 0.5.
    // The singleton d and h axes upsample to identical copies.
    Tensor<double> x = Tensor<double>::constant({1, 1, 1, 2}, {0.0, 1.0}, "x");
    Tensor<double> y = ad::upsample_trilinear(x, 2);
    REQUIRE(y.shape() == Shape{1, 2, 2, 4});
    for (std::size_t row = 0; row < 4; ++row) {
        CHECK(y.value()[row * 4 + 0] == doctest::Approx(0.0));   // clamped
        CHECK(y.value()[row * 4 + 1] == doctest::Approx(0.25));
        CHECK(y.value()[row * 4 + 2] == doctest::Approx(0.75));
        CHECK(y.value()[row * 4 + 3] == doctest::Approx(1.0));   // clamped
    }
}

TEST_CASE("upsample gradient is the interpolation transpose") {
    check_unary({1, 2, 2, 2}, [](const Tensor<double>& t) { return ad::upsample_trilinear(t, 2); },
                98);
    check_unary({2, 2, 3, 2}, [](const Tensor<double>& t) { return ad::upsample_trilinear(t, 3); },
                99, 1e-5);
}

// ---------------------------------------------------------------- attention

TEST_CASE("single-token attention reduces to z Wv Wo") {
    Rng rng(100);
    const std::size_t d = 6;
    Tensor<double> z = random_const({1, d}, rng, "z");
    Tensor<double> wq = random_const({d, d}, rng, "wq");
    Tensor<double> wk = random_const({d, d}, rng, "wk");
    Tensor<double> wv = random_const({d, d}, rng, "wv");
    Tensor<double> wo = random_const({d, d}, rng, "wo");
    Tensor<double> y = ad::multi_head_attention(z, 2, wq, wk, wv, wo);
    Tensor<double> direct = ad::matmul(ad::matmul(z, wv), wo);
    REQUIRE(y.numel() == direct.numel());
    for (std::size_t i = 0; i < y.numel(); ++i) {
        CHECK(y.value()[i] == doctest::Approx(direct.value()[i]).epsilon(1e-9));
    }
}

TEST_CASE("attention hand example: one head, two tokens, d = 2") {
    // identity projections isolate the softmax mixing
    Tensor<double> z = Tensor<double>::constant({2, 2}, {1.0, 0.0, 0.0, 1.0}, "z");
    Tensor<double> eye = Tensor<double>::constant({2, 2}, {1, 0, 0, 1}, "eye");
    Tensor<double> y = ad::multi_head_attention(z, 1, eye, eye, eye, eye);

    // scores row 0: [z0.z0, z0.z1]/sqrt(2) = [1, 0]/sqrt(2)
    const double s = 1.0 / std::sqrt(2.0);
    const double e = std::exp(s);
    const double a00 = e / (e + 1.0), a01 = 1.0 / (e + 1.0);
    CHECK(y.value()[0] == doctest::Approx(a00).epsilon(1e-12));
    CHECK(y.value()[1] == doctest::Approx(a01).epsilon(1e-12));
    CHECK(y.value()[2] == doctest::Approx(a01).epsilon(1e-12));
    CHECK(y.value()[3] == doctest::Approx(a00).epsilon(1e-12));
}

TEST_CASE("attention is equivariant under token permutation") {
    Rng rng(101);
    const std::size_t n = 4, d = 4;
    Tensor<double> wq = random_const({d, d}, rng, "wq");
    Tensor<double> wk = random_const({d, d}, rng, "wk");
    Tensor<double> wv = random_const({d, d}, rng, "wv");
    Tensor<double> wo = random_const({d, d}, rng, "wo");

    std::vector<double> rows(n * d);
    for (double& v : rows) v = rng.normal();
    Tensor<double> z = Tensor<double>::constant({n, d}, rows, "z");

    const std::size_t perm[n] = {2, 0, 3, 1};
    std::vector<double> prows(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) prows[i * d + c] = rows[perm[i] * d + c];
    Tensor<double> zp = Tensor<double>::constant({n, d}, prows, "zp");

    Tensor<double> y = ad::multi_head_attention(z, 2, wq, wk, wv, wo);
    Tensor<double> yp = ad::multi_head_attention(zp, 2, wq, wk, wv, wo);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            CHECK(yp.value()[i * d + c] ==
                  doctest::Approx(y.value()[perm[i] * d + c]).epsilon(1e-9));
        }
}

TEST_CASE("attention rejects an indivisible head count") {
    Rng rng(102);
    Tensor<double> z = random_const({2, 6}, rng, "z");
    Tensor<double> w = random_const({6, 6}, rng, "w");
    CHECK_THROWS_AS(ad::multi_head_attention(z, 4, w, w, w, w), ad::IndivisibleHeads);
}

TEST_CASE("attention gradients through every projection") {
    Rng rng(103);
    const std::size_t n = 3, d = 4;
    Tensor<double> wq = random_const({d, d}, rng, "wq");
    Tensor<double> wk = random_const({d, d}, rng, "wk");
    Tensor<double> wv = random_const({d, d}, rng, "wv");
    Tensor<double> wo = random_const({d, d}, rng, "wo");
    check_unary({n, d},
                [&](const Tensor<double>& t) {
                    return ad::multi_head_attention(t, 2, wq, wk, wv, wo);
                },
                104, 1e-5);
    Tensor<double> z = random_const({n, d}, rng, "z");
    check_unary({d, d},
                [&](const Tensor<double>& t) {
                    return ad::multi_head_attention(z, 2, t, wk, wv, wo);
                },
                105, 1e-5);
    check_unary({d, d},
                [&](const Tensor<double>& t) {
                    return ad::multi_head_attention(z, 2, wq, wk, t, wo);
                },
                106, 1e-5);
}

TEST_CASE("shape mismatches are reported, not silently broadcast") {
    Rng rng(107);
    Tensor<double> a = random_const({2, 3}, rng, "a");
    Tensor<double> b = random_const({3, 2}, rng, "b");
    CHECK_THROWS_AS(ad::add(a, b), ad::ShapeMismatch);
    CHECK_THROWS_AS(ad::mul(a, b), ad::ShapeMismatch);
    CHECK_THROWS_AS(ad::reshape(a, {7}), ad::ShapeMismatch);
    CHECK_THROWS_AS(ad::add_rowvec(a, a), ad::ShapeMismatch);
}
