#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "kpu/autodiff/grad_check.hpp"
#include "kpu/autodiff/ops.hpp"
#include "kpu/kernels/kernels.hpp"
#include "kpu/rng.hpp"

using namespace kpu;
using Td = Tensor<double>;

namespace {

Td random_tensor(Shape shape, std::uint64_t seed, bool grad = true) {
    CounterRng rng(seed);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Td(std::move(shape), std::move(v), grad);
}

std::vector<double> grad_of(const Td& t) { return {t.grad().begin(), t.grad().end()}; }

} // namespace

TEST(Tensor, RejectsZeroDimsAndLengthMismatch) {
    EXPECT_THROW(Td({0, 3}, {}), ShapeError);
    EXPECT_THROW(Td({2, 2}, {1, 2, 3}), ShapeError);
    EXPECT_THROW(Td({2}, {1, 2}).item(), ShapeError);
}

TEST(Tape, BackwardTwiceWithoutResetThrows) {
    Td x({2}, {1.0, 2.0}, true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Td y = sum(mul(x, x));
    tape.backward(y);
    EXPECT_THROW(tape.backward(y), Error);
    tape.reset();
    x.clear_grad();
    Td z = sum(mul(x, x));
    tape.backward(z);
    EXPECT_EQ(grad_of(x), (std::vector<double>{2.0, 4.0}));
}

TEST(Tape, NonScalarRootThrows) {
    Td x({2}, {1.0, 2.0}, true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Td y = scale(x, 2.0);
    EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Tape, LeafUsedTwiceAccumulates) {
    // f = sum(x*x + x), df/dx = 2x + 1
    Td x({3}, {0.5, -1.0, 2.0}, true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        Td f = sum(add(mul(x, x), x));
        tape.backward(f);
    }
    EXPECT_EQ(grad_of(x), (std::vector<double>{2.0, -1.0, 5.0}));
}

TEST(Tape, NoActiveTapeRecordsNothing) {
    Td x({2}, {1.0, 2.0}, true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        NoTapeScope<double> off;
        (void)sum(mul(x, x));
    }
    EXPECT_EQ(tape.size(), 0u);
    {
        TapeScope<double> scope(tape);
        (void)sum(mul(x, x));
    }
    EXPECT_EQ(tape.size(), 2u);
}

TEST(Tape, ConstantsDoNotRecord) {
    Td a({2}, {1.0, 2.0}), b({2}, {3.0, 4.0});
    Tape<double> tape;
    TapeScope<double> scope(tape);
    (void)mul(a, b);
    EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, RootFromAnotherTapeRejected) {
    Td x({2}, {1.0, 2.0}, true);
    Tape<double> t1, t2;
    Td y;
    {
        TapeScope<double> scope(t1);
        y = sum(x);
    }
    EXPECT_THROW(t2.backward(y), Error);
}

TEST(Guard, NonFiniteValuesRaiseWhenEnabled) {
    const bool prev = nonfinite_guard();
    set_nonfinite_guard(true);
    Td x({2}, {1.0, std::numeric_limits<double>::infinity()});
    EXPECT_THROW(scale(x, 2.0), NonFiniteError);
    set_nonfinite_guard(false);
    EXPECT_NO_THROW(scale(x, 2.0));
    set_nonfinite_guard(prev);
}

TEST(Ops, MatmulHandComputed) {
    Td a({2, 2}, {1, 2, 3, 4}), b({2, 2}, {5, 6, 7, 8});
    const Td c = matmul(a, b);
    EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Ops, BroadcastIsLeadingAxisOnly) {
    Td row({3}, {1, 2, 3});
    const Td b = broadcast_to(row, {2, 3});
    EXPECT_EQ(std::vector<double>(b.data().begin(), b.data().end()), (std::vector<double>{1, 2, 3, 1, 2, 3}));
    Td col({2, 1}, {1, 2});
    EXPECT_THROW(broadcast_to(col, {2, 3}), ShapeError);
    EXPECT_THROW(add(Td({2, 3}, std::vector<double>(6, 1.0)), row), ShapeError);
}

TEST(Ops, BroadcastBackwardSumsOverLeadingAxis) {
    Td row({2}, {1, 2}, true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        Td w({3, 2}, {1, 2, 3, 4, 5, 6});
        tape.backward(sum(mul(broadcast_to(row, {3, 2}), w)));
    }
    EXPECT_EQ(grad_of(row), (std::vector<double>{9, 12}));
}

TEST(Ops, SoftmaxKnownValues) {
    const Td s = softmax(Td({1, 3}, {1, 2, 3}));
    EXPECT_NEAR(s[0], 0.09003057317038046, 1e-15);
    EXPECT_NEAR(s[1], 0.24472847105479767, 1e-15);
    EXPECT_NEAR(s[2], 0.6652409557748219, 1e-15);
}

TEST(Ops, SoftmaxShiftInvariantAndNormalized) {
    const Td x = random_tensor({4, 5}, 3, false);
    const Td a = softmax(x), b = softmax(add_scalar(x, 100.0));
    for (std::size_t r = 0; r < 4; ++r) {
        double total = 0;
        for (std::size_t c = 0; c < 5; ++c) {
            total += a[r * 5 + c];
            EXPECT_NEAR(a[r * 5 + c], b[r * 5 + c], 1e-12);
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Ops, GeluUsesErf) {
    const Td g = gelu(Td({3}, {-1.0, 0.0, 1.0}));
    EXPECT_NEAR(g[2], 0.8413447460685429, 1e-15);
    EXPECT_NEAR(g[1], 0.0, 1e-15);
    EXPECT_NEAR(g[0], -0.15865525393145707, 1e-15);
}

TEST(Ops, LayerNormMatchesFormula) {
    const Td y = layer_norm(Td({1, 4}, {1, 2, 3, 4}));
    const double inv = 1.0 / std::sqrt(1.25 + 1e-5);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], (static_cast<double>(i + 1) - 2.5) * inv, 1e-14);
}

TEST(Ops, BilinearResizeIsCornerAligned) {
    // 2x2 grid with D=1 upsampled to 3x3: corners kept, midpoints averaged.
    const Td up = bilinear_resize(Td({2, 2, 1}, {0, 1, 2, 3}), 3, 3);
    const std::vector<double> expect{0, 0.5, 1, 1, 1.5, 2, 2, 2.5, 3};
    for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(up[i], expect[i]);
    const Td same = bilinear_resize(Td({2, 2, 1}, {0, 1, 2, 3}), 2, 2);
    EXPECT_EQ(std::vector<double>(same.data().begin(), same.data().end()), (std::vector<double>{0, 1, 2, 3}));
    const Td down = bilinear_resize(up, 2, 2);
    EXPECT_EQ(std::vector<double>(down.data().begin(), down.data().end()), (std::vector<double>{0, 1, 2, 3}));
}

TEST(Ops, SmoothL1BothRegimes) {
    // |d| = 0.5 -> 0.5 d^2 = 0.125; |d| = 2 -> |d| - 0.5 = 1.5
    const Td l = smooth_l1(Td({2}, {0.5, 2.0}), Td({2}, {0.0, 0.0}), 1.0);
    EXPECT_DOUBLE_EQ(l.item(), (0.125 + 1.5) / 2.0);
    const Td lb = smooth_l1(Td({1}, {1.0}), Td({1}, {0.0}), 2.0);
    EXPECT_DOUBLE_EQ(lb.item(), 0.25); // 0.5 d^2 / beta
}

TEST(Ops, RowCosineAndDegenerateRows) {
    const Td c = row_cosine(Td({3, 2}, {1, 0, 1, 1, 0, 0}), Td({3, 2}, {0, 1, 2, 2, 1, 1}));
    EXPECT_NEAR(c[0], 0.0, 1e-15);
    EXPECT_NEAR(c[1], 1.0, 1e-15);
    EXPECT_EQ(c[2], 0.0); // zero-norm row: neutral, contributes loss 1

    Td a({1, 2}, {0, 0}, true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        tape.backward(sum(row_cosine(a, Td({1, 2}, {1, 1}))));
    }
    EXPECT_EQ(grad_of(a), (std::vector<double>{0, 0}));
}

TEST(Ops, Conv2dMatchesNaiveOracle) {
    const std::size_t C = 2, H = 5, W = 4, Co = 3, k = 3, stride = 2, pad = 1;
    const Td x = random_tensor({C, H, W}, 11, false), w = random_tensor({Co, C, k, k}, 12, false),
             b = random_tensor({Co}, 13, false);
    const Td y = conv2d(x, w, b, stride, pad);
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{Co, Ho, Wo}));
    EXPECT_EQ(Ho, 3u); // ceil(5 / 2)
    EXPECT_EQ(Wo, 2u); // ceil(4 / 2)
    for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                double acc = b[co];
                for (std::size_t ci = 0; ci < C; ++ci)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                            acc += w[((co * C + ci) * k + ky) * k + kx] * x[(ci * H + iy) * W + ix];
                        }
                EXPECT_NEAR(y[(co * Ho + oy) * Wo + ox], acc, 1e-12);
            }
}

TEST(Ops, ConcatSliceRoundTrip) {
    const Td a = random_tensor({3, 4}, 5, false);
    const Td left = slice(a, 1, 0, 1), right = slice(a, 1, 1, 4);
    const Td back = concat<double>({left, right}, 1);
    EXPECT_EQ(std::vector<double>(back.data().begin(), back.data().end()),
              std::vector<double>(a.data().begin(), a.data().end()));
}

TEST(GradCheck, DetectsWrongGradient) {
    Td x = random_tensor({4}, 9);
    set_injected_fault("smooth_l1");
    const auto report = grad_check<double>([&] { return smooth_l1(x, Td({4}, {0, 0, 0, 0}), 1.0); },
                                           {{"x", x}}, 1e-3, 1e-5);
    set_injected_fault("");
    EXPECT_FALSE(report.passed);
    EXPECT_EQ(report.worst_param, "x");
}

TEST(GradCheck, FrozenParamsReportedNoGrad) {
    Td x = random_tensor({4}, 9);
    Td frozen = random_tensor({4}, 10, false);
    const auto report = grad_check<double>([&] { return sum(mul(x, frozen)); }, {{"x", x}, {"frozen", frozen}},
                                           1e-3, 1e-5);
    EXPECT_TRUE(report.passed);
    EXPECT_TRUE(report.params[1].no_grad);
}

TEST(GradCheck, RelativeErrorFloor) {
    EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-3);
    EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
}

// ---- kernels: parallel vs serial reference --------------------------------

class KernelParity : public ::testing::TestWithParam<int> {};

TEST_P(KernelParity, GemmFamilyBitIdentical) {
    kernels::set_num_threads(GetParam());
    CounterRng rng(42);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t m = 1 + rng.below(40), k = 1 + rng.below(40), n = 1 + rng.below(40);
        std::vector<float> a(m * k), b(k * n), bt(n * k), at(k * m);
        for (auto* v : {&a, &b, &bt, &at})
            for (auto& x : *v) x = static_cast<float>(rng.uniform(-1, 1));
        std::vector<float> c1(m * n), c2(m * n);
        kernels::gemm<float>(a, b, c1, m, k, n);
        kernels::reference::gemm<float>(a, b, c2, m, k, n);
        EXPECT_EQ(c1, c2);
        kernels::gemm_nt<float>(a, bt, c1, m, k, n);
        kernels::reference::gemm_nt<float>(a, bt, c2, m, k, n);
        EXPECT_EQ(c1, c2);
        kernels::gemm_tn<float>(at, b, c1, m, k, n);
        kernels::reference::gemm_tn<float>(at, b, c2, m, k, n);
        EXPECT_EQ(c1, c2);
    }
    kernels::set_num_threads(1);
}

TEST_P(KernelParity, ConvFamilyBitIdentical) {
    kernels::set_num_threads(GetParam());
    CounterRng rng(7);
    for (int trial = 0; trial < 4; ++trial) {
        kernels::Conv2dGeometry g{1 + rng.below(4), 3 + rng.below(9), 3 + rng.below(9), 1 + rng.below(5), 3,
                                  1 + rng.below(2), 1};
        auto fill = [&](std::size_t n) {
            std::vector<float> v(n);
            for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
            return v;
        };
        const auto x = fill(g.channels * g.height * g.width), w = fill(g.out_channels * g.channels * 9),
                   b = fill(g.out_channels), go = fill(g.out_channels * g.out_height() * g.out_width());
        std::vector<float> y1(go.size()), y2(go.size());
        kernels::conv2d_forward<float>(x, w, b, y1, g);
        kernels::reference::conv2d_forward<float>(x, w, b, y2, g);
        EXPECT_EQ(y1, y2);
        std::vector<float> gi1(x.size()), gi2(x.size());
        kernels::conv2d_backward_input<float>(go, w, gi1, g);
        kernels::reference::conv2d_backward_input<float>(go, w, gi2, g);
        EXPECT_EQ(gi1, gi2);
        std::vector<float> gw1(w.size()), gw2(w.size()), gb1(b.size()), gb2(b.size());
        kernels::conv2d_backward_weight<float>(go, x, gw1, gb1, g);
        kernels::reference::conv2d_backward_weight<float>(go, x, gw2, gb2, g);
        EXPECT_EQ(gw1, gw2);
        EXPECT_EQ(gb1, gb2);
    }
    kernels::set_num_threads(1);
}

INSTANTIATE_TEST_SUITE_P(Threads, KernelParity, ::testing::Values(1, 2, 3, 4));
