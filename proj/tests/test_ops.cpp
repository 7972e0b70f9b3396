#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "rfcnet/ops.hpp"

using namespace rfcnet;
using rfcnet::testing::check_gradients;
using rfcnet::testing::random_tensor;

namespace {

constexpr double kTol = 1e-4;

// Direct-loop reference for stride-1 same-padded cross-correlation.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b) {
    const Shape xs = x.shape(), ws = w.shape();
    const int pad = ws.h / 2;
    Tensor<double> y(Shape{xs.n, ws.n, xs.h, xs.w});
    for (int n = 0; n < xs.n; ++n)
        for (int o = 0; o < ws.n; ++o)
            for (int i = 0; i < xs.h; ++i)
                for (int j = 0; j < xs.w; ++j) {
                    double acc = b ? (*b)[o] : 0.0;
                    for (int c = 0; c < xs.c; ++c)
                        for (int ki = 0; ki < ws.h; ++ki)
                            for (int kj = 0; kj < ws.w; ++kj) {
                                const int si = i + ki - pad, sj = j + kj - pad;
                                if (si < 0 || sj < 0 || si >= xs.h || sj >= xs.w) continue;
                                acc += x.at(n, c, si, sj) * w.at(o, c, ki, kj);
                            }
                    y.at(n, o, i, j) = acc;
                }
    return y;
}

// Scatter definition of a stride-2 transposed convolution (pad 1, output pad 1).
Tensor<double> naive_conv_transpose(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
    const Shape xs = x.shape(), ws = w.shape();
    Tensor<double> y(Shape{xs.n, ws.c, 2 * xs.h, 2 * xs.w});
    for (int n = 0; n < xs.n; ++n)
        for (int o = 0; o < ws.c; ++o)
            for (int i = 0; i < 2 * xs.h; ++i)
                for (int j = 0; j < 2 * xs.w; ++j) y.at(n, o, i, j) = b[o];
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
            for (int i = 0; i < xs.h; ++i)
                for (int j = 0; j < xs.w; ++j)
                    for (int o = 0; o < ws.c; ++o)
                        for (int ki = 0; ki < 3; ++ki)
                            for (int kj = 0; kj < 3; ++kj) {
                                const int yi = 2 * i - 1 + ki, yj = 2 * j - 1 + kj;
                                if (yi < 0 || yj < 0 || yi >= 2 * xs.h || yj >= 2 * xs.w) continue;
                                y.at(n, o, yi, yj) += x.at(n, c, i, j) * w.at(c, o, ki, kj);
                            }
    return y;
}

}  // namespace

TEST(Conv2d, MatchesDirectLoopsForSeveralKernelSizes) {
    std::mt19937_64 rng(1);
    for (int k : {1, 3, 5, 9}) {
        auto x = random_tensor({2, 3, 7, 6}, rng);
        auto w = random_tensor({4, 3, k, k}, rng);
        auto b = random_tensor({4, 1, 1, 1}, rng);
        auto y = ops::conv2d(Var<double>(x), Var<double>(w), Var<double>(b));
        auto ref = naive_conv(x, w, &b);
        for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.value()[i], ref[i], 1e-12) << "k=" << k;
    }
}

TEST(Conv2d, KernelLargerThanImage) {
    std::mt19937_64 rng(2);
    auto x = random_tensor({1, 2, 3, 3}, rng);
    auto w = random_tensor({2, 2, 9, 9}, rng);
    auto y = ops::conv2d(Var<double>(x), Var<double>(w), Var<double>());
    auto ref = naive_conv(x, w, nullptr);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.value()[i], ref[i], 1e-12);
}

TEST(Conv2d, RejectsChannelMismatch) {
    Var<double> x(Tensor<double>({1, 3, 4, 4}));
    Var<double> w(Tensor<double>({2, 2, 3, 3}));
    EXPECT_THROW(ops::conv2d(x, w, Var<double>()), ShapeMismatch);
}

TEST(ConvTranspose, MatchesScatterDefinition) {
    std::mt19937_64 rng(3);
    auto x = random_tensor({2, 3, 4, 5}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto b = random_tensor({2, 1, 1, 1}, rng);
    auto y = ops::conv_transpose2d_up(Var<double>(x), Var<double>(w), Var<double>(b));
    EXPECT_EQ(y.shape(), (Shape{2, 2, 8, 10}));
    auto ref = naive_conv_transpose(x, w, b);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.value()[i], ref[i], 1e-12);
}

TEST(Gradients, Conv2dAllKernelSizes) {
    std::mt19937_64 rng(4);
    for (int k : {1, 3, 5}) {
        Var<double> x(random_tensor({2, 3, 5, 4}, rng), true);
        Var<double> w(random_tensor({2, 3, k, k}, rng), true);
        Var<double> b(random_tensor({2, 1, 1, 1}, rng), true);
        auto probe = random_tensor({2, 2, 5, 4}, rng);
        auto r = check_gradients([&] { return ops::weighted_sum(ops::conv2d(x, w, b), probe); },
                                 {{"x", &x}, {"w", &w}, {"b", &b}});
        EXPECT_LE(r.max_rel_error, kTol) << "k=" << k << " " << r.worst;
    }
}

TEST(Gradients, ConvTranspose) {
    std::mt19937_64 rng(5);
    Var<double> x(random_tensor({2, 3, 3, 2}, rng), true);
    Var<double> w(random_tensor({3, 2, 3, 3}, rng), true);
    Var<double> b(random_tensor({2, 1, 1, 1}, rng), true);
    auto probe = random_tensor({2, 2, 6, 4}, rng);
    auto r = check_gradients([&] { return ops::weighted_sum(ops::conv_transpose2d_up(x, w, b), probe); },
                             {{"x", &x}, {"w", &w}, {"b", &b}});
    EXPECT_LE(r.max_rel_error, kTol) << r.worst;
}

TEST(Gradients, PoolAndPointwise) {
    std::mt19937_64 rng(6);
    Var<double> a(random_tensor({2, 2, 4, 4}, rng), true);
    Var<double> b(random_tensor({2, 2, 4, 4}, rng), true);
    auto probe = random_tensor({2, 2, 2, 2}, rng);
    auto r = check_gradients(
        [&] {
            auto y = ops::add(ops::mul(ops::sigmoid(a), ops::tanh(b)), ops::relu(a));
            return ops::weighted_sum(ops::max_pool2(y), probe);
        },
        {{"a", &a}, {"b", &b}});
    EXPECT_LE(r.max_rel_error, kTol) << r.worst;
}

TEST(Gradients, ConcatAndSlice) {
    std::mt19937_64 rng(7);
    Var<double> a(random_tensor({2, 2, 3, 3}, rng), true);
    Var<double> b(random_tensor({2, 3, 3, 3}, rng), true);
    auto probe = random_tensor({2, 3, 3, 3}, rng);
    auto probe_b = random_tensor({4, 2, 3, 3}, rng);
    auto r = check_gradients(
        [&] {
            std::vector<Var<double>> parts{a, b, a};
            auto cat = ops::concat_channels<double>(parts);
            std::vector<Var<double>> batch_parts{a, ops::slice_channels(b, 1, 2)};
            auto bcat = ops::concat_batch<double>(batch_parts);
            auto s = ops::add(ops::weighted_sum(ops::slice_channels(cat, 1, 3), probe),
                              ops::weighted_sum(bcat, probe_b));
            return ops::add(s, ops::weighted_sum(ops::slice_batch(bcat, 1, 2), Tensor<double>({2, 2, 3, 3}, 0.5)));
        },
        {{"a", &a}, {"b", &b}});
    EXPECT_LE(r.max_rel_error, kTol) << r.worst;
}

TEST(Gradients, BatchNormTrainingAndEval) {
    std::mt19937_64 rng(8);
    for (bool training : {true, false}) {
        Var<double> x(random_tensor({2, 3, 4, 3}, rng), true);
        Var<double> g(random_tensor({3, 1, 1, 1}, rng), true);
        Var<double> b(random_tensor({3, 1, 1, 1}, rng), true);
        Tensor<double> rm({3, 1, 1, 1}, 0.1), rv({3, 1, 1, 1}, 1.5);
        auto probe = random_tensor({2, 3, 4, 3}, rng);
        auto r = check_gradients(
            [&] { return ops::weighted_sum(ops::batch_norm(x, g, b, rm, rv, training), probe); },
            {{"x", &x}, {"gamma", &g}, {"beta", &b}});
        EXPECT_LE(r.max_rel_error, kTol) << "training=" << training << " " << r.worst;
    }
}

TEST(BatchNorm, TrainingNormalizesAndUpdatesRunningStats) {
    std::mt19937_64 rng(9);
    auto xt = random_tensor({4, 2, 5, 5}, rng, 3.0);
    Var<double> x(xt);
    Var<double> g(Tensor<double>({2, 1, 1, 1}, 1.0)), b(Tensor<double>({2, 1, 1, 1}, 0.0));
    Tensor<double> rm({2, 1, 1, 1}, 0.0), rv({2, 1, 1, 1}, 1.0);
    auto y = ops::batch_norm(x, g, b, rm, rv, true);
    for (int c = 0; c < 2; ++c) {
        double sum = 0, sq = 0, xsum = 0;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 25; ++i) {
                const double v = y.value()[(n * 2 + c) * 25 + i];
                sum += v;
                sq += v * v;
                xsum += xt[(n * 2 + c) * 25 + i];
            }
        EXPECT_NEAR(sum / 100, 0.0, 1e-12);
        EXPECT_NEAR(sq / 100, 1.0, 1e-3);
        EXPECT_NEAR(rm[c], 0.1 * xsum / 100, 1e-12);
    }
}

TEST(CrossEntropy, UniformScoresGiveLogK) {
    Var<double> s(Tensor<double>({2, 14, 3, 3}, 0.7));
    std::vector<std::uint8_t> labels(18, 5);
    EXPECT_NEAR(ops::softmax_cross_entropy(s, labels).value()[0], std::log(14.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginDrivesLossToZero) {
    Tensor<double> t({1, 14, 2, 2}, 0.0);
    std::vector<std::uint8_t> labels{0, 3, 13, 7};
    for (int i = 0; i < 4; ++i) t.at(0, labels[i], i / 2, i % 2) = 1e4;
    EXPECT_LT(ops::softmax_cross_entropy(Var<double>(t), labels).value()[0], 1e-12);
}

TEST(CrossEntropy, RejectsOutOfRangeLabels) {
    Var<double> s(Tensor<double>({1, 14, 1, 2}));
    std::vector<std::uint8_t> labels{0, 14};
    EXPECT_THROW(ops::softmax_cross_entropy(s, labels), ops::LabelOutOfRange);
}

TEST(Gradients, CrossEntropy) {
    std::mt19937_64 rng(10);
    Var<double> s(random_tensor({2, 14, 3, 2}, rng, 2.0), true);
    std::vector<std::uint8_t> labels(12);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng() % 14);
    auto r = check_gradients([&] { return ops::softmax_cross_entropy(s, labels); }, {{"scores", &s}});
    EXPECT_LE(r.max_rel_error, kTol) << r.worst;
}

TEST(Autograd, NoGradGuardSkipsRecording) {
    Var<double> x(Tensor<double>({1, 1, 2, 2}, 1.0), true);
    {
        NoGradGuard guard;
        auto y = ops::relu(x);
        EXPECT_FALSE(y.requires_grad());
    }
    EXPECT_TRUE(ops::relu(x).requires_grad());
}

TEST(Autograd, SharedSubexpressionAccumulates) {
    Var<double> x(Tensor<double>({1, 1, 1, 1}, 3.0), true);
    auto y = ops::mul(x, x);  // dy/dx = 2x
    auto loss = ops::add(y, x);
    loss.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}
