#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "rfcnet/nn.hpp"

using namespace rfcnet;
using namespace rfcnet::nn;
using rfcnet::testing::check_gradients;
using rfcnet::testing::random_tensor;

namespace {

constexpr double kTol = 1e-4;

template <typename M>
ParamList<double> params_of(M& m) {
    ParamList<double> out;
    m.collect("m", out);
    return out;
}

std::vector<std::pair<std::string, Var<double>*>> with_input(ParamList<double>& p, Var<double>* x) {
    auto list = p.params;
    if (x) list.emplace_back("input", x);
    return list;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

}  // namespace

TEST(DenseUnit, EmitsExactlyGrowthChannels) {
    std::mt19937_64 rng(1);
    DenseUnit<float> du(48, 8, 0.0, rng);
    Var<float> x(Tensor<float>({2, 48, 64, 64}, 0.25f));
    auto y = du.forward(x, RunContext{});
    EXPECT_EQ(y.shape(), (Shape{2, 8, 64, 64}));
}

TEST(DenseUnit, ZeroInputGivesZeroOutputInInferenceMode) {
    std::mt19937_64 rng(2);
    DenseUnit<double> du(4, 3, 0.0, rng);
    Var<double> x(Tensor<double>({1, 4, 5, 5}));
    auto y = du.forward(x, RunContext{});
    for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(DenseUnit, RejectsWrongInputWidth) {
    std::mt19937_64 rng(3);
    DenseUnit<double> du(4, 3, 0.0, rng);
    EXPECT_THROW(du.forward(Var<double>(Tensor<double>({1, 5, 4, 4})), RunContext{}), ShapeMismatch);
}

TEST(DenseUnit, FiniteDifferenceGradients) {
    std::mt19937_64 rng(4);
    DenseUnit<double> du(4, 3, 0.0, rng);
    auto p = params_of(du);
    randomize(p, rng, 0.5);
    Var<double> x(random_tensor({2, 4, 6, 6}, rng), true);
    auto probe = random_tensor({2, 3, 6, 6}, rng);
    RunContext ctx{.training = true};
    auto r = check_gradients([&] { return ops::weighted_sum(du.forward(x, ctx), probe); }, with_input(p, &x));
    EXPECT_LE(r.max_rel_error, kTol) << r.worst;
}

TEST(DenseBlock, ChannelArithmetic) {
    std::mt19937_64 rng(5);
    DenseBlock<float> small(48, 7, 8, 0.0, rng);
    EXPECT_EQ(small.out_channels(), 104);
    EXPECT_EQ(small.new_channels(), 56);
    DenseBlock<float> big(48, 9, 12, 0.0, rng);
    EXPECT_EQ(big.out_channels(), 156);

    auto out = small.forward(Var<float>(Tensor<float>({1, 48, 8, 8}, 0.1f)), RunContext{});
    EXPECT_EQ(out.stack.shape().c, 104);
    EXPECT_EQ(out.new_features.shape().c, 56);
}

TEST(DenseBlock, BatchEquivariance) {
    std::mt19937_64 rng(6);
    DenseBlock<double> block(3, 3, 2, 0.0, rng);
    auto a = random_tensor({1, 3, 6, 6}, rng), b = random_tensor({1, 3, 6, 6}, rng);
    std::vector<Var<double>> ab{Var<double>(a), Var<double>(b)}, ba{Var<double>(b), Var<double>(a)};
    for (bool training : {false, true}) {
        RunContext ctx{.training = training};
        auto y1 = block.forward(ops::concat_batch<double>(ab), ctx).stack.value();
        auto y2 = block.forward(ops::concat_batch<double>(ba), ctx).stack.value();
        const std::size_t half = y1.size() / 2;
        for (std::size_t i = 0; i < half; ++i) {
            ASSERT_NEAR(y1[i], y2[half + i], 1e-12);
            ASSERT_NEAR(y1[half + i], y2[i], 1e-12);
        }
    }
}

TEST(ConvLSTM, ZeroParametersGiveZeroHidden) {
    std::mt19937_64 rng(7);
    ConvLSTMCell<double> cell(3, 4, 5, rng);
    auto p = params_of(cell);
    for (auto& [n, v] : p.params) v->mutable_value().fill(0.0);
    std::normal_distribution<double> dist;
    auto e = random_tensor({2, 3, 6, 6}, rng);
    auto s1 = cell.step(Var<double>(e), {}, RunContext{});
    for (double v : s1.h.value().values()) EXPECT_EQ(v, 0.0);
    auto s2 = cell.step(Var<double>(e), s1, RunContext{});
    for (double v : s2.h.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(ConvLSTM, ParameterCountMatchesClosedForm) {
    std::mt19937_64 rng(8);
    ConvLSTMCell<float> cell(8, 8, 9, rng);
    auto p = ParamList<float>{};
    cell.collect("c", p);
    EXPECT_EQ(p.count(), 23072u);
    EXPECT_EQ(ConvLSTMCell<float>::parameter_count(8, 8, 3, 9), 23072u);
}

TEST(ConvLSTM, ForgetBiasStartsAtOne) {
    std::mt19937_64 rng(9);
    ConvLSTMCell<float> cell(2, 3, 3, rng);
    const auto& b = cell.input_conv().bias().value();
    for (int c = 0; c < 12; ++c) EXPECT_EQ(b[c], (c >= 3 && c < 6) ? 1.0f : 0.0f);
}

TEST(ConvLSTM, FiniteDifferenceGradientsOverTwoSteps) {
    std::mt19937_64 rng(10);
    ConvLSTMCell<double> cell(3, 2, 5, rng);
    auto p = params_of(cell);
    randomize(p, rng, 0.3);
    Var<double> e1(random_tensor({2, 3, 6, 6}, rng), true);
    Var<double> e2(random_tensor({2, 3, 6, 6}, rng), true);
    ConvLSTMState<double> init{Var<double>(random_tensor({2, 2, 6, 6}, rng), true),
                               Var<double>(random_tensor({2, 2, 6, 6}, rng), true)};
    auto probe = random_tensor({2, 2, 6, 6}, rng);
    auto probe_c = random_tensor({2, 2, 6, 6}, rng);
    auto inputs = with_input(p, &e1);
    inputs.emplace_back("e2", &e2);
    inputs.emplace_back("c0", &init.c);
    inputs.emplace_back("h0", &init.h);
    auto r = check_gradients(
        [&] {
            auto s1 = cell.step(e1, init, RunContext{});
            auto s2 = cell.step(e2, s1, RunContext{});
            return ops::add(ops::weighted_sum(s2.h, probe), ops::weighted_sum(s2.c, probe_c));
        },
        inputs);
    EXPECT_LE(r.max_rel_error, kTol) << r.worst;
}

TEST(ConvLSTM, RejectsMismatchedState) {
    std::mt19937_64 rng(11);
    ConvLSTMCell<double> cell(2, 3, 3, rng);
    ConvLSTMState<double> bad{Var<double>(Tensor<double>({1, 3, 4, 4})), Var<double>(Tensor<double>({1, 3, 4, 4}))};
    EXPECT_THROW(cell.step(Var<double>(Tensor<double>({1, 2, 5, 5})), bad, RunContext{}), ShapeMismatch);
}

TEST(FilterModule, FeedForwardWithZeroCellEmitsZero) {
    std::mt19937_64 rng(12);
    FilterModule<double> fm({FilterKind::ff, 4, 1.0, 3}, rng);
    ParamList<double> p;
    fm.cell().collect("c", p);
    for (auto& [n, v] : p.params) v->mutable_value().fill(0.0);
    auto [out, st] = fm.forward(Var<double>(random_tensor({2, 4, 6, 6}, rng)), {}, RunContext{.training = true});
    for (double v : out.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(FilterModule, ResidualWithSilencedCellIsIdentity) {
    std::mt19937_64 rng(13);
    FilterModule<double> fm({FilterKind::res, 4, 1.0, 5}, rng);
    ParamList<double> p;
    fm.cell().collect("c", p);
    for (auto& [n, v] : p.params) v->mutable_value().fill(0.0);
    auto x = random_tensor({2, 4, 6, 6}, rng);
    auto [out, st] = fm.forward(Var<double>(x), {}, RunContext{.training = true});
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(out.value()[i], x[i]);
}

TEST(FilterModule, EncoderDecoderWidths) {
    std::mt19937_64 rng(14);
    FilterModule<float> fm({FilterKind::ed, 8, 2.0, 3}, rng);
    EXPECT_EQ(fm.hidden_channels(), 16);
    auto [out, st] = fm.forward(Var<float>(Tensor<float>({1, 8, 8, 8}, 0.3f)), {}, RunContext{});
    EXPECT_EQ(out.shape().c, 8);
    EXPECT_EQ(st.h.shape().c, 16);
}

TEST(FilterModule, RejectsEmptyEncoder) {
    std::mt19937_64 rng(15);
    EXPECT_THROW(FilterModule<float>({FilterKind::ed, 2, 0.2, 3}, rng), BadAlpha);
    EXPECT_EQ(encoder_width(0.625, 56), 35);
    EXPECT_EQ(encoder_width(0.625, 4), 3);  // 2.5 rounds up
}

TEST(FilterModule, FiniteDifferenceGradientsAllKinds) {
    for (auto kind : {FilterKind::ff, FilterKind::res, FilterKind::ed}) {
        std::mt19937_64 rng(16);
        FilterModule<double> fm({kind, 3, 1.5, 3}, rng);
        auto p = params_of(fm);
        randomize(p, rng, 0.4);
        Var<double> x1(random_tensor({2, 3, 6, 6}, rng), true);
        Var<double> x2(random_tensor({2, 3, 6, 6}, rng), true);
        auto probe = random_tensor({2, 3, 6, 6}, rng);
        RunContext ctx{.training = true};
        auto inputs = with_input(p, &x1);
        inputs.emplace_back("x2", &x2);
        auto r = check_gradients(
            [&] {
                auto [o1, s1] = fm.forward(x1, {}, ctx);
                auto [o2, s2] = fm.forward(x2, s1, ctx);
                return ops::add(ops::weighted_sum(o2, probe), ops::weighted_sum(o1, probe));
            },
            inputs);
        EXPECT_LE(r.max_rel_error, kTol) << to_string(kind) << " " << r.worst;
    }
}

TEST(FilterModule, ChannelConservationOnRandomSpecs) {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> channels(1, 6), kernel(0, 3);
    std::uniform_real_distribution<double> alpha(0.5, 2.5);
    for (int trial = 0; trial < 30; ++trial) {
        const FilterKind kind = std::array{FilterKind::ff, FilterKind::res, FilterKind::ed,
                                           FilterKind::identity}[trial % 4];
        FilterModuleSpec spec{kind, channels(rng), alpha(rng), 2 * kernel(rng) + 1};
        if (kind == FilterKind::ed && std::floor(spec.alpha_ed * spec.channels + 0.5) < 1) continue;
        FilterModule<float> fm(spec, rng);
        auto [out, st] = fm.forward(Var<float>(Tensor<float>({1, spec.channels, 4, 4}, 0.5f)), {}, RunContext{});
        EXPECT_EQ(out.shape().c, spec.channels);
    }
}

TEST(FilterModule, EncoderParameterMonotonicity) {
    std::mt19937_64 rng(18);
    ParamList<float> p1, p2;
    FilterModule<float> ed1({FilterKind::ed, 8, 1.0, 5}, rng), ed2({FilterKind::ed, 8, 2.0, 5}, rng);
    ed1.collect("a", p1);
    ed2.collect("b", p2);
    EXPECT_GT(p1.count(), 0u);
    EXPECT_GT(p2.count(), p1.count());
}

TEST(FilterModule, TemporalStatefulness) {
    for (auto kind : {FilterKind::ff, FilterKind::res, FilterKind::ed, FilterKind::identity}) {
        std::mt19937_64 rng(19);
        FilterModule<float> fm({kind, 4, 1.0, 3}, rng);
        auto a = random_tensor({1, 4, 6, 6}, rng).cast<float>();
        auto b = random_tensor({1, 4, 6, 6}, rng).cast<float>();
        auto second = random_tensor({1, 4, 6, 6}, rng).cast<float>();
        RunContext ctx;
        auto [oa, sa] = fm.forward(Var<float>(a), {}, ctx);
        auto [ob, sb] = fm.forward(Var<float>(b), {}, ctx);
        auto ya = fm.forward(Var<float>(second), sa, ctx).first.value();
        auto yb = fm.forward(Var<float>(second), sb, ctx).first.value();
        if (kind == FilterKind::identity) {
            EXPECT_TRUE(bit_equal(ya, yb));
        } else {
            EXPECT_FALSE(bit_equal(ya, yb)) << to_string(kind);
        }
    }
}

TEST(RecurrentDenseBlock, IdentityFiltersReduceToDenseBlock) {
    std::mt19937_64 rng(20);
    DenseBlock<float> plain(6, 3, 4, 0.0, rng);
    RecurrentDenseBlock<float> rec(6, 3, 4, 0.0, {FilterKind::identity, 0, 1.0, 3}, rng);
    ParamList<float> src, dst;
    plain.collect("b", src);
    rec.collect("b", dst);
    ASSERT_EQ(src.params.size(), dst.params.size());
    for (std::size_t i = 0; i < src.params.size(); ++i) dst.params[i].second->mutable_value() = src.params[i].second->value();
    std::vector<ConvLSTMState<float>> states(3);
    for (int frame = 0; frame < 3; ++frame) {
        auto x = Var<float>(random_tensor({2, 6, 8, 8}, rng).cast<float>());
        RunContext ctx{.training = true};
        auto a = plain.forward(x, ctx);
        auto b = rec.forward(x, states, ctx);
        EXPECT_TRUE(bit_equal(a.stack.value(), b.stack.value()));
        EXPECT_TRUE(bit_equal(a.new_features.value(), b.new_features.value()));
    }
}

TEST(RecurrentDenseBlock, ChannelsAndStateShapes) {
    std::mt19937_64 rng(21);
    RecurrentDenseBlock<float> block(48, 7, 8, 0.0, {FilterKind::ff, 0, 1.0, 9}, rng);
    EXPECT_EQ(block.out_channels(), 104);
    std::vector<ConvLSTMState<float>> states(7);
    auto out = block.forward(Var<float>(Tensor<float>({1, 48, 8, 8}, 0.2f)), states, RunContext{});
    EXPECT_EQ(out.stack.shape().c, 104);
    EXPECT_EQ(out.new_features.shape().c, 56);
    for (const auto& s : states) {
        ASSERT_FALSE(s.empty());
        EXPECT_EQ(s.h.shape(), (Shape{1, 8, 8, 8}));
        EXPECT_EQ(s.c.shape(), (Shape{1, 8, 8, 8}));
    }
}

TEST(RecurrentDenseBlock, StateWidthEqualsGrowthOnRandomSpecs) {
    std::mt19937_64 rng(22);
    std::uniform_int_distribution<int> in(1, 12), layers(1, 4), growth(1, 6);
    for (int trial = 0; trial < 20; ++trial) {
        const int c = in(rng), l = layers(rng), k = growth(rng);
        RecurrentDenseBlock<float> block(c, l, k, 0.0, {FilterKind::res, 0, 1.0, 3}, rng);
        std::vector<ConvLSTMState<float>> states(l);
        block.forward(Var<float>(Tensor<float>({1, c, 4, 4}, 0.1f)), states, RunContext{});
        for (const auto& s : states) EXPECT_EQ(s.h.shape().c, k);
    }
}

TEST(RecurrentDenseBlock, RejectsWrongStateCount) {
    std::mt19937_64 rng(23);
    RecurrentDenseBlock<float> block(4, 2, 2, 0.0, {FilterKind::ff, 0, 1.0, 3}, rng);
    std::vector<ConvLSTMState<float>> states(3);
    EXPECT_THROW(block.forward(Var<float>(Tensor<float>({1, 4, 4, 4})), states, RunContext{}), StateCountMismatch);
}

TEST(RecurrentDenseBlock, FiniteDifferenceGradients) {
    std::mt19937_64 rng(24);
    RecurrentDenseBlock<double> block(3, 2, 2, 0.0, {FilterKind::ed, 0, 1.0, 3}, rng);
    auto p = params_of(block);
    randomize(p, rng, 0.4);
    Var<double> x1(random_tensor({2, 3, 4, 4}, rng), true);
    Var<double> x2(random_tensor({2, 3, 4, 4}, rng), true);
    auto probe = random_tensor({2, 7, 4, 4}, rng);
    RunContext ctx{.training = true};
    auto r = check_gradients(
        [&] {
            std::vector<ConvLSTMState<double>> states(2);
            block.forward(x1, states, ctx);
            return ops::weighted_sum(block.forward(x2, states, ctx).stack, probe);
        },
        with_input(p, &x1));
    EXPECT_LE(r.max_rel_error, kTol) << r.worst;
}

TEST(Transitions, ShapesAndGradients) {
    std::mt19937_64 rng(25);
    TransitionDown<double> down(3, 0.0, rng);
    TransitionUp<double> up(3, 2, rng);
    auto pd = params_of(down);
    auto pu = params_of(up);
    randomize(pd, rng, 0.5);
    Var<double> x(random_tensor({2, 3, 6, 6}, rng), true);
    auto y = up.forward(down.forward(x, RunContext{.training = true}));
    EXPECT_EQ(y.shape(), (Shape{2, 2, 6, 6}));
    auto probe = random_tensor({2, 2, 6, 6}, rng);
    auto inputs = with_input(pd, &x);
    for (auto& e : pu.params) inputs.push_back(e);
    auto r = check_gradients(
        [&] { return ops::weighted_sum(up.forward(down.forward(x, RunContext{.training = true})), probe); }, inputs);
    EXPECT_LE(r.max_rel_error, kTol) << r.worst;
}

TEST(Conv, SpatioTemporalMatchesExplicitSum) {
    std::mt19937_64 rng(26);
    Conv<double> conv(2, 3, 3, true, rng, true);
    auto p = params_of(conv);
    randomize(p, rng, 0.5);
    const int t_len = 3, batch = 2;
    auto clip = random_tensor({t_len * batch, 2, 5, 5}, rng);
    auto y = conv.forward(Var<double>(clip), RunContext{.clip_length = t_len}).value();
    // Frame t of sample b sits at batch index t*batch + b.
    for (int t = 0; t < t_len; ++t) {
        auto frame = [&](int tt) { return ops::slice_batch(Var<double>(clip), tt * batch, batch); };
        Var<double> expected = ops::conv2d(frame(t), conv.weights()[1], conv.bias());
        if (t > 0) expected = ops::add(expected, ops::conv2d(frame(t - 1), conv.weights()[0], Var<double>()));
        if (t < t_len - 1) expected = ops::add(expected, ops::conv2d(frame(t + 1), conv.weights()[2], Var<double>()));
        for (std::size_t i = 0; i < expected.value().size(); ++i) {
            ASSERT_NEAR(y[t * expected.value().size() + i], expected.value()[i], 1e-12);
        }
    }
}
