#include <gtest/gtest.h>

#include <cmath>

#include "fixnoise/gradcheck.hpp"
#include "fixnoise/rng.hpp"
#include "fixnoise/tensor.hpp"

using namespace fixnoise;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, double scale_value = 1.0) {
    Rng rng(seed);
    auto data = rng.normals(shape_numel(shape));
    for (auto& v : data) v *= scale_value;
    return Tensor::from_data(std::move(shape), std::move(data));
}

/// Fixed random weighting so every output element matters to the loss.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed) { return sum(mul(y, randn(y.shape(), seed))); }

void expect_values(const Tensor& t, std::vector<double> want) {
    ASSERT_EQ(t.numel(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_DOUBLE_EQ(t[i], want[i]) << "index " << i;
}

}  // namespace

TEST(Tensor, FromDataRejectsLengthMismatch) {
    EXPECT_THROW(Tensor::from_data({2, 3}, std::vector<double>(5)), DimensionError);
    EXPECT_EQ(Tensor::zeros({2, 3, 4}).numel(), 24u);
}

TEST(Matmul, IdentityAndHandComputed) {
    const auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    const auto m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    expect_values(matmul(eye, m), {1, 2, 3, 4});
    expect_values(matmul(Tensor::from_data({1, 2}, {1, 2}), Tensor::from_data({2, 1}, {3, 4})), {11});
}

TEST(Matmul, InnerMismatchNamesBothShapes) {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x2]"), std::string::npos);
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    Tensor a = randn({3, 4}, 1);
    Tensor b = randn({4, 2}, 2);
    const auto r = check_gradients([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}});
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Conv2d, UnitKernelIsIdentity) {
    const Tensor x = randn({2, 1, 4, 5}, 3);
    const Tensor y = conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0));
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, OnesKernelCountsPaddedWindow) {
    const Tensor y = conv2d(Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0));
    expect_values(y, {4, 6, 4, 6, 9, 6, 4, 6, 4});
}

TEST(Conv2d, ChannelMismatchAndEvenKernelRejected) {
    EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3})), DimensionError);
    EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 2, 2, 2})), DimensionError);
}

TEST(Conv2d, WeightAndInputGradients) {
    Tensor x = randn({1, 2, 5, 5}, 4);
    Tensor w = randn({3, 2, 3, 3}, 5);
    const auto r = check_gradients([&] { return weighted_sum(conv2d(x, w), 6); }, {{"x", x}, {"w", w}});
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Conv2d, DirectSumOracle) {
    const Tensor x = randn({2, 3, 4, 5}, 7);
    const Tensor w = randn({2, 3, 3, 3}, 8);
    const Tensor y = conv2d(x, w);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 2; ++o)
            for (long i = 0; i < 4; ++i)
                for (long j = 0; j < 5; ++j) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < 3; ++c)
                        for (long di = -1; di <= 1; ++di)
                            for (long dj = -1; dj <= 1; ++dj) {
                                const long ii = i + di, jj = j + dj;
                                if (ii < 0 || ii >= 4 || jj < 0 || jj >= 5) continue;
                                acc += x[((n * 3 + c) * 4 + ii) * 5 + jj] * w[((o * 3 + c) * 3 + (di + 1)) * 3 + (dj + 1)];
                            }
                    EXPECT_NEAR(y[((n * 2 + o) * 4 + i) * 5 + j], acc, 1e-12);
                }
}

TEST(LeakyRelu, ValuesAndSlopeGradient) {
    expect_values(leaky_relu(Tensor::from_data({2}, {1.0, -1.0})), {1.0, -0.2});
    Tensor x = Tensor::from_data({1}, {-3.0});
    const auto r = check_gradients([&] { return sum(leaky_relu(x)); }, {{"x", x}});
    EXPECT_LT(r.max_rel_error, 1e-5);
    x.set_requires_grad(true);
    sum(leaky_relu(x)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.2);
}

TEST(Resample, ConstantPreservedAndRoundTrip) {
    const Tensor c = Tensor::full({1, 2, 4, 4}, 2.5);
    const Tensor up = resample2x(c, Resample::up);
    ASSERT_EQ(up.shape(), (Shape{1, 2, 8, 8}));
    for (double v : up.data()) EXPECT_NEAR(v, 2.5, 1e-15);
    const Tensor back = resample2x(up, Resample::down);
    ASSERT_EQ(back.shape(), c.shape());
    for (double v : back.data()) EXPECT_NEAR(v, 2.5, 1e-15);
}

TEST(Resample, OddExtentRejectedOnDown) {
    EXPECT_THROW(resample2x(Tensor::zeros({1, 1, 5, 4}), Resample::down), DimensionError);
}

TEST(Resample, GradientsBothDirections) {
    Tensor x = randn({1, 1, 4, 4}, 9);
    auto r = check_gradients([&] { return weighted_sum(resample2x(x, Resample::up), 10); }, {{"x", x}});
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
    r = check_gradients([&] { return weighted_sum(resample2x(x, Resample::down), 11); }, {{"x", x}});
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Backward, SquareGradient) {
    Tensor x = Tensor::from_data({1}, {3.0});
    x.set_requires_grad(true);
    sum(square(x)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
    Tensor x = Tensor::from_data({1}, {3.0});
    x.set_requires_grad(true);
    const Tensor loss = sum(square(x));
    loss.backward();
    loss.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());
}

TEST(Backward, NonScalarLossRejected) {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    EXPECT_THROW(square(x).backward(), ContractError);
}

TEST(Backward, ConvStackGradientsFinite) {
    Tensor x = randn({2, 3, 6, 6}, 12);
    Tensor w = randn({4, 3, 3, 3}, 13);
    w.set_requires_grad(true);
    mean(leaky_relu(conv2d(x, w))).backward();
    ASSERT_TRUE(w.has_grad());
    EXPECT_TRUE(all_finite(w.grad()));
}

TEST(Backward, AccumulationIsLinear) {
    Tensor x = randn({2, 2, 4, 4}, 14);
    Tensor w = randn({2, 2, 3, 3}, 15);
    w.set_requires_grad(true);
    auto l1 = [&] { return mean(square(leaky_relu(conv2d(x, w)))); };
    auto l2 = [&] { return sum(up2x(conv2d(x, w))); };
    const double a = 0.7, b = -1.3;

    add(scale(l1(), a), scale(l2(), b)).backward();
    const std::vector<double> joint(w.grad().begin(), w.grad().end());
    w.zero_grad();
    l1().backward();
    const std::vector<double> g1(w.grad().begin(), w.grad().end());
    w.zero_grad();
    l2().backward();
    const std::vector<double> g2(w.grad().begin(), w.grad().end());
    for (std::size_t i = 0; i < joint.size(); ++i) EXPECT_NEAR(joint[i], a * g1[i] + b * g2[i], 1e-12);
}

TEST(Ops, ElementwiseGradients) {
    Tensor x = randn({3, 4}, 16);
    Tensor y = randn({3, 4}, 17);
    Tensor pos = Tensor::from_data({4}, {0.5, 1.0, 2.0, 3.0});
    struct Case {
        const char* name;
        std::function<Tensor()> fn;
    };
    const std::vector<Case> cases = {
        {"add", [&] { return weighted_sum(add(x, y), 1); }},
        {"sub", [&] { return weighted_sum(sub(x, y), 2); }},
        {"mul", [&] { return weighted_sum(mul(x, y), 3); }},
        {"square", [&] { return weighted_sum(square(x), 4); }},
        {"sigmoid", [&] { return weighted_sum(sigmoid(x), 5); }},
        {"softplus", [&] { return weighted_sum(softplus(x), 6); }},
        {"rsqrt", [&] { return weighted_sum(rsqrt(pos), 7); }},
        {"transpose", [&] { return weighted_sum(transpose(x), 8); }},
        {"mean", [&] { return mean(square(x)); }},
    };
    for (const auto& c : cases) {
        const auto r = check_gradients(c.fn, {{"x", x}, {"y", y}, {"pos", pos}});
        EXPECT_LT(r.max_rel_error, 1e-5) << c.name << " at " << r.worst;
    }
}

TEST(Ops, ChannelBroadcastGradients) {
    Tensor x = randn({2, 3, 4, 4}, 18);
    Tensor b = randn({3}, 19);
    Tensor s = randn({2, 3}, 20);
    Tensor f = randn({2, 1, 4, 4}, 21);
    Tensor k = Tensor::from_data({1}, {0.3});
    Tensor c = randn({1, 3, 4, 4}, 22);
    auto r = check_gradients([&] { return weighted_sum(add_bias(x, b), 1); }, {{"x", x}, {"b", b}});
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
    r = check_gradients([&] { return weighted_sum(mul_channel(x, s), 2); }, {{"x", x}, {"s", s}});
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
    r = check_gradients([&] { return weighted_sum(broadcast_channels(scale_by(f, k), 3), 3); }, {{"f", f}, {"k", k}});
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
    r = check_gradients([&] { return weighted_sum(expand_batch(c, 2), 4); }, {{"c", c}});
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Ops, RsqrtRejectsNonPositive) { EXPECT_THROW(rsqrt(Tensor::from_data({2}, {1.0, 0.0})), DegenerateInputError); }

TEST(Ops, SoftplusIsStableAtExtremes) {
    const Tensor y = softplus(Tensor::from_data({3}, {-800.0, 0.0, 800.0}));
    EXPECT_EQ(y[0], 0.0);
    EXPECT_DOUBLE_EQ(y[1], std::log(2.0));
    EXPECT_DOUBLE_EQ(y[2], 800.0);
}

TEST(DoubleBackward, GradientOfGradientNorm) {
    // d/dw of ||d/dx sum(conv(x, w)^2)||^2 through a recorded backward pass.
    Tensor x = randn({1, 2, 4, 4}, 23);
    Tensor w = randn({2, 2, 3, 3}, 24, 0.5);
    auto penalty = [&] {
        Tensor xi = x.detach();
        xi.set_requires_grad(true);
        const Tensor out = sum(square(leaky_relu(conv2d(down2x(up2x(xi)), w))));
        return sum(square(grad(out, {xi}, true).front()));
    };
    const auto r = check_gradients(penalty, {{"w", w}});
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Tape, ReplayOrderPutsConsumersFirst) {
    Tensor x = randn({2, 2}, 25);
    x.set_requires_grad(true);
    const Tensor y = matmul(x, x);
    const Tensor z = sum(add(y, square(x)));
    const auto tape = ComputationTape::collect(z);
    ASSERT_FALSE(tape.nodes.empty());
    EXPECT_EQ(tape.nodes.front(), z.node().get());
    for (std::size_t i = 1; i < tape.nodes.size(); ++i) EXPECT_GT(tape.nodes[i - 1]->seq, tape.nodes[i]->seq);
}

TEST(Determinism, ForwardIsBitIdentical) {
    const Tensor x = randn({4, 3, 8, 8}, 26);
    const Tensor w = randn({5, 3, 3, 3}, 27);
    const Tensor a = down2x(leaky_relu(conv2d(up2x(x), w)));
    const Tensor b = down2x(leaky_relu(conv2d(up2x(x), w)));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
}
