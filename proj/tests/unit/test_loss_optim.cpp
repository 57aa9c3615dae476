#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "cseg/adam.hpp"
#include "cseg/cascade.hpp"
#include "cseg/errors.hpp"
#include "cseg/layers.hpp"
#include "cseg/loss.hpp"
#include "cseg/phantom.hpp"
#include "cseg/trainer.hpp"
#include "test_support.hpp"

using namespace cseg;
using cseg::testing::check_gradient;
using cseg::testing::random_tensor;

namespace {

std::vector<std::uint8_t> random_target(std::size_t n, std::mt19937_64& rng, int max_label = 4) {
  std::vector<std::uint8_t> t(n);
  std::uniform_int_distribution<int> u(0, max_label);
  for (auto& v : t) v = static_cast<std::uint8_t>(u(rng));
  return t;
}

Tensor<double> one_hot(const std::vector<std::uint8_t>& target, Shape spatial, std::size_t batch = 1) {
  Shape shape{batch, 5};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  Tensor<double> p(shape, 0.0);
  const std::size_t s = p.spatial_size();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t v = 0; v < s; ++v) p[(b * 5 + target[b * s + v]) * s + v] = 1.0;
  return p;
}

// Direct per-class summation with the batch pooled, foreground classes
// present in the target only.
double dice_oracle(const Tensor<double>& p, const std::vector<std::uint8_t>& g, double eps) {
  const std::size_t b = p.batch(), s = p.spatial_size();
  double sum = 0;
  int present = 0;
  for (std::size_t c = 1; c < 5; ++c) {
    double inter = 0, ps = 0, gs = 0;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t v = 0; v < s; ++v) {
        const double pc = p[(n * 5 + c) * s + v];
        const double gc = g[n * s + v] == c ? 1.0 : 0.0;
        inter += pc * gc;
        ps += pc;
        gs += gc;
      }
    if (gs == 0) continue;
    ++present;
    sum += (2 * inter + eps) / (ps + gs + eps);
  }
  return present ? 1.0 - sum / present : 0.0;
}

}  // namespace

TEST(CrossEntropy, PerfectPredictionIsZero) {
  std::mt19937_64 rng(1);
  const auto t = random_target(27, rng);
  EXPECT_NEAR(ce_loss(one_hot(t, {3, 3, 3}), t).value, 0.0, 1e-15);
}

TEST(CrossEntropy, UniformPredictionIsLogFive) {
  std::mt19937_64 rng(2);
  const auto t = random_target(32, rng);
  EXPECT_NEAR(ce_loss(Tensor<double>({2, 5, 4, 4}, 0.2), t).value, std::log(5.0), 1e-12);
  EXPECT_NEAR(std::log(5.0), 1.60944, 1e-5);
}

TEST(CrossEntropy, RejectsBadLabelsAndLengths) {
  const Tensor<double> p({1, 5, 2, 2}, 0.2);
  EXPECT_THROW(ce_loss(p, std::vector<std::uint8_t>{0, 1, 5, 2}), std::invalid_argument);
  EXPECT_THROW(ce_loss(p, std::vector<std::uint8_t>{0, 1, 2}), ShapeError);
}

TEST(SoftDice, PerfectAndDisjoint) {
  std::mt19937_64 rng(3);
  const auto t = random_target(64, rng);
  EXPECT_NEAR(soft_dice_loss(one_hot(t, {4, 4, 4}), t).value, 0.0, 1e-6);

  // Target all class 1, prediction all class 2: per-class dice of class 1 is ~0.
  std::vector<std::uint8_t> g(16, 1), wrong(16, 2);
  EXPECT_NEAR(soft_dice_loss(one_hot(wrong, {4, 4}), g).value, 1.0, 1e-6);
}

TEST(SoftDice, HalfProbabilityClosedForm) {
  // p = 0.5 on every voxel of every channel, target one-hot. Per present
  // class c: (2*0.5*|G_c| + eps) / (0.5*N + |G_c| + eps).
  std::mt19937_64 rng(4);
  const std::size_t n = 512;
  const auto g = random_target(n, rng);
  const double eps = kDiceSmoothing;
  double expected = 0;
  int present = 0;
  for (int c = 1; c < 5; ++c) {
    const double gc = static_cast<double>(std::count(g.begin(), g.end(), c));
    if (gc == 0) continue;
    ++present;
    expected += (2 * 0.5 * gc + eps) / (0.5 * n + gc + eps);
  }
  expected = 1 - expected / present;
  EXPECT_NEAR(soft_dice_loss(Tensor<double>({1, 5, 8, 8, 8}, 0.5), g).value, expected, 1e-12);
}

TEST(SoftDice, MatchesDirectSummationOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = softmax_channels(random_tensor({1, 5, 8, 8, 8}, rng, -3, 3));
    // Some trials miss classes so the present-class rule is exercised.
    const auto g = random_target(512, rng, trial % 4 + 1);
    EXPECT_NEAR(soft_dice_loss(p, g).value, dice_oracle(p, g, kDiceSmoothing), 1e-12);
  }
  const auto p = softmax_channels(random_tensor({1, 5, 4, 4}, rng));
  EXPECT_EQ(soft_dice_loss(p, std::vector<std::uint8_t>(16, 0)).value, 0.0);
}

TEST(Losses, GradientsMatchFiniteDifferencesThroughSoftmax) {
  std::mt19937_64 rng(6);
  for (const Shape& shape : {Shape{2, 5, 3, 4}, Shape{1, 5, 3, 3, 2}}) {
    auto z = random_tensor(shape, rng, -2, 2);
    const auto t = random_target(shape_numel(shape) / 5, rng);
    const auto probs = softmax_channels(z);
    // Smooth objectives with gradients down to ~1e-6: a wider step keeps the
    // central difference out of roundoff.
    const double h = 1e-4;

    const auto ce = ce_loss(probs, t);
    auto ce_obj = [&] { return ce_loss(softmax_channels(z), t).value; };
    EXPECT_LT(check_gradient(z, ce.logit_grad, ce_obj, 1000, rng, h).max_rel_error, 1e-5);

    const auto dl = soft_dice_loss(probs, t);
    auto dice_obj = [&] { return soft_dice_loss(softmax_channels(z), t).value; };
    EXPECT_LT(check_gradient(z, dl.logit_grad, dice_obj, 1000, rng, h).max_rel_error, 1e-5);

    const auto all = combined_loss(probs, t);
    auto total_obj = [&] { return combined_loss(softmax_channels(z), t).value.total; };
    EXPECT_LT(check_gradient(z, all.logit_grad, total_obj, 1000, rng, h).max_rel_error, 1e-5);
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(all.logit_grad[i], ce.logit_grad[i] + dl.logit_grad[i], 1e-15);
  }
}

TEST(Losses, CombinedIsExactSum) {
  std::mt19937_64 rng(7);
  const auto p = softmax_channels(random_tensor({1, 5, 6, 6}, rng));
  const auto t = random_target(36, rng);
  const auto r = combined_loss(p, t);
  EXPECT_EQ(r.value.total, r.value.ce + r.value.dice);
  EXPECT_EQ(r.value.ce, ce_loss(p, t).value);
  EXPECT_EQ(r.value.dice, soft_dice_loss(p, t).value);
  EXPECT_NEAR(combined_loss(one_hot(t, {6, 6}), t).value.total, 0.0, 1e-6);
}

TEST(Adam, ScalarOracle) {
  AdamOptions opt;
  opt.total_steps = 10;
  std::vector<NamedTensor<double>> params{{"w", Tensor<double>({1}, 0.0)}};
  AdamState<double> state(opt, params);
  adam_step(state, params, {Tensor<double>({1}, 1.0)});
  // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1.
  const double lr1 = 0.01 * std::pow(1.0 - 1.0 / 10.0, 0.9);
  EXPECT_NEAR(params[0].value[0], -lr1 * 1.0 / (1.0 + 1e-8), 1e-15);

  // A second step with the same gradient, by hand.
  adam_step(state, params, {Tensor<double>({1}, 1.0)});
  const double m = 0.9 * 0.1 + 0.1, v = 0.999 * 0.001 + 0.001;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double lr2 = 0.01 * std::pow(1.0 - 2.0 / 10.0, 0.9);
  EXPECT_NEAR(params[0].value[0], -lr1 / (1.0 + 1e-8) - lr2 * mh / (std::sqrt(vh) + 1e-8), 1e-15);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::mt19937_64 rng(8);
  std::vector<NamedTensor<double>> params{{"a", random_tensor({3, 2}, rng)}, {"b", random_tensor({4}, rng)}};
  const auto before = params;
  AdamOptions opt;
  opt.total_steps = 5;
  AdamState<double> state(opt, params);
  adam_step(state, params, {Tensor<double>({3, 2}, 0.0), Tensor<double>({4}, 0.0)});
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i].value, before[i].value);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, NonFiniteGradientLeavesEverythingUntouched) {
  std::vector<NamedTensor<double>> params{{"a", Tensor<double>({2}, 1.0)}, {"b", Tensor<double>({2}, 2.0)}};
  AdamOptions opt;
  opt.total_steps = 5;
  AdamState<double> state(opt, params);
  adam_step(state, params, {Tensor<double>({2}, 0.5), Tensor<double>({2}, 0.5)});
  const auto params_before = params;
  const auto state_before = state;
  EXPECT_THROW(adam_step(state, params, {Tensor<double>({2}, 0.5), Tensor<double>({2}, std::nan(""))}),
               NumericError);
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i].value, params_before[i].value);
  EXPECT_EQ(state.step, state_before.step);
  EXPECT_EQ(state.first_moment, state_before.first_moment);
}

TEST(Adam, PolySchedule) {
  AdamOptions opt;
  opt.total_steps = 100;
  EXPECT_EQ(poly_learning_rate(opt, 0), 0.01);
  EXPECT_NEAR(poly_learning_rate(opt, 50), 0.01 * std::pow(0.5, 0.9), 1e-15);
  EXPECT_EQ(poly_learning_rate(opt, 100), 0.0);
  EXPECT_EQ(poly_learning_rate(opt, 150), 0.0);
}

namespace {

UNetConfig tiny(std::size_t depth = 1) {
  UNetConfig c = UNetConfig::default_2d();
  c.depth = depth;
  c.base_channels = 4;
  return c;
}

std::vector<Sample<float>> phantom_slices(std::size_t cases, std::uint64_t seed) {
  PhantomSpec base;
  base.extents = {48, 48, 4};
  std::vector<Sample<float>> out;
  for (const auto& spec : phantom_cohort(base, cases, seed, 0.67)) {
    const auto p = generate_phantom(spec);
    for (auto& s : slice_samples(zscore_normalize(p.image), p.labels)) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(Training, ConstantLabelSliceConverges) {
  // A constant image is flattened to zero by instance norm, so a noise
  // image is used; the label alone must be learned, mostly via the head bias.
  UNet<float> net(tiny(), 1);
  std::mt19937_64 rng(12);
  const auto noise = random_tensor({1, 1, 16, 16}, rng);
  Tensor<float> image({1, 1, 16, 16});
  for (std::size_t i = 0; i < image.size(); ++i) image[i] = static_cast<float>(noise[i]);
  std::vector<Sample<float>> samples{{"const", image, std::vector<std::uint8_t>(256, 2)}};
  AdamOptions opt;
  opt.lr0 = 0.05;
  opt.total_steps = 50;
  AdamState<float> state(opt, net.parameters());
  EpochStats last;
  for (std::size_t e = 0; e < 50; ++e) last = train_epoch(net, std::span<const Sample<float>>(samples), state, 1, e);
  EXPECT_LT(last.mean.total, 0.1);
}

TEST(Training, EpochStatsAreMeansOfPerSampleLosses) {
  auto samples = phantom_slices(1, 2);
  UNet<float> net(tiny(), 2);
  AdamOptions opt;
  opt.lr0 = 0.0;  // frozen weights make the per-sample losses reproducible
  opt.total_steps = samples.size();
  AdamState<float> state(opt, net.parameters());
  const auto stats = train_epoch(net, std::span<const Sample<float>>(samples), state, 3, 0);
  LossValue sum;
  for (const auto& s : samples) {
    const auto v = combined_loss(net.forward(s.image), s.labels).value;
    sum.ce += v.ce;
    sum.dice += v.dice;
    sum.total += v.total;
  }
  const double n = static_cast<double>(samples.size());
  EXPECT_NEAR(stats.mean.ce, sum.ce / n, 1e-12);
  EXPECT_NEAR(stats.mean.dice, sum.dice / n, 1e-12);
  EXPECT_NEAR(stats.mean.total, sum.total / n, 1e-12);
}

TEST(Training, NoNaNAcross200StepsAndDeterministic) {
  const auto samples = phantom_slices(2, 4);
  ASSERT_EQ(samples.size(), 8u);
  TrainOptions opt;
  opt.epochs = 25;
  opt.seed = 9;
  opt.augment.enabled = true;
  UNet<float> a(tiny(2), 5), b(tiny(2), 5);
  const auto ha = train_model(a, std::span<const Sample<float>>(samples), opt);
  const auto hb = train_model(b, std::span<const Sample<float>>(samples), opt);
  ASSERT_EQ(ha.size(), 25u);
  for (std::size_t e = 0; e < ha.size(); ++e) {
    EXPECT_TRUE(std::isfinite(ha[e].mean.total));
    EXPECT_EQ(ha[e].mean.total, hb[e].mean.total);
  }
  for (std::size_t i = 0; i < a.parameters().size(); ++i) EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
  EXPECT_LT(ha.back().mean.total, ha.front().mean.total);
}

TEST(Training, WritesLogAndCheckpoint) {
  const auto dir = cseg::testing::scratch_dir("train_log");
  const auto samples = phantom_slices(1, 6);
  TrainOptions opt;
  opt.epochs = 3;
  opt.log_path = dir / "log.csv";
  opt.checkpoint_path = dir / "ckpt.bin";
  UNet<float> net(tiny(), 7);
  train_model(net, std::span<const Sample<float>>(samples), opt);
  std::ifstream log(opt.log_path);
  std::string header, line;
  std::getline(log, header);
  EXPECT_EQ(header, "epoch,ce,dice,total,lr");
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 3);
  UNet<float> restored(tiny(), 8);
  load_weights(restored, opt.checkpoint_path);
  for (std::size_t i = 0; i < net.parameters().size(); ++i)
    EXPECT_EQ(net.parameters()[i].value, restored.parameters()[i].value);
}

TEST(Training, DivergenceNamesLastCheckpoint) {
  const auto dir = cseg::testing::scratch_dir("train_diverge");
  auto samples = phantom_slices(1, 10);
  TrainOptions opt;
  opt.epochs = 2;
  opt.checkpoint_path = dir / "ckpt.bin";
  UNet<float> net(tiny(), 11);
  train_model(net, std::span<const Sample<float>>(samples), opt);
  samples[0].image[0] = std::nanf("");
  try {
    train_model(net, std::span<const Sample<float>>(samples), opt);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("no checkpoint"), std::string::npos) << e.what();
  }
  // Poisoning the data after epoch 0 makes epoch 1 diverge.
  opt.epochs = 2;
  samples = phantom_slices(1, 10);
  UNet<float> net2(tiny(), 11);
  std::vector<Sample<float>> bad = samples;
  try {
    TrainOptions o2 = opt;
    o2.on_epoch = [&](const EpochStats&) { bad[0].image[0] = std::nanf(""); };
    train_model(net2, std::span<const Sample<float>>(bad), o2);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("last good checkpoint"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos) << e.what();
  }
}
