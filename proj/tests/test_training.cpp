#include <gtest/gtest.h>

#include <sstream>

#include "harness.hpp"
#include "longsim/rng.hpp"

using namespace longsim;
using namespace longsim::testing;

namespace {

// Rule oracle written from the mask definition, slot by slot.
std::vector<bool> motion_mask_oracle(const std::vector<bool>& v, int bos, int eos) {
  const int n = static_cast<int>(v.size());
  std::vector<bool> m(v.size(), false);
  if (bos < 0 || bos == eos) return m;
  auto at = [&](int s) { return s >= 0 && s < n && v[static_cast<std::size_t>(s)]; };
  for (int s = 0; s < n; ++s) {
    bool on = false;
    if (s == bos) on = true;
    else if (s == bos + 1) on = at(bos + 2);
    else if (s > bos + 1 && s < eos) on = at(s - 1) && at(s) && at(s + 1);
    if (s >= eos) on = false;
    m[static_cast<std::size_t>(s)] = on;
  }
  return m;
}

struct Setup {
  MotionVocabulary vocab = build_motion_vocabulary(collect_segments(overfit_corpus()), 32, 16, 1);
  ModelConfig cfg = micro_config(32);
  nn::ParamSet<float> params;

  Setup() { register_parameters(cfg, params, 4); }
  TrainingExample example(int i) const {
    return build_training_example(build_gt_sequence(overfit_corpus()[static_cast<std::size_t>(i)], vocab), cfg);
  }
};

const Setup& setup() {
  static const Setup s;
  return s;
}

double loss_of(const nn::ParamSet<double>& p, const ModelConfig& cfg, const TrainingExample& ex) {
  nn::Graph<double> g(p, false);
  Network<double> net(cfg, p);
  return g.scalar(build_loss(g, net, ex, LossWeights{}).total);
}

}  // namespace

TEST(Masks, MotionMaskMatchesOracleExhaustively) {
  constexpr int n = 10;
  for (unsigned bits = 0; bits < (1u << n); ++bits) {
    std::vector<bool> v(n);
    for (int k = 0; k < n; ++k) v[static_cast<std::size_t>(k)] = (bits >> k) & 1u;
    const int bos = first_valid(v);
    const int eos = last_valid(v);
    ASSERT_EQ(build_motion_mask(v, bos, eos), motion_mask_oracle(v, bos, eos)) << bits;
    ASSERT_EQ(build_temporal_control_mask(v, bos, eos), motion_mask_oracle(v, bos, eos)) << bits;
  }
}

TEST(Masks, DocumentedCases) {
  std::vector<bool> full(18, true);
  const auto m = build_motion_mask(full, 0, 17);
  for (int s = 0; s < 17; ++s) EXPECT_TRUE(m[static_cast<std::size_t>(s)]) << s;
  EXPECT_FALSE(m[17]);

  std::vector<bool> pair(18, false);
  pair[4] = pair[5] = true;
  const auto p = build_motion_mask(pair, 4, 5);
  EXPECT_EQ(std::count(p.begin(), p.end(), true), 1);
  EXPECT_TRUE(p[4]);

  EXPECT_EQ(build_motion_mask(std::vector<bool>(6, false), -1, -1), std::vector<bool>(6, false));
}

TEST(Masks, SpatialTruncationAndHybridAttention) {
  const auto m = build_spatial_masks(12, 5, 10);
  ASSERT_EQ(m.control.size(), 13u);
  EXPECT_EQ(std::count(m.control.begin(), m.control.end(), true), 10);
  EXPECT_FALSE(m.control[10]);
  ASSERT_EQ(m.attention.size(), 10u);  // supervised queries only
  for (int i = 0; i < 10; ++i) {
    ASSERT_EQ(m.attention[static_cast<std::size_t>(i)].size(), 5u + 12u + 1u);
    for (int j = 0; j < 5 + 12 + 1; ++j) {
      EXPECT_EQ(m.attention[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], j < 5 + i + 1) << i << ',' << j;
    }
  }
  const auto small = build_spatial_masks(2, 3, 10);
  EXPECT_EQ(small.control, (std::vector<bool>{true, true, true}));
}

TEST(TrainConfig, TextRoundTrip) {
  TrainConfig tc;
  tc.epochs = 7;
  tc.lr = 1.25e-3;
  tc.weights.shape = 0.3;
  const TrainConfig back = TrainConfig::from_text(tc.to_text());
  EXPECT_EQ(back.to_text(), tc.to_text());
  EXPECT_THROW(TrainConfig::from_text("epochs = 3\nbogus = 1\n"), std::invalid_argument);
}

TEST(Training, ExampleTargetsRespectInvariants) {
  const auto ex = setup().example(17);
  ASSERT_EQ(ex.motion_target.size(), ex.motion.queries.size());
  for (std::size_t q = 0; q < ex.motion_target.size(); ++q) {
    if (ex.temporal_control_mask[q] > 0 && ex.temporal_control_target[q] == 1) EXPECT_EQ(ex.motion_mask[q], 0.0);
  }
  int adds = 0;
  for (std::size_t q = 0; q < ex.spatial_control_target.size(); ++q) adds += ex.spatial_control_target[q];
  EXPECT_EQ(static_cast<std::size_t>(adds), ex.heading_target.size());
}

TEST(Training, AnalyticGradientMatchesFiniteDifferences) {
  const auto& s = setup();
  const auto ex = s.example(17);
  nn::ParamSet<double> p = s.params.cast<double>();
  nn::Graph<double> g(p);
  Network<double> net(s.cfg, p);
  g.backward(build_loss(g, net, ex, LossWeights{}).total);
  auto grads = p.zeros_like();
  g.accumulate_param_grads(grads);

  Rng rng(8);
  constexpr double eps = 1e-5;
  for (int trial = 0; trial < 40; ++trial) {
    const int id = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.size())));
    auto& data = p.value(id).data;
    const std::size_t k = rng.below(data.size());
    const double keep = data[k];
    data[k] = keep + eps;
    const double up = loss_of(p, s.cfg, ex);
    data[k] = keep - eps;
    const double down = loss_of(p, s.cfg, ex);
    data[k] = keep;
    const double numeric = (up - down) / (2 * eps);
    const double analytic = grads[static_cast<std::size_t>(id)].data[k];
    const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    EXPECT_LT(std::abs(numeric - analytic) / scale, 1e-4) << p.name(id) << "[" << k << "] " << numeric << " vs " << analytic;
  }
}

TEST(Training, MaskedTargetsDoNotReachTheLoss) {
  const auto& s = setup();
  const auto ex = s.example(3);
  auto perturbed = ex;
  auto scramble = [](std::vector<int>& target, const std::vector<double>& mask, int classes) {
    int n = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (mask[i] == 0) target[i] = (target[i] + 1) % classes, ++n;
    }
    return n;
  };
  int changed = scramble(perturbed.motion_target, ex.motion_mask, s.cfg.motion_vocab);
  changed += scramble(perturbed.temporal_control_target, ex.temporal_control_mask, 2);
  changed += scramble(perturbed.position_target, ex.position_mask, s.cfg.grid.size());
  ASSERT_GT(changed, 0);
  const auto p = s.params.cast<double>();
  EXPECT_EQ(loss_of(p, s.cfg, ex), loss_of(p, s.cfg, perturbed));
}

TEST(Training, BatchGradientIndependentOfJobs) {
  const auto& s = setup();
  const auto a = s.example(0), b = s.example(1), c = s.example(2);
  const std::vector<const TrainingExample*> batch{&a, &b, &c};
  std::vector<nn::Tensor<float>> g1, g3;
  const LossTerms l1 = batch_gradient(s.params, s.cfg, batch, LossWeights{}, 1, g1);
  const LossTerms l3 = batch_gradient(s.params, s.cfg, batch, LossWeights{}, 3, g3);
  EXPECT_EQ(l1.total, l3.total);
  ASSERT_EQ(g1.size(), g3.size());
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g1[i].data, g3[i].data);
}

TEST(Training, TrainingIsDeterministicAndLogsEveryStep) {
  const auto& s = setup();
  std::vector<TrainingExample> examples{s.example(0), s.example(1), s.example(2)};
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 2;
  tc.lr = 1e-3;
  std::ostringstream log_a, log_b;
  write_loss_csv_header(log_a);
  TrainHooks hooks;
  hooks.on_step = [&](const TrainLogRow& r) { write_loss_csv_row(log_a, r); };
  const auto pa = train(examples, s.cfg, tc, 9, hooks);
  hooks.on_step = [&](const TrainLogRow& r) { write_loss_csv_row(log_b, r); };
  tc.jobs = 2;
  const auto pb = train(examples, s.cfg, tc, 9, hooks);
  for (int i = 0; i < pa.size(); ++i) EXPECT_EQ(pa.value(i).data, pb.value(i).data);
  const std::string text = log_a.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "step,epoch,lr,grad_norm,total,motion,position,heading,control,shape,type");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + 4);  // two batches per epoch
  EXPECT_EQ(text.substr(text.find('\n') + 1), log_b.str());
}
