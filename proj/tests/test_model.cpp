#include <gtest/gtest.h>

#include <filesystem>

#include "harness.hpp"
#include "longsim/rng.hpp"
#include "longsim/rollout.hpp"

using namespace longsim;
using namespace longsim::testing;

namespace {

struct Fixture {
  ModelConfig cfg;
  nn::ParamSet<float> params;
  MotionVocabulary vocab;

  Fixture() : vocab(build_motion_vocabulary(collect_segments(overfit_corpus()), 32, 16, 1)) {
    cfg = micro_config(vocab.size());
    register_parameters(cfg, params, 3);
  }

  TrainingExample example(const Scenario& s) const { return build_training_example(build_gt_sequence(s, vocab), cfg); }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

double max_rel_change(const nn::Tensor<float>& a, const nn::Tensor<float>& b) {
  EXPECT_TRUE(a.same_shape(b));
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a.data[i]) - b.data[i]);
    worst = std::max(worst, d / std::max(1.0, std::abs(static_cast<double>(a.data[i]))));
  }
  return worst;
}

}  // namespace

TEST(Model, ConfigTextRoundTripAndHash) {
  ModelConfig c = ModelConfig::tiny();
  const ModelConfig d = ModelConfig::from_text(c.to_text());
  EXPECT_EQ(d.to_text(), c.to_text());
  EXPECT_EQ(d.hash(), c.hash());
  c.query_agent_radius = 11.0;
  EXPECT_NE(c.hash(), d.hash());
  EXPECT_THROW(ModelConfig::from_text("d_model = abc\n"), std::invalid_argument);
}

TEST(Model, ParameterRegistrationIsSeeded) {
  const ModelConfig c = ModelConfig::tiny();
  nn::ParamSet<float> a, b, e;
  register_parameters(c, a, 5);
  register_parameters(c, b, 5);
  register_parameters(c, e, 6);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a.scalar_count(), 284271u);
  bool differs = false;
  for (int i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.value(i).data, b.value(i).data) << a.name(i);
    differs |= a.value(i).data != e.value(i).data;
  }
  EXPECT_TRUE(differs);
}

TEST(Model, CheckpointRoundTripAndHashRefusal) {
  const auto& f = fixture();
  const auto path = std::filesystem::temp_directory_path() / "longsim_test_model.ckpt";
  nn::save_checkpoint(path, f.params, {f.cfg.hash(), vocabulary_hash(f.vocab), f.cfg.to_text()});
  const SimModel m = load_sim_model(path, f.vocab);
  for (int i = 0; i < f.params.size(); ++i) EXPECT_EQ(m.params.value(i).data, f.params.value(i).data);

  const auto other = build_motion_vocabulary(collect_segments(overfit_corpus()), 32, 16, 2);
  EXPECT_THROW(load_sim_model(path, other), HashMismatchError);
}

TEST(Model, LogitsInvariantToRigidTransforms) {
  const auto& f = fixture();
  const Scenario& s = overfit_corpus()[1];
  const auto base = head_values(f.params, f.cfg, f.example(s));
  Rng rng(17);
  for (int k = 0; k < 3; ++k) {
    const RigidTransform tf{rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(-kPi, kPi)};
    const auto moved = head_values(f.params, f.cfg, f.example(transform_scenario(s, tf)));
    EXPECT_LT(max_rel_change(base.motion, moved.motion), 1e-4);
    EXPECT_LT(max_rel_change(base.temporal, moved.temporal), 1e-4);
    EXPECT_LT(max_rel_change(base.position, moved.position), 1e-4);
    EXPECT_LT(max_rel_change(base.spatial, moved.spatial), 1e-4);
    EXPECT_LT(max_rel_change(base.heading, moved.heading), 1e-4);
  }
}

TEST(Model, TemporalWindowBoundsMotionContext) {
  const auto& f = fixture();
  const TrainingExample ex = f.example(overfit_corpus()[0]);
  TrainingExample perturbed = ex;
  const int e0 = ex.motion.embedding_row(ex.matrix.ego, 0);
  ASSERT_GE(e0, 0);
  perturbed.motion.features[static_cast<std::size_t>(e0)].motion_id = (ex.motion.features[static_cast<std::size_t>(e0)].motion_id + 7) % f.cfg.motion_vocab;
  const auto a = head_values(f.params, f.cfg, ex);
  const auto b = head_values(f.params, f.cfg, perturbed);
  int compared = 0, changed = 0;
  for (int q = 0; q < static_cast<int>(ex.motion.queries.size()); ++q) {
    const int col = ex.motion.cells[static_cast<std::size_t>(ex.motion.queries[static_cast<std::size_t>(q)])].col;
    if (col > f.cfg.temporal_window) {
      EXPECT_TRUE(rows_identical(a.motion, b.motion, q, q)) << "query " << q << " col " << col;
      ++compared;
    } else {
      changed += !rows_identical(a.motion, b.motion, q, q);
    }
  }
  EXPECT_GT(compared, 0);
  EXPECT_GT(changed, 0);
}
