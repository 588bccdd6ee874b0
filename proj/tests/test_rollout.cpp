#include <gtest/gtest.h>

#include <map>

#include "harness.hpp"
#include "longsim/rng.hpp"
#include "longsim/rollout.hpp"

using namespace longsim;
using namespace longsim::testing;

namespace {

const SimModel& micro_model() {
  static const SimModel m = [] {
    SimModel s;
    s.vocab = build_motion_vocabulary(collect_segments(overfit_corpus()), 32, 16, 1);
    s.config = micro_config(s.vocab.size());
    register_parameters(s.config, s.params, 21);
    return s;
  }();
  return m;
}

// counts[c] = counts[c-1] + adds at c - removes at c-1, over the simulated columns
void expect_conservation(const Rollout& r) {
  std::map<int, int> adds, removes;
  for (const auto& e : r.events) {
    if (e.kind == EventKind::add) ++adds[e.column];
    if (e.kind == EventKind::remove) ++removes[e.column];
  }
  for (std::size_t c = kHistoryColumns; c < r.active_counts.size(); ++c) {
    const int col = static_cast<int>(c);
    EXPECT_EQ(r.active_counts[c], r.active_counts[c - 1] + adds[col] - removes[col - 1]) << "column " << c;
  }
}

}  // namespace

TEST(Sampling, ArgmaxPrefersLowestIndexOnTies) {
  const float v[] = {1.0f, 3.0f, 3.0f, -1.0f};
  EXPECT_EQ(argmax(v, 4), 1);
}

TEST(Sampling, TopOneIsArgmaxAndConsumesNoDraw) {
  const float v[] = {0.1f, 0.5f, 0.2f};
  Rng a(1), b(1);
  EXPECT_EQ(sample_token(v, 3, 1.0, 1, a), 1);
  EXPECT_EQ(a.next(), b.next());
}

TEST(Sampling, TopKRestrictsSupportAndIsSeeded) {
  const float v[] = {5.0f, 0.0f, 4.9f, 4.8f, -3.0f};
  Rng rng(3);
  std::map<int, int> seen;
  for (int i = 0; i < 2000; ++i) ++seen[sample_token(v, 5, 1.0, 2, rng)];
  EXPECT_EQ(seen.size(), 2u);
  EXPECT_GT(seen[0], 0);
  EXPECT_GT(seen[2], 0);
  Rng x(9), y(9);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_token(v, 5, 0.7, 0, x), sample_token(v, 5, 0.7, 0, y));
}

TEST(Sampling, PolicyValidation) {
  SamplingPolicy p;
  EXPECT_NO_THROW(p.validate());
  p.position_top_k = 0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = {};
  p.motion_temperature = 0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(Replay, EventsFollowTokenValidity) {
  for (const auto& sc : overfit_corpus()) {
    const Rollout r = replay_log(sc);
    EXPECT_EQ(r.horizon(), 16);
    EXPECT_EQ(r.active_counts.size(), 18u);
    expect_conservation(r);
    int expected_adds = 0, expected_removes = 0;
    for (std::size_t i = 0; i < sc.agents.size(); ++i) {
      if (static_cast<int>(i) == sc.ego_index) continue;
      const auto control = derive_control_sequence(token_validity(tokenize_time(sc.agents[i])));
      for (std::size_t k = 0; k < control.size(); ++k) {
        expected_adds += control[k] == ControlToken::add_agent && k >= static_cast<std::size_t>(kHistoryColumns);
        expected_removes += control[k] == ControlToken::remove_agent && k >= static_cast<std::size_t>(kHistoryColumns - 1);
      }
    }
    int adds = 0, removes = 0;
    for (const auto& e : r.events) (e.kind == EventKind::add ? adds : removes) += 1;
    EXPECT_EQ(adds, expected_adds);
    EXPECT_EQ(removes, expected_removes);
  }
}

TEST(Rollout, DeterministicStructuredAndSerializable) {
  RolloutOptions opt;
  opt.horizon = 6;
  opt.seed = 5;
  const Scenario& sc = overfit_corpus()[2];
  const Rollout a = run_rollout(micro_model(), sc, opt);
  const Rollout b = run_rollout(micro_model(), sc, opt);
  EXPECT_EQ(serialize_rollout(a), serialize_rollout(b));
  EXPECT_EQ(a.scene.n_steps, kHistorySteps + kTokenSpan * 6);
  EXPECT_EQ(a.active_counts.size(), static_cast<std::size_t>(kHistoryColumns + 6));
  EXPECT_EQ(a.scene.ego_index, 0);
  for (const auto& st : a.scene.ego().states) EXPECT_TRUE(st.valid);
  EXPECT_NO_THROW(validate(a.scene));
  expect_conservation(a);

  int inserted = 0, adds = 0;
  for (auto o : a.origin) inserted += o == AgentOrigin::inserted;
  for (const auto& e : a.events) adds += e.kind == EventKind::add;
  EXPECT_EQ(inserted, adds);

  EXPECT_EQ(serialize_rollout(parse_rollout(serialize_rollout(a))), serialize_rollout(a));
  opt.seed = 6;
  EXPECT_NE(serialize_rollout(run_rollout(micro_model(), sc, opt)), serialize_rollout(a));
}

TEST(Rollout, MotionOnlyNeverAddsOrRemoves) {
  RolloutOptions opt;
  opt.horizon = 4;
  opt.motion_only = true;
  const Rollout r = run_rollout(micro_model(), overfit_corpus()[4], opt);
  EXPECT_TRUE(r.events.empty());
  for (std::size_t c = 1; c < r.active_counts.size(); ++c) EXPECT_EQ(r.active_counts[c], r.active_counts[1]);
}

TEST(Rollout, LogReplayEgoFollowsTheLog) {
  RolloutOptions opt;
  opt.horizon = 8;
  opt.ego_mode = EgoMode::log_replay;
  const Scenario& sc = overfit_corpus()[6];
  const Rollout r = run_rollout(micro_model(), sc, opt);
  for (int c = 1; c < kHistoryColumns + 8; ++c) {
    const int s = kTokenSpan * (c + 1);
    const auto& got = r.scene.ego().states[static_cast<std::size_t>(s)];
    const auto& want = sc.ego().states[static_cast<std::size_t>(s)];
    EXPECT_NEAR(got.x, want.x, 1e-9) << s;
    EXPECT_NEAR(got.y, want.y, 1e-9) << s;
  }
}

TEST(Rollout, AddCapStopsInsertion) {
  RolloutOptions opt;
  opt.horizon = 4;
  opt.policy.max_adds_per_step = 0;
  const Rollout r = run_rollout(micro_model(), overfit_corpus()[7], opt);
  for (const auto& e : r.events) EXPECT_NE(e.kind, EventKind::add);
}

TEST(Rollout, RejectsForeignVocabulary) {
  const auto path = std::filesystem::temp_directory_path() / "longsim_test_rollout.ckpt";
  const auto& m = micro_model();
  nn::save_checkpoint(path, m.params, {m.config.hash(), vocabulary_hash(m.vocab), m.config.to_text()});
  EXPECT_NO_THROW(load_sim_model(path, m.vocab));
  auto other = m.vocab;
  other.entries[0].rel_heading += 0.01;
  EXPECT_THROW(load_sim_model(path, other), HashMismatchError);
}
