#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "longsim/rng.hpp"
#include "longsim/synthetic.hpp"
#include "longsim/tokenizer.hpp"

using namespace longsim;

namespace {

// Per-slot rule evaluated from scratch, no shared state with the implementation.
ControlToken control_oracle(const std::vector<bool>& v, int k) {
  const int n = static_cast<int>(v.size());
  auto any = [&](int lo, int hi) {
    for (int j = lo; j < hi; ++j)
      if (v[static_cast<std::size_t>(j)]) return true;
    return false;
  };
  const bool here = v[static_cast<std::size_t>(k)];
  const bool before = any(0, k);
  const bool after = any(k + 1, n);
  if (here && !before) return ControlToken::add_agent;
  if (here && !after) return k == n - 1 ? ControlToken::keep_agent : ControlToken::remove_agent;
  if (before && after) return ControlToken::keep_agent;
  return ControlToken::null;
}

const std::vector<Scenario>& corpus() {
  static const std::vector<Scenario> c = [] {
    CorpusConfig cc;
    cc.count = 4;
    return generate_synthetic_corpus(cc, 3);
  }();
  return c;
}

}  // namespace

TEST(Tokenizer, SlotCount) {
  EXPECT_EQ(token_count(91), 18);
  EXPECT_EQ(token_count(311), 62);
  EXPECT_EQ(token_count(6), 1);
  EXPECT_EQ(token_count(5), 0);
}

TEST(Tokenizer, SlotValidityNeedsBothEndpoints) {
  AgentTrack t{"a", AgentType::vehicle, {}, {}};
  for (int s = 0; s < 16; ++s) t.states.push_back({0.5 * s, 0, 0, s != 7});
  const auto v = token_validity(tokenize_time(t));
  ASSERT_EQ(v.size(), 3u);
  EXPECT_TRUE(v[0]);
  EXPECT_TRUE(v[1]);  // raw 7 lies inside the slot but is not an endpoint
  EXPECT_TRUE(v[2]);
  t.states[10].valid = false;
  const auto w = token_validity(tokenize_time(t));
  EXPECT_FALSE(w[1]);
  EXPECT_FALSE(w[2]);
}

TEST(Tokenizer, ControlDerivationMatchesOracleExhaustively) {
  constexpr int n = 12;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    std::vector<bool> v(n);
    for (int k = 0; k < n; ++k) v[static_cast<std::size_t>(k)] = (mask >> k) & 1u;
    const auto got = derive_control_sequence(v);
    for (int k = 0; k < n; ++k) {
      ASSERT_EQ(got[static_cast<std::size_t>(k)], control_oracle(v, k)) << "mask " << mask << " slot " << k;
    }
  }
}

TEST(Tokenizer, ControlSpecialCases) {
  using C = ControlToken;
  EXPECT_EQ(derive_control_sequence({true, true, true}), (std::vector<C>{C::add_agent, C::keep_agent, C::keep_agent}));
  EXPECT_EQ(derive_control_sequence({false, true, true, false}),
            (std::vector<C>{C::null, C::add_agent, C::remove_agent, C::null}));
  EXPECT_EQ(derive_control_sequence({true, false, true, false}),
            (std::vector<C>{C::add_agent, C::keep_agent, C::remove_agent, C::null}));
}

TEST(Tokenizer, PoseGridRoundTrip) {
  const PoseGridSpec spec;
  Rng rng(42);
  const double h = spec.half_extent() - 1e-9;
  for (int i = 0; i < 20000; ++i) {
    const Vec2 p{rng.uniform(-h, h), rng.uniform(-h, h)};
    EXPECT_LE(distance(decode_position(encode_position(p, spec), spec), p), spec.cell * std::sqrt(2.0) / 2 + 1e-9);
    const double a = rng.uniform(-kPi, kPi);
    EXPECT_LE(std::abs(normalize_angle(decode_heading(encode_heading(a, spec), spec) - a)), 1.5 * kPi / 180 + 1e-9);
  }
  EXPECT_EQ(encode_position({0, 0}, spec), spec.center());
  EXPECT_THROW(encode_position({spec.half_extent() + 0.5, 0}, spec), OutOfGridError);
  EXPECT_FALSE(try_encode_position({0, -spec.half_extent() - 0.5}, spec).has_value());
}

TEST(Tokenizer, OccupancyMarksEgoAndAgents) {
  const PoseGridSpec spec;
  const Pose2 ego{10, 5, kPi / 2};
  const Vec2 ahead = to_world(ego, {9, 0});
  const auto grid = build_occupancy_grid({ahead, {1e4, 1e4}}, ego, spec);
  ASSERT_EQ(static_cast<int>(grid.size()), spec.size());
  EXPECT_EQ(grid[static_cast<std::size_t>(spec.center())], 1);
  EXPECT_EQ(grid[static_cast<std::size_t>(encode_position({9, 0}, spec))], 1);
  EXPECT_EQ(std::count(grid.begin(), grid.end(), 1), 2);
}

TEST(Tokenizer, PrimitiveOfExactSegmentDecodesBack) {
  std::array<Pose2, kTokenSpan + 1> raw;
  for (int i = 0; i <= kTokenSpan; ++i) raw[static_cast<std::size_t>(i)] = {3 + 1.2 * i, -2 + 0.1 * i * i, 0.05 * i};
  MotionVocabulary vocab;
  vocab.entries = {make_primitive(raw[0], raw)};
  const Pose2 end = decode_motion(raw[0], 0, vocab);
  EXPECT_NEAR(end.x, raw.back().x, 1e-9);
  EXPECT_NEAR(end.y, raw.back().y, 1e-9);
  EXPECT_NEAR(end.heading, raw.back().heading, 1e-9);
}

TEST(Tokenizer, VocabularyIsDeterministicAndEncodesNearest) {
  const auto segments = collect_segments(corpus());
  const auto a = build_motion_vocabulary(segments, 48, 16, 9);
  const auto b = build_motion_vocabulary(segments, 48, 16, 9);
  ASSERT_EQ(a.size(), 48);
  EXPECT_EQ(a.entries, b.entries);
  EXPECT_EQ(vocabulary_hash(a), vocabulary_hash(b));
  for (const auto& e : a.entries) EXPECT_NE(std::find(segments.begin(), segments.end(), e), segments.end());
  for (std::size_t i = 0; i < segments.size(); i += 37) {
    const int got = encode_motion(segments[i], a);
    double best = 1e300;
    int best_id = -1;
    for (int k = 0; k < a.size(); ++k) {
      const double d = primitive_distance(segments[i], a.entries[static_cast<std::size_t>(k)]);
      if (d < best) best = d, best_id = k;
    }
    EXPECT_EQ(got, best_id);
  }
}

TEST(Tokenizer, VocabularySaveLoad) {
  const auto v = build_motion_vocabulary(collect_segments(corpus()), 16, 8, 1);
  const auto path = std::filesystem::temp_directory_path() / "longsim_test_vocab.json";
  save_vocabulary(v, path);
  const auto w = load_vocabulary(path);
  EXPECT_EQ(w.entries, v.entries);
  EXPECT_EQ(vocabulary_hash(w), vocabulary_hash(v));
}

TEST(Tokenizer, MapChordsAndCap) {
  const std::vector<Polyline> map{{PolylineKind::lane_center, {{0, 0}, {23, 0}}},
                                  {PolylineKind::road_edge, {{500, 0}, {500, 12}}}};
  const auto all = tokenize_map(map, {0, 0});
  EXPECT_EQ(all.tokens.size(), 5u + 3u);
  for (const auto& t : all.tokens) EXPECT_LE(t.length(), kMapSegmentLength + 1e-9);
  const auto capped = tokenize_map(map, {0, 0}, kMapSegmentLength, 5);
  ASSERT_EQ(capped.tokens.size(), 5u);
  for (const auto& t : capped.tokens) EXPECT_EQ(t.kind, PolylineKind::lane_center);
}

TEST(Tokenizer, GroundTruthSequenceStructure) {
  const auto vocab = build_motion_vocabulary(collect_segments(corpus()), 64, 16, 1);
  for (const auto& sc : corpus()) {
    const auto ts = build_gt_sequence(sc, vocab);
    EXPECT_EQ(ts.n_tokens, 18);
    EXPECT_TRUE(ts.spatial[0].empty());
    for (const auto& step : ts.spatial) {
      for (std::size_t i = 1; i < step.size(); ++i) EXPECT_LE(step[i - 1].ego_distance, step[i].ego_distance);
    }
    // Each step ends with BEGIN_MOTION after its ADD entries.
    int begins = 0;
    for (const auto& tok : ts.sequence) {
      if (tok.kind == GtTokenKind::control && tok.value == static_cast<int>(ControlToken::begin_motion)) ++begins;
    }
    EXPECT_EQ(begins, ts.n_tokens);
    EXPECT_EQ(serialize_tokenized(ts), serialize_tokenized(build_gt_sequence(sc, vocab)));
  }
}
