#include "longsim/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>

#include "longsim/hash.hpp"
#include "longsim/rng.hpp"

namespace longsim {

using nlohmann::json;

int token_count(int n_steps) { return n_steps <= kTokenSpan ? 0 : (n_steps - 1) / kTokenSpan; }

std::vector<TokenSlot> tokenize_time(const AgentTrack& track) {
  const int n = static_cast<int>(track.states.size());
  if (n < kTokenSpan + 1) throw TokenizerError("track '" + track.id + "' shorter than one token span");
  const int count = token_count(n);
  std::vector<TokenSlot> out(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    auto& slot = out[static_cast<std::size_t>(k)];
    const auto& a = track.states[static_cast<std::size_t>(kTokenSpan * k)];
    const auto& b = track.states[static_cast<std::size_t>(kTokenSpan * (k + 1))];
    slot.valid = a.valid && b.valid;
    for (int j = 0; j <= kTokenSpan; ++j) slot.raw[static_cast<std::size_t>(j)] = track.states[static_cast<std::size_t>(kTokenSpan * k + j)].pose();
  }
  return out;
}

std::vector<bool> token_validity(const std::vector<TokenSlot>& slots) {
  std::vector<bool> v;
  v.reserve(slots.size());
  for (const auto& s : slots) v.push_back(s.valid);
  return v;
}

double primitive_distance(const MotionPrimitive& a, const MotionPrimitive& b, double heading_weight) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.rel_points.size(); ++i) sum += distance(a.rel_points[i], b.rel_points[i]);
  return sum / static_cast<double>(a.rel_points.size()) +
         heading_weight * std::abs(normalize_angle(a.rel_heading - b.rel_heading));
}

MotionPrimitive make_primitive(const Pose2& frame, const std::array<Pose2, kTokenSpan + 1>& raw) {
  MotionPrimitive p;
  for (int j = 1; j <= kTokenSpan; ++j) p.rel_points[static_cast<std::size_t>(j - 1)] = to_local(frame, raw[static_cast<std::size_t>(j)].position());
  p.rel_heading = normalize_angle(raw.back().heading - frame.heading);
  return p;
}

std::vector<MotionPrimitive> collect_segments(const std::vector<Scenario>& corpus) {
  std::vector<MotionPrimitive> out;
  for (const auto& sc : corpus) {
    for (const auto& track : sc.agents) {
      for (const auto& slot : tokenize_time(track)) {
        if (slot.valid) out.push_back(make_primitive(slot.raw.front(), slot.raw));
      }
    }
  }
  return out;
}

namespace {

using PrimitiveKey = std::array<double, 2 * kTokenSpan + 1>;

PrimitiveKey key_of(const MotionPrimitive& p) {
  PrimitiveKey k{};
  for (int i = 0; i < kTokenSpan; ++i) {
    k[static_cast<std::size_t>(2 * i)] = p.rel_points[static_cast<std::size_t>(i)].x;
    k[static_cast<std::size_t>(2 * i + 1)] = p.rel_points[static_cast<std::size_t>(i)].y;
  }
  k.back() = p.rel_heading;
  return k;
}

}  // namespace

MotionVocabulary build_motion_vocabulary(const std::vector<MotionPrimitive>& segments, int size, int k,
                                         std::uint64_t seed, double heading_weight) {
  if (size <= 0) throw TokenizerError("vocabulary size must be positive");
  if (k <= 0) throw TokenizerError("candidate count k must be positive");

  // Group identical segments; uniques keep first-occurrence order.
  std::map<PrimitiveKey, int> index;
  std::vector<int> unique_of(segments.size());
  std::vector<int> first_seen;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    auto [it, inserted] = index.emplace(key_of(segments[i]), static_cast<int>(first_seen.size()));
    if (inserted) first_seen.push_back(static_cast<int>(i));
    unique_of[i] = it->second;
  }
  const int n_unique = static_cast<int>(first_seen.size());
  if (n_unique < size) {
    throw TokenizerError("insufficient distinct segments: " + std::to_string(n_unique) + " < " +
                         std::to_string(size));
  }

  std::vector<std::vector<int>> members(static_cast<std::size_t>(n_unique));
  for (std::size_t i = 0; i < segments.size(); ++i) members[static_cast<std::size_t>(unique_of[i])].push_back(static_cast<int>(i));

  std::vector<int> alive(segments.size());
  std::iota(alive.begin(), alive.end(), 0);
  std::vector<int> slot_of(segments.size());
  std::iota(slot_of.begin(), slot_of.end(), 0);
  std::vector<bool> unique_alive(static_cast<std::size_t>(n_unique), true);
  int alive_unique = n_unique;
  std::vector<double> min_dist(static_cast<std::size_t>(n_unique), std::numeric_limits<double>::infinity());

  MotionVocabulary vocab;
  vocab.k = k;
  vocab.seed = seed;
  vocab.heading_weight = heading_weight;
  Rng rng(seed);

  while (vocab.size() < size) {
    int best = -1;
    if (k >= alive_unique) {
      for (int u = 0; u < n_unique; ++u) {
        if (unique_alive[static_cast<std::size_t>(u)] && (best < 0 || min_dist[static_cast<std::size_t>(u)] > min_dist[static_cast<std::size_t>(best)])) best = u;
      }
    } else {
      for (int draw = 0; draw < k; ++draw) {
        const int u = unique_of[static_cast<std::size_t>(alive[rng.below(alive.size())])];
        if (best < 0 || min_dist[static_cast<std::size_t>(u)] > min_dist[static_cast<std::size_t>(best)]) best = u;
      }
    }
    const MotionPrimitive chosen = segments[static_cast<std::size_t>(first_seen[static_cast<std::size_t>(best)])];
    vocab.entries.push_back(chosen);

    unique_alive[static_cast<std::size_t>(best)] = false;
    --alive_unique;
    for (int member : members[static_cast<std::size_t>(best)]) {
      const int slot = slot_of[static_cast<std::size_t>(member)];
      const int last = alive.back();
      alive[static_cast<std::size_t>(slot)] = last;
      slot_of[static_cast<std::size_t>(last)] = slot;
      alive.pop_back();
    }
    for (int u = 0; u < n_unique; ++u) {
      if (!unique_alive[static_cast<std::size_t>(u)]) continue;
      const double d = primitive_distance(segments[static_cast<std::size_t>(first_seen[static_cast<std::size_t>(u)])], chosen, heading_weight);
      min_dist[static_cast<std::size_t>(u)] = std::min(min_dist[static_cast<std::size_t>(u)], d);
    }
  }
  return vocab;
}

int encode_motion(const MotionPrimitive& segment, const MotionVocabulary& vocab) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int i = 0; i < vocab.size(); ++i) {
    const double d = primitive_distance(segment, vocab.entries[static_cast<std::size_t>(i)], vocab.heading_weight);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

Pose2 decode_motion(const Pose2& pose, int token, const MotionVocabulary& vocab) {
  if (token < 0 || token >= vocab.size()) throw TokenizerError("motion token out of range: " + std::to_string(token));
  const auto& e = vocab.entries[static_cast<std::size_t>(token)];
  return compose(pose, {e.endpoint().x, e.endpoint().y, e.rel_heading});
}

std::array<Pose2, kTokenSpan> decode_motion_steps(const Pose2& pose, int token, const MotionVocabulary& vocab) {
  if (token < 0 || token >= vocab.size()) throw TokenizerError("motion token out of range: " + std::to_string(token));
  const auto& e = vocab.entries[static_cast<std::size_t>(token)];
  std::array<Pose2, kTokenSpan> out{};
  for (int j = 0; j < kTokenSpan; ++j) {
    const double frac = static_cast<double>(j + 1) / kTokenSpan;
    const auto& p = e.rel_points[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(j)] = compose(pose, {p.x, p.y, frac * e.rel_heading});
  }
  out.back() = decode_motion(pose, token, vocab);
  return out;
}

namespace {

json vocab_to_json(const MotionVocabulary& v) {
  json entries = json::array();
  for (const auto& e : v.entries) {
    json row = json::array();
    for (const auto& p : e.rel_points) {
      row.push_back(p.x);
      row.push_back(p.y);
    }
    row.push_back(e.rel_heading);
    entries.push_back(std::move(row));
  }
  return {{"format", "longsim-motion-vocab"},
          {"version", 1},
          {"span", v.span},
          {"size", v.size()},
          {"k", v.k},
          {"seed", v.seed},
          {"heading_weight", v.heading_weight},
          {"entries", std::move(entries)}};
}

}  // namespace

void save_vocabulary(const MotionVocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw TokenizerError("cannot write vocabulary: " + path.string());
  out << vocab_to_json(vocab).dump() << '\n';
}

MotionVocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TokenizerError("cannot open vocabulary: " + path.string());
  json j;
  try {
    in >> j;
    if (j.at("format") != "longsim-motion-vocab" || j.at("version") != 1) throw TokenizerError("unsupported vocabulary format");
    MotionVocabulary v;
    v.span = j.at("span").get<int>();
    v.k = j.at("k").get<int>();
    v.seed = j.at("seed").get<std::uint64_t>();
    v.heading_weight = j.at("heading_weight").get<double>();
    if (v.span != kTokenSpan) throw TokenizerError("vocabulary span mismatch");
    for (const auto& row : j.at("entries")) {
      if (row.size() != 2 * kTokenSpan + 1) throw TokenizerError("vocabulary entry has wrong arity");
      MotionPrimitive p;
      for (int i = 0; i < kTokenSpan; ++i) p.rel_points[static_cast<std::size_t>(i)] = {row[static_cast<std::size_t>(2 * i)].get<double>(), row[static_cast<std::size_t>(2 * i + 1)].get<double>()};
      p.rel_heading = row[2 * kTokenSpan].get<double>();
      v.entries.push_back(p);
    }
    if (v.size() != j.at("size").get<int>()) throw TokenizerError("vocabulary size mismatch");
    return v;
  } catch (const json::exception& e) {
    throw TokenizerError(std::string("malformed vocabulary: ") + e.what());
  }
}

std::uint64_t vocabulary_hash(const MotionVocabulary& vocab) { return fnv1a64(vocab_to_json(vocab).dump()); }

// ---------------------------------------------------------------------------

double MapToken::heading() const { return std::atan2(direction.y, direction.x); }

MapTokenSet tokenize_map(const std::vector<Polyline>& map, Vec2 ego, double segment_length, int cap) {
  MapTokenSet out;
  for (const auto& pl : map) {
    // Walk the polyline and cut every `segment_length` meters of arc length.
    std::vector<Vec2> cuts{pl.points.front()};
    double carried = 0.0;
    for (std::size_t i = 1; i < pl.points.size(); ++i) {
      const Vec2 a = pl.points[i - 1];
      const Vec2 b = pl.points[i];
      const double len = distance(a, b);
      double pos = 0.0;
      while (carried + (len - pos) >= segment_length - 1e-9) {
        pos += segment_length - carried;
        carried = 0.0;
        cuts.push_back(a + (pos / len) * (b - a));
      }
      carried += len - pos;
    }
    if (carried > 1e-9) cuts.push_back(pl.points.back());
    for (std::size_t i = 1; i < cuts.size(); ++i) {
      const Vec2 d = cuts[i] - cuts[i - 1];
      const double n = d.norm();
      if (n <= 0.0) continue;
      out.tokens.push_back({cuts[i - 1], cuts[i], (1.0 / n) * d, pl.kind});
    }
  }
  if (cap >= 0 && static_cast<int>(out.tokens.size()) > cap) {
    std::vector<std::size_t> order(out.tokens.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return distance(out.tokens[a].midpoint(), ego) < distance(out.tokens[b].midpoint(), ego);
    });
    order.resize(static_cast<std::size_t>(cap));
    std::sort(order.begin(), order.end());
    std::vector<MapToken> kept;
    kept.reserve(order.size());
    for (auto i : order) kept.push_back(out.tokens[i]);
    out.tokens = std::move(kept);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::optional<int> try_encode_position(Vec2 local, const PoseGridSpec& spec) {
  if (!std::isfinite(local.x) || !std::isfinite(local.y)) return std::nullopt;
  const int half = spec.side / 2;
  const double fc = std::floor(local.x / spec.cell + 0.5);
  const double fr = std::floor(local.y / spec.cell + 0.5);
  if (fc < -half || fc > half || fr < -half || fr > half) return std::nullopt;
  const int col = static_cast<int>(fc) + half;
  const int row = static_cast<int>(fr) + half;
  return row * spec.side + col;
}

int encode_position(Vec2 local, const PoseGridSpec& spec) {
  auto id = try_encode_position(local, spec);
  if (!id) throw OutOfGridError("position outside the pose grid");
  return *id;
}

Vec2 decode_position(int id, const PoseGridSpec& spec) {
  if (id < 0 || id >= spec.size()) throw OutOfGridError("position token out of range");
  const int half = spec.side / 2;
  const int row = id / spec.side;
  const int col = id % spec.side;
  return {(col - half) * spec.cell, (row - half) * spec.cell};
}

int encode_heading(double angle, const PoseGridSpec& spec) {
  const double step = spec.heading_step();
  const long bin = static_cast<long>(std::floor(normalize_angle(angle) / step + 0.5));
  const long n = spec.heading_bins;
  return static_cast<int>(((bin % n) + n) % n);
}

double decode_heading(int id, const PoseGridSpec& spec) {
  if (id < 0 || id >= spec.heading_bins) throw OutOfGridError("heading token out of range");
  return normalize_angle(id * spec.heading_step());
}

std::vector<std::uint8_t> build_occupancy_grid(const std::vector<Vec2>& agents, const Pose2& ego,
                                               const PoseGridSpec& spec) {
  std::vector<std::uint8_t> grid(static_cast<std::size_t>(spec.size()), 0);
  grid[static_cast<std::size_t>(spec.center())] = 1;
  for (const auto& p : agents) {
    if (auto id = try_encode_position(to_local(ego, p), spec)) grid[static_cast<std::size_t>(*id)] = 1;
  }
  return grid;
}

// ---------------------------------------------------------------------------

std::string_view to_string(ControlToken c) {
  switch (c) {
    case ControlToken::begin_motion: return "BEGIN_MOTION";
    case ControlToken::add_agent: return "ADD_AGENT";
    case ControlToken::keep_agent: return "KEEP_AGENT";
    case ControlToken::remove_agent: return "REMOVE_AGENT";
    case ControlToken::null: return "NULL";
  }
  return "NULL";
}

std::vector<ControlToken> derive_control_sequence(const std::vector<bool>& validity) {
  const int n = static_cast<int>(validity.size());
  std::vector<ControlToken> out(validity.size(), ControlToken::null);
  int first = -1;
  int last = -1;
  for (int k = 0; k < n; ++k) {
    if (validity[static_cast<std::size_t>(k)]) {
      if (first < 0) first = k;
      last = k;
    }
  }
  if (first < 0) return out;
  out[static_cast<std::size_t>(first)] = ControlToken::add_agent;
  if (last > first) {
    for (int k = first + 1; k < last; ++k) out[static_cast<std::size_t>(k)] = ControlToken::keep_agent;
    out[static_cast<std::size_t>(last)] = last == n - 1 ? ControlToken::keep_agent : ControlToken::remove_agent;
  }
  return out;
}

int AgentTokens::last_active() const {
  if (removal_step >= 0) return removal_step;
  for (int k = static_cast<int>(valid.size()) - 1; k >= 0; --k) {
    if (valid[static_cast<std::size_t>(k)]) return k;
  }
  return -1;
}

TokenizedScenario build_gt_sequence(const Scenario& scenario, const MotionVocabulary& vocab,
                                    const TokenizeOptions& options) {
  TokenizedScenario ts;
  ts.n_tokens = token_count(scenario.n_steps);
  const int N = ts.n_tokens;
  ts.spatial.assign(static_cast<std::size_t>(N), {});
  ts.map = tokenize_map(scenario.map, scenario.ego().states.front().pose().position(), options.map_segment_length,
                        options.map_cap);

  // Per-track tokens with drift-corrected motion encoding.
  std::vector<AgentTokens> all;
  for (std::size_t i = 0; i < scenario.agents.size(); ++i) {
    const auto& track = scenario.agents[i];
    const auto slots = tokenize_time(track);
    AgentTokens at;
    at.source_index = static_cast<int>(i);
    at.id = track.id;
    at.type = track.type;
    at.shape = track.shape;
    at.valid = token_validity(slots);
    at.control = derive_control_sequence(at.valid);
    at.motion.assign(static_cast<std::size_t>(N), -1);
    at.pose.assign(static_cast<std::size_t>(N), Pose2{});
    for (int k = 0; k < N; ++k) {
      const auto uk = static_cast<std::size_t>(k);
      if (!at.valid[uk]) continue;
      const bool run_start = k == 0 || !at.valid[uk - 1];
      const Pose2 frame = run_start ? slots[uk].raw.front() : at.pose[uk - 1];
      at.motion[uk] = encode_motion(make_primitive(frame, slots[uk].raw), vocab);
      at.pose[uk] = run_start ? slots[uk].raw.back() : decode_motion(frame, at.motion[uk], vocab);
    }
    for (int k = 0; k < N; ++k) {
      if (at.control[static_cast<std::size_t>(k)] == ControlToken::add_agent) at.insertion_step = k;
      if (at.control[static_cast<std::size_t>(k)] == ControlToken::remove_agent) at.removal_step = k;
    }
    all.push_back(std::move(at));
  }

  const std::vector<Pose2> ego_poses = all[static_cast<std::size_t>(scenario.ego_index)].pose;
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& at = all[i];
    if (at.insertion_step < 0) continue;  // never valid at token resolution
    const bool is_ego = static_cast<int>(i) == scenario.ego_index;
    if (!is_ego && at.insertion_step >= 1) {
      const int k = at.insertion_step;
      const Pose2& ego_pose = ego_poses[static_cast<std::size_t>(k)];
      if (!try_encode_position(to_local(ego_pose, at.pose[static_cast<std::size_t>(k)].position()), options.grid)) {
        ++ts.skipped_out_of_grid;
        continue;
      }
      // Start the row from the decoded pose tokens and re-encode the run from there.
      const Pose2 rel = relative_pose(ego_pose, at.pose[static_cast<std::size_t>(k)]);
      const Vec2 cell = decode_position(encode_position({rel.x, rel.y}, options.grid), options.grid);
      const double heading = decode_heading(encode_heading(rel.heading, options.grid), options.grid);
      at.pose[static_cast<std::size_t>(k)] = compose(ego_pose, {cell.x, cell.y, heading});
      const auto slots = tokenize_time(scenario.agents[i]);
      for (int s = k + 1; s < N && at.valid[static_cast<std::size_t>(s)]; ++s) {
        const auto us = static_cast<std::size_t>(s);
        at.motion[us] = encode_motion(make_primitive(at.pose[us - 1], slots[us].raw), vocab);
        at.pose[us] = decode_motion(at.pose[us - 1], at.motion[us], vocab);
      }
    }
    if (is_ego) ts.ego = static_cast<int>(ts.agents.size());
    ts.agents.push_back(std::move(at));
  }

  const auto& ego = ts.agents[static_cast<std::size_t>(ts.ego)];
  auto ego_dist = [&](const AgentTokens& a, int k) {
    return distance(a.pose[static_cast<std::size_t>(k)].position(), ego.pose[static_cast<std::size_t>(k)].position());
  };

  for (int ai = 0; ai < static_cast<int>(ts.agents.size()); ++ai) {
    const auto& a = ts.agents[static_cast<std::size_t>(ai)];
    const int k = a.insertion_step;
    if (k < 1) continue;
    const Pose2& ego_pose = ego.pose[static_cast<std::size_t>(k)];
    const Pose2 rel = relative_pose(ego_pose, a.pose[static_cast<std::size_t>(k)]);
    ts.spatial[static_cast<std::size_t>(k)].push_back(
        {ai, encode_position({rel.x, rel.y}, options.grid), encode_heading(rel.heading, options.grid), ego_dist(a, k)});
  }
  for (auto& step : ts.spatial) {
    std::stable_sort(step.begin(), step.end(),
                     [](const SpatialEntry& x, const SpatialEntry& y) { return x.ego_distance < y.ego_distance; });
  }

  // Interleaved sequence: motion, temporal control, pose + ADD, BEGIN_MOTION.
  for (int k = 0; k < N; ++k) {
    std::vector<int> current;
    for (int ai = 0; ai < static_cast<int>(ts.agents.size()); ++ai) {
      const auto& a = ts.agents[static_cast<std::size_t>(ai)];
      if (a.insertion_step >= 0 && a.insertion_step < k && k <= a.last_active() && a.valid[static_cast<std::size_t>(k)]) current.push_back(ai);
    }
    std::stable_sort(current.begin(), current.end(), [&](int x, int y) {
      return ego_dist(ts.agents[static_cast<std::size_t>(x)], k) < ego_dist(ts.agents[static_cast<std::size_t>(y)], k);
    });
    for (int ai : current) ts.sequence.push_back({GtTokenKind::motion, k, ai, ts.agents[static_cast<std::size_t>(ai)].motion[static_cast<std::size_t>(k)]});
    for (int ai : current) ts.sequence.push_back({GtTokenKind::control, k, ai, static_cast<int>(ts.agents[static_cast<std::size_t>(ai)].control[static_cast<std::size_t>(k)])});
    for (const auto& e : ts.spatial[static_cast<std::size_t>(k)]) {
      ts.sequence.push_back({GtTokenKind::position, k, e.agent, e.position_token});
      ts.sequence.push_back({GtTokenKind::heading, k, e.agent, e.heading_token});
      ts.sequence.push_back({GtTokenKind::control, k, e.agent, static_cast<int>(ControlToken::add_agent)});
    }
    ts.sequence.push_back({GtTokenKind::control, k, -1, static_cast<int>(ControlToken::begin_motion)});
  }
  return ts;
}

std::string serialize_tokenized(const TokenizedScenario& ts) {
  json agents = json::array();
  for (const auto& a : ts.agents) {
    json ctrl = json::array();
    for (auto c : a.control) ctrl.push_back(static_cast<int>(c));
    json valid = json::array();
    for (bool v : a.valid) valid.push_back(v ? 1 : 0);
    agents.push_back({{"id", a.id},
                      {"type", to_string(a.type)},
                      {"shape", {a.shape.length, a.shape.width, a.shape.height}},
                      {"valid", std::move(valid)},
                      {"motion", a.motion},
                      {"control", std::move(ctrl)},
                      {"insertion_step", a.insertion_step},
                      {"removal_step", a.removal_step}});
  }
  json spatial = json::array();
  for (const auto& step : ts.spatial) {
    json s = json::array();
    for (const auto& e : step) s.push_back({e.agent, e.position_token, e.heading_token});
    spatial.push_back(std::move(s));
  }
  json seq = json::array();
  for (const auto& t : ts.sequence) seq.push_back({static_cast<int>(t.kind), t.step, t.agent, t.value});
  return json{{"n_tokens", ts.n_tokens},
              {"ego", ts.ego},
              {"agents", std::move(agents)},
              {"spatial", std::move(spatial)},
              {"map_tokens", ts.map.tokens.size()},
              {"skipped_out_of_grid", ts.skipped_out_of_grid},
              {"sequence", std::move(seq)}}
      .dump();
}

}  // namespace longsim
