#include "longsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "longsim/hash.hpp"
#include "longsim/rng.hpp"

namespace longsim {

using nn::AttentionPairs;
using nn::Graph;
using nn::Tensor;
using nn::Var;

// ---------------------------------------------------------------------------
// Configuration

namespace {

template <class F>
void for_each_field(ModelConfig& c, F&& f) {
  f("d_model", c.d_model);
  f("heads", c.heads);
  f("ffn_mult", c.ffn_mult);
  f("motion_blocks", c.motion_blocks);
  f("scene_blocks", c.scene_blocks);
  f("map_blocks", c.map_blocks);
  f("heading_blocks", c.heading_blocks);
  f("fourier_bands", c.fourier_bands);
  f("temporal_window", c.temporal_window);
  f("agent_radius", c.agent_radius);
  f("map_agent_radius", c.map_agent_radius);
  f("map_map_radius", c.map_map_radius);
  f("query_agent_radius", c.query_agent_radius);
  f("query_map_radius", c.query_map_radius);
  f("heading_map_radius", c.heading_map_radius);
  f("motion_vocab", c.motion_vocab);
  f("map_cap", c.map_cap);
  f("max_agents", c.max_agents);
  f("grid_side", c.grid.side);
  f("grid_cell", c.grid.cell);
  f("heading_bins", c.grid.heading_bins);
}

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  ModelConfig copy = *this;
  for_each_field(copy, [&](const char* key, auto& v) { os << key << " = " << format_value(v) << '\n'; });
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  ModelConfig c;
  for_each_field(c, [&](const char* key, auto& v) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
      std::size_t used = 0;
      if constexpr (std::is_same_v<std::decay_t<decltype(v)>, int>) {
        v = std::stoi(it->second, &used);
      } else {
        v = std::stod(it->second, &used);
      }
      if (used != it->second.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("config key '") + key + "': bad value '" + it->second + "'");
    }
    kv.erase(it);
  });
  if (!kv.empty()) throw std::invalid_argument("unknown config key: " + kv.begin()->first);
  c.validate();
  return c;
}

std::uint64_t ModelConfig::hash() const { return fnv1a64(to_text()); }

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("invalid model config: ") + what);
  };
  need(d_model > 0 && heads > 0 && d_model % heads == 0, "d_model must be a positive multiple of heads");
  need(ffn_mult > 0 && fourier_bands > 0, "ffn_mult and fourier_bands must be positive");
  need(motion_blocks >= 0 && scene_blocks >= 0 && map_blocks >= 0 && heading_blocks >= 0, "negative block count");
  need(temporal_window >= 0, "temporal_window must be non-negative");
  need(agent_radius > 0 && map_agent_radius > 0 && map_map_radius > 0 && query_agent_radius > 0 &&
           query_map_radius > 0 && heading_map_radius > 0,
       "radii must be positive");
  need(motion_vocab > 0 && map_cap > 0 && max_agents > 0, "sizes must be positive");
  need(grid.side > 0 && grid.side % 2 == 1 && grid.cell > 0 && grid.heading_bins > 0, "bad pose grid");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d_model = 32;
  c.heads = 4;
  c.ffn_mult = 2;
  c.motion_blocks = 2;
  c.scene_blocks = 1;
  c.map_blocks = 1;
  c.heading_blocks = 1;
  c.fourier_bands = 8;
  c.motion_vocab = 128;
  return c;
}

SpecialIds::SpecialIds(const ModelConfig& cfg)
    : empty_motion(cfg.motion_vocab),
      start_motion(cfg.motion_vocab + 1),
      query_motion(cfg.motion_vocab + 2),
      motion_rows(cfg.motion_vocab + 3),
      out_of_grid(cfg.grid.size()),
      invalid_position(cfg.grid.size() + 1),
      position_rows(cfg.grid.size() + 2),
      invalid_heading(cfg.grid.heading_bins),
      heading_rows(cfg.grid.heading_bins + 1),
      query_type(3),
      type_rows(4) {}

// ---------------------------------------------------------------------------
// Matrix and geometry helpers

AgentMatrix matrix_from_tokens(const TokenizedScenario& ts) {
  AgentMatrix m;
  m.ego = ts.ego;
  for (const auto& a : ts.agents) {
    MatrixRow r;
    r.id = a.id;
    r.type = a.type;
    r.shape = a.shape;
    r.first_col = a.insertion_step;
    const int last = a.last_active();
    for (int k = r.first_col; k <= last; ++k) {
      r.motion.push_back(a.valid[static_cast<std::size_t>(k)] ? a.motion[static_cast<std::size_t>(k)] : -1);
      r.valid.push_back(a.valid[static_cast<std::size_t>(k)]);
      r.pose.push_back(a.pose[static_cast<std::size_t>(k)]);
    }
    m.rows.push_back(std::move(r));
  }
  return m;
}

std::array<double, 3> slot_difference(bool prev_valid, const Pose2& prev, bool cur_valid, const Pose2& cur) {
  if (prev_valid && cur_valid) {
    const Pose2 d = relative_pose(prev, cur);
    return {d.x, d.y, d.heading};
  }
  double c = -kInvalidValue;
  if (cur_valid && !prev_valid) c = kTransitionValue;
  if (!cur_valid && prev_valid) c = -kTransitionValue;
  return {c, c, c};
}

namespace {

// Synthetic maps put chord midpoints at exact multiples of the radii; the slack keeps
// those ties on the inside regardless of the frame the coordinates were expressed in.
constexpr double kRadiusSlack = 1e-6;

bool within(Vec2 a, Vec2 b, double radius) { return distance(a, b) <= radius + kRadiusSlack; }

}  // namespace

RelDesc relative_descriptor(const Pose2& query, const Pose2& ctx, double dt) {
  const Vec2 v = ctx.position() - query.position();
  RelDesc d;
  d.dp = v.norm();
  d.dd = d.dp < 1e-6 ? 0.0 : normalize_angle(std::atan2(v.y, v.x) - query.heading);
  d.dh = normalize_angle(ctx.heading - query.heading);
  d.dt = dt;
  return d;
}

RelDesc substituted_descriptor(bool query_valid, bool ctx_valid, double dt) {
  double c = -kInvalidValue;
  if (ctx_valid && !query_valid) c = kTransitionValue;
  if (!ctx_valid && query_valid) c = -kTransitionValue;
  return {c, c, c, dt};
}

CellFeatures query_features(const ModelConfig& cfg) {
  const SpecialIds ids(cfg);
  CellFeatures f;
  f.motion_id = ids.query_motion;
  f.position_id = cfg.grid.center();
  f.heading_id = 0;
  f.valid = false;
  f.type_id = ids.query_type;
  f.diff = slot_difference(false, {}, false, {});
  return f;
}

// ---------------------------------------------------------------------------
// Batch construction

int MotionBatch::embedding_row(int row, int col) const {
  if (row < 0 || row >= static_cast<int>(index.size()) || col < col_begin || col > col_end) return -1;
  return index[static_cast<std::size_t>(row)][static_cast<std::size_t>(col - col_begin)];
}

BatchBuilder::BatchBuilder(const ModelConfig& cfg, const AgentMatrix& matrix, const MapTokenSet& map)
    : cfg_(cfg), m_(matrix), map_(map) {}

CellFeatures BatchBuilder::features(int row, int col) const {
  const SpecialIds ids(cfg_);
  const auto& r = m_.rows[static_cast<std::size_t>(row)];
  CellFeatures f;
  f.valid = r.valid_at(col);
  f.type_id = static_cast<int>(r.type);
  f.shape = {r.shape.length, r.shape.width, r.shape.height};
  if (f.valid) {
    f.motion_id = col == r.first_col ? ids.start_motion : r.motion_at(col);
    const Pose2 rel = relative_pose(m_.ego_pose(col), r.pose_at(col));
    f.position_id = try_encode_position({rel.x, rel.y}, cfg_.grid).value_or(ids.out_of_grid);
    f.heading_id = encode_heading(rel.heading, cfg_.grid);
  } else {
    f.motion_id = ids.empty_motion;
    f.position_id = ids.invalid_position;
    f.heading_id = ids.invalid_heading;
  }
  if (col == r.first_col) {
    f.diff = slot_difference(false, {}, f.valid, r.pose_at(col));
  } else {
    f.diff = slot_difference(r.valid_at(col - 1), r.pose_at(col - 1), f.valid, r.pose_at(col));
  }
  return f;
}

MotionBatch BatchBuilder::motion(int col_begin, int col_end, int query_begin) const {
  MotionBatch mb;
  mb.col_begin = col_begin;
  mb.col_end = col_end;
  const int width = std::max(0, col_end - col_begin + 1);
  mb.index.assign(m_.rows.size(), std::vector<int>(static_cast<std::size_t>(width), -1));
  for (int r = 0; r < static_cast<int>(m_.rows.size()); ++r) {
    const auto& row = m_.rows[static_cast<std::size_t>(r)];
    for (int c = std::max(col_begin, row.first_col); c <= std::min(col_end, row.last_col()); ++c) {
      mb.index[static_cast<std::size_t>(r)][static_cast<std::size_t>(c - col_begin)] = static_cast<int>(mb.cells.size());
      mb.cells.push_back({r, c});
      mb.features.push_back(features(r, c));
    }
  }

  std::map<int, std::vector<int>> by_col;  // column -> query indices
  for (int e = 0; e < static_cast<int>(mb.cells.size()); ++e) {
    const auto [r, c] = mb.cells[static_cast<std::size_t>(e)];
    if (c < query_begin || !m_.rows[static_cast<std::size_t>(r)].valid_at(c)) continue;
    by_col[c].push_back(static_cast<int>(mb.queries.size()));
    mb.queries.push_back(e);
  }

  const int W = cfg_.temporal_window;
  for (int q = 0; q < static_cast<int>(mb.queries.size()); ++q) {
    const auto [r, c] = mb.cells[static_cast<std::size_t>(mb.queries[static_cast<std::size_t>(q)])];
    const auto& row = m_.rows[static_cast<std::size_t>(r)];
    const Pose2& pose = row.pose_at(c);

    mb.temporal.begin_query();
    for (int j = std::max({row.first_col, c - W, col_begin}); j <= c; ++j) {
      const int e = mb.embedding_row(r, j);
      const RelDesc d = row.valid_at(j) ? relative_descriptor(pose, row.pose_at(j), c - j)
                                        : substituted_descriptor(true, false, c - j);
      mb.temporal.add(e, static_cast<int>(mb.temporal_desc.size()));
      mb.temporal_desc.push_back(d);
    }

    mb.agent.begin_query();
    for (int other : by_col[c]) {
      if (other == q) continue;
      const auto [r2, c2] = mb.cells[static_cast<std::size_t>(mb.queries[static_cast<std::size_t>(other)])];
      const Pose2& p2 = m_.rows[static_cast<std::size_t>(r2)].pose_at(c2);
      if (!within(p2.position(), pose.position(), cfg_.agent_radius)) continue;
      mb.agent.add(other, static_cast<int>(mb.agent_desc.size()));
      mb.agent_desc.push_back(relative_descriptor(pose, p2, 0));
    }

    mb.map.begin_query();
    for (int t = 0; t < static_cast<int>(map_.tokens.size()); ++t) {
      const auto& tok = map_.tokens[static_cast<std::size_t>(t)];
      const Vec2 mid = tok.midpoint();
      if (!within(mid, pose.position(), cfg_.map_agent_radius)) continue;
      mb.map.add(t, static_cast<int>(mb.map_desc.size()));
      mb.map_desc.push_back(relative_descriptor(pose, {mid.x, mid.y, tok.heading()}, 0));
    }
  }
  return mb;
}

void BatchBuilder::add_scene_query(const MotionBatch& mb, int col, const std::vector<CellRef>& lingering,
                                   const std::vector<int>& inserted_before, SceneBatch& sb) const {
  SceneQuery q;
  q.col = col;
  for (int r = 0; r < static_cast<int>(m_.rows.size()); ++r) {
    const auto& row = m_.rows[static_cast<std::size_t>(r)];
    if (row.first_col < col && row.valid_at(col)) q.pool.push_back(mb.embedding_row(r, col));
  }
  for (const auto& cell : lingering) q.pool.push_back(mb.embedding_row(cell.row, cell.col));
  for (int r : inserted_before) q.pool.push_back(mb.embedding_row(r, col));
  for (int e : q.pool) {
    if (e < 0) throw std::logic_error("scene pool cell missing from the embedding batch");
  }

  const Pose2& ego = m_.ego_pose(col);
  std::vector<Vec2> positions;
  for (int e : q.pool) {
    const auto [r, c] = mb.cells[static_cast<std::size_t>(e)];
    positions.push_back(m_.rows[static_cast<std::size_t>(r)].pose_at(c).position());
  }
  q.occupancy = build_occupancy_grid(positions, ego, cfg_.grid);

  const int cells = cfg_.grid.size();
  sb.grid.begin_query();
  for (int c = 0; c < cells; ++c) sb.grid.add(q.occupancy[static_cast<std::size_t>(c)] * cells + c, -1);

  sb.agent.begin_query();
  for (std::size_t i = 0; i < q.pool.size(); ++i) {
    const auto [r, c] = mb.cells[static_cast<std::size_t>(q.pool[i])];
    const Pose2& p = m_.rows[static_cast<std::size_t>(r)].pose_at(c);
    if (!within(p.position(), ego.position(), cfg_.query_agent_radius)) continue;
    sb.agent.add(q.pool[i], static_cast<int>(sb.agent_desc.size()));
    sb.agent_desc.push_back(relative_descriptor(ego, p, 0));
  }
  sb.agent.add(static_cast<int>(mb.cells.size()), static_cast<int>(sb.agent_desc.size()));
  sb.agent_desc.push_back(relative_descriptor(ego, ego, 0));

  sb.map.begin_query();
  for (int t = 0; t < static_cast<int>(map_.tokens.size()); ++t) {
    const auto& tok = map_.tokens[static_cast<std::size_t>(t)];
    const Vec2 mid = tok.midpoint();
    if (!within(mid, ego.position(), cfg_.query_map_radius)) continue;
    sb.map.add(t, static_cast<int>(sb.map_desc.size()));
    sb.map_desc.push_back(relative_descriptor(ego, {mid.x, mid.y, tok.heading()}, 0));
  }
  sb.queries.push_back(std::move(q));
}

Pose2 BatchBuilder::heading_query_pose(int col, int position_id) const {
  const Vec2 c = decode_position(position_id, cfg_.grid);
  return compose(m_.ego_pose(col), {c.x, c.y, 0.0});
}

void BatchBuilder::add_heading_query(const MotionBatch& mb, const SceneBatch& sb, int scene_query, int position_id,
                                     HeadingBatch& hb) const {
  const auto& q = sb.queries.at(static_cast<std::size_t>(scene_query));
  const Pose2 at = heading_query_pose(q.col, position_id);
  hb.scene_query.push_back(scene_query);
  hb.position_id.push_back(position_id);

  hb.agent.begin_query();
  for (int e : q.pool) {
    const auto [r, c] = mb.cells[static_cast<std::size_t>(e)];
    const Pose2& p = m_.rows[static_cast<std::size_t>(r)].pose_at(c);
    if (!within(p.position(), at.position(), cfg_.query_agent_radius)) continue;
    hb.agent.add(e, static_cast<int>(hb.agent_desc.size()));
    hb.agent_desc.push_back(relative_descriptor(at, p, 0));
  }

  hb.map.begin_query();
  for (int t = 0; t < static_cast<int>(map_.tokens.size()); ++t) {
    const auto& tok = map_.tokens[static_cast<std::size_t>(t)];
    const Vec2 mid = tok.midpoint();
    if (!within(mid, at.position(), cfg_.heading_map_radius)) continue;
    hb.map.add(t, static_cast<int>(hb.map_desc.size()));
    hb.map_desc.push_back(relative_descriptor(at, {mid.x, mid.y, tok.heading()}, 0));
  }
}

MapView BatchBuilder::finalize_map(MotionBatch& mb, SceneBatch* sb, HeadingBatch* hb) const {
  const int n = static_cast<int>(map_.tokens.size());
  std::vector<char> keep(static_cast<std::size_t>(n), 0);
  std::vector<int> frontier;
  auto mark = [&](const AttentionPairs& p) {
    for (int t : p.context) {
      if (!keep[static_cast<std::size_t>(t)]) {
        keep[static_cast<std::size_t>(t)] = 1;
        frontier.push_back(t);
      }
    }
  };
  mark(mb.map);
  if (sb) mark(sb->map);
  if (hb) mark(hb->map);

  std::vector<Vec2> mid(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) mid[static_cast<std::size_t>(t)] = map_.tokens[static_cast<std::size_t>(t)].midpoint();
  for (int hop = 0; hop < cfg_.map_blocks; ++hop) {
    std::vector<int> next;
    for (int t : frontier) {
      for (int u = 0; u < n; ++u) {
        if (keep[static_cast<std::size_t>(u)]) continue;
        if (within(mid[static_cast<std::size_t>(t)], mid[static_cast<std::size_t>(u)], cfg_.map_map_radius)) {
          keep[static_cast<std::size_t>(u)] = 1;
          next.push_back(u);
        }
      }
    }
    frontier = std::move(next);
  }

  MapView view;
  std::vector<int> remap(static_cast<std::size_t>(n), -1);
  for (int t = 0; t < n; ++t) {
    if (!keep[static_cast<std::size_t>(t)]) continue;
    remap[static_cast<std::size_t>(t)] = static_cast<int>(view.tokens.size());
    view.tokens.push_back(map_.tokens[static_cast<std::size_t>(t)]);
    view.source.push_back(t);
  }
  auto apply = [&](AttentionPairs& p) {
    for (int& t : p.context) t = remap[static_cast<std::size_t>(t)];
  };
  apply(mb.map);
  if (sb) apply(sb->map);
  if (hb) apply(hb->map);

  for (std::size_t i = 0; i < view.tokens.size(); ++i) {
    const auto& a = view.tokens[i];
    const Pose2 pa{a.midpoint().x, a.midpoint().y, a.heading()};
    view.self.begin_query();
    for (std::size_t j = 0; j < view.tokens.size(); ++j) {
      const auto& b = view.tokens[j];
      if (!within(a.midpoint(), b.midpoint(), cfg_.map_map_radius)) continue;
      view.self.add(static_cast<int>(j), static_cast<int>(view.self_desc.size()));
      view.self_desc.push_back(relative_descriptor(pa, {b.midpoint().x, b.midpoint().y, b.heading()}, 0));
    }
  }
  return view;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

constexpr double kEmbeddingStd = 0.02;
// Angles enter as (cos, sin) so the encoding is continuous across +-pi.
constexpr int kRelChannels = 6;
// Cell coordinates are normalized to [-1, 1]; neighbouring cells sit 2/side apart.
constexpr double kGridFreqScale = 3.0;
// Initial frequency scale per channel (distance, direction cos/sin, heading cos/sin, time).
constexpr double kFreqScale[kRelChannels] = {0.1, 0.3, 0.3, 0.3, 0.3, 0.1};

struct Registrar {
  nn::ParamSet<float>& ps;
  Rng rng;

  void linear(const std::string& name, int in, int out) {
    const int w = ps.add(name + ".w", in, out);
    ps.add(name + ".b", 1, out);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& x : ps.value(w).data) x = static_cast<float>(rng.uniform(-bound, bound));
  }
  void embedding(const std::string& name, int rows, int d) {
    const int id = ps.add(name, rows, d);
    for (auto& x : ps.value(id).data) x = static_cast<float>(kEmbeddingStd * rng.normal());
  }
  void norm(const std::string& name, int d) {
    const int g = ps.add(name + ".g", 1, d);
    ps.add(name + ".b", 1, d);
    for (auto& x : ps.value(g).data) x = 1.0f;
  }
  void mlp2(const std::string& name, int in, int d) {
    linear(name + ".l0", in, d);
    linear(name + ".l1", d, d);
  }
  void attention(const std::string& name, int d, int ffn) {
    norm(name + ".ln", d);
    norm(name + ".ln_ctx", d);
    linear(name + ".q", d, d);
    linear(name + ".k", d, d);
    linear(name + ".v", d, d);
    linear(name + ".o", d, d);
    norm(name + ".ln_f", d);
    linear(name + ".f1", d, ffn);
    linear(name + ".f2", ffn, d);
  }
  void rel(const std::string& name, int bands, int d) {
    const int f = ps.add(name + ".freqs", kRelChannels, bands);
    for (int r = 0; r < kRelChannels; ++r) {
      for (int b = 0; b < bands; ++b) ps.value(f)(r, b) = static_cast<float>(kFreqScale[r] * rng.normal());
    }
    linear(name + ".proj", 2 * kRelChannels * bands, d);
  }
  void head(const std::string& name, int d, const std::vector<int>& widths) {
    norm(name + ".ln", d);
    int in = d;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      linear(name + ".l" + std::to_string(i), in, widths[i]);
      in = widths[i];
    }
  }
};

}  // namespace

void register_parameters(const ModelConfig& cfg, nn::ParamSet<float>& params, std::uint64_t seed) {
  cfg.validate();
  const SpecialIds ids(cfg);
  const int D = cfg.d_model;
  const int F = cfg.ffn_mult * D;
  Registrar r{params, Rng(seed)};

  r.embedding("embed.motion", ids.motion_rows, D);
  r.embedding("embed.position", ids.position_rows, D);
  r.embedding("embed.heading", ids.heading_rows, D);
  r.embedding("embed.validity", 2, D);
  r.embedding("embed.type", ids.type_rows, D);
  r.mlp2("embed.shape", 3, D);
  r.mlp2("embed.diff", 3, D);
  r.linear("embed.fuse", 5 * D, D);

  r.embedding("map.kind", 5, D);
  r.mlp2("map.length", 1, D);
  {
    const int f = params.add("grid.freqs", 2, cfg.fourier_bands);
    for (auto& x : params.value(f).data) x = static_cast<float>(kGridFreqScale * r.rng.normal());
  }
  r.mlp2("grid.cell", 1 + 4 * cfg.fourier_bands, D);

  const char* rels[] = {"temporal", "agent", "map_agent", "map_map", "scene_agent", "scene_map", "heading_agent",
                        "heading_map"};
  for (const char* name : rels) r.rel(std::string("rel.") + name, cfg.fourier_bands, D);

  for (int l = 0; l < cfg.map_blocks; ++l) r.attention("map." + std::to_string(l) + ".self", D, F);
  for (int l = 0; l < cfg.motion_blocks; ++l) {
    const std::string p = "motion." + std::to_string(l);
    r.attention(p + ".temporal", D, F);
    r.attention(p + ".agent", D, F);
    r.attention(p + ".map", D, F);
  }
  for (int l = 0; l < cfg.scene_blocks; ++l) {
    const std::string p = "scene." + std::to_string(l);
    r.attention(p + ".grid", D, F);
    {
      // occupied cells start level with the whole empty grid
      const int b = params.add(p + ".grid.occupied_bias", 1, cfg.heads);
      for (auto& x : params.value(b).data) x = static_cast<float>(std::log(cfg.grid.size()));
    }
    r.attention(p + ".agent", D, F);
    r.attention(p + ".map", D, F);
  }
  for (int l = 0; l < cfg.heading_blocks; ++l) {
    const std::string p = "heading." + std::to_string(l);
    r.attention(p + ".agent", D, F);
    r.attention(p + ".map", D, F);
  }

  r.head("head.motion", D, {D, cfg.motion_vocab});
  r.head("head.control", D, {D, kControlVocab});
  r.head("head.position", D, {D, cfg.grid.size()});
  r.head("head.heading", D, {D, cfg.grid.heading_bins});
  r.head("head.shape", D, {D, D, 3});
  r.head("head.type", D, {D, 3});
}

// ---------------------------------------------------------------------------
// Network

template <class T>
typename Network<T>::Attn Network<T>::attn_ids(const std::string& p) const {
  const auto& ps = *params_;
  return {ps.id(p + ".ln.g"),   ps.id(p + ".ln.b"),   ps.id(p + ".ln_ctx.g"), ps.id(p + ".ln_ctx.b"),
          ps.id(p + ".q.w"),    ps.id(p + ".q.b"),    ps.id(p + ".k.w"),      ps.id(p + ".k.b"),
          ps.id(p + ".v.w"),    ps.id(p + ".v.b"),    ps.id(p + ".o.w"),      ps.id(p + ".o.b"),
          ps.id(p + ".ln_f.g"), ps.id(p + ".ln_f.b"), ps.id(p + ".f1.w"),     ps.id(p + ".f1.b"),
          ps.id(p + ".f2.w"),   ps.id(p + ".f2.b")};
}

template <class T>
typename Network<T>::Rel Network<T>::rel_ids(const std::string& p) const {
  return {params_->id(p + ".freqs"), params_->id(p + ".proj.w"), params_->id(p + ".proj.b")};
}

template <class T>
typename Network<T>::Head Network<T>::head_ids(const std::string& p, int layers) const {
  Head h{params_->id(p + ".ln.g"), params_->id(p + ".ln.b"), {}};
  for (int i = 0; i < layers; ++i) {
    const std::string l = p + ".l" + std::to_string(i);
    h.layers.emplace_back(params_->id(l + ".w"), params_->id(l + ".b"));
  }
  return h;
}

template <class T>
Network<T>::Network(const ModelConfig& cfg, const nn::ParamSet<T>& params) : cfg_(cfg), params_(&params) {
  const auto& ps = params;
  motion_emb_ = ps.id("embed.motion");
  position_emb_ = ps.id("embed.position");
  heading_emb_ = ps.id("embed.heading");
  validity_emb_ = ps.id("embed.validity");
  type_emb_ = ps.id("embed.type");
  fuse_w_ = ps.id("embed.fuse.w");
  fuse_b_ = ps.id("embed.fuse.b");
  map_kind_emb_ = ps.id("map.kind");
  for (int l = 0; l < cfg.map_blocks; ++l) map_self_.push_back(attn_ids("map." + std::to_string(l) + ".self"));
  for (int l = 0; l < cfg.motion_blocks; ++l) {
    const std::string p = "motion." + std::to_string(l);
    motion_temporal_.push_back(attn_ids(p + ".temporal"));
    motion_agent_.push_back(attn_ids(p + ".agent"));
    motion_map_.push_back(attn_ids(p + ".map"));
  }
  for (int l = 0; l < cfg.scene_blocks; ++l) {
    const std::string p = "scene." + std::to_string(l);
    scene_grid_.push_back(attn_ids(p + ".grid"));
    scene_grid_bias_.push_back(params.id(p + ".grid.occupied_bias"));
    scene_agent_.push_back(attn_ids(p + ".agent"));
    scene_map_.push_back(attn_ids(p + ".map"));
  }
  for (int l = 0; l < cfg.heading_blocks; ++l) {
    const std::string p = "heading." + std::to_string(l);
    heading_agent_.push_back(attn_ids(p + ".agent"));
    heading_map_.push_back(attn_ids(p + ".map"));
  }
  rel_temporal_ = rel_ids("rel.temporal");
  rel_agent_ = rel_ids("rel.agent");
  rel_map_agent_ = rel_ids("rel.map_agent");
  rel_map_map_ = rel_ids("rel.map_map");
  rel_scene_agent_ = rel_ids("rel.scene_agent");
  rel_scene_map_ = rel_ids("rel.scene_map");
  rel_heading_agent_ = rel_ids("rel.heading_agent");
  rel_heading_map_ = rel_ids("rel.heading_map");
  motion_head_ = head_ids("head.motion", 2);
  control_head_ = head_ids("head.control", 2);
  position_head_ = head_ids("head.position", 2);
  heading_head_ = head_ids("head.heading", 2);
  shape_head_ = head_ids("head.shape", 3);
  type_head_ = head_ids("head.type", 2);
}

template <class T>
Var Network<T>::mlp2(Graph<T>& g, const std::string& p, Var x) const {
  const auto& ps = *params_;
  Var h = g.gelu(g.linear(x, g.param(ps.id(p + ".l0.w")), g.param(ps.id(p + ".l0.b"))));
  return g.linear(h, g.param(ps.id(p + ".l1.w")), g.param(ps.id(p + ".l1.b")));
}

template <class T>
Var Network<T>::rel_embed(Graph<T>& g, const Rel& r, const std::vector<RelDesc>& desc) const {
  Tensor<T> d(static_cast<int>(desc.size()), kRelChannels);
  for (std::size_t i = 0; i < desc.size(); ++i) {
    T* row = d.row(static_cast<int>(i));
    row[0] = static_cast<T>(desc[i].dp);
    row[1] = static_cast<T>(std::cos(desc[i].dd));
    row[2] = static_cast<T>(std::sin(desc[i].dd));
    row[3] = static_cast<T>(std::cos(desc[i].dh));
    row[4] = static_cast<T>(std::sin(desc[i].dh));
    row[5] = static_cast<T>(desc[i].dt);
  }
  Var f = g.fourier(g.constant(std::move(d)), g.param(r.freqs));
  return g.linear(f, g.param(r.w), g.param(r.b));
}

template <class T>
Var Network<T>::attend(Graph<T>& g, const Attn& a, Var x, Var ctx, Var rel, const AttentionPairs& pairs,
                       Var key_bias) const {
  Var h = g.layer_norm(x, g.param(a.ln_g), g.param(a.ln_b));
  Var c = g.layer_norm(ctx, g.param(a.ln_ctx_g), g.param(a.ln_ctx_b));
  Var q = g.linear(h, g.param(a.wq), g.param(a.bq));
  Var k = g.linear(c, g.param(a.wk), g.param(a.bk));
  Var v = g.linear(c, g.param(a.wv), g.param(a.bv));
  Var o = g.attention(q, k, v, rel, pairs, cfg_.heads, key_bias);
  x = g.add(x, g.linear(o, g.param(a.wo), g.param(a.bo)));
  Var f = g.layer_norm(x, g.param(a.ln_f_g), g.param(a.ln_f_b));
  f = g.gelu(g.linear(f, g.param(a.w1), g.param(a.b1)));
  return g.add(x, g.linear(f, g.param(a.w2), g.param(a.b2)));
}

template <class T>
Var Network<T>::head(Graph<T>& g, const Head& h, Var x) const {
  x = g.layer_norm(x, g.param(h.ln_g), g.param(h.ln_b));
  for (std::size_t i = 0; i < h.layers.size(); ++i) {
    x = g.linear(x, g.param(h.layers[i].first), g.param(h.layers[i].second));
    if (i + 1 < h.layers.size()) x = g.gelu(x);
  }
  return x;
}

template <class T>
Var Network<T>::embed(Graph<T>& g, const std::vector<CellFeatures>& cells) const {
  const int n = static_cast<int>(cells.size());
  std::vector<int> motion, position, heading, validity, type;
  Tensor<T> shape(n, 3), diff(n, 3);
  for (int i = 0; i < n; ++i) {
    const auto& c = cells[static_cast<std::size_t>(i)];
    motion.push_back(c.motion_id);
    position.push_back(c.position_id);
    heading.push_back(c.heading_id);
    validity.push_back(c.valid ? 1 : 0);
    type.push_back(c.type_id);
    for (int j = 0; j < 3; ++j) {
      shape(i, j) = static_cast<T>(c.shape[static_cast<std::size_t>(j)]);
      diff(i, j) = static_cast<T>(c.diff[static_cast<std::size_t>(j)]);
    }
  }
  Var f_motion = g.gather_rows(g.param(motion_emb_), std::move(motion));
  Var f_pose = g.add(g.gather_rows(g.param(position_emb_), std::move(position)),
                     g.gather_rows(g.param(heading_emb_), std::move(heading)));
  Var f_valid = g.gather_rows(g.param(validity_emb_), std::move(validity));
  Var f_attr = g.add(g.gather_rows(g.param(type_emb_), std::move(type)), mlp2(g, "embed.shape", g.constant(std::move(shape))));
  Var f_diff = mlp2(g, "embed.diff", g.constant(std::move(diff)));
  return g.linear(g.concat_cols({f_motion, f_pose, f_valid, f_attr, f_diff}), g.param(fuse_w_), g.param(fuse_b_));
}

template <class T>
Var Network<T>::encode_map(Graph<T>& g, const MapView& view) const {
  const int n = static_cast<int>(view.tokens.size());
  std::vector<int> kind;
  Tensor<T> len(n, 1);
  for (int i = 0; i < n; ++i) {
    kind.push_back(static_cast<int>(view.tokens[static_cast<std::size_t>(i)].kind));
    len(i, 0) = static_cast<T>(view.tokens[static_cast<std::size_t>(i)].length());
  }
  Var x = g.add(g.gather_rows(g.param(map_kind_emb_), std::move(kind)), mlp2(g, "map.length", g.constant(std::move(len))));
  if (cfg_.map_blocks == 0) return x;
  Var rel = rel_embed(g, rel_map_map_, view.self_desc);
  for (const auto& a : map_self_) x = attend(g, a, x, x, rel, view.self);
  return x;
}

template <class T>
Var Network<T>::occupancy_table(Graph<T>& g) const {
  const int cells = cfg_.grid.size();
  const double half = cfg_.grid.half_extent();
  Tensor<T> bits(2 * cells, 1);
  Tensor<T> coords(2 * cells, 2);
  for (int bit = 0; bit < 2; ++bit) {
    for (int c = 0; c < cells; ++c) {
      const Vec2 p = decode_position(c, cfg_.grid);
      bits(bit * cells + c, 0) = static_cast<T>(bit);
      coords(bit * cells + c, 0) = static_cast<T>(p.x / half);
      coords(bit * cells + c, 1) = static_cast<T>(p.y / half);
    }
  }
  Var pos = g.fourier(g.constant(std::move(coords)), g.param(params_->id("grid.freqs")));
  return mlp2(g, "grid.cell", g.concat_cols({g.constant(std::move(bits)), pos}));
}

template <class T>
MotionOutputs<T> Network<T>::motion(Graph<T>& g, Var embeddings, const MotionBatch& mb, Var map) const {
  Var x = g.gather_rows(embeddings, mb.queries);
  if (cfg_.motion_blocks > 0) {
    Var rt = rel_embed(g, rel_temporal_, mb.temporal_desc);
    Var ra = rel_embed(g, rel_agent_, mb.agent_desc);
    Var rm = rel_embed(g, rel_map_agent_, mb.map_desc);
    for (int l = 0; l < cfg_.motion_blocks; ++l) {
      x = attend(g, motion_temporal_[static_cast<std::size_t>(l)], x, embeddings, rt, mb.temporal);
      x = attend(g, motion_agent_[static_cast<std::size_t>(l)], x, x, ra, mb.agent);
      x = attend(g, motion_map_[static_cast<std::size_t>(l)], x, map, rm, mb.map);
    }
  }
  MotionOutputs<T> out;
  out.features = x;
  out.motion_logits = head(g, motion_head_, x);
  out.control_logits = g.select_cols(head(g, control_head_, x), static_cast<int>(ControlToken::keep_agent),
                                     static_cast<int>(ControlToken::remove_agent) + 1);
  return out;
}

template <class T>
SceneOutputs<T> Network<T>::scene(Graph<T>& g, Var embeddings, const SceneBatch& sb, Var map, Var occupancy) const {
  Var q0 = embed(g, {query_features(cfg_)});
  Var pool = g.concat_rows({embeddings, q0});
  Var x = g.gather_rows(q0, std::vector<int>(sb.queries.size(), 0));
  if (cfg_.scene_blocks > 0) {
    Var ra = rel_embed(g, rel_scene_agent_, sb.agent_desc);
    Var rm = rel_embed(g, rel_scene_map_, sb.map_desc);
    const int cells = cfg_.grid.size();
    Tensor<T> bits(2 * cells, 1);
    for (int c = cells; c < 2 * cells; ++c) bits(c, 0) = T(1);
    Var occupied = g.constant(std::move(bits));
    for (int l = 0; l < cfg_.scene_blocks; ++l) {
      Var bias = g.matmul(occupied, g.param(scene_grid_bias_[static_cast<std::size_t>(l)]));
      x = attend(g, scene_grid_[static_cast<std::size_t>(l)], x, occupancy, Var{}, sb.grid, bias);
      x = attend(g, scene_agent_[static_cast<std::size_t>(l)], x, pool, ra, sb.agent);
      x = attend(g, scene_map_[static_cast<std::size_t>(l)], x, map, rm, sb.map);
    }
  }
  SceneOutputs<T> out;
  out.features = x;
  out.position_logits = head(g, position_head_, x);
  out.control_logits = g.select_cols(head(g, control_head_, x), static_cast<int>(ControlToken::begin_motion),
                                     static_cast<int>(ControlToken::add_agent) + 1);
  return out;
}

template <class T>
HeadingOutputs<T> Network<T>::heading(Graph<T>& g, Var embeddings, Var scene_features, const HeadingBatch& hb,
                                      Var map) const {
  Var x = g.add(g.gather_rows(scene_features, hb.scene_query), g.gather_rows(g.param(position_emb_), hb.position_id));
  if (cfg_.heading_blocks > 0) {
    Var ra = rel_embed(g, rel_heading_agent_, hb.agent_desc);
    Var rm = rel_embed(g, rel_heading_map_, hb.map_desc);
    for (int l = 0; l < cfg_.heading_blocks; ++l) {
      x = attend(g, heading_agent_[static_cast<std::size_t>(l)], x, embeddings, ra, hb.agent);
      x = attend(g, heading_map_[static_cast<std::size_t>(l)], x, map, rm, hb.map);
    }
  }
  HeadingOutputs<T> out;
  out.heading_logits = head(g, heading_head_, x);
  out.shape = g.softplus(head(g, shape_head_, x));
  out.type_logits = head(g, type_head_, x);
  return out;
}

template class Network<float>;
template class Network<double>;

}  // namespace longsim
