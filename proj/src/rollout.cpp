#include "longsim/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace longsim {

using json = nlohmann::json;
using nn::Graph;
using nn::Tensor;
using nn::Var;

SimModel load_sim_model(const std::filesystem::path& checkpoint, const MotionVocabulary& vocab) {
  const nn::CheckpointHeader h = nn::read_checkpoint_header(checkpoint);
  SimModel m;
  m.config = ModelConfig::from_text(h.config_text);
  if (h.config_hash != m.config.hash()) {
    throw HashMismatchError("checkpoint config hash mismatch: header " + hex64(h.config_hash) + ", config text " +
                            hex64(m.config.hash()));
  }
  const std::uint64_t vh = vocabulary_hash(vocab);
  if (h.vocab_hash != vh || vocab.size() != m.config.motion_vocab) {
    throw HashMismatchError("vocabulary hash mismatch: checkpoint expects " + hex64(h.vocab_hash) + ", got " +
                            hex64(vh) + " (" + std::to_string(vocab.size()) + " entries)");
  }
  register_parameters(m.config, m.params, 0);
  nn::load_checkpoint(checkpoint, m.params);
  m.vocab = vocab;
  return m;
}

void SamplingPolicy::validate() const {
  if (!(motion_temperature > 0) || !(control_temperature > 0)) throw std::invalid_argument("temperatures must be > 0");
  if (position_top_k < 1) throw std::invalid_argument("position top-K must be >= 1");
  if (max_adds_per_step < 0 || max_agents < 1) throw std::invalid_argument("invalid agent caps");
}

int argmax(const float* logits, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

int sample_token(const float* logits, int n, double temperature, int top_k, Rng& rng) {
  if (n <= 0) throw std::invalid_argument("sample_token: empty support");
  if (top_k == 1) return argmax(logits, n);
  std::vector<int> support(static_cast<std::size_t>(n));
  std::iota(support.begin(), support.end(), 0);
  if (top_k > 0 && top_k < n) {
    std::stable_sort(support.begin(), support.end(), [&](int a, int b) { return logits[a] > logits[b]; });
    support.resize(static_cast<std::size_t>(top_k));
    std::sort(support.begin(), support.end());
  }
  double hi = -INFINITY;
  for (int i : support) hi = std::max(hi, static_cast<double>(logits[i]));
  std::vector<double> w;
  w.reserve(support.size());
  double z = 0;
  for (int i : support) {
    w.push_back(std::exp((logits[i] - hi) / temperature));
    z += w.back();
  }
  const double u = rng.uniform() * z;
  double acc = 0;
  for (std::size_t j = 0; j < support.size(); ++j) {
    acc += w[j];
    if (u < acc) return support[j];
  }
  return support.back();
}

std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::add: return "add";
    case EventKind::remove: return "remove";
    case EventKind::cap: return "cap";
  }
  return "?";
}

std::string_view to_string(AgentOrigin o) {
  switch (o) {
    case AgentOrigin::ego: return "ego";
    case AgentOrigin::initial: return "initial";
    case AgentOrigin::inserted: return "inserted";
  }
  return "?";
}

std::string_view to_string(EgoMode m) { return m == EgoMode::model_driven ? "model" : "log"; }

namespace {

int first_valid_slot(const std::vector<bool>& v) {
  const auto it = std::find(v.begin(), v.end(), true);
  return it == v.end() ? -1 : static_cast<int>(it - v.begin());
}

int last_valid_slot(const std::vector<bool>& v) {
  const auto it = std::find(v.rbegin(), v.rend(), true);
  return it == v.rend() ? -2 : static_cast<int>(v.rend() - it) - 1;
}

EventKind parse_event_kind(const std::string& s) {
  if (s == "add") return EventKind::add;
  if (s == "remove") return EventKind::remove;
  if (s == "cap") return EventKind::cap;
  throw std::invalid_argument("unknown event kind: " + s);
}

AgentOrigin parse_origin(const std::string& s) {
  if (s == "ego") return AgentOrigin::ego;
  if (s == "initial") return AgentOrigin::initial;
  if (s == "inserted") return AgentOrigin::inserted;
  throw std::invalid_argument("unknown agent origin: " + s);
}

TokenizeOptions tokenize_options(const ModelConfig& cfg) {
  TokenizeOptions o;
  o.grid = cfg.grid;
  o.map_cap = cfg.map_cap;
  return o;
}

}  // namespace

// ---------------------------------------------------------------------------
// Engine

RolloutEngine::RolloutEngine(const SimModel& model, const Scenario& scenario, const RolloutOptions& options)
    : model_(model),
      options_(options),
      gt_(build_gt_sequence(scenario, model.vocab, tokenize_options(model.config))),
      map_polylines_(scenario.map),
      ego_log_(scenario.ego().states),
      net_(model.config, model.params),
      rng_(options.seed) {
  options_.policy.validate();
  if (options_.horizon < 0) throw std::invalid_argument("horizon must be >= 0");
  if (gt_.n_tokens < kHistoryColumns) {
    throw std::invalid_argument("scenario shorter than the history (" + std::to_string(kHistorySteps) + " steps)");
  }
  n_raw_ = kHistorySteps + kTokenSpan * options_.horizon;

  const AgentMatrix full = matrix_from_tokens(gt_);
  const int last_hist = kHistoryColumns - 1;
  if (!full.ego_row().valid_at(last_hist)) throw std::invalid_argument("ego is not valid at the end of the history");
  for (int r = 0; r < static_cast<int>(full.rows.size()); ++r) {
    const auto& src = full.rows[static_cast<std::size_t>(r)];
    if (!src.valid_at(last_hist)) continue;
    MatrixRow row = src;
    const auto keep = static_cast<std::size_t>(last_hist - row.first_col + 1);
    row.motion.resize(keep);
    row.valid.resize(keep);
    row.pose.resize(keep);
    if (r == full.ego) m_.ego = static_cast<int>(m_.rows.size());
    // the log already removes it at the end of the history; the first motion phase applies that
    const bool leaving = gt_.agents[static_cast<std::size_t>(r)].control[static_cast<std::size_t>(last_hist)] ==
                         ControlToken::remove_agent;
    removing_.push_back(leaving && !options_.motion_only ? 1 : 0);
    trace_of_row_.push_back(static_cast<int>(traces_.size()));
    m_.rows.push_back(std::move(row));

    const auto& track = scenario.agents[static_cast<std::size_t>(gt_.agents[static_cast<std::size_t>(r)].source_index)];
    Trace tr;
    tr.id = src.id;
    tr.type = src.type;
    tr.shape = src.shape;
    tr.origin = r == full.ego ? AgentOrigin::ego : AgentOrigin::initial;
    tr.states.assign(static_cast<std::size_t>(n_raw_), AgentState{});
    for (int s = 0; s < kHistorySteps && s < static_cast<int>(track.states.size()); ++s) {
      tr.states[static_cast<std::size_t>(s)] = track.states[static_cast<std::size_t>(s)];
    }
    traces_.push_back(std::move(tr));
  }
  for (int c = 0; c < kHistoryColumns; ++c) {
    counts_.push_back(static_cast<int>(
        std::count_if(m_.rows.begin(), m_.rows.end(), [c](const MatrixRow& r) { return r.valid_at(c); })));
  }
}

const Tensor<float>& RolloutEngine::occupancy_table() {
  if (!occupancy_) {
    Graph<float> g(model_.params, false);
    occupancy_ = g.value(net_.occupancy_table(g));
  }
  return *occupancy_;
}

int RolloutEngine::sample_control(const float* logits) {
  const int c = sample_token(logits, 2, options_.policy.control_temperature, 0, rng_);
  if (c < 0 || c > 1) throw std::logic_error("control sample outside its restricted support");
  return c;
}

void RolloutEngine::record(EventKind kind, int row, int col) {
  const auto& r = m_.rows[static_cast<std::size_t>(row)];
  RolloutEvent e;
  e.kind = kind;
  e.column = col;
  e.agent_id = r.id;
  e.pose = r.pose_at(col);
  e.ego_distance = distance(e.pose.position(), m_.ego_pose(col).position());
  events_.push_back(std::move(e));
}

void RolloutEngine::motion_phase() {
  if (done()) throw std::logic_error("rollout horizon already reached");
  const int t = t_;
  const BatchBuilder builder(model_.config, m_, gt_.map);
  MotionBatch mb = builder.motion(std::max(0, t - model_.config.temporal_window), t, t);
  const MapView view = builder.finalize_map(mb, nullptr, nullptr);
  Graph<float> g(model_.params, false);
  const Var E = net_.embed(g, mb.features);
  const Var M = net_.encode_map(g, view);
  const MotionOutputs<float> out = net_.motion(g, E, mb, M);
  const Tensor<float>& motion_logits = g.value(out.motion_logits);
  const Tensor<float>& control_logits = g.value(out.control_logits);

  const int base = kHistorySteps + kTokenSpan * (t - (kHistoryColumns - 1));
  const auto& gt_ego = gt_.ego_tokens();
  const bool replay_ego = options_.ego_mode == EgoMode::log_replay && t + 1 < gt_.n_tokens && base + kTokenSpan <= static_cast<int>(ego_log_.size()) &&
                          gt_ego.valid[static_cast<std::size_t>(t + 1)];
  for (int q = 0; q < static_cast<int>(mb.queries.size()); ++q) {
    const int r = mb.cells[static_cast<std::size_t>(mb.queries[static_cast<std::size_t>(q)])].row;
    auto& row = m_.rows[static_cast<std::size_t>(r)];
    auto& trace = traces_[static_cast<std::size_t>(trace_of_row_[static_cast<std::size_t>(r)])];
    const bool is_ego = r == m_.ego;

    bool keep = !removing_[static_cast<std::size_t>(r)];
    if (keep && !options_.motion_only && !is_ego) keep = sample_control(control_logits.row(q)) == 0;
    if (!keep) {
      removing_[static_cast<std::size_t>(r)] = 1;
      record(EventKind::remove, r, t);
      continue;
    }

    int token = 0;
    std::array<Pose2, kTokenSpan> steps{};
    if (is_ego && replay_ego) {
      token = gt_ego.motion[static_cast<std::size_t>(t + 1)];
      for (int j = 0; j < kTokenSpan; ++j) steps[static_cast<std::size_t>(j)] = ego_log_[static_cast<std::size_t>(base + j)].pose();
    } else {
      token = sample_token(motion_logits.row(q), motion_logits.cols, options_.policy.motion_temperature, 0, rng_);
      steps = decode_motion_steps(row.pose_at(t), token, model_.vocab);
    }
    row.motion.push_back(token);
    row.valid.push_back(true);
    // the matrix keeps the token pose the model was trained on; the trace keeps the log
    row.pose.push_back(is_ego && replay_ego ? gt_ego.pose[static_cast<std::size_t>(t + 1)] : steps.back());
    for (int j = 0; j < kTokenSpan; ++j) {
      const Pose2& p = steps[static_cast<std::size_t>(j)];
      trace.states[static_cast<std::size_t>(base + j)] = {p.x, p.y, p.heading, true};
    }
  }
}

void RolloutEngine::scene_phase() {
  const int c = t_ + 1;
  if (m_.ego_row().last_col() != c) throw std::logic_error("scene phase before the motion phase");
  if (!options_.motion_only) {
    std::vector<CellRef> lingering;
    int active = 0;
    for (int r = 0; r < static_cast<int>(m_.rows.size()); ++r) {
      if (removing_[static_cast<std::size_t>(r)]) {
        lingering.push_back({r, t_});
      } else {
        ++active;
      }
    }
    std::vector<int> inserted;
    const auto& policy = options_.policy;
    const Tensor<float>& gamma = occupancy_table();
    while (true) {
      const BatchBuilder builder(model_.config, m_, gt_.map);
      MotionBatch mb = builder.motion(t_, c, c + 1);
      SceneBatch sb;
      builder.add_scene_query(mb, c, lingering, inserted, sb);
      MotionBatch mb_scene = mb;
      SceneBatch sb_scene = sb;
      const MapView view = builder.finalize_map(mb_scene, &sb_scene, nullptr);

      Graph<float> g(model_.params, false);
      const Var E = net_.embed(g, mb_scene.features);
      const Var M = net_.encode_map(g, view);
      const SceneOutputs<float> so = net_.scene(g, E, sb_scene, M, g.constant(gamma));
      if (sample_control(g.value(so.control_logits).row(0)) == 0) break;  // BEGIN_MOTION
      if (active >= policy.max_agents || static_cast<int>(inserted.size()) >= policy.max_adds_per_step) {
        RolloutEvent e;
        e.kind = EventKind::cap;
        e.column = c;
        e.pose = m_.ego_pose(c);
        events_.push_back(std::move(e));
        break;
      }
      const Tensor<float>& pos_logits = g.value(so.position_logits);
      const int cell = sample_token(pos_logits.row(0), pos_logits.cols, 1.0, policy.position_top_k, rng_);

      HeadingBatch hb;
      builder.add_heading_query(mb, sb, 0, cell, hb);
      const MapView hview = builder.finalize_map(mb, &sb, &hb);
      Graph<float> g2(model_.params, false);
      const Var E2 = net_.embed(g2, mb.features);
      const Var M2 = net_.encode_map(g2, hview);
      const SceneOutputs<float> so2 = net_.scene(g2, E2, sb, M2, g2.constant(gamma));
      const HeadingOutputs<float> ho = net_.heading(g2, E2, so2.features, hb, M2);
      const Tensor<float>& hl = g2.value(ho.heading_logits);
      const Tensor<float>& tl = g2.value(ho.type_logits);
      const Tensor<float>& shape = g2.value(ho.shape);

      const Vec2 local = decode_position(cell, model_.config.grid);
      const double heading = decode_heading(argmax(hl.row(0), hl.cols), model_.config.grid);
      const Pose2 pose = compose(m_.ego_pose(c), {local.x, local.y, heading});

      MatrixRow row;
      row.id = "sim_" + std::to_string(next_id_++);
      row.type = static_cast<AgentType>(argmax(tl.row(0), tl.cols));
      row.shape = {shape(0, 0), shape(0, 1), shape(0, 2)};
      row.first_col = c;
      row.motion = {-1};
      row.valid = {true};
      row.pose = {pose};

      Trace tr;
      tr.id = row.id;
      tr.type = row.type;
      tr.shape = row.shape;
      tr.origin = AgentOrigin::inserted;
      tr.states.assign(static_cast<std::size_t>(n_raw_), AgentState{});
      const int raw = kHistorySteps - 1 + kTokenSpan * (c - (kHistoryColumns - 1));
      tr.states[static_cast<std::size_t>(raw)] = {pose.x, pose.y, pose.heading, true};

      const int r = static_cast<int>(m_.rows.size());
      m_.rows.push_back(std::move(row));
      trace_of_row_.push_back(static_cast<int>(traces_.size()));
      traces_.push_back(std::move(tr));
      removing_.push_back(0);
      inserted.push_back(r);
      ++active;
      record(EventKind::add, r, c);
    }
  }

  AgentMatrix kept;
  std::vector<int> trace_of_row;
  for (std::size_t r = 0; r < m_.rows.size(); ++r) {
    if (removing_[r]) continue;
    if (static_cast<int>(r) == m_.ego) kept.ego = static_cast<int>(kept.rows.size());
    kept.rows.push_back(std::move(m_.rows[r]));
    trace_of_row.push_back(trace_of_row_[r]);
  }
  m_ = std::move(kept);
  trace_of_row_ = std::move(trace_of_row);
  removing_.assign(m_.rows.size(), 0);
  counts_.push_back(static_cast<int>(m_.rows.size()));
  t_ = c;
}

Rollout RolloutEngine::finish() const {
  Rollout out;
  out.scene.map = map_polylines_;
  out.scene.n_steps = n_raw_;
  out.scene.ego_index = 0;
  out.options = options_;
  out.config_hash = model_.config.hash();
  out.vocab_hash = vocabulary_hash(model_.vocab);
  out.events = events_;
  out.active_counts = counts_;
  // Ego first, then the remaining traces in creation order.
  std::vector<std::size_t> order(traces_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_partition(order.begin(), order.end(),
                        [&](std::size_t i) { return traces_[i].origin == AgentOrigin::ego; });
  for (std::size_t i : order) {
    const auto& tr = traces_[i];
    AgentTrack a;
    a.id = tr.id;
    a.type = tr.type;
    a.shape = tr.shape;
    a.states = tr.states;
    out.scene.agents.push_back(std::move(a));
    out.origin.push_back(tr.origin);
  }
  return out;
}

Rollout run_rollout(const SimModel& model, const Scenario& scenario, const RolloutOptions& options) {
  RolloutEngine engine(model, scenario, options);
  while (!engine.done()) {
    engine.motion_phase();
    engine.scene_phase();
  }
  return engine.finish();
}

Rollout replay_log(const Scenario& scenario) {
  Rollout out;
  out.scene = scenario;
  out.options.horizon = std::max(0, (scenario.n_steps - kHistorySteps) / kTokenSpan);
  out.options.ego_mode = EgoMode::log_replay;
  const int last_col = kHistoryColumns - 1 + out.options.horizon;
  const auto& ego = scenario.ego().states;
  auto raw_pose = [](const AgentTrack& a, int col) { return a.states[static_cast<std::size_t>(kTokenSpan * (col + 1))].pose(); };

  std::vector<int> first(scenario.agents.size(), -1), last(scenario.agents.size(), -2);
  for (std::size_t i = 0; i < scenario.agents.size(); ++i) {
    const auto& a = scenario.agents[i];
    const std::vector<bool> valid = token_validity(tokenize_time(a));
    first[i] = first_valid_slot(valid);
    last[i] = last_valid_slot(valid);
    AgentOrigin o = AgentOrigin::initial;
    if (static_cast<int>(i) == scenario.ego_index) {
      o = AgentOrigin::ego;
    } else if (first[i] >= kHistoryColumns) {
      o = AgentOrigin::inserted;
    }
    out.origin.push_back(o);
  }
  auto event = [&](EventKind kind, std::size_t i, int col) {
    RolloutEvent e;
    e.kind = kind;
    e.column = col;
    e.agent_id = scenario.agents[i].id;
    e.pose = raw_pose(scenario.agents[i], col);
    e.ego_distance = distance(e.pose.position(), ego[static_cast<std::size_t>(kTokenSpan * (col + 1))].pose().position());
    return e;
  };
  const int n_tokens = token_count(scenario.n_steps);
  for (int c = kHistoryColumns - 1; c <= last_col; ++c) {
    for (std::size_t i = 0; i < scenario.agents.size(); ++i) {
      if (static_cast<int>(i) != scenario.ego_index && first[i] == c && c >= kHistoryColumns) {
        out.events.push_back(event(EventKind::add, i, c));
      }
    }
    for (std::size_t i = 0; i < scenario.agents.size(); ++i) {
      if (static_cast<int>(i) != scenario.ego_index && last[i] == c && c < n_tokens - 1) {
        out.events.push_back(event(EventKind::remove, i, c));
      }
    }
  }
  for (int c = 0; c <= last_col; ++c) {
    int n = 0;
    for (std::size_t i = 0; i < scenario.agents.size(); ++i) n += first[i] >= 0 && first[i] <= c && c <= last[i];
    out.active_counts.push_back(n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

std::string serialize_rollout(const Rollout& r) {
  json j;
  j["format"] = "longsim-rollout";
  j["version"] = 1;
  j["horizon"] = r.options.horizon;
  j["seed"] = r.options.seed;
  j["motion_only"] = r.options.motion_only;
  j["ego_mode"] = to_string(r.options.ego_mode);
  const auto& p = r.options.policy;
  j["policy"] = {{"motion_temperature", p.motion_temperature},
                 {"position_top_k", p.position_top_k},
                 {"control_temperature", p.control_temperature},
                 {"max_adds_per_step", p.max_adds_per_step},
                 {"max_agents", p.max_agents}};
  j["config_hash"] = hex64(r.config_hash);
  j["vocab_hash"] = hex64(r.vocab_hash);
  j["scene"] = json::parse(serialize_scenario(r.scene));
  json origin = json::array();
  for (auto o : r.origin) origin.push_back(to_string(o));
  j["origin"] = std::move(origin);
  json events = json::array();
  for (const auto& e : r.events) {
    events.push_back({{"kind", to_string(e.kind)},
                      {"column", e.column},
                      {"agent", e.agent_id},
                      {"pose", {e.pose.x, e.pose.y, e.pose.heading}},
                      {"ego_distance", e.ego_distance}});
  }
  j["events"] = std::move(events);
  j["active_counts"] = r.active_counts;
  return j.dump();
}

Rollout parse_rollout(const std::string& text) {
  Rollout r;
  try {
    const json j = json::parse(text);
    if (j.at("format") != "longsim-rollout") throw std::invalid_argument("not a rollout file");
    r.options.horizon = j.at("horizon").get<int>();
    r.options.seed = j.at("seed").get<std::uint64_t>();
    r.options.motion_only = j.at("motion_only").get<bool>();
    r.options.ego_mode = j.at("ego_mode") == "log" ? EgoMode::log_replay : EgoMode::model_driven;
    const auto& p = j.at("policy");
    r.options.policy.motion_temperature = p.at("motion_temperature").get<double>();
    r.options.policy.position_top_k = p.at("position_top_k").get<int>();
    r.options.policy.control_temperature = p.at("control_temperature").get<double>();
    r.options.policy.max_adds_per_step = p.at("max_adds_per_step").get<int>();
    r.options.policy.max_agents = p.at("max_agents").get<int>();
    r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    r.vocab_hash = std::stoull(j.at("vocab_hash").get<std::string>(), nullptr, 16);
    r.scene = parse_scenario(j.at("scene").dump());
    for (const auto& o : j.at("origin")) r.origin.push_back(parse_origin(o.get<std::string>()));
    for (const auto& e : j.at("events")) {
      RolloutEvent ev;
      ev.kind = parse_event_kind(e.at("kind").get<std::string>());
      ev.column = e.at("column").get<int>();
      ev.agent_id = e.at("agent").get<std::string>();
      const auto& pose = e.at("pose");
      ev.pose = {pose.at(0).get<double>(), pose.at(1).get<double>(), pose.at(2).get<double>()};
      ev.ego_distance = e.at("ego_distance").get<double>();
      r.events.push_back(std::move(ev));
    }
    r.active_counts = j.at("active_counts").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed rollout: ") + e.what());
  }
  if (r.origin.size() != r.scene.agents.size()) throw std::invalid_argument("malformed rollout: origin count");
  return r;
}

void write_rollout(const Rollout& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write rollout: " + path.string());
  out << serialize_rollout(r) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Rollout load_rollout(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open rollout: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_rollout(ss.str());
}

}  // namespace longsim
