#include "longsim/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "longsim/rng.hpp"

namespace longsim {

namespace {

constexpr double kLaneOffset = 1.75;  // half of the 3.5 m lane spacing
constexpr double kRoadMin = -200.0;
constexpr double kRoadMax = 500.0;
constexpr double kBranchLength = 250.0;

class Route {
 public:
  explicit Route(std::vector<Vec2> pts) : pts_(std::move(pts)) {
    cum_.push_back(0.0);
    for (std::size_t i = 1; i < pts_.size(); ++i) cum_.push_back(cum_.back() + distance(pts_[i - 1], pts_[i]));
  }

  double length() const { return cum_.back(); }

  Vec2 at(double s) const {
    s = std::clamp(s, 0.0, length());
    const auto it = std::upper_bound(cum_.begin(), cum_.end(), s);
    std::size_t i = static_cast<std::size_t>(std::distance(cum_.begin(), it));
    if (i >= pts_.size()) i = pts_.size() - 1;
    if (i == 0) i = 1;
    const double seg = cum_[i] - cum_[i - 1];
    const double f = seg > 0 ? (s - cum_[i - 1]) / seg : 0.0;
    return pts_[i - 1] + f * (pts_[i] - pts_[i - 1]);
  }

  double heading_at(double s) const {
    const Vec2 a = at(s - 0.5);
    const Vec2 b = at(s + 0.5);
    return normalize_angle(std::atan2(b.y - a.y, b.x - a.x));
  }

 private:
  std::vector<Vec2> pts_;
  std::vector<double> cum_;
};

struct RouteSpec {
  Route route;
  AgentType type;
  double v_lo;
  double v_hi;
  double weight;
};

struct Layout {
  std::vector<Polyline> map;
  std::vector<RouteSpec> routes;
  int ego_route = 0;
};

std::vector<Vec2> bezier(Vec2 a, Vec2 ctrl, Vec2 b, int n = 16) {
  std::vector<Vec2> out;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const double u = 1.0 - t;
    out.push_back(u * u * a + 2.0 * u * t * ctrl + t * t * b);
  }
  return out;
}

std::vector<Vec2> join(std::vector<Vec2> a, const std::vector<Vec2>& b) {
  for (const auto& p : b) {
    if (a.empty() || !(a.back() == p)) a.push_back(p);
  }
  return a;
}

Polyline line(PolylineKind kind, Vec2 a, Vec2 b) { return {kind, {a, b}}; }

void add_main_road(Layout& L, bool four_lanes, bool split_north_edge, bool split_south_edge) {
  const double edge = four_lanes ? 7.0 : 3.5;
  L.map.push_back(line(PolylineKind::lane_center, {kRoadMin, -kLaneOffset}, {kRoadMax, -kLaneOffset}));
  L.map.push_back(line(PolylineKind::lane_center, {kRoadMax, kLaneOffset}, {kRoadMin, kLaneOffset}));
  if (four_lanes) {
    L.map.push_back(line(PolylineKind::lane_center, {kRoadMin, -3 * kLaneOffset}, {kRoadMax, -3 * kLaneOffset}));
    L.map.push_back(line(PolylineKind::lane_center, {kRoadMax, 3 * kLaneOffset}, {kRoadMin, 3 * kLaneOffset}));
  }
  auto edge_line = [&](double y, bool split) {
    if (split) {
      L.map.push_back(line(PolylineKind::road_edge, {kRoadMin, y}, {-3.5, y}));
      L.map.push_back(line(PolylineKind::road_edge, {3.5, y}, {kRoadMax, y}));
    } else {
      L.map.push_back(line(PolylineKind::road_edge, {kRoadMin, y}, {kRoadMax, y}));
    }
  };
  edge_line(-edge, split_south_edge);
  edge_line(edge, split_north_edge);

  L.ego_route = static_cast<int>(L.routes.size());
  L.routes.push_back({Route({{kRoadMin, -kLaneOffset}, {kRoadMax, -kLaneOffset}}), AgentType::vehicle, 8.0, 12.0, 3.0});
  L.routes.push_back({Route({{kRoadMax, kLaneOffset}, {kRoadMin, kLaneOffset}}), AgentType::vehicle, 8.0, 13.0, 2.0});
  if (four_lanes) {
    L.routes.push_back(
        {Route({{kRoadMin, -3 * kLaneOffset}, {kRoadMax, -3 * kLaneOffset}}), AgentType::vehicle, 6.0, 14.0, 3.0});
    L.routes.push_back(
        {Route({{kRoadMax, 3 * kLaneOffset}, {kRoadMin, 3 * kLaneOffset}}), AgentType::vehicle, 8.0, 13.0, 2.0});
  }
}

Layout straight_layout() {
  Layout L;
  add_main_road(L, true, false, false);
  L.map.push_back(line(PolylineKind::other, {kRoadMin, -8.5}, {kRoadMax, -8.5}));
  L.map.push_back(line(PolylineKind::other, {kRoadMax, 8.5}, {kRoadMin, 8.5}));
  L.routes.push_back({Route({{kRoadMin, -8.5}, {kRoadMax, -8.5}}), AgentType::cyclist, 4.0, 6.0, 0.7});
  L.routes.push_back({Route({{kRoadMax, 8.5}, {kRoadMin, 8.5}}), AgentType::cyclist, 4.0, 6.0, 0.7});
  return L;
}

void add_sidewalk(Layout& L, double y) {
  L.map.push_back(line(PolylineKind::other, {kRoadMin, y}, {kRoadMax, y}));
  L.routes.push_back({Route({{kRoadMin, y}, {kRoadMax, y}}), AgentType::pedestrian, 1.0, 1.6, 0.5});
  L.routes.push_back({Route({{kRoadMax, y}, {kRoadMin, y}}), AgentType::pedestrian, 1.0, 1.6, 0.5});
}

Layout t_layout() {
  Layout L;
  add_main_road(L, false, true, false);
  const double top = 3.5 + kBranchLength;
  L.map.push_back(line(PolylineKind::lane_center, {kLaneOffset, 3.5}, {kLaneOffset, top}));
  L.map.push_back(line(PolylineKind::lane_center, {-kLaneOffset, top}, {-kLaneOffset, 3.5}));
  L.map.push_back(line(PolylineKind::road_edge, {3.5, 3.5}, {3.5, top}));
  L.map.push_back(line(PolylineKind::road_edge, {-3.5, 3.5}, {-3.5, top}));
  L.map.push_back(line(PolylineKind::crosswalk, {-3.5, 6.0}, {3.5, 6.0}));
  L.map.push_back(line(PolylineKind::stop_line, {-3.5, 4.0}, {0.0, 4.0}));

  // Westbound main lane turning right (north) into the branch.
  auto west_to_north = join(std::vector<Vec2>{{kRoadMax, kLaneOffset}},
                            bezier({kLaneOffset + 8.0, kLaneOffset}, {kLaneOffset, kLaneOffset},
                                   {kLaneOffset, kLaneOffset + 8.0}));
  west_to_north.push_back({kLaneOffset, top});
  L.routes.push_back({Route(west_to_north), AgentType::vehicle, 6.0, 9.0, 1.0});
  // Southbound branch lane turning right (west) onto the main road.
  auto south_to_west = join(std::vector<Vec2>{{-kLaneOffset, top}},
                            bezier({-kLaneOffset, kLaneOffset + 8.0}, {-kLaneOffset, kLaneOffset},
                                   {-kLaneOffset - 8.0, kLaneOffset}));
  south_to_west.push_back({kRoadMin, kLaneOffset});
  L.routes.push_back({Route(south_to_west), AgentType::vehicle, 6.0, 9.0, 1.5});
  add_sidewalk(L, -5.0);
  return L;
}

Layout four_way_layout() {
  Layout L;
  add_main_road(L, false, true, true);
  const double lo = -3.5 - kBranchLength;
  const double hi = 3.5 + kBranchLength;
  L.map.push_back(line(PolylineKind::lane_center, {kLaneOffset, lo}, {kLaneOffset, hi}));
  L.map.push_back(line(PolylineKind::lane_center, {-kLaneOffset, hi}, {-kLaneOffset, lo}));
  for (double x : {-3.5, 3.5}) {
    L.map.push_back(line(PolylineKind::road_edge, {x, lo}, {x, -3.5}));
    L.map.push_back(line(PolylineKind::road_edge, {x, 3.5}, {x, hi}));
  }
  L.map.push_back(line(PolylineKind::crosswalk, {-6.0, -3.5}, {-6.0, 3.5}));
  L.map.push_back(line(PolylineKind::crosswalk, {6.0, -3.5}, {6.0, 3.5}));
  L.routes.push_back({Route({{kLaneOffset, lo}, {kLaneOffset, hi}}), AgentType::vehicle, 7.0, 12.0, 1.5});
  L.routes.push_back({Route({{-kLaneOffset, hi}, {-kLaneOffset, lo}}), AgentType::vehicle, 7.0, 12.0, 1.5});
  auto south_to_west = join(std::vector<Vec2>{{-kLaneOffset, hi}},
                            bezier({-kLaneOffset, kLaneOffset + 8.0}, {-kLaneOffset, kLaneOffset},
                                   {-kLaneOffset - 8.0, kLaneOffset}));
  south_to_west.push_back({kRoadMin, kLaneOffset});
  L.routes.push_back({Route(south_to_west), AgentType::vehicle, 6.0, 9.0, 1.0});
  add_sidewalk(L, -5.0);
  return L;
}

Layout make_layout(MapTemplate t) {
  switch (t) {
    case MapTemplate::straight: return straight_layout();
    case MapTemplate::t_intersection: return t_layout();
    case MapTemplate::four_way: return four_way_layout();
  }
  return straight_layout();
}

AgentShape sample_shape(AgentType type, Rng& rng) {
  switch (type) {
    case AgentType::vehicle: return {rng.uniform(4.0, 5.0), rng.uniform(1.8, 2.0), rng.uniform(1.4, 1.8)};
    case AgentType::cyclist: return {rng.uniform(1.6, 1.9), rng.uniform(0.5, 0.7), rng.uniform(1.6, 1.8)};
    case AgentType::pedestrian: return {rng.uniform(0.5, 0.7), rng.uniform(0.5, 0.7), rng.uniform(1.6, 1.9)};
  }
  return {};
}

/// Smooth speed profile: flow speed plus a slow sinusoidal modulation.
struct Motion {
  double s0;
  double v;
  double amp;
  double period;
  double phase;

  double arc(double t) const {
    const double w = 2.0 * kPi / period;
    return s0 + v * t - amp / w * (std::cos(w * t + phase) - std::cos(phase));
  }
};

std::vector<Pose2> trace(const Route& r, const Motion& m, int n_steps, std::vector<bool>* on_route) {
  std::vector<Pose2> out(static_cast<std::size_t>(n_steps));
  if (on_route) on_route->assign(static_cast<std::size_t>(n_steps), true);
  for (int t = 0; t < n_steps; ++t) {
    const double s = m.arc(t / static_cast<double>(kFps));
    const Vec2 p = r.at(s);
    out[static_cast<std::size_t>(t)] = {p.x, p.y, r.heading_at(s)};
    if (on_route && (s < 0.0 || s > r.length())) (*on_route)[static_cast<std::size_t>(t)] = false;
  }
  return out;
}

double min_separation(const std::vector<Pose2>& a, const std::vector<Pose2>& b) {
  double best = 1e18;
  for (std::size_t t = 0; t < a.size(); ++t) best = std::min(best, distance(a[t].position(), b[t].position()));
  return best;
}

Scenario generate_one(const CorpusConfig& cfg, Rng& rng) {
  const MapTemplate tmpl = cfg.templates[rng.below(cfg.templates.size())];
  Layout L = make_layout(tmpl);
  const int n = cfg.n_steps;

  std::vector<double> flow(L.routes.size());
  for (std::size_t r = 0; r < L.routes.size(); ++r) flow[r] = rng.uniform(L.routes[r].v_lo, L.routes[r].v_hi);

  Scenario sc;
  sc.map = L.map;
  sc.n_steps = n;

  const auto& ego_route = L.routes[static_cast<std::size_t>(L.ego_route)].route;
  const Motion ego_motion{rng.uniform(-80.0, -30.0) - kRoadMin, flow[static_cast<std::size_t>(L.ego_route)],
                          rng.uniform(0.0, 0.4), rng.uniform(6.0, 12.0), rng.uniform(0.0, 2.0 * kPi)};
  const auto ego_trace = trace(ego_route, ego_motion, n, nullptr);

  AgentTrack ego;
  ego.id = "ego";
  ego.type = AgentType::vehicle;
  ego.shape = sample_shape(AgentType::vehicle, rng);
  for (const auto& p : ego_trace) ego.states.push_back({p.x, p.y, p.heading, true});
  sc.agents.push_back(ego);
  sc.ego_index = 0;

  std::vector<std::vector<Pose2>> traces{ego_trace};
  std::vector<AgentType> types{AgentType::vehicle};

  const int n_agents = cfg.min_agents + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_agents - cfg.min_agents + 1)));
  const int want_through = static_cast<int>(std::ceil(cfg.through_traffic_rate * n_agents - 1e-9));
  const int want_resident = n_agents - want_through;
  int got_through = 0;
  int got_resident = 0;

  double total_weight = 0.0;
  for (const auto& r : L.routes) total_weight += r.weight;

  const Vec2 ego0 = ego_trace.front().position();
  for (int attempt = 0; attempt < 50000 && (got_through < want_through || got_resident < want_resident); ++attempt) {
    double pick = rng.uniform() * total_weight;
    std::size_t ri = 0;
    while (ri + 1 < L.routes.size() && pick >= L.routes[ri].weight) {
      pick -= L.routes[ri].weight;
      ++ri;
    }
    const auto& spec = L.routes[ri];
    // Start somewhere near the ego's initial position.
    const double s0 = rng.uniform(0.0, spec.route.length());
    if (distance(spec.route.at(s0), ego0) > 200.0) continue;

    const bool ego_lane = static_cast<int>(ri) == L.ego_route;
    const double amp = spec.type == AgentType::pedestrian ? rng.uniform(0.0, 0.2) : rng.uniform(0.0, 0.4);
    const Motion m{s0, ego_lane ? flow[ri] : flow[ri] * rng.uniform(0.97, 1.03), amp, rng.uniform(6.0, 12.0),
                   rng.uniform(0.0, 2.0 * kPi)};
    std::vector<bool> on_route;
    auto tr = trace(spec.route, m, n, &on_route);

    bool clear = true;
    for (std::size_t k = 0; k < traces.size() && clear; ++k) {
      const bool both_vehicles = spec.type == AgentType::vehicle && types[k] == AgentType::vehicle;
      clear = min_separation(tr, traces[k]) >= (both_vehicles ? 8.0 : 3.0);
    }
    if (!clear) continue;

    std::vector<bool> valid(static_cast<std::size_t>(n));
    int count = 0;
    int runs = 0;
    for (int t = 0; t < n; ++t) {
      const auto ut = static_cast<std::size_t>(t);
      valid[ut] = on_route[ut] && distance(tr[ut].position(), ego_trace[ut].position()) <= cfg.neighborhood_radius;
      count += valid[ut];
      if (valid[ut] && (t == 0 || !valid[ut - 1])) ++runs;
    }
    const bool full = count == n;
    const bool partial = !full && runs == 1 && count >= 10;
    if (full && got_resident >= want_resident) continue;
    if (partial && got_through >= want_through) continue;
    if (!full && !partial) continue;

    AgentTrack a;
    a.id = "a" + std::to_string(sc.agents.size());
    a.type = spec.type;
    a.shape = sample_shape(spec.type, rng);
    for (int t = 0; t < n; ++t) {
      const auto ut = static_cast<std::size_t>(t);
      a.states.push_back({tr[ut].x, tr[ut].y, tr[ut].heading, static_cast<bool>(valid[ut])});
    }
    sc.agents.push_back(std::move(a));
    traces.push_back(std::move(tr));
    types.push_back(spec.type);
    (full ? got_resident : got_through) += 1;
  }
  if (got_through < want_through || got_resident < want_resident) {
    throw std::runtime_error("synthetic generator could not place the requested agents");
  }
  return sc;
}

}  // namespace

std::vector<Scenario> generate_synthetic_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
  if (cfg.count < 0) throw std::invalid_argument("count must be non-negative");
  if (cfg.templates.empty()) throw std::invalid_argument("at least one map template is required");
  if (cfg.min_agents < 0 || cfg.max_agents < cfg.min_agents) throw std::invalid_argument("invalid agent count range");
  if (cfg.through_traffic_rate < 0.0 || cfg.through_traffic_rate > 1.0)
    throw std::invalid_argument("through_traffic_rate must lie in [0, 1]");
  if (cfg.max_agents == 0 && cfg.through_traffic_rate > 0.0)
    throw std::invalid_argument("through traffic requested with zero agents");
  if (cfg.n_steps < 11) throw std::invalid_argument("n_steps too short");

  std::vector<Scenario> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    // Each scenario gets its own stream so that corpora are prefix-stable in count.
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i) + 1);
    Scenario s = generate_one(cfg, rng);
    validate(s);
    out.push_back(std::move(s));
  }
  return out;
}

int count_partial_validity(const Scenario& s) {
  int n = 0;
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    if (static_cast<int>(i) == s.ego_index) continue;
    const auto& st = s.agents[i].states;
    const bool all = std::all_of(st.begin(), st.end(), [](const AgentState& x) { return x.valid; });
    const bool any = std::any_of(st.begin(), st.end(), [](const AgentState& x) { return x.valid; });
    if (any && !all) ++n;
  }
  return n;
}

}  // namespace longsim
