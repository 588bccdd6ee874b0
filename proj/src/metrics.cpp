#include "longsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace longsim {

using json = nlohmann::json;

std::vector<Window> slide_windows(int future, const WindowSpec& spec) {
  if (spec.length <= 0 || future < spec.length) {
    throw std::invalid_argument("window length " + std::to_string(spec.length) + " does not fit a future of " +
                                std::to_string(future) + " steps");
  }
  const int rest = future - spec.length;
  if (rest > 0 && (spec.stride <= 0 || rest % spec.stride != 0)) {
    throw std::invalid_argument("stride " + std::to_string(spec.stride) + " does not tile a future of " +
                                std::to_string(future) + " steps with windows of " + std::to_string(spec.length));
  }
  const int count = rest == 0 ? 1 : rest / spec.stride + 1;
  std::vector<Window> out;
  for (int p = 0; p < count; ++p) out.push_back({p * spec.stride, p * spec.stride + spec.length});
  return out;
}

// ---------------------------------------------------------------------------
// Histograms

Histogram::Histogram(double lo_, double width_, int bins_)
    : lo(lo_), width(width_), bins(bins_), counts(static_cast<std::size_t>(bins_), 0.0) {}

int Histogram::bin(double x) const {
  const double b = std::floor((x - lo) / width);
  if (!(b >= 0)) return 0;
  return b >= bins ? bins - 1 : static_cast<int>(b);
}

double Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), 0.0); }

void Histogram::finalize(double alpha) {
  const double z = total() + alpha * bins;
  prob.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) prob[i] = (counts[i] + alpha) / z;
}

double Histogram::nll(double x) const { return -std::log(prob.at(static_cast<std::size_t>(bin(x)))); }

std::string_view to_string(Stat s) {
  static constexpr std::array<std::string_view, kStatCount> names{
      "speed", "accel", "nearest_distance", "collision", "offroad", "n_add", "n_remove", "d_add", "d_remove"};
  return names[static_cast<std::size_t>(s)];
}

Histogram make_histogram(Stat s) {
  switch (s) {
    case Stat::speed: return {0.0, 0.5, 60};
    case Stat::accel: return {0.0, 0.5, 20};
    case Stat::nearest: return {0.0, 2.0, 40};
    case Stat::collision:
    case Stat::offroad: return {0.0, 1.0, 2};
    case Stat::n_add:
    case Stat::n_remove: return {0.0, 1.0, 21};
    case Stat::d_add:
    case Stat::d_remove: return {0.0, 5.0, 16};
  }
  throw std::invalid_argument("unknown statistic");
}

// ---------------------------------------------------------------------------
// Placement

std::vector<PlacementEvent> placement_events(const Rollout& r) {
  std::vector<PlacementEvent> out;
  for (const auto& e : r.events) {
    if (e.kind == EventKind::cap) continue;
    out.push_back({e.kind == EventKind::add, column_step(e.column), e.ego_distance});
  }
  return out;
}

std::vector<WindowPlacement> placement_stats(const std::vector<PlacementEvent>& events,
                                             const std::vector<Window>& windows, int future_start) {
  std::vector<WindowPlacement> out(windows.size());
  for (std::size_t w = 0; w < windows.size(); ++w) {
    for (const auto& e : events) {
      const int s = e.step - future_start;
      if (s < windows[w].begin || s >= windows[w].end) continue;
      if (e.add) {
        ++out[w].n_add;
        out[w].d_add.push_back(e.ego_distance);
      } else {
        ++out[w].n_remove;
        out[w].d_remove.push_back(e.ego_distance);
      }
    }
  }
  return out;
}

std::vector<PlacementEvent> threshold_events(const std::vector<double>& trace, double radius) {
  std::vector<PlacementEvent> out;
  int side = 0;  // 0 unknown, 1 inside, -1 outside
  for (int s = 0; s < static_cast<int>(trace.size()); ++s) {
    const double d = trace[static_cast<std::size_t>(s)];
    if (d < 0) continue;
    const int now = d <= radius ? 1 : -1;
    if (side != 0 && now != side) out.push_back({now == 1, s, d});
    side = now;
  }
  return out;
}

std::vector<PlacementEvent> heuristic_placement_baseline(const Rollout& r, double radius) {
  const auto& sc = r.scene;
  const auto& ego = sc.ego().states;
  std::vector<PlacementEvent> out;
  for (int i = 0; i < static_cast<int>(sc.agents.size()); ++i) {
    if (i == sc.ego_index) continue;
    const auto& st = sc.agents[static_cast<std::size_t>(i)].states;
    std::vector<double> trace(st.size(), -1.0);
    for (std::size_t s = 0; s < st.size(); ++s) {
      if (st[s].valid && ego[s].valid) trace[s] = std::hypot(st[s].x - ego[s].x, st[s].y - ego[s].y);
    }
    for (const auto& e : threshold_events(trace, radius)) out.push_back(e);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
  return out;
}

// ---------------------------------------------------------------------------
// Geometry helpers

namespace {

struct Box {
  Vec2 c;
  Vec2 ax, ay;  // unit axes
  double hl, hw;
};

Box make_box(const AgentState& s, const AgentShape& shape) {
  const Vec2 ax{std::cos(s.heading), std::sin(s.heading)};
  return {{s.x, s.y}, ax, {-ax.y, ax.x}, shape.length / 2, shape.width / 2};
}

double project_radius(const Box& b, Vec2 axis) {
  return b.hl * std::abs(dot(b.ax, axis)) + b.hw * std::abs(dot(b.ay, axis));
}

bool overlap(const Box& a, const Box& b) {
  const Vec2 d = b.c - a.c;
  for (const Vec2& axis : {a.ax, a.ay, b.ax, b.ay}) {
    if (std::abs(dot(d, axis)) > project_radius(a, axis) + project_radius(b, axis)) return false;
  }
  return true;
}

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  const double t = len2 > 0 ? std::clamp(dot(p - a, ab) / len2, 0.0, 1.0) : 0.0;
  return distance(p, a + t * ab);
}

/// Answers "is a point within `reach` of any road segment" with a uniform bucket grid.
class RoadIndex {
 public:
  RoadIndex(const std::vector<Polyline>& map, double reach) : reach_(reach), cell_(std::max(reach, 5.0)) {
    for (const auto& pl : map) {
      if (pl.kind != PolylineKind::lane_center && pl.kind != PolylineKind::road_edge) continue;
      for (std::size_t i = 0; i + 1 < pl.points.size(); ++i) {
        const Vec2 a = pl.points[i], b = pl.points[i + 1];
        const int id = static_cast<int>(segs_.size());
        segs_.push_back({a, b});
        const long x0 = key(std::min(a.x, b.x) - reach_), x1 = key(std::max(a.x, b.x) + reach_);
        const long y0 = key(std::min(a.y, b.y) - reach_), y1 = key(std::max(a.y, b.y) + reach_);
        for (long x = x0; x <= x1; ++x) {
          for (long y = y0; y <= y1; ++y) buckets_[pack(x, y)].push_back(id);
        }
      }
    }
  }

  bool near(Vec2 p) const {
    const auto it = buckets_.find(pack(key(p.x), key(p.y)));
    if (it == buckets_.end()) return false;
    for (int id : it->second) {
      const auto& s = segs_[static_cast<std::size_t>(id)];
      if (segment_distance(p, s.first, s.second) <= reach_) return true;
    }
    return false;
  }

 private:
  long key(double v) const { return static_cast<long>(std::floor(v / cell_)); }
  static long long pack(long x, long y) { return (static_cast<long long>(x) << 32) ^ static_cast<long long>(y & 0xffffffff); }

  double reach_;
  double cell_;
  std::vector<std::pair<Vec2, Vec2>> segs_;
  std::unordered_map<long long, std::vector<int>> buckets_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Samples

void SampleSet::append(const SampleSet& o) {
  for (int s = 0; s < kStatCount; ++s) {
    auto& dst = values[static_cast<std::size_t>(s)];
    const auto& src = o.values[static_cast<std::size_t>(s)];
    dst.insert(dst.end(), src.begin(), src.end());
  }
  window_counts.insert(window_counts.end(), o.window_counts.begin(), o.window_counts.end());
}

SampleSet collect_samples(const Rollout& r, const MetricsConfig& cfg, const std::vector<PlacementEvent>* events) {
  const Scenario& sc = r.scene;
  const int start = kHistorySteps;
  const int future = sc.n_steps - start;
  const std::vector<Window> windows = slide_windows(future, cfg.windows);
  const RoadIndex roads(sc.map, cfg.offroad_threshold);
  const auto& ego = sc.ego().states;
  const int n_agents = static_cast<int>(sc.agents.size());
  constexpr double dt = 1.0 / kFps;

  // Per raw step statistics are computed once and attributed to every covering window.
  struct StepStats {
    std::vector<std::array<double, 5>> per_agent;  // NaN where absent
    double count = 0;
    bool ego_valid = false;
  };
  std::vector<StepStats> steps(static_cast<std::size_t>(future));
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int f = 0; f < future; ++f) {
    const int s = start + f;
    auto& st = steps[static_cast<std::size_t>(f)];
    st.per_agent.assign(static_cast<std::size_t>(n_agents), {nan, nan, nan, nan, nan});
    st.ego_valid = ego[static_cast<std::size_t>(s)].valid;
    std::vector<int> present;
    for (int i = 0; i < n_agents; ++i) {
      if (sc.agents[static_cast<std::size_t>(i)].states[static_cast<std::size_t>(s)].valid) present.push_back(i);
    }
    std::vector<Box> boxes;
    for (int i : present) {
      const auto& a = sc.agents[static_cast<std::size_t>(i)];
      boxes.push_back(make_box(a.states[static_cast<std::size_t>(s)], a.shape));
    }
    for (std::size_t pi = 0; pi < present.size(); ++pi) {
      const int i = present[pi];
      const auto& states = sc.agents[static_cast<std::size_t>(i)].states;
      const auto& cur = states[static_cast<std::size_t>(s)];
      auto& v = st.per_agent[static_cast<std::size_t>(i)];
      if (s >= 1 && states[static_cast<std::size_t>(s - 1)].valid) {
        const auto& p1 = states[static_cast<std::size_t>(s - 1)];
        const double speed = std::hypot(cur.x - p1.x, cur.y - p1.y) / dt;
        v[0] = speed;
        if (s >= 2 && states[static_cast<std::size_t>(s - 2)].valid) {
          const auto& p2 = states[static_cast<std::size_t>(s - 2)];
          v[1] = std::abs(speed - std::hypot(p1.x - p2.x, p1.y - p2.y) / dt) / dt;
        }
      }
      double nearest = INFINITY;
      bool hit = false;
      for (std::size_t pj = 0; pj < present.size(); ++pj) {
        if (pj == pi) continue;
        const auto& o = sc.agents[static_cast<std::size_t>(present[pj])].states[static_cast<std::size_t>(s)];
        nearest = std::min(nearest, std::hypot(o.x - cur.x, o.y - cur.y));
        hit = hit || overlap(boxes[pi], boxes[pj]);
      }
      if (std::isfinite(nearest)) v[2] = nearest;
      v[3] = hit ? 1.0 : 0.0;
      v[4] = roads.near({cur.x, cur.y}) ? 0.0 : 1.0;
      if (i != sc.ego_index && st.ego_valid &&
          std::hypot(cur.x - ego[static_cast<std::size_t>(s)].x, cur.y - ego[static_cast<std::size_t>(s)].y) <=
              cfg.count_radius) {
        st.count += 1.0;
      }
    }
  }

  SampleSet out;
  for (const auto& w : windows) {
    double count_sum = 0;
    int count_steps = 0;
    for (int f = w.begin; f < w.end; ++f) {
      const auto& st = steps[static_cast<std::size_t>(f)];
      for (const auto& v : st.per_agent) {
        for (int k = 0; k < 5; ++k) {
          if (!std::isnan(v[static_cast<std::size_t>(k)])) out.values[static_cast<std::size_t>(k)].push_back(v[static_cast<std::size_t>(k)]);
        }
      }
      if (st.ego_valid) {
        count_sum += st.count;
        ++count_steps;
      }
    }
    out.window_counts.push_back(count_steps > 0 ? count_sum / count_steps : 0.0);
  }

  const std::vector<PlacementEvent> own = placement_events(r);
  const auto placement = placement_stats(events ? *events : own, windows, start);
  auto push = [&](Stat s, double x) { out.values[static_cast<std::size_t>(s)].push_back(x); };
  for (const auto& p : placement) {
    push(Stat::n_add, p.n_add);
    push(Stat::n_remove, p.n_remove);
    for (double d : p.d_add) push(Stat::d_add, d);
    for (double d : p.d_remove) push(Stat::d_remove, d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reference

namespace {

double mean_nll(const Histogram& h, const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0;
  for (double x : xs) s += h.nll(x);
  return s / static_cast<double>(xs.size());
}

}  // namespace

ReferenceDistributions estimate_reference(const std::vector<Scenario>& corpus, const MetricsConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("reference corpus is empty");
  ReferenceDistributions ref;
  ref.config = cfg;
  ref.scenarios = static_cast<int>(corpus.size());
  SampleSet all;
  for (const auto& sc : corpus) all.append(collect_samples(replay_log(sc), cfg));
  for (int s = 0; s < kStatCount; ++s) {
    auto& h = ref.hist[static_cast<std::size_t>(s)];
    h = make_histogram(static_cast<Stat>(s));
    for (double x : all.values[static_cast<std::size_t>(s)]) h.add(x);
    h.finalize(cfg.alpha);
    ref.self_nll[static_cast<std::size_t>(s)] = mean_nll(h, all.values[static_cast<std::size_t>(s)]);
  }
  ref.windows = static_cast<int>(all.window_counts.size());
  const double n = static_cast<double>(all.window_counts.size());
  ref.count_mean = std::accumulate(all.window_counts.begin(), all.window_counts.end(), 0.0) / n;
  double var = 0;
  for (double c : all.window_counts) var += (c - ref.count_mean) * (c - ref.count_mean);
  ref.count_spread = std::sqrt(var / n);
  return ref;
}

namespace {

json config_json(const MetricsConfig& c) {
  return {{"window_length", c.windows.length}, {"window_stride", c.windows.stride},
          {"count_radius", c.count_radius},    {"offroad_threshold", c.offroad_threshold},
          {"alpha", c.alpha},                  {"heuristic_radius", c.heuristic_radius},
          {"weights", c.weights}};
}

MetricsConfig config_from_json(const json& j) {
  MetricsConfig c;
  c.windows.length = j.at("window_length").get<int>();
  c.windows.stride = j.at("window_stride").get<int>();
  c.count_radius = j.at("count_radius").get<double>();
  c.offroad_threshold = j.at("offroad_threshold").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.heuristic_radius = j.at("heuristic_radius").get<double>();
  c.weights = j.at("weights").get<std::array<double, 4>>();
  return c;
}

}  // namespace

void save_reference(const ReferenceDistributions& ref, const std::filesystem::path& path) {
  json j;
  j["format"] = "longsim-reference";
  j["version"] = 1;
  j["config"] = config_json(ref.config);
  j["scenarios"] = ref.scenarios;
  j["windows"] = ref.windows;
  j["count_mean"] = ref.count_mean;
  j["count_spread"] = ref.count_spread;
  json stats = json::object();
  for (int s = 0; s < kStatCount; ++s) {
    const auto& h = ref.hist[static_cast<std::size_t>(s)];
    stats[std::string(to_string(static_cast<Stat>(s)))] = {{"lo", h.lo},
                                                           {"width", h.width},
                                                           {"bins", h.bins},
                                                           {"counts", h.counts},
                                                           {"prob", h.prob},
                                                           {"self_nll", ref.self_nll[static_cast<std::size_t>(s)]}};
  }
  j["stats"] = std::move(stats);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write reference: " + path.string());
  out << j.dump(1) << '\n';
}

ReferenceDistributions load_reference(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open reference: " + path.string());
  ReferenceDistributions ref;
  try {
    const json j = json::parse(in);
    if (j.at("format") != "longsim-reference") throw std::invalid_argument("not a reference file: " + path.string());
    ref.config = config_from_json(j.at("config"));
    ref.scenarios = j.at("scenarios").get<int>();
    ref.windows = j.at("windows").get<int>();
    ref.count_mean = j.at("count_mean").get<double>();
    ref.count_spread = j.at("count_spread").get<double>();
    for (int s = 0; s < kStatCount; ++s) {
      const auto& e = j.at("stats").at(std::string(to_string(static_cast<Stat>(s))));
      auto& h = ref.hist[static_cast<std::size_t>(s)];
      h = Histogram(e.at("lo").get<double>(), e.at("width").get<double>(), e.at("bins").get<int>());
      h.counts = e.at("counts").get<std::vector<double>>();
      h.prob = e.at("prob").get<std::vector<double>>();
      ref.self_nll[static_cast<std::size_t>(s)] = e.at("self_nll").get<double>();
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument("malformed reference " + path.string() + ": " + e.what());
  }
  return ref;
}

// ---------------------------------------------------------------------------
// Scores

double nll_score(double nll, double self_nll) {
  if (self_nll <= 0) return nll <= 0 ? 1.0 : std::exp(-nll);
  return std::min(1.0, std::exp(1.0 - nll / self_nll));
}

ComponentScores compute_component_scores(const SampleSet& samples, const ReferenceDistributions& ref) {
  ComponentScores c;
  for (int s = 0; s < kStatCount; ++s) {
    const auto& h = ref.hist[static_cast<std::size_t>(s)];
    const auto& xs = samples.values[static_cast<std::size_t>(s)];
    double nll = 0;
    if (!xs.empty()) {
      nll = mean_nll(h, xs);
    } else if (h.total() > 0) {
      // Nothing to score where the reference has mass: charge the smoothing floor.
      nll = -std::log(*std::min_element(h.prob.begin(), h.prob.end()));
    } else {
      nll = ref.self_nll[static_cast<std::size_t>(s)];
    }
    c.nll[static_cast<std::size_t>(s)] = nll;
    c.stat[static_cast<std::size_t>(s)] = nll_score(nll, ref.self_nll[static_cast<std::size_t>(s)]);
  }
  auto sc = [&](Stat s) { return c.stat[static_cast<std::size_t>(s)]; };
  c.kinematic = (sc(Stat::speed) + sc(Stat::accel)) / 2;
  c.interactive = (sc(Stat::nearest) + sc(Stat::collision)) / 2;
  c.map = sc(Stat::offroad);
  c.placement = (sc(Stat::n_add) + sc(Stat::n_remove) + sc(Stat::d_add) + sc(Stat::d_remove)) / 4;
  return c;
}

double composite_score(const ComponentScores& c, const std::array<double, 4>& w) {
  const double total = w[0] + w[1] + w[2] + w[3];
  if (!(total > 0)) throw std::invalid_argument("composite weights must have a positive sum");
  return (w[0] * c.kinematic + w[1] * c.interactive + w[2] * c.map + w[3] * c.placement) / total;
}

double regression_slope(const std::vector<double>& y) {
  const std::size_t n = y.size();
  if (n < 2) return 0.0;
  const double xm = static_cast<double>(n - 1) / 2.0;
  const double ym = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - xm;
    sxy += dx * (y[i] - ym);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

AceResult compute_ace(const std::vector<std::vector<double>>& window_counts, double reference_mean) {
  AceResult r;
  std::size_t width = 0;
  for (const auto& w : window_counts) width = std::max(width, w.size());
  std::vector<double> sum(width, 0.0);
  std::vector<int> n(width, 0);
  double total = 0;
  int count = 0;
  for (const auto& w : window_counts) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double ace = std::abs(w[i] - reference_mean);
      sum[i] += ace;
      ++n[i];
      total += ace;
      ++count;
    }
  }
  for (std::size_t i = 0; i < width; ++i) r.per_window.push_back(sum[i] / n[i]);
  r.mean = count > 0 ? total / count : 0.0;
  r.slope = regression_slope(r.per_window);
  return r;
}

MetricsReport evaluate(const std::vector<Rollout>& rollouts, const ReferenceDistributions& ref,
                       bool heuristic_placement) {
  MetricsReport rep;
  rep.config = ref.config;
  rep.rollouts = static_cast<int>(rollouts.size());
  SampleSet all;
  std::vector<std::vector<double>> counts;
  for (const auto& r : rollouts) {
    std::vector<PlacementEvent> events;
    if (heuristic_placement) events = heuristic_placement_baseline(r, ref.config.heuristic_radius);
    SampleSet s = collect_samples(r, ref.config, heuristic_placement ? &events : nullptr);
    counts.push_back(s.window_counts);
    all.append(s);
  }
  rep.components = compute_component_scores(all, ref);
  rep.composite = composite_score(rep.components, ref.config.weights);
  rep.ace = compute_ace(counts, ref.count_mean);
  return rep;
}

std::string report_text(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "rollouts " << r.rollouts << '\n';
  os << "composite " << r.composite << '\n';
  os << "kinematic " << r.components.kinematic << '\n';
  os << "interactive " << r.components.interactive << '\n';
  os << "map " << r.components.map << '\n';
  os << "placement " << r.components.placement << '\n';
  for (int s = 0; s < kStatCount; ++s) {
    os << "  " << to_string(static_cast<Stat>(s)) << " score " << r.components.stat[static_cast<std::size_t>(s)]
       << " nll " << r.components.nll[static_cast<std::size_t>(s)] << '\n';
  }
  os << "mean_ace " << r.ace.mean << '\n';
  os << "ace_slope " << r.ace.slope << '\n';
  os << "weights";
  for (double w : r.config.weights) os << ' ' << w;
  os << '\n';
  os << "windows " << r.config.windows.length << ' ' << r.config.windows.stride << '\n';
  return os.str();
}

std::string report_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "metric,value\n";
  os << "composite," << r.composite << '\n';
  os << "kinematic," << r.components.kinematic << '\n';
  os << "interactive," << r.components.interactive << '\n';
  os << "map," << r.components.map << '\n';
  os << "placement," << r.components.placement << '\n';
  for (int s = 0; s < kStatCount; ++s) {
    os << to_string(static_cast<Stat>(s)) << ',' << r.components.stat[static_cast<std::size_t>(s)] << '\n';
  }
  os << "mean_ace," << r.ace.mean << '\n';
  os << "ace_slope," << r.ace.slope << '\n';
  for (std::size_t i = 0; i < r.ace.per_window.size(); ++i) os << "ace_window_" << i << ',' << r.ace.per_window[i] << '\n';
  return os.str();
}

}  // namespace longsim
