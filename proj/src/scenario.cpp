#include "longsim/scenario.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace longsim {

using nlohmann::json;

std::string_view to_string(PolylineKind kind) {
  switch (kind) {
    case PolylineKind::lane_center: return "lane_center";
    case PolylineKind::road_edge: return "road_edge";
    case PolylineKind::crosswalk: return "crosswalk";
    case PolylineKind::stop_line: return "stop_line";
    case PolylineKind::other: return "other";
  }
  return "other";
}

std::string_view to_string(AgentType type) {
  switch (type) {
    case AgentType::vehicle: return "vehicle";
    case AgentType::pedestrian: return "pedestrian";
    case AgentType::cyclist: return "cyclist";
  }
  return "vehicle";
}

PolylineKind parse_polyline_kind(std::string_view s) {
  if (s == "lane_center") return PolylineKind::lane_center;
  if (s == "road_edge") return PolylineKind::road_edge;
  if (s == "crosswalk") return PolylineKind::crosswalk;
  if (s == "stop_line") return PolylineKind::stop_line;
  if (s == "other") return PolylineKind::other;
  throw ScenarioError("map.kind: unknown polyline kind '" + std::string(s) + "'");
}

AgentType parse_agent_type(std::string_view s) {
  if (s == "vehicle") return AgentType::vehicle;
  if (s == "pedestrian") return AgentType::pedestrian;
  if (s == "cyclist") return AgentType::cyclist;
  throw ScenarioError("agents.type: unknown agent type '" + std::string(s) + "'");
}

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw ScenarioError(what);
}

std::string agent_field(std::size_t i, const char* field) {
  return "agents[" + std::to_string(i) + "]." + field;
}

}  // namespace

void validate(const Scenario& s) {
  require(s.n_steps > 0, "n_steps: must be positive");
  require(!s.agents.empty(), "agents: scenario has no agents");
  require(s.ego_index >= 0 && static_cast<std::size_t>(s.ego_index) < s.agents.size(),
          "ego_index: out of range");

  for (std::size_t m = 0; m < s.map.size(); ++m) {
    const auto& pl = s.map[m];
    const std::string where = "map[" + std::to_string(m) + "].points";
    require(pl.points.size() >= 2, where + ": fewer than 2 points");
    for (std::size_t k = 0; k < pl.points.size(); ++k) {
      require(std::isfinite(pl.points[k].x) && std::isfinite(pl.points[k].y),
              where + ": non-finite coordinate");
      if (k > 0) require(!(pl.points[k] == pl.points[k - 1]), where + ": repeated point");
    }
  }

  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    const auto& a = s.agents[i];
    require(a.shape.length > 0 && a.shape.width > 0 && a.shape.height > 0,
            agent_field(i, "shape") + ": components must be positive");
    require(std::isfinite(a.shape.length) && std::isfinite(a.shape.width) &&
                std::isfinite(a.shape.height),
            agent_field(i, "shape") + ": non-finite");
    require(static_cast<int>(a.states.size()) == s.n_steps,
            agent_field(i, "states") + ": length " + std::to_string(a.states.size()) +
                " != n_steps " + std::to_string(s.n_steps));
    for (const auto& st : a.states) {
      require(std::isfinite(st.x) && std::isfinite(st.y), agent_field(i, "states") + ": non-finite coordinate");
      require(std::isfinite(st.heading) && st.heading > -kPi && st.heading <= kPi,
              agent_field(i, "states") + ": heading outside (-pi, pi]");
    }
  }

  const auto& ego = s.agents[static_cast<std::size_t>(s.ego_index)];
  for (int t = 0; t < s.n_steps; ++t) {
    require(ego.states[static_cast<std::size_t>(t)].valid,
            "ego_index: ego agent invalid at step " + std::to_string(t));
  }
}

std::string serialize_scenario(const Scenario& s) {
  json j;
  json map = json::array();
  for (const auto& pl : s.map) {
    json pts = json::array();
    for (const auto& p : pl.points) pts.push_back({p.x, p.y});
    map.push_back({{"kind", to_string(pl.kind)}, {"points", std::move(pts)}});
  }
  json agents = json::array();
  for (const auto& a : s.agents) {
    json states = json::array();
    for (const auto& st : a.states) states.push_back({st.x, st.y, st.heading, st.valid ? 1 : 0});
    agents.push_back({{"id", a.id},
                      {"type", to_string(a.type)},
                      {"shape", {a.shape.length, a.shape.width, a.shape.height}},
                      {"states", std::move(states)}});
  }
  j["map"] = std::move(map);
  j["agents"] = std::move(agents);
  j["ego_index"] = s.ego_index;
  j["n_steps"] = s.n_steps;
  return j.dump();
}

Scenario parse_scenario(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ScenarioError(std::string("malformed record: ") + e.what());
  }
  Scenario s;
  try {
    for (const auto& pl : j.at("map")) {
      Polyline p;
      p.kind = parse_polyline_kind(pl.at("kind").get<std::string>());
      for (const auto& pt : pl.at("points")) {
        require(pt.size() == 2, "map.points: expected [x, y]");
        p.points.push_back({pt[0].get<double>(), pt[1].get<double>()});
      }
      s.map.push_back(std::move(p));
    }
    for (const auto& ja : j.at("agents")) {
      AgentTrack a;
      a.id = ja.at("id").get<std::string>();
      a.type = parse_agent_type(ja.at("type").get<std::string>());
      const auto& sh = ja.at("shape");
      require(sh.size() == 3, "agents.shape: expected [l, w, h]");
      a.shape = {sh[0].get<double>(), sh[1].get<double>(), sh[2].get<double>()};
      for (const auto& st : ja.at("states")) {
        require(st.size() == 4, "agents.states: expected [x, y, heading, valid]");
        a.states.push_back({st[0].get<double>(), st[1].get<double>(), st[2].get<double>(),
                            st[3].get<int>() != 0});
      }
      s.agents.push_back(std::move(a));
    }
    s.ego_index = j.at("ego_index").get<int>();
    s.n_steps = j.at("n_steps").get<int>();
  } catch (const json::exception& e) {
    throw ScenarioError(std::string("schema: ") + e.what());
  }
  return s;
}

int drop_flickering_tracks(Scenario& s) {
  int dropped = 0;
  std::vector<AgentTrack> kept;
  int new_ego = 0;
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    const bool is_ego = static_cast<int>(i) == s.ego_index;
    int best = 0;
    int run = 0;
    for (const auto& st : s.agents[i].states) {
      run = st.valid ? run + 1 : 0;
      best = std::max(best, run);
    }
    if (!is_ego && best < kMinPresenceSteps) {
      ++dropped;
      continue;
    }
    if (is_ego) new_ego = static_cast<int>(kept.size());
    kept.push_back(std::move(s.agents[i]));
  }
  s.agents = std::move(kept);
  s.ego_index = new_ego;
  return dropped;
}

std::vector<Scenario> load_scenarios(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot open scenario file: " + path.string());
  std::vector<Scenario> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      Scenario s = parse_scenario(line);
      validate(s);
      drop_flickering_tracks(s);
      out.push_back(std::move(s));
    } catch (const ScenarioError& e) {
      throw ScenarioError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_scenarios(const std::vector<Scenario>& scenarios, const std::filesystem::path& path) {
  for (const auto& s : scenarios) validate(s);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write scenario file: " + path.string());
  for (const auto& s : scenarios) out << serialize_scenario(s) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace longsim
