#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "longsim/geometry.hpp"

namespace longsim {

constexpr int kFps = 10;
constexpr int kLogSteps = 91;
/// Tracks whose longest run of valid raw steps is shorter than this are dropped at load.
constexpr int kMinPresenceSteps = 5;

enum class PolylineKind : std::uint8_t { lane_center, road_edge, crosswalk, stop_line, other };
enum class AgentType : std::uint8_t { vehicle, pedestrian, cyclist };

constexpr int kNumAgentTypes = 3;

std::string_view to_string(PolylineKind kind);
std::string_view to_string(AgentType type);
PolylineKind parse_polyline_kind(std::string_view s);
AgentType parse_agent_type(std::string_view s);

struct Polyline {
  PolylineKind kind = PolylineKind::lane_center;
  std::vector<Vec2> points;

  friend bool operator==(const Polyline&, const Polyline&) = default;
};

struct AgentState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  bool valid = false;

  Pose2 pose() const { return {x, y, heading}; }
  friend bool operator==(const AgentState&, const AgentState&) = default;
};

struct AgentShape {
  double length = 4.5;
  double width = 2.0;
  double height = 1.5;

  friend bool operator==(const AgentShape&, const AgentShape&) = default;
};

struct AgentTrack {
  std::string id;
  AgentType type = AgentType::vehicle;
  AgentShape shape;
  std::vector<AgentState> states;

  friend bool operator==(const AgentTrack&, const AgentTrack&) = default;
};

struct Scenario {
  std::vector<Polyline> map;
  std::vector<AgentTrack> agents;
  int ego_index = 0;
  int n_steps = kLogSteps;

  const AgentTrack& ego() const { return agents.at(static_cast<std::size_t>(ego_index)); }
  friend bool operator==(const Scenario&, const Scenario&) = default;
};

/// Raised by validation and parsing; the message names the offending field
/// (and the line number when produced by the loader).
class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws ScenarioError on the first invariant violation.
void validate(const Scenario& scenario);

std::vector<Scenario> load_scenarios(const std::filesystem::path& path);
void write_scenarios(const std::vector<Scenario>& scenarios, const std::filesystem::path& path);

/// One record per line; exposed for tools that stream scenarios.
std::string serialize_scenario(const Scenario& scenario);
Scenario parse_scenario(std::string_view line);

/// Drops non-ego tracks with fewer than kMinPresenceSteps consecutive valid steps.
/// Returns the number of dropped tracks.
int drop_flickering_tracks(Scenario& scenario);

}  // namespace longsim
