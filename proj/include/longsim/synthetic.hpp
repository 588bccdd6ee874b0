#pragma once

#include <cstdint>
#include <vector>

#include "longsim/scenario.hpp"

namespace longsim {

enum class MapTemplate : std::uint8_t { straight, t_intersection, four_way };

struct CorpusConfig {
  int count = 20;
  std::vector<MapTemplate> templates = {MapTemplate::straight, MapTemplate::t_intersection,
                                        MapTemplate::four_way};
  /// Non-ego agents per scenario, inclusive range.
  int min_agents = 8;
  int max_agents = 12;
  /// Fraction of non-ego agents that enter or leave the ego neighborhood mid-log.
  double through_traffic_rate = 0.5;
  int n_steps = kLogSteps;
  /// Agents are observable (valid) only inside this distance to the ego.
  double neighborhood_radius = 60.0;
};

/// Deterministic in (config, seed). Throws std::invalid_argument on infeasible configs.
std::vector<Scenario> generate_synthetic_corpus(const CorpusConfig& config, std::uint64_t seed);

/// Number of non-ego agents whose validity covers only part of the log.
int count_partial_validity(const Scenario& scenario);

}  // namespace longsim
