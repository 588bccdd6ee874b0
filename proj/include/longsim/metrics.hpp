#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "longsim/rollout.hpp"
#include "longsim/scenario.hpp"

namespace longsim {

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

struct WindowSpec {
  int length = 80;  ///< raw steps
  int stride = 20;  ///< raw steps
};

/// Raw-step range [begin, end) relative to the start of the future.
struct Window {
  int begin = 0;
  int end = 0;
};

/// Offsets 0, stride, ..., stride*(P-1); the last window ends exactly at `future`.
/// Throws std::invalid_argument when no integral P exists.
std::vector<Window> slide_windows(int future, const WindowSpec& spec);

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// Uniform bins of `width` starting at `lo`; values outside are clamped into the end bins.
struct Histogram {
  double lo = 0.0;
  double width = 1.0;
  int bins = 1;
  std::vector<double> counts;
  std::vector<double> prob;  ///< Laplace-smoothed, filled by finalize()

  Histogram() = default;
  Histogram(double lo, double width, int bins);

  int bin(double x) const;
  void add(double x) { counts[static_cast<std::size_t>(bin(x))] += 1.0; }
  void finalize(double alpha);
  double total() const;
  double nll(double x) const;
};

enum class Stat : int { speed, accel, nearest, collision, offroad, n_add, n_remove, d_add, d_remove };
constexpr int kStatCount = 9;
std::string_view to_string(Stat s);

/// Empty histogram with the bin layout of `s`.
Histogram make_histogram(Stat s);

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

struct MetricsConfig {
  WindowSpec windows;
  double count_radius = 60.0;       ///< agents counted for ACE lie within this distance of the ego
  double offroad_threshold = 3.0;   ///< meters from the nearest lane center or road edge
  double alpha = 1.0;               ///< Laplace smoothing
  double heuristic_radius = 60.0;   ///< distance-threshold placement baseline
  std::array<double, 4> weights{1.0, 1.0, 1.0, 1.0};  ///< kinematic, interactive, map, placement
};

/// ADD/REMOVE event on the raw timeline.
struct PlacementEvent {
  bool add = true;
  int step = 0;  ///< raw step
  double ego_distance = 0.0;
};

/// Raw step of a token column's end pose.
inline int column_step(int column) { return kTokenSpan * (column + 1); }

std::vector<PlacementEvent> placement_events(const Rollout& r);

struct WindowPlacement {
  int n_add = 0;
  int n_remove = 0;
  std::vector<double> d_add;
  std::vector<double> d_remove;
};

/// Events are attributed to every window covering their step.
std::vector<WindowPlacement> placement_stats(const std::vector<PlacementEvent>& events,
                                             const std::vector<Window>& windows, int future_start);

/// Agents entering (distance <= R after > R) or leaving (> R after <= R) the ego radius.
/// `trace[s]` < 0 marks an invalid step, which keeps the previous side.
std::vector<PlacementEvent> threshold_events(const std::vector<double>& trace, double radius);
/// Threshold events of every non-ego agent of a rollout.
std::vector<PlacementEvent> heuristic_placement_baseline(const Rollout& r, double radius);

/// Raw statistic samples of one rollout, plus mean agent count per window.
struct SampleSet {
  std::array<std::vector<double>, kStatCount> values;
  std::vector<double> window_counts;

  void append(const SampleSet& o);
};

/// `events` overrides the rollout's own event log when non-null.
SampleSet collect_samples(const Rollout& r, const MetricsConfig& cfg,
                          const std::vector<PlacementEvent>* events = nullptr);

// ---------------------------------------------------------------------------
// Reference and scores
// ---------------------------------------------------------------------------

struct ReferenceDistributions {
  std::array<Histogram, kStatCount> hist;
  std::array<double, kStatCount> self_nll{};  ///< mean NLL of the reference samples themselves
  double count_mean = 0.0;
  double count_spread = 0.0;  ///< population standard deviation of per-window counts
  int scenarios = 0;
  int windows = 0;
  MetricsConfig config;
};

ReferenceDistributions estimate_reference(const std::vector<Scenario>& corpus, const MetricsConfig& cfg);

void save_reference(const ReferenceDistributions& ref, const std::filesystem::path& path);
ReferenceDistributions load_reference(const std::filesystem::path& path);

/// exp(1 - NLL / NLL_self) capped at 1; self-evaluation of the reference corpus scores 1.
double nll_score(double nll, double self_nll);

struct ComponentScores {
  std::array<double, kStatCount> stat{};
  std::array<double, kStatCount> nll{};
  double kinematic = 0.0;
  double interactive = 0.0;
  double map = 0.0;
  double placement = 0.0;
};

ComponentScores compute_component_scores(const SampleSet& samples, const ReferenceDistributions& ref);

/// Weighted mean of (kinematic, interactive, map, placement).
double composite_score(const ComponentScores& c, const std::array<double, 4>& weights);

struct AceResult {
  std::vector<double> per_window;  ///< mean ACE at each window index
  double mean = 0.0;
  double slope = 0.0;
};

/// Per-rollout window counts against the reference count mean.
AceResult compute_ace(const std::vector<std::vector<double>>& window_counts, double reference_mean);
/// Least-squares slope of y against 0, 1, ...; 0 for fewer than two points.
double regression_slope(const std::vector<double>& y);

struct MetricsReport {
  ComponentScores components;
  double composite = 0.0;
  AceResult ace;
  int rollouts = 0;
  MetricsConfig config;
};

MetricsReport evaluate(const std::vector<Rollout>& rollouts, const ReferenceDistributions& ref,
                       bool heuristic_placement = false);

std::string report_text(const MetricsReport& r);
std::string report_csv(const MetricsReport& r);

}  // namespace longsim
