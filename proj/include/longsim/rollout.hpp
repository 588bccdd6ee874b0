#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "longsim/hash.hpp"
#include "longsim/model.hpp"
#include "longsim/nn.hpp"
#include "longsim/rng.hpp"
#include "longsim/scenario.hpp"
#include "longsim/tokenizer.hpp"

namespace longsim {

/// Token columns taken from the log before simulation starts (about the first 1.1 s).
constexpr int kHistoryColumns = 2;
/// Raw steps covered by the history columns.
constexpr int kHistorySteps = kHistoryColumns * kTokenSpan + 1;

/// Parameters plus the vocabulary they were trained against.
struct SimModel {
  ModelConfig config;
  nn::ParamSet<float> params;
  MotionVocabulary vocab;
};

class HashMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads a checkpoint and checks its config and vocabulary hashes against `vocab`.
SimModel load_sim_model(const std::filesystem::path& checkpoint, const MotionVocabulary& vocab);

struct SamplingPolicy {
  double motion_temperature = 1.0;
  int position_top_k = 10;
  double control_temperature = 1.0;
  int max_adds_per_step = 16;
  int max_agents = 128;

  void validate() const;
};

/// Index of the largest value; ties go to the lowest index.
int argmax(const float* logits, int n);

/// Samples from softmax(logits / temperature) restricted to the `top_k` largest
/// logits (top_k <= 0 keeps all). top_k == 1 is argmax and draws nothing.
int sample_token(const float* logits, int n, double temperature, int top_k, Rng& rng);

enum class EgoMode : std::uint8_t { model_driven, log_replay };

struct RolloutOptions {
  int horizon = 60;  ///< token steps simulated after the history
  std::uint64_t seed = 0;
  bool motion_only = false;
  EgoMode ego_mode = EgoMode::model_driven;
  SamplingPolicy policy;
};

enum class EventKind : std::uint8_t { add, remove, cap };
enum class AgentOrigin : std::uint8_t { ego, initial, inserted };

std::string_view to_string(EventKind k);
std::string_view to_string(AgentOrigin o);
std::string_view to_string(EgoMode m);

struct RolloutEvent {
  EventKind kind = EventKind::add;
  int column = 0;  ///< token column; ADD: first column of the new row, REMOVE: last column
  std::string agent_id;
  Pose2 pose;
  double ego_distance = 0.0;
};

/// Simulated scene at 10 Hz plus the event log.
struct Rollout {
  /// Map and raw agent states; `scene.n_steps` = kHistorySteps + span * horizon.
  Scenario scene;
  std::vector<AgentOrigin> origin;  ///< per agent of `scene`
  std::vector<RolloutEvent> events;
  std::vector<int> active_counts;  ///< matrix rows per token column
  RolloutOptions options;
  std::uint64_t config_hash = 0;
  std::uint64_t vocab_hash = 0;

  int horizon() const { return options.horizon; }
};

/// Interleaved motion and scene phases over a dynamic agent matrix.
class RolloutEngine {
 public:
  RolloutEngine(const SimModel& model, const Scenario& scenario, const RolloutOptions& options);

  int cursor() const { return t_; }
  bool done() const { return t_ >= kHistoryColumns - 1 + options_.horizon; }
  const AgentMatrix& matrix() const { return m_; }
  const std::vector<RolloutEvent>& events() const { return events_; }

  /// Samples motion and KEEP/REMOVE for every row active at the cursor and extends kept rows.
  void motion_phase();
  /// ADD loop at the next column, then deletes the rows that chose REMOVE; advances the cursor.
  void scene_phase();

  Rollout finish() const;

 private:
  struct Trace {
    std::string id;
    AgentType type = AgentType::vehicle;
    AgentShape shape;
    AgentOrigin origin = AgentOrigin::initial;
    std::vector<AgentState> states;
  };

  const nn::Tensor<float>& occupancy_table();
  int sample_control(const float* logits);
  void record(EventKind kind, int row, int col);

  const SimModel& model_;
  RolloutOptions options_;
  TokenizedScenario gt_;
  std::vector<Polyline> map_polylines_;
  std::vector<AgentState> ego_log_;
  Network<float> net_;
  AgentMatrix m_;
  std::vector<int> trace_of_row_;
  std::vector<char> removing_;
  std::vector<Trace> traces_;
  std::vector<RolloutEvent> events_;
  std::vector<int> counts_;
  std::optional<nn::Tensor<float>> occupancy_;
  Rng rng_;
  int t_ = kHistoryColumns - 1;
  int n_raw_ = 0;
  int next_id_ = 0;
};

Rollout run_rollout(const SimModel& model, const Scenario& scenario, const RolloutOptions& options);

/// The log as a rollout: logged poses, ADD/REMOVE events at the first/last valid token slot
/// (REMOVE only when the agent leaves before the final slot).
Rollout replay_log(const Scenario& scenario);

std::string serialize_rollout(const Rollout& r);
Rollout parse_rollout(const std::string& text);
void write_rollout(const Rollout& r, const std::filesystem::path& path);
Rollout load_rollout(const std::filesystem::path& path);

}  // namespace longsim
