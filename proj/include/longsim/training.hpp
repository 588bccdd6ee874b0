#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "longsim/model.hpp"
#include "longsim/nn.hpp"
#include "longsim/tokenizer.hpp"

namespace longsim {

// ---------------------------------------------------------------------------
// Supervision masks
// ---------------------------------------------------------------------------

/// First and last valid slot, or -1 when the track is never valid.
int first_valid(const std::vector<bool>& validity);
int last_valid(const std::vector<bool>& validity);

/// Rule-based mask over slots s; slot s supervises the prediction of slot s+1.
/// 1 at BOS, at BOS+1 iff BOS+2 is valid, strictly between iff s-1, s, s+1 are all
/// valid, 0 from EOS on. All zero when BOS == EOS.
std::vector<bool> build_motion_mask(const std::vector<bool>& validity, int bos, int eos);
std::vector<bool> build_temporal_control_mask(const std::vector<bool>& validity, int bos, int eos);

struct SpatialMasks {
  /// Per spatial token: n ADD tokens then BEGIN_MOTION; only the first `limit` are 1.
  std::vector<bool> control;
  /// [query i][context j], contexts = existing agents then new agents; 1 iff j < existing + i + 1.
  std::vector<std::vector<bool>> attention;
};
SpatialMasks build_spatial_masks(int n_inserted, int existing, int limit);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossWeights {
  double motion = 1.0;
  double position = 10.0;
  double heading = 1.0;
  double control = 10.0;
  double shape = 0.2;
  double type = 5.0;
  double keep_label = 0.1;
  double add_label = 0.1;
  double remove_label = 0.9;
  double begin_label = 0.9;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;
  double lr = 5e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int spatial_limit = 10;
  int checkpoint_every = 0;  ///< epochs between checkpoints; 0 writes only the final one
  int jobs = 1;
  LossWeights weights;

  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
};

/// Teacher-forcing inputs and targets of one scenario; independent of parameters.
struct TrainingExample {
  std::string scenario_id;
  AgentMatrix matrix;
  MotionBatch motion;
  SceneBatch scene;
  HeadingBatch heading;
  MapView map;

  // Per motion query.
  std::vector<int> motion_target;
  std::vector<double> motion_mask;
  std::vector<int> temporal_control_target;  ///< 0 KEEP, 1 REMOVE
  std::vector<double> temporal_control_mask;
  // Per scene query.
  std::vector<int> spatial_control_target;  ///< 0 BEGIN_MOTION, 1 ADD
  std::vector<double> spatial_control_mask;
  std::vector<int> position_target;
  std::vector<double> position_mask;
  // Per heading query.
  std::vector<int> heading_target;
  std::vector<int> type_target;
  std::vector<std::array<double, 3>> shape_target;
};

TrainingExample build_training_example(const TokenizedScenario& ts, const ModelConfig& cfg, int spatial_limit = 10);

struct LossTerms {
  double total = 0;
  double motion = 0;
  double position = 0;
  double heading = 0;
  double control = 0;
  double shape = 0;
  double type = 0;

  LossTerms& operator+=(const LossTerms& o);
  LossTerms scaled(double s) const;
};

template <class T>
struct LossGraph {
  nn::Var total;
  LossTerms terms;
};

/// Builds the teacher-forced forward pass and the weighted loss of one example.
template <class T>
LossGraph<T> build_loss(nn::Graph<T>& g, const Network<T>& net, const TrainingExample& ex, const LossWeights& w);

struct Accuracy {
  long motion_correct = 0, motion_total = 0;
  long temporal_correct = 0, temporal_total = 0;
  long spatial_correct = 0, spatial_total = 0;
  long position_correct = 0, position_total = 0;
  long heading_correct = 0, heading_total = 0;
  long type_correct = 0, type_total = 0;

  Accuracy& operator+=(const Accuracy& o);
  static double ratio(long c, long t) { return t > 0 ? static_cast<double>(c) / static_cast<double>(t) : 1.0; }
  double motion() const { return ratio(motion_correct, motion_total); }
  double temporal_control() const { return ratio(temporal_correct, temporal_total); }
  double spatial_control() const { return ratio(spatial_correct, spatial_total); }
  double control() const { return ratio(temporal_correct + spatial_correct, temporal_total + spatial_total); }
};

/// Argmax accuracy over the supervised tokens of one example.
Accuracy teacher_forced_accuracy(const nn::ParamSet<float>& params, const ModelConfig& cfg, const TrainingExample& ex);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainLogRow {
  long step = 0;
  int epoch = 0;
  double lr = 0;
  double grad_norm = 0;
  LossTerms loss;
};

struct TrainHooks {
  /// Called after every optimizer step.
  std::function<void(const TrainLogRow&)> on_step;
  /// Called at checkpoint epochs (and after the last epoch) with the epoch number.
  std::function<void(int, const nn::ParamSet<float>&)> on_checkpoint;
};

/// Deterministic given (examples, configs, seed), independent of `jobs`.
nn::ParamSet<float> train(const std::vector<TrainingExample>& examples, const ModelConfig& cfg,
                          const TrainConfig& tc, std::uint64_t seed, const TrainHooks& hooks = {});

/// Gradient of the mean loss over `examples`; also returns the mean loss terms.
LossTerms batch_gradient(const nn::ParamSet<float>& params, const ModelConfig& cfg,
                         const std::vector<const TrainingExample*>& examples, const LossWeights& w, int jobs,
                         std::vector<nn::Tensor<float>>& grads);

void write_loss_csv_header(std::ostream& out);
void write_loss_csv_row(std::ostream& out, const TrainLogRow& row);

}  // namespace longsim
