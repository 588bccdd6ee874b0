// Shared fixtures for the unit tests and the acceptance suite.
#pragma once

#include <cmath>
#include <vector>

#include "longsim/model.hpp"
#include "longsim/nn.hpp"
#include "longsim/synthetic.hpp"
#include "longsim/tokenizer.hpp"
#include "longsim/training.hpp"

namespace longsim::testing {

/// Every head output of one teacher-forced forward pass.
template <class T>
struct HeadValues {
  nn::Tensor<T> motion, temporal, position, spatial, heading, type, shape;
};

template <class T>
HeadValues<T> head_values(const nn::ParamSet<T>& params, const ModelConfig& cfg, const TrainingExample& ex) {
  nn::Graph<T> g(params, false);
  Network<T> net(cfg, params);
  HeadValues<T> out;
  nn::Var E = net.embed(g, ex.motion.features);
  nn::Var M = net.encode_map(g, ex.map);
  const auto mo = net.motion(g, E, ex.motion, M);
  out.motion = g.value(mo.motion_logits);
  out.temporal = g.value(mo.control_logits);
  if (!ex.scene.queries.empty()) {
    const auto so = net.scene(g, E, ex.scene, M, net.occupancy_table(g));
    out.position = g.value(so.position_logits);
    out.spatial = g.value(so.control_logits);
    if (!ex.heading.scene_query.empty()) {
      const auto ho = net.heading(g, E, so.features, ex.heading, M);
      out.heading = g.value(ho.heading_logits);
      out.type = g.value(ho.type_logits);
      out.shape = g.value(ho.shape);
    }
  }
  return out;
}

template <class T>
bool rows_identical(const nn::Tensor<T>& a, const nn::Tensor<T>& b, int ra, int rb) {
  if (a.cols != b.cols) return false;
  for (int c = 0; c < a.cols; ++c) {
    if (a(ra, c) != b(rb, c)) return false;
  }
  return true;
}

inline Scenario transform_scenario(const Scenario& s, const RigidTransform& tf) {
  Scenario out = s;
  for (auto& pl : out.map) {
    for (auto& p : pl.points) p = tf.apply(p);
  }
  for (auto& a : out.agents) {
    for (auto& st : a.states) {
      const Pose2 p = tf.apply(st.pose());
      st.x = p.x;
      st.y = p.y;
      st.heading = p.heading;
    }
  }
  return out;
}

/// The overfit corpus: 20 synthetic scenarios with through traffic.
inline const std::vector<Scenario>& overfit_corpus() {
  static const std::vector<Scenario> corpus = generate_synthetic_corpus(CorpusConfig{}, 7);
  return corpus;
}

inline const MotionVocabulary& overfit_vocab() {
  static const MotionVocabulary vocab = build_motion_vocabulary(collect_segments(overfit_corpus()), 128, 32, 1);
  return vocab;
}

/// D=16, one block of every type, small vocabulary: the gradient-check model.
inline ModelConfig micro_config(int motion_vocab) {
  ModelConfig c = ModelConfig::tiny();
  c.d_model = 16;
  c.heads = 2;
  c.motion_blocks = 1;
  c.scene_blocks = 1;
  c.map_blocks = 1;
  c.heading_blocks = 1;
  c.fourier_bands = 4;
  c.motion_vocab = motion_vocab;
  return c;
}

}  // namespace longsim::testing
