#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "longsim/geometry.hpp"
#include "longsim/nn.hpp"
#include "longsim/scenario.hpp"
#include "longsim/tokenizer.hpp"

namespace longsim {

struct ModelConfig {
  int d_model = 128;
  int heads = 8;
  int ffn_mult = 4;
  int motion_blocks = 6;
  int scene_blocks = 3;
  int map_blocks = 3;
  int heading_blocks = 3;
  int fourier_bands = 64;
  int temporal_window = 12;
  double agent_radius = 60.0;
  double map_agent_radius = 30.0;
  double map_map_radius = 10.0;
  double query_agent_radius = 10.0;
  double query_map_radius = 75.0;
  double heading_map_radius = 10.0;
  int motion_vocab = 2048;
  int map_cap = 1024;
  int max_agents = 128;
  PoseGridSpec grid;

  /// `key = value` lines in a fixed order; parse accepts any order and ignores '#' comments.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  std::uint64_t hash() const;
  void validate() const;

  /// Desk-scale configuration used by the overfit suite.
  static ModelConfig tiny();
};

// ---------------------------------------------------------------------------
// Dynamic agent matrix
// ---------------------------------------------------------------------------

struct MatrixRow {
  std::string id;
  AgentType type = AgentType::vehicle;
  AgentShape shape;
  int first_col = 0;
  /// Per column starting at first_col.
  std::vector<int> motion;  ///< motion token that produced the column's pose; -1 where invalid
  std::vector<bool> valid;
  std::vector<Pose2> pose;  ///< world pose at the end of the column's token

  int last_col() const { return first_col + static_cast<int>(valid.size()) - 1; }
  bool has(int col) const { return col >= first_col && col <= last_col(); }
  bool valid_at(int col) const { return has(col) && valid[static_cast<std::size_t>(col - first_col)]; }
  const Pose2& pose_at(int col) const { return pose.at(static_cast<std::size_t>(col - first_col)); }
  int motion_at(int col) const { return motion.at(static_cast<std::size_t>(col - first_col)); }
};

struct AgentMatrix {
  std::vector<MatrixRow> rows;
  int ego = 0;

  const MatrixRow& ego_row() const { return rows.at(static_cast<std::size_t>(ego)); }
  const Pose2& ego_pose(int col) const { return ego_row().pose_at(col); }
};

/// Ground-truth matrix of a tokenized scenario (teacher-forcing view).
AgentMatrix matrix_from_tokens(const TokenizedScenario& ts);

// ---------------------------------------------------------------------------
// Embedding inputs
// ---------------------------------------------------------------------------

/// Constant stand-ins for differences that involve an invalid slot.
constexpr double kTransitionValue = 1.0;
constexpr double kInvalidValue = -2.0;

/// Raw inputs of one agent-embedding slot.
struct CellFeatures {
  int motion_id = 0;   ///< vocab token, or the EMPTY / START / QUERY specials
  int position_id = 0; ///< grid cell, or the out-of-grid / invalid specials
  int heading_id = 0;  ///< heading bin, or the invalid special
  bool valid = false;
  int type_id = 0;     ///< AgentType, or the query special
  std::array<double, 3> shape{};
  std::array<double, 3> diff{};  ///< motion since the previous slot, in the previous slot's frame
};

/// Difference feature between consecutive slots, with the invalid-slot substitutions.
std::array<double, 3> slot_difference(bool prev_valid, const Pose2& prev, bool cur_valid, const Pose2& cur);

/// Relative descriptor (distance, direction, heading change, time gap) of `ctx` seen from `query`.
struct RelDesc {
  double dp = 0;
  double dd = 0;
  double dh = 0;
  double dt = 0;
};
RelDesc relative_descriptor(const Pose2& query, const Pose2& ctx, double dt);
/// Descriptor of a pair where one or both slots are invalid.
RelDesc substituted_descriptor(bool query_valid, bool ctx_valid, double dt);

// ---------------------------------------------------------------------------
// Forward batches
// ---------------------------------------------------------------------------

struct CellRef {
  int row = 0;
  int col = 0;
};

/// Layer-0 embedding rows plus motion-stack queries over a set of columns.
struct MotionBatch {
  int col_begin = 0;
  int col_end = -1;
  std::vector<CellRef> cells;          ///< embedding rows
  std::vector<std::vector<int>> index; ///< [matrix row][col - col_begin] -> embedding row or -1
  std::vector<CellFeatures> features;  ///< per embedding row
  std::vector<int> queries;            ///< embedding row of each query (valid cells only)
  nn::AttentionPairs temporal;         ///< context: embedding rows
  std::vector<RelDesc> temporal_desc;
  nn::AttentionPairs agent;            ///< context: query rows
  std::vector<RelDesc> agent_desc;
  nn::AttentionPairs map;              ///< context: map tokens
  std::vector<RelDesc> map_desc;

  int embedding_row(int row, int col) const;
};

struct SceneQuery {
  int col = 0;
  /// Embedding rows (of the owning MotionBatch) visible to this query: existing
  /// agents and the agents inserted before it at this step.
  std::vector<int> pool;
  std::vector<std::uint8_t> occupancy;  ///< grid occupancy implied by the pool and the ego
};

struct SceneBatch {
  std::vector<SceneQuery> queries;
  nn::AttentionPairs grid;   ///< context: occupancy table rows (bit * cells + cell)
  nn::AttentionPairs agent;  ///< context: embedding rows, or the query-token row (= #embedding rows)
  std::vector<RelDesc> agent_desc;
  nn::AttentionPairs map;
  std::vector<RelDesc> map_desc;
};

struct HeadingBatch {
  std::vector<int> scene_query;  ///< index into SceneBatch::queries
  std::vector<int> position_id;
  nn::AttentionPairs agent;  ///< context: embedding rows
  std::vector<RelDesc> agent_desc;
  nn::AttentionPairs map;
  std::vector<RelDesc> map_desc;
};

/// Map tokens after relevance pruning, with their original indices.
struct MapView {
  std::vector<MapToken> tokens;
  std::vector<int> source;
  nn::AttentionPairs self;  ///< map-map pairs
  std::vector<RelDesc> self_desc;
};

class BatchBuilder {
 public:
  BatchBuilder(const ModelConfig& cfg, const AgentMatrix& matrix, const MapTokenSet& map);

  /// Embedding rows for every slot in columns [col_begin, col_end] and motion queries
  /// for the valid slots in columns [query_begin, col_end].
  MotionBatch motion(int col_begin, int col_end, int query_begin) const;

  /// One scene query at `col`. Its pool holds the rows valid at `col` that were not
  /// inserted at `col`, the `lingering` cells (rows pending removal, at their last
  /// column) and the rows in `inserted_before`, in that order.
  void add_scene_query(const MotionBatch& mb, int col, const std::vector<CellRef>& lingering,
                       const std::vector<int>& inserted_before, SceneBatch& sb) const;
  void add_heading_query(const MotionBatch& mb, const SceneBatch& sb, int scene_query, int position_id,
                         HeadingBatch& hb) const;

  /// Keeps the map tokens that can influence the given queries (exactly, including
  /// multi-hop map-map context) and resolves the map pairs against the kept set.
  MapView finalize_map(MotionBatch& mb, SceneBatch* sb, HeadingBatch* hb) const;

  /// World pose of the relocated query for the heading phase.
  Pose2 heading_query_pose(int col, int position_id) const;

 private:
  CellFeatures features(int row, int col) const;

  const ModelConfig& cfg_;
  const AgentMatrix& m_;
  const MapTokenSet& map_;
};

CellFeatures query_features(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// Registers every parameter of the architecture (fixed order) and initializes it.
void register_parameters(const ModelConfig& cfg, nn::ParamSet<float>& params, std::uint64_t seed);

template <class T>
struct MotionOutputs {
  nn::Var features;        ///< final motion-stack state per query
  nn::Var motion_logits;   ///< [queries, vocab]
  nn::Var control_logits;  ///< [queries, 2] over {KEEP, REMOVE}
};

template <class T>
struct SceneOutputs {
  nn::Var features;
  nn::Var position_logits;  ///< [queries, cells]
  nn::Var control_logits;   ///< [queries, 2] over {BEGIN_MOTION, ADD}
};

template <class T>
struct HeadingOutputs {
  nn::Var heading_logits;  ///< [queries, bins]
  nn::Var shape;           ///< [queries, 3], positive
  nn::Var type_logits;     ///< [queries, 3]
};

/// Graph-building forward passes. Parameter ids are resolved once by name.
template <class T>
class Network {
 public:
  Network(const ModelConfig& cfg, const nn::ParamSet<T>& params);

  const ModelConfig& config() const { return cfg_; }

  nn::Var embed(nn::Graph<T>& g, const std::vector<CellFeatures>& cells) const;
  nn::Var encode_map(nn::Graph<T>& g, const MapView& view) const;
  /// Per-cell occupancy features: rows [0, cells) for empty cells, [cells, 2*cells) for occupied.
  nn::Var occupancy_table(nn::Graph<T>& g) const;

  MotionOutputs<T> motion(nn::Graph<T>& g, nn::Var embeddings, const MotionBatch& mb, nn::Var map) const;
  SceneOutputs<T> scene(nn::Graph<T>& g, nn::Var embeddings, const SceneBatch& sb, nn::Var map,
                        nn::Var occupancy) const;
  HeadingOutputs<T> heading(nn::Graph<T>& g, nn::Var embeddings, nn::Var scene_features, const HeadingBatch& hb,
                            nn::Var map) const;

 private:
  struct Attn {
    int ln_g, ln_b, ln_ctx_g, ln_ctx_b, wq, bq, wk, bk, wv, bv, wo, bo, ln_f_g, ln_f_b, w1, b1, w2, b2;
  };
  struct Rel {
    int freqs, w, b;
  };
  struct Head {
    int ln_g, ln_b;
    std::vector<std::pair<int, int>> layers;
  };

  Attn attn_ids(const std::string& prefix) const;
  Rel rel_ids(const std::string& prefix) const;
  Head head_ids(const std::string& prefix, int layers) const;

  nn::Var rel_embed(nn::Graph<T>& g, const Rel& r, const std::vector<RelDesc>& desc) const;
  nn::Var attend(nn::Graph<T>& g, const Attn& a, nn::Var x, nn::Var ctx, nn::Var rel,
                 const nn::AttentionPairs& pairs, nn::Var key_bias = {}) const;
  nn::Var head(nn::Graph<T>& g, const Head& h, nn::Var x) const;
  nn::Var mlp2(nn::Graph<T>& g, const std::string& prefix, nn::Var x) const;

  ModelConfig cfg_;
  const nn::ParamSet<T>* params_;
  int motion_emb_, position_emb_, heading_emb_, validity_emb_, type_emb_, fuse_w_, fuse_b_;
  int map_kind_emb_;
  std::vector<Attn> motion_temporal_, motion_agent_, motion_map_;
  std::vector<Attn> map_self_;
  std::vector<Attn> scene_grid_, scene_agent_, scene_map_;
  std::vector<int> scene_grid_bias_;
  std::vector<Attn> heading_agent_, heading_map_;
  Rel rel_temporal_, rel_agent_, rel_map_agent_, rel_map_map_, rel_scene_agent_, rel_scene_map_, rel_heading_agent_,
      rel_heading_map_;
  Head motion_head_, control_head_, position_head_, heading_head_, shape_head_, type_head_;
};

/// Special embedding ids derived from the configuration.
struct SpecialIds {
  int empty_motion, start_motion, query_motion, motion_rows;
  int out_of_grid, invalid_position, position_rows;
  int invalid_heading, heading_rows;
  int query_type, type_rows;

  explicit SpecialIds(const ModelConfig& cfg);
};

}  // namespace longsim
