#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "longsim/geometry.hpp"
#include "longsim/scenario.hpp"

namespace longsim {

/// Raw steps per token step (0.5 s at 10 Hz).
constexpr int kTokenSpan = 5;

class TokenizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Number of token slots for a raw log of `n_steps`; every slot needs both endpoints.
int token_count(int n_steps);

// ---------------------------------------------------------------------------
// Temporal tokenization
// ---------------------------------------------------------------------------

struct TokenSlot {
  bool valid = false;
  /// Raw poses at steps [span*k, span*(k+1)] inclusive.
  std::array<Pose2, kTokenSpan + 1> raw{};
};

/// Slot k is valid iff raw steps span*k and span*(k+1) are both valid.
std::vector<TokenSlot> tokenize_time(const AgentTrack& track);
std::vector<bool> token_validity(const std::vector<TokenSlot>& slots);

// ---------------------------------------------------------------------------
// Motion vocabulary
// ---------------------------------------------------------------------------

struct MotionPrimitive {
  /// Successive offsets in the frame of the segment's start pose.
  std::array<Vec2, kTokenSpan> rel_points{};
  double rel_heading = 0.0;

  Vec2 endpoint() const { return rel_points.back(); }
  friend bool operator==(const MotionPrimitive&, const MotionPrimitive&) = default;
};

/// Meters-per-radian weight on the heading term of the primitive distance.
constexpr double kDefaultHeadingWeight = 2.0;

/// Mean L2 over the relative points plus weighted absolute heading change difference.
double primitive_distance(const MotionPrimitive& a, const MotionPrimitive& b,
                          double heading_weight = kDefaultHeadingWeight);

/// Segment described by raw poses, expressed in the frame of `frame`.
MotionPrimitive make_primitive(const Pose2& frame, const std::array<Pose2, kTokenSpan + 1>& raw);

struct MotionVocabulary {
  int span = kTokenSpan;
  int k = 32;
  std::uint64_t seed = 0;
  double heading_weight = kDefaultHeadingWeight;
  std::vector<MotionPrimitive> entries;

  int size() const { return static_cast<int>(entries.size()); }
};

/// All segments of valid token slots across a corpus, in agent frame at segment start.
std::vector<MotionPrimitive> collect_segments(const std::vector<Scenario>& corpus);

/// Greedy farthest-candidate construction: every round draws `k` candidates from the
/// segments not yet represented and admits the one farthest from the current set.
MotionVocabulary build_motion_vocabulary(const std::vector<MotionPrimitive>& segments, int size, int k,
                                         std::uint64_t seed, double heading_weight = kDefaultHeadingWeight);

/// Nearest vocabulary entry; ties go to the lowest index.
int encode_motion(const MotionPrimitive& segment, const MotionVocabulary& vocab);
Pose2 decode_motion(const Pose2& pose, int token, const MotionVocabulary& vocab);
/// The five intermediate raw poses produced by a token (last one equals decode_motion).
std::array<Pose2, kTokenSpan> decode_motion_steps(const Pose2& pose, int token, const MotionVocabulary& vocab);

void save_vocabulary(const MotionVocabulary& vocab, const std::filesystem::path& path);
MotionVocabulary load_vocabulary(const std::filesystem::path& path);
std::uint64_t vocabulary_hash(const MotionVocabulary& vocab);

// ---------------------------------------------------------------------------
// Map tokens
// ---------------------------------------------------------------------------

struct MapToken {
  Vec2 start;
  Vec2 end;
  Vec2 direction;
  PolylineKind kind = PolylineKind::lane_center;

  Vec2 midpoint() const { return 0.5 * (start + end); }
  double length() const { return distance(start, end); }
  double heading() const;
};

constexpr double kMapSegmentLength = 5.0;
constexpr int kMapTokenCap = 1024;

struct MapTokenSet {
  std::vector<MapToken> tokens;
};

/// Splits every polyline into chords of arc length <= segment_length. When more than
/// `cap` tokens result, the `cap` tokens nearest to `ego` (by midpoint) are kept, in
/// their original order.
MapTokenSet tokenize_map(const std::vector<Polyline>& map, Vec2 ego, double segment_length = kMapSegmentLength,
                         int cap = kMapTokenCap);

// ---------------------------------------------------------------------------
// Pose tokens
// ---------------------------------------------------------------------------

struct PoseGridSpec {
  int side = 43;
  double cell = 3.0;
  int heading_bins = 120;

  int size() const { return side * side; }
  int center() const { return (side / 2) * side + side / 2; }
  double half_extent() const { return cell * side / 2.0; }
  double heading_step() const { return 2.0 * kPi / heading_bins; }
};

class OutOfGridError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// `local` is expressed in the ego frame. Throws OutOfGridError beyond the grid.
int encode_position(Vec2 local, const PoseGridSpec& spec = {});
std::optional<int> try_encode_position(Vec2 local, const PoseGridSpec& spec = {});
Vec2 decode_position(int id, const PoseGridSpec& spec = {});
int encode_heading(double angle, const PoseGridSpec& spec = {});
double decode_heading(int id, const PoseGridSpec& spec = {});

/// Binary occupancy over the position grid. The ego cell is always set.
std::vector<std::uint8_t> build_occupancy_grid(const std::vector<Vec2>& agents, const Pose2& ego,
                                               const PoseGridSpec& spec = {});

// ---------------------------------------------------------------------------
// Control tokens and the ground-truth sequence
// ---------------------------------------------------------------------------

enum class ControlToken : std::uint8_t { begin_motion = 0, add_agent = 1, keep_agent = 2, remove_agent = 3, null = 4 };
constexpr int kControlVocab = 4;

std::string_view to_string(ControlToken c);

std::vector<ControlToken> derive_control_sequence(const std::vector<bool>& validity);

struct AgentTokens {
  int source_index = -1;  ///< index into Scenario::agents
  std::string id;
  AgentType type = AgentType::vehicle;
  AgentShape shape;
  std::vector<bool> valid;
  std::vector<int> motion;  ///< -1 where invalid
  std::vector<ControlToken> control;
  /// Pose at the end of each slot. Continuous at the first slot of a valid run,
  /// reconstructed from motion tokens afterwards.
  std::vector<Pose2> pose;
  int insertion_step = -1;
  int removal_step = -1;  ///< slot of REMOVE_AGENT, -1 if none

  int last_active() const;  ///< last slot of the agent's lifetime
};

struct SpatialEntry {
  int agent = -1;  ///< index into TokenizedScenario::agents
  int position_token = -1;
  int heading_token = -1;
  double ego_distance = 0.0;
};

enum class GtTokenKind : std::uint8_t { motion, control, position, heading };

struct GtToken {
  GtTokenKind kind;
  int step;
  int agent;  ///< -1 for BEGIN_MOTION
  int value;
};

struct TokenizedScenario {
  int n_tokens = 0;
  int ego = 0;  ///< index into agents
  std::vector<AgentTokens> agents;
  /// Per token step: agents inserted at that step, nearest to the ego first.
  /// Step 0 holds the initial layout and is always empty.
  std::vector<std::vector<SpatialEntry>> spatial;
  MapTokenSet map;
  int skipped_out_of_grid = 0;
  /// Ordered interleaved ground-truth sequence.
  std::vector<GtToken> sequence;

  const AgentTokens& ego_tokens() const { return agents.at(static_cast<std::size_t>(ego)); }
};

struct TokenizeOptions {
  PoseGridSpec grid;
  double map_segment_length = kMapSegmentLength;
  int map_cap = kMapTokenCap;
};

TokenizedScenario build_gt_sequence(const Scenario& scenario, const MotionVocabulary& vocab,
                                    const TokenizeOptions& options = {});

std::string serialize_tokenized(const TokenizedScenario& ts);

}  // namespace longsim
