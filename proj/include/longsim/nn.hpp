#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace longsim::nn {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix.
template <class T>
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int r, int c, T fill = T(0)) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  T operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  T* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

/// Named parameter tensors. Ids are stable insertion indices.
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  int add(std::string name, int rows, int cols);
  int id(const std::string& name) const;
  Tensor<T>& value(int id) { return entries_[static_cast<std::size_t>(id)].value; }
  const Tensor<T>& value(int id) const { return entries_[static_cast<std::size_t>(id)].value; }
  const std::string& name(int id) const { return entries_[static_cast<std::size_t>(id)].name; }
  int size() const { return static_cast<int>(entries_.size()); }
  std::size_t scalar_count() const;
  std::vector<Tensor<T>> zeros_like() const;

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) {
      const int id = out.add(e.name, e.value.rows, e.value.cols);
      for (std::size_t i = 0; i < e.value.size(); ++i) out.value(id).data[i] = static_cast<U>(e.value.data[i]);
    }
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

/// Sparse (query, context) admission list for masked attention, grouped by query.
/// `rel[p]` indexes a row of the relative-encoding matrix, or -1 for none.
struct AttentionPairs {
  int n_queries = 0;
  std::vector<int> offsets{0};  ///< size n_queries + 1
  std::vector<int> context;
  std::vector<int> rel;

  /// Appends the pairs of the next query; call once per query in order.
  void begin_query() { ++n_queries; offsets.push_back(offsets.back()); }
  void add(int ctx, int rel_row) {
    context.push_back(ctx);
    rel.push_back(rel_row);
    ++offsets.back();
  }
  int pair_count() const { return static_cast<int>(context.size()); }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. One graph per forward pass; parameters are read from the
/// ParamSet and their gradients are collected per graph, so several graphs can
/// run on different threads against the same parameters.
template <class T>
class Graph {
 public:
  /// With `track_grads` false no backward closures are recorded (inference).
  explicit Graph(const ParamSet<T>& params, bool track_grads = true) : params_(&params), track_(track_grads) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var param(int pid);
  Var constant(Tensor<T> value);
  /// A leaf whose gradient is tracked (used for input-sensitivity checks).
  Var input(Tensor<T> value);

  const Tensor<T>& value(Var v) const { return val(node(v)); }
  const Tensor<T>& grad(Var v) const { return node(v).grad; }
  T scalar(Var v) const { return value(v).data.at(0); }

  Var matmul(Var a, Var b);
  /// x W + b, with b a 1 x out row (optional).
  Var linear(Var x, Var w, Var b = {});
  Var add(Var a, Var b);
  /// Adds a 1 x cols row to every row of a.
  Var add_row(Var a, Var row);
  Var scale(Var a, T s);
  Var gelu(Var a);
  Var relu(Var a);
  Var softplus(Var a);
  Var layer_norm(Var x, Var gain, Var bias);
  Var gather_rows(Var table, std::vector<int> index);
  Var concat_cols(const std::vector<Var>& parts);
  Var concat_rows(const std::vector<Var>& parts);
  Var select_cols(Var x, int begin, int end);
  /// [sin(2*pi*x_d*f_db), cos(2*pi*x_d*f_db)] for every descriptor d and band b.
  /// desc is n x m, freqs is m x B; output n x (2*m*B).
  Var fourier(Var desc, Var freqs);
  /// Multi-head attention over admitted pairs. key' = k + rel, value' = v + rel.
  /// Queries with no admitted context output zero.
  /// `key_bias` (context rows x heads), when given, is added to the scaled scores.
  Var attention(Var q, Var k, Var v, Var rel, const AttentionPairs& pairs, int heads, Var key_bias = {});
  /// sum_i w_i CE(logits_i, target_i) / sum_i w_i; zero when all weights vanish.
  Var weighted_cross_entropy(Var logits, std::vector<int> target, std::vector<T> weight);
  /// Mean absolute error over weighted rows; zero when all weights vanish.
  Var weighted_l1(Var pred, Tensor<T> target, std::vector<T> weight);
  Var weighted_sum(const std::vector<std::pair<Var, T>>& terms);

  void backward(Var loss);
  /// Adds parameter gradients of this graph into `grads` (one tensor per parameter).
  void accumulate_param_grads(std::vector<Tensor<T>>& grads) const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;  ///< parameter storage, used instead of `value`
    Tensor<T> grad;
    bool needs_grad = false;
    int param_id = -1;
    const char* op = "";
    std::function<void()> backward;
  };

  static const Tensor<T>& val(const Node& n) { return n.ref ? *n.ref : n.value; }
  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
  Var push(Tensor<T> value, const char* op, bool needs_grad);
  bool needs(Var v) const { return v.valid() && node(v).needs_grad; }
  Tensor<T>& grad_of(Var v);

  const ParamSet<T>* params_;
  bool track_ = true;
  std::vector<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Cosine decay from base_lr at step 0 to 0 at total_steps.
double cosine_lr(long step, long total_steps, double base_lr);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  ///< global gradient-norm clip; <= 0 disables
};

template <class T>
class AdamW {
 public:
  AdamW(const ParamSet<T>& params, AdamWConfig config);
  /// Returns the pre-clip global gradient norm. Throws NumericError on non-finite gradients.
  double step(ParamSet<T>& params, std::vector<Tensor<T>>& grads, double lr);
  long steps_taken() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointHeader {
  std::uint64_t config_hash = 0;
  std::uint64_t vocab_hash = 0;
  std::string config_text;
};

void save_checkpoint(const std::filesystem::path& path, const ParamSet<float>& params, const CheckpointHeader& header);
/// Loads into an existing parameter layout; names and shapes must match.
CheckpointHeader load_checkpoint(const std::filesystem::path& path, ParamSet<float>& params);
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

}  // namespace longsim::nn
