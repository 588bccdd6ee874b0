#include "longsim/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "longsim/rng.hpp"

namespace longsim {

using nn::Graph;
using nn::ParamSet;
using nn::Tensor;
using nn::Var;

// ---------------------------------------------------------------------------
// Masks

int first_valid(const std::vector<bool>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i]) return static_cast<int>(i);
  }
  return -1;
}

int last_valid(const std::vector<bool>& v) {
  for (std::size_t i = v.size(); i-- > 0;) {
    if (v[i]) return static_cast<int>(i);
  }
  return -1;
}

std::vector<bool> build_motion_mask(const std::vector<bool>& validity, int bos, int eos) {
  const int n = static_cast<int>(validity.size());
  std::vector<bool> mask(validity.size(), false);
  if (bos < 0 || eos <= bos || eos >= n) return mask;
  auto valid = [&](int s) { return s >= 0 && s < n && validity[static_cast<std::size_t>(s)]; };
  mask[static_cast<std::size_t>(bos)] = true;
  if (bos + 1 < eos) mask[static_cast<std::size_t>(bos + 1)] = valid(bos + 2);
  for (int s = bos + 2; s < eos; ++s) mask[static_cast<std::size_t>(s)] = valid(s - 1) && valid(s) && valid(s + 1);
  return mask;
}

std::vector<bool> build_temporal_control_mask(const std::vector<bool>& validity, int bos, int eos) {
  // Same slot rule as the motion mask; the REMOVE target at EOS is supervised from EOS-1.
  return build_motion_mask(validity, bos, eos);
}

SpatialMasks build_spatial_masks(int n_inserted, int existing, int limit) {
  SpatialMasks m;
  for (int i = 0; i <= n_inserted; ++i) m.control.push_back(i < limit);
  for (int i = 0; i <= n_inserted && i < limit; ++i) {
    std::vector<bool> row(static_cast<std::size_t>(existing + n_inserted + 1), false);
    for (int j = 0; j < existing + i + 1; ++j) row[static_cast<std::size_t>(j)] = true;
    m.attention.push_back(std::move(row));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Config text

namespace {

template <class F>
void for_each_field(TrainConfig& c, F&& f) {
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("lr", c.lr);
  f("weight_decay", c.weight_decay);
  f("clip_norm", c.clip_norm);
  f("spatial_limit", c.spatial_limit);
  f("checkpoint_every", c.checkpoint_every);
  f("lambda_motion", c.weights.motion);
  f("lambda_position", c.weights.position);
  f("lambda_heading", c.weights.heading);
  f("lambda_control", c.weights.control);
  f("lambda_shape", c.weights.shape);
  f("lambda_type", c.weights.type);
  f("label_keep", c.weights.keep_label);
  f("label_add", c.weights.add_label);
  f("label_remove", c.weights.remove_label);
  f("label_begin", c.weights.begin_label);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  TrainConfig copy = *this;
  for_each_field(copy, [&](const char* key, auto& v) { os << key << " = " << v << '\n'; });
  return os.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("train config: expected key = value, got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  TrainConfig c;
  for_each_field(c, [&](const char* key, auto& v) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
      if constexpr (std::is_same_v<std::decay_t<decltype(v)>, int>) {
        v = std::stoi(it->second);
      } else {
        v = std::stod(it->second);
      }
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("train config key '") + key + "': bad value '" + it->second + "'");
    }
    kv.erase(it);
  });
  if (!kv.empty()) throw std::invalid_argument("unknown train config key: " + kv.begin()->first);
  if (c.epochs < 0 || c.batch_size <= 0 || c.spatial_limit <= 0) throw std::invalid_argument("invalid train config");
  return c;
}

// ---------------------------------------------------------------------------
// Examples

TrainingExample build_training_example(const TokenizedScenario& ts, const ModelConfig& cfg, int spatial_limit) {
  TrainingExample ex;
  AgentMatrix matrix = matrix_from_tokens(ts);
  BatchBuilder builder(cfg, matrix, ts.map);
  const int N = ts.n_tokens;
  const LossWeights labels;  // label weights are applied at loss time

  ex.motion = builder.motion(0, N - 1, 0);
  std::vector<std::vector<bool>> motion_mask, control_mask;
  for (const auto& a : ts.agents) {
    const int bos = first_valid(a.valid);
    const int eos = last_valid(a.valid);
    motion_mask.push_back(build_motion_mask(a.valid, bos, eos));
    control_mask.push_back(build_temporal_control_mask(a.valid, bos, eos));
  }
  for (int e : ex.motion.queries) {
    const auto [r, c] = ex.motion.cells[static_cast<std::size_t>(e)];
    const auto& a = ts.agents[static_cast<std::size_t>(r)];
    int mt = 0, ct = 0;
    double mw = 0, cw = 0;
    if (c + 1 < N) {
      const auto next = static_cast<std::size_t>(c + 1);
      const ControlToken ctrl = a.control[next];
      const bool temporal = ctrl == ControlToken::keep_agent || ctrl == ControlToken::remove_agent;
      if (temporal && control_mask[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]) {
        ct = ctrl == ControlToken::remove_agent ? 1 : 0;
        cw = 1.0;
      }
      if (motion_mask[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] && a.valid[next] &&
          ctrl != ControlToken::remove_agent) {
        mt = a.motion[next];
        mw = 1.0;
      }
    }
    ex.motion_target.push_back(mt);
    ex.motion_mask.push_back(mw);
    ex.temporal_control_target.push_back(ct);
    ex.temporal_control_mask.push_back(cw);
  }

  for (int k = 1; k < N; ++k) {
    const auto& entries = ts.spatial[static_cast<std::size_t>(k)];
    const int n = static_cast<int>(entries.size());
    const SpatialMasks masks = build_spatial_masks(n, 0, spatial_limit);
    std::vector<int> before;
    for (int i = 0; i <= n; ++i) {
      if (!masks.control[static_cast<std::size_t>(i)]) break;
      const int qi = static_cast<int>(ex.scene.queries.size());
      builder.add_scene_query(ex.motion, k, {}, before, ex.scene);
      ex.spatial_control_mask.push_back(1.0);
      if (i < n) {
        const auto& e = entries[static_cast<std::size_t>(i)];
        const auto& a = ts.agents[static_cast<std::size_t>(e.agent)];
        ex.spatial_control_target.push_back(1);
        ex.position_target.push_back(e.position_token);
        ex.position_mask.push_back(1.0);
        builder.add_heading_query(ex.motion, ex.scene, qi, e.position_token, ex.heading);
        ex.heading_target.push_back(e.heading_token);
        ex.type_target.push_back(static_cast<int>(a.type));
        ex.shape_target.push_back({a.shape.length, a.shape.width, a.shape.height});
        before.push_back(e.agent);
      } else {
        ex.spatial_control_target.push_back(0);
        ex.position_target.push_back(0);
        ex.position_mask.push_back(0.0);
      }
    }
  }
  ex.map = builder.finalize_map(ex.motion, &ex.scene, &ex.heading);
  ex.matrix = std::move(matrix);
  (void)labels;
  return ex;
}

// ---------------------------------------------------------------------------
// Loss

LossTerms& LossTerms::operator+=(const LossTerms& o) {
  total += o.total;
  motion += o.motion;
  position += o.position;
  heading += o.heading;
  control += o.control;
  shape += o.shape;
  type += o.type;
  return *this;
}

LossTerms LossTerms::scaled(double s) const {
  return {total * s, motion * s, position * s, heading * s, control * s, shape * s, type * s};
}

Accuracy& Accuracy::operator+=(const Accuracy& o) {
  motion_correct += o.motion_correct;
  motion_total += o.motion_total;
  temporal_correct += o.temporal_correct;
  temporal_total += o.temporal_total;
  spatial_correct += o.spatial_correct;
  spatial_total += o.spatial_total;
  position_correct += o.position_correct;
  position_total += o.position_total;
  heading_correct += o.heading_correct;
  heading_total += o.heading_total;
  type_correct += o.type_correct;
  type_total += o.type_total;
  return *this;
}

namespace {

template <class T>
std::vector<T> label_weights(const std::vector<int>& target, const std::vector<double>& mask, double w0, double w1) {
  std::vector<T> out(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) out[i] = static_cast<T>(mask[i] * (target[i] == 0 ? w0 : w1));
  return out;
}

template <class T>
std::vector<T> as(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

template <class T>
struct Forward {
  MotionOutputs<T> motion;
  SceneOutputs<T> scene;
  HeadingOutputs<T> heading;
  bool has_scene = false;
  bool has_heading = false;
};

template <class T>
Forward<T> run_forward(Graph<T>& g, const Network<T>& net, const TrainingExample& ex) {
  Forward<T> f;
  Var E = net.embed(g, ex.motion.features);
  Var M = net.encode_map(g, ex.map);
  f.motion = net.motion(g, E, ex.motion, M);
  if (!ex.scene.queries.empty()) {
    f.has_scene = true;
    f.scene = net.scene(g, E, ex.scene, M, net.occupancy_table(g));
    if (!ex.heading.scene_query.empty()) {
      f.has_heading = true;
      f.heading = net.heading(g, E, f.scene.features, ex.heading, M);
    }
  }
  return f;
}

}  // namespace

template <class T>
LossGraph<T> build_loss(Graph<T>& g, const Network<T>& net, const TrainingExample& ex, const LossWeights& w) {
  const Forward<T> f = run_forward(g, net, ex);
  std::vector<std::pair<Var, T>> terms;
  LossTerms lt;

  Var motion = g.weighted_cross_entropy(f.motion.motion_logits, ex.motion_target, as<T>(ex.motion_mask));
  Var temporal = g.weighted_cross_entropy(f.motion.control_logits, ex.temporal_control_target,
                                          label_weights<T>(ex.temporal_control_target, ex.temporal_control_mask,
                                                           w.keep_label, w.remove_label));
  terms.emplace_back(motion, static_cast<T>(w.motion));
  terms.emplace_back(temporal, static_cast<T>(w.control));
  lt.motion = g.scalar(motion);
  lt.control = g.scalar(temporal);

  if (f.has_scene) {
    Var spatial = g.weighted_cross_entropy(f.scene.control_logits, ex.spatial_control_target,
                                           label_weights<T>(ex.spatial_control_target, ex.spatial_control_mask,
                                                            w.begin_label, w.add_label));
    Var position = g.weighted_cross_entropy(f.scene.position_logits, ex.position_target, as<T>(ex.position_mask));
    terms.emplace_back(spatial, static_cast<T>(w.control));
    terms.emplace_back(position, static_cast<T>(w.position));
    lt.control += g.scalar(spatial);
    lt.position = g.scalar(position);
  }
  if (f.has_heading) {
    const std::size_t n = ex.heading_target.size();
    const std::vector<T> ones(n, T(1));
    Tensor<T> shape(static_cast<int>(n), 3);
    for (std::size_t i = 0; i < n; ++i) {
      for (int j = 0; j < 3; ++j) shape(static_cast<int>(i), j) = static_cast<T>(ex.shape_target[i][static_cast<std::size_t>(j)]);
    }
    Var heading = g.weighted_cross_entropy(f.heading.heading_logits, ex.heading_target, ones);
    Var type = g.weighted_cross_entropy(f.heading.type_logits, ex.type_target, ones);
    Var l1 = g.weighted_l1(f.heading.shape, std::move(shape), ones);
    terms.emplace_back(heading, static_cast<T>(w.heading));
    terms.emplace_back(type, static_cast<T>(w.type));
    terms.emplace_back(l1, static_cast<T>(w.shape));
    lt.heading = g.scalar(heading);
    lt.type = g.scalar(type);
    lt.shape = g.scalar(l1);
  }
  LossGraph<T> out;
  out.total = g.weighted_sum(terms);
  lt.total = g.scalar(out.total);
  out.terms = lt;
  return out;
}

template LossGraph<float> build_loss(Graph<float>&, const Network<float>&, const TrainingExample&, const LossWeights&);
template LossGraph<double> build_loss(Graph<double>&, const Network<double>&, const TrainingExample&,
                                      const LossWeights&);

namespace {

int argmax_row(const Tensor<float>& t, int r) {
  const float* p = t.row(r);
  return static_cast<int>(std::max_element(p, p + t.cols) - p);
}

void tally(const Tensor<float>& logits, const std::vector<int>& target, const std::vector<double>& mask, long& correct,
           long& total) {
  for (int i = 0; i < logits.rows; ++i) {
    if (mask[static_cast<std::size_t>(i)] <= 0) continue;
    ++total;
    if (argmax_row(logits, i) == target[static_cast<std::size_t>(i)]) ++correct;
  }
}

}  // namespace

Accuracy teacher_forced_accuracy(const ParamSet<float>& params, const ModelConfig& cfg, const TrainingExample& ex) {
  Graph<float> g(params, false);
  const Network<float> net(cfg, params);
  const Forward<float> f = run_forward(g, net, ex);
  Accuracy a;
  tally(g.value(f.motion.motion_logits), ex.motion_target, ex.motion_mask, a.motion_correct, a.motion_total);
  tally(g.value(f.motion.control_logits), ex.temporal_control_target, ex.temporal_control_mask, a.temporal_correct,
        a.temporal_total);
  if (f.has_scene) {
    tally(g.value(f.scene.control_logits), ex.spatial_control_target, ex.spatial_control_mask, a.spatial_correct,
          a.spatial_total);
    tally(g.value(f.scene.position_logits), ex.position_target, ex.position_mask, a.position_correct,
          a.position_total);
  }
  if (f.has_heading) {
    const std::vector<double> ones(ex.heading_target.size(), 1.0);
    tally(g.value(f.heading.heading_logits), ex.heading_target, ones, a.heading_correct, a.heading_total);
    tally(g.value(f.heading.type_logits), ex.type_target, ones, a.type_correct, a.type_total);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Loop

LossTerms batch_gradient(const ParamSet<float>& params, const ModelConfig& cfg,
                         const std::vector<const TrainingExample*>& examples, const LossWeights& w, int jobs,
                         std::vector<Tensor<float>>& grads) {
  const std::size_t n = examples.size();
  std::vector<std::vector<Tensor<float>>> per(n);
  std::vector<LossTerms> terms(n);
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t i) {
    try {
      Graph<float> g(params);
      const Network<float> net(cfg, params);
      LossGraph<float> lg = build_loss(g, net, *examples[i], w);
      g.backward(lg.total);
      per[i] = params.zeros_like();
      g.accumulate_param_grads(per[i]);
      terms[i] = lg.terms;
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = static_cast<std::size_t>(t); i < n; i += static_cast<std::size_t>(workers)) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  grads = params.zeros_like();
  LossTerms mean;
  const float inv = 1.0f / static_cast<float>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < grads.size(); ++p) {
      auto& dst = grads[p].data;
      const auto& src = per[i][p].data;
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    mean += terms[i];
  }
  for (auto& g : grads) {
    for (auto& x : g.data) x *= inv;
  }
  return mean.scaled(1.0 / static_cast<double>(n));
}

ParamSet<float> train(const std::vector<TrainingExample>& examples, const ModelConfig& cfg, const TrainConfig& tc,
                      std::uint64_t seed, const TrainHooks& hooks) {
  if (examples.empty()) throw std::invalid_argument("training corpus is empty");
  ParamSet<float> params;
  register_parameters(cfg, params, seed);
  nn::AdamWConfig ac;
  ac.weight_decay = tc.weight_decay;
  ac.clip_norm = tc.clip_norm;
  nn::AdamW<float> opt(params, ac);
  Rng order_rng(seed ^ 0xA5A5A5A5A5A5A5A5ULL);

  const int n = static_cast<int>(examples.size());
  const int per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const long total_steps = static_cast<long>(per_epoch) * tc.epochs;
  long step = 0;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<std::size_t>(i)], order[order_rng.below(static_cast<std::uint64_t>(i) + 1)]);
    }
    for (int b = 0; b < n; b += tc.batch_size) {
      std::vector<const TrainingExample*> batch;
      for (int i = b; i < std::min(n, b + tc.batch_size); ++i) batch.push_back(&examples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
      std::vector<Tensor<float>> grads;
      TrainLogRow row;
      row.step = step;
      row.epoch = epoch;
      row.lr = nn::cosine_lr(step, total_steps, tc.lr);
      try {
        row.loss = batch_gradient(params, cfg, batch, tc.weights, tc.jobs, grads);
        if (!std::isfinite(row.loss.total)) throw nn::NumericError("non-finite loss");
        row.grad_norm = opt.step(params, grads, row.lr);
      } catch (const nn::NumericError& e) {
        throw nn::NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      if (hooks.on_step) hooks.on_step(row);
      ++step;
    }
    const bool last = epoch + 1 == tc.epochs;
    if (hooks.on_checkpoint && (last || (tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0))) {
      hooks.on_checkpoint(epoch + 1, params);
    }
  }
  return params;
}

void write_loss_csv_header(std::ostream& out) {
  out << "step,epoch,lr,grad_norm,total,motion,position,heading,control,shape,type\n";
}

void write_loss_csv_row(std::ostream& out, const TrainLogRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%ld,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.epoch, r.lr,
                r.grad_norm, r.loss.total, r.loss.motion, r.loss.position, r.loss.heading, r.loss.control,
                r.loss.shape, r.loss.type);
  out << buf;
}

}  // namespace longsim
