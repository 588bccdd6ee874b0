#include "longsim/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>

namespace longsim::nn {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
  // Non-finite iff all exponent bits are set; an integer OR reduction vectorizes.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits bad = 0;
  for (T x : t.data) {
    const Bits b = std::bit_cast<Bits>(x) & exp_mask;
    bad |= static_cast<Bits>(b == exp_mask);
  }
  if (bad) throw NumericError(std::string("non-finite value produced by ") + op);
}

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamSet

template <class T>
int ParamSet<T>::add(std::string name, int rows, int cols) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  const int id = static_cast<int>(entries_.size());
  index_.emplace(name, id);
  entries_.push_back({std::move(name), Tensor<T>(rows, cols)});
  return id;
}

template <class T>
int ParamSet<T>::id(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

template <class T>
std::size_t ParamSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

template <class T>
std::vector<Tensor<T>> ParamSet<T>::zeros_like() const {
  std::vector<Tensor<T>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.value.rows, e.value.cols);
  return out;
}

// ---------------------------------------------------------------------------
// Graph plumbing

template <class T>
Var Graph<T>::push(Tensor<T> value, const char* op, bool needs_grad) {
  check_finite(value, op);
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad && track_;
  n.op = op;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
Tensor<T>& Graph<T>::grad_of(Var v) {
  Node& n = node(v);
  const auto& x = val(n);
  if (n.grad.size() != x.size()) n.grad = Tensor<T>(x.rows, x.cols);
  return n.grad;
}

template <class T>
Var Graph<T>::param(int pid) {
  auto it = param_nodes_.find(pid);
  if (it != param_nodes_.end()) return Var{it->second};
  Node n;
  n.ref = &params_->value(pid);
  n.needs_grad = track_;
  n.param_id = pid;
  n.op = "param";
  nodes_.push_back(std::move(n));
  Var v{static_cast<int>(nodes_.size()) - 1};
  param_nodes_.emplace(pid, v.id);
  return v;
}

template <class T>
Var Graph<T>::constant(Tensor<T> value) {
  return push(std::move(value), "constant", false);
}

template <class T>
Var Graph<T>::input(Tensor<T> value) {
  return push(std::move(value), "input", true);
}

template <class T>
void Graph<T>::backward(Var loss) {
  require(value(loss).size() == 1, "backward: loss must be a scalar");
  for (auto& n : nodes_) {
    if (n.needs_grad) n.grad = Tensor<T>(val(n).rows, val(n).cols);
  }
  if (!node(loss).needs_grad) return;
  node(loss).grad.data[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.needs_grad && n.backward) {
      n.backward();
      check_finite(n.grad, n.op);
    }
  }
}

template <class T>
void Graph<T>::accumulate_param_grads(std::vector<Tensor<T>>& grads) const {
  for (const auto& n : nodes_) {
    if (n.param_id < 0 || n.grad.size() == 0) continue;
    auto& g = grads[static_cast<std::size_t>(n.param_id)];
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i];
  }
}

// ---------------------------------------------------------------------------
// Dense algebra

template <class T>
Var Graph<T>::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require(A.cols == B.rows, "matmul: shape mismatch");
  Tensor<T> out(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    T* __restrict o = out.row(i);
    const T* ar = A.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const T av = ar[k];
      const T* __restrict br = B.row(k);
      for (int j = 0; j < B.cols; ++j) o[j] += av * br[j];
    }
  }
  Var r = push(std::move(out), "matmul", needs(a) || needs(b));
  if (node(r).needs_grad) {
    node(r).backward = [this, a, b, r] {
      const auto& A = value(a);
      const auto& B = value(b);
      const auto& G = node(r).grad;
      if (needs(a)) {
        auto& ga = grad_of(a);
        Tensor<T> bt(B.cols, B.rows);
        for (int k = 0; k < B.rows; ++k) {
          for (int j = 0; j < B.cols; ++j) bt(j, k) = B(k, j);
        }
        for (int i = 0; i < A.rows; ++i) {
          const T* g = G.row(i);
          T* __restrict gar = ga.row(i);
          for (int j = 0; j < B.cols; ++j) {
            const T gv = g[j];
            if (gv == T(0)) continue;
            const T* __restrict btr = bt.row(j);
            for (int k = 0; k < A.cols; ++k) gar[k] += gv * btr[k];
          }
        }
      }
      if (needs(b)) {
        auto& gb = grad_of(b);
        for (int i = 0; i < A.rows; ++i) {
          const T* g = G.row(i);
          const T* ar = A.row(i);
          for (int k = 0; k < A.cols; ++k) {
            const T av = ar[k];
            if (av == T(0)) continue;
            T* __restrict gbr = gb.row(k);
            for (int j = 0; j < B.cols; ++j) gbr[j] += av * g[j];
          }
        }
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::linear(Var x, Var w, Var b) {
  Var y = matmul(x, w);
  return b.valid() ? add_row(y, b) : y;
}

template <class T>
Var Graph<T>::add(Var a, Var b) {
  require(value(a).same_shape(value(b)), "add: shape mismatch");
  Tensor<T> out = value(a);
  const auto& B = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  Var r = push(std::move(out), "add", needs(a) || needs(b));
  if (node(r).needs_grad) {
    node(r).backward = [this, a, b, r] {
      const auto& G = node(r).grad;
      for (Var v : {a, b}) {
        if (!needs(v)) continue;
        auto& g = grad_of(v);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += G.data[i];
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::add_row(Var a, Var row) {
  const auto& R = value(row);
  require(R.rows == 1 && R.cols == value(a).cols, "add_row: shape mismatch");
  Tensor<T> out = value(a);
  for (int i = 0; i < out.rows; ++i) {
    T* o = out.row(i);
    for (int j = 0; j < out.cols; ++j) o[j] += R.data[static_cast<std::size_t>(j)];
  }
  Var r = push(std::move(out), "add_row", needs(a) || needs(row));
  if (node(r).needs_grad) {
    node(r).backward = [this, a, row, r] {
      const auto& G = node(r).grad;
      if (needs(a)) {
        auto& g = grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += G.data[i];
      }
      if (needs(row)) {
        auto& g = grad_of(row);
        for (int i = 0; i < G.rows; ++i) {
          const T* gr = G.row(i);
          for (int j = 0; j < G.cols; ++j) g.data[static_cast<std::size_t>(j)] += gr[j];
        }
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::scale(Var a, T s) {
  Tensor<T> out = value(a);
  for (auto& x : out.data) x *= s;
  Var r = push(std::move(out), "scale", needs(a));
  if (node(r).needs_grad) {
    node(r).backward = [this, a, r, s] {
      const auto& G = node(r).grad;
      auto& g = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += s * G.data[i];
    };
  }
  return r;
}

namespace {

template <class T>
T gelu_value(T x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
T gelu_derivative(T x) {
  constexpr T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <class T>
T softplus_value(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

}  // namespace

template <class T>
Var Graph<T>::gelu(Var a) {
  Tensor<T> out = value(a);
  for (auto& x : out.data) x = gelu_value(x);
  Var r = push(std::move(out), "gelu", needs(a));
  if (node(r).needs_grad) {
    node(r).backward = [this, a, r] {
      const auto& X = value(a);
      const auto& G = node(r).grad;
      auto& g = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += G.data[i] * gelu_derivative(X.data[i]);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::relu(Var a) {
  Tensor<T> out = value(a);
  for (auto& x : out.data) x = std::max(x, T(0));
  Var r = push(std::move(out), "relu", needs(a));
  if (node(r).needs_grad) {
    node(r).backward = [this, a, r] {
      const auto& X = value(a);
      const auto& G = node(r).grad;
      auto& g = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (X.data[i] > T(0)) g.data[i] += G.data[i];
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::softplus(Var a) {
  Tensor<T> out = value(a);
  for (auto& x : out.data) x = softplus_value(x);
  Var r = push(std::move(out), "softplus", needs(a));
  if (node(r).needs_grad) {
    node(r).backward = [this, a, r] {
      const auto& X = value(a);
      const auto& G = node(r).grad;
      auto& g = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += G.data[i] / (T(1) + std::exp(-X.data[i]));
    };
  }
  return r;
}

template <class T>
Var Graph<T>::layer_norm(Var x, Var gain, Var bias) {
  constexpr T eps = T(1e-5);
  const auto& X = value(x);
  const auto& Gn = value(gain);
  const auto& Bs = value(bias);
  require(Gn.cols == X.cols && Bs.cols == X.cols, "layer_norm: shape mismatch");
  const int n = X.rows;
  const int d = X.cols;
  Tensor<T> out(n, d);
  auto xhat = std::make_shared<Tensor<T>>(n, d);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* xr = X.row(i);
    T mean = 0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    T var = 0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= d;
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    T* h = xhat->row(i);
    T* o = out.row(i);
    for (int j = 0; j < d; ++j) {
      h[j] = (xr[j] - mean) * is;
      o[j] = h[j] * Gn.data[static_cast<std::size_t>(j)] + Bs.data[static_cast<std::size_t>(j)];
    }
  }
  Var r = push(std::move(out), "layer_norm", needs(x) || needs(gain) || needs(bias));
  if (node(r).needs_grad) {
    node(r).backward = [this, x, gain, bias, r, xhat, inv_std, n, d] {
      const auto& G = node(r).grad;
      const auto& Gn = value(gain);
      if (needs(gain) || needs(bias)) {
        Tensor<T>* gg = needs(gain) ? &grad_of(gain) : nullptr;
        Tensor<T>* gb = needs(bias) ? &grad_of(bias) : nullptr;
        for (int i = 0; i < n; ++i) {
          const T* g = G.row(i);
          const T* h = xhat->row(i);
          for (int j = 0; j < d; ++j) {
            if (gg) gg->data[static_cast<std::size_t>(j)] += g[j] * h[j];
            if (gb) gb->data[static_cast<std::size_t>(j)] += g[j];
          }
        }
      }
      if (needs(x)) {
        auto& gx = grad_of(x);
        std::vector<T> dh(static_cast<std::size_t>(d));
        for (int i = 0; i < n; ++i) {
          const T* g = G.row(i);
          const T* h = xhat->row(i);
          T mean_dh = 0;
          T mean_dh_h = 0;
          for (int j = 0; j < d; ++j) {
            dh[static_cast<std::size_t>(j)] = g[j] * Gn.data[static_cast<std::size_t>(j)];
            mean_dh += dh[static_cast<std::size_t>(j)];
            mean_dh_h += dh[static_cast<std::size_t>(j)] * h[j];
          }
          mean_dh /= d;
          mean_dh_h /= d;
          const T is = (*inv_std)[static_cast<std::size_t>(i)];
          T* gxr = gx.row(i);
          for (int j = 0; j < d; ++j) gxr[j] += is * (dh[static_cast<std::size_t>(j)] - mean_dh - h[j] * mean_dh_h);
        }
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Indexing

template <class T>
Var Graph<T>::gather_rows(Var table, std::vector<int> index) {
  const auto& Tb = value(table);
  Tensor<T> out(static_cast<int>(index.size()), Tb.cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < Tb.rows, "gather_rows: index out of range");
    std::copy_n(Tb.row(index[i]), Tb.cols, out.row(static_cast<int>(i)));
  }
  Var r = push(std::move(out), "gather_rows", needs(table));
  if (node(r).needs_grad) {
    node(r).backward = [this, table, r, index = std::move(index)] {
      const auto& G = node(r).grad;
      auto& g = grad_of(table);
      for (std::size_t i = 0; i < index.size(); ++i) {
        const T* gr = G.row(static_cast<int>(i));
        T* dst = g.row(index[i]);
        for (int j = 0; j < G.cols; ++j) dst[j] += gr[j];
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const int n = value(parts.front()).rows;
  int total = 0;
  bool ng = false;
  for (Var p : parts) {
    require(value(p).rows == n, "concat_cols: row mismatch");
    total += value(p).cols;
    ng = ng || needs(p);
  }
  Tensor<T> out(n, total);
  int off = 0;
  for (Var p : parts) {
    const auto& P = value(p);
    for (int i = 0; i < n; ++i) std::copy_n(P.row(i), P.cols, out.row(i) + off);
    off += P.cols;
  }
  Var r = push(std::move(out), "concat_cols", ng);
  if (ng) {
    node(r).backward = [this, parts, r, n] {
      const auto& G = node(r).grad;
      int off = 0;
      for (Var p : parts) {
        const int c = value(p).cols;
        if (needs(p)) {
          auto& g = grad_of(p);
          for (int i = 0; i < n; ++i) {
            const T* gr = G.row(i) + off;
            T* dst = g.row(i);
            for (int j = 0; j < c; ++j) dst[j] += gr[j];
          }
        }
        off += c;
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int c = value(parts.front()).cols;
  int total = 0;
  bool ng = false;
  for (Var p : parts) {
    require(value(p).cols == c, "concat_rows: column mismatch");
    total += value(p).rows;
    ng = ng || needs(p);
  }
  Tensor<T> out(total, c);
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& P = value(p);
    std::copy(P.data.begin(), P.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += P.size();
  }
  Var r = push(std::move(out), "concat_rows", ng);
  if (ng) {
    node(r).backward = [this, parts, r] {
      const auto& G = node(r).grad;
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t sz = value(p).size();
        if (needs(p)) {
          auto& g = grad_of(p);
          for (std::size_t i = 0; i < sz; ++i) g.data[i] += G.data[off + i];
        }
        off += sz;
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::select_cols(Var x, int begin, int end) {
  const auto& X = value(x);
  require(0 <= begin && begin < end && end <= X.cols, "select_cols: bad range");
  const int w = end - begin;
  Tensor<T> out(X.rows, w);
  for (int i = 0; i < X.rows; ++i) std::copy_n(X.row(i) + begin, w, out.row(i));
  Var r = push(std::move(out), "select_cols", needs(x));
  if (node(r).needs_grad) {
    node(r).backward = [this, x, r, begin, w] {
      const auto& G = node(r).grad;
      auto& g = grad_of(x);
      for (int i = 0; i < G.rows; ++i) {
        const T* gr = G.row(i);
        T* dst = g.row(i) + begin;
        for (int j = 0; j < w; ++j) dst[j] += gr[j];
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Fourier features

template <class T>
Var Graph<T>::fourier(Var desc, Var freqs) {
  const auto& X = value(desc);
  const auto& F = value(freqs);
  require(X.cols == F.rows, "fourier: descriptor width must match frequency rows");
  const int n = X.rows;
  const int m = X.cols;
  const int B = F.cols;
  Tensor<T> out(n, 2 * m * B);
  for (int i = 0; i < n; ++i) {
    T* o = out.row(i);
    for (int d = 0; d < m; ++d) {
      const T x = X(i, d);
      for (int b = 0; b < B; ++b) {
        const T a = T(kTwoPi) * x * F(d, b);
        o[(d * B + b) * 2] = std::sin(a);
        o[(d * B + b) * 2 + 1] = std::cos(a);
      }
    }
  }
  Var r = push(std::move(out), "fourier", needs(desc) || needs(freqs));
  if (node(r).needs_grad) {
    node(r).backward = [this, desc, freqs, r, n, m, B] {
      const auto& X = value(desc);
      const auto& F = value(freqs);
      const auto& G = node(r).grad;
      Tensor<T>* gx = needs(desc) ? &grad_of(desc) : nullptr;
      Tensor<T>* gf = needs(freqs) ? &grad_of(freqs) : nullptr;
      for (int i = 0; i < n; ++i) {
        const T* g = G.row(i);
        for (int d = 0; d < m; ++d) {
          const T x = X(i, d);
          for (int b = 0; b < B; ++b) {
            const T f = F(d, b);
            const T a = T(kTwoPi) * x * f;
            // d/da [sin a, cos a] . [g_s, g_c]
            const T da = g[(d * B + b) * 2] * std::cos(a) - g[(d * B + b) * 2 + 1] * std::sin(a);
            if (gx) (*gx)(i, d) += da * T(kTwoPi) * f;
            if (gf) (*gf)(d, b) += da * T(kTwoPi) * x;
          }
        }
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Attention

template <class T>
Var Graph<T>::attention(Var q, Var k, Var v, Var rel, const AttentionPairs& pairs, int heads, Var key_bias) {
  const auto& Q = value(q);
  const auto& K = value(k);
  const auto& V = value(v);
  require(K.same_shape(V), "attention: key/value shape mismatch");
  require(Q.cols == K.cols, "attention: query/key width mismatch");
  require(heads > 0 && Q.cols % heads == 0, "attention: width not divisible by heads");
  require(pairs.n_queries == Q.rows, "attention: pair list does not cover the queries");
  const Tensor<T>* R = rel.valid() ? &value(rel) : nullptr;
  if (R) require(R->cols == Q.cols, "attention: relative encoding width mismatch");
  const Tensor<T>* B = key_bias.valid() ? &value(key_bias) : nullptr;
  if (B) require(B->rows == K.rows && B->cols == heads, "attention: key bias shape mismatch");
  const int D = Q.cols;
  const int hd = D / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(hd));
  const int np = pairs.pair_count();
  for (int p = 0; p < np; ++p) {
    require(pairs.context[static_cast<std::size_t>(p)] >= 0 && pairs.context[static_cast<std::size_t>(p)] < K.rows,
            "attention: context index out of range");
    const int rr = pairs.rel[static_cast<std::size_t>(p)];
    require(rr < 0 || (R && rr < R->rows), "attention: relative index out of range");
  }

  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(np) * heads);
  Tensor<T> out(Q.rows, D);
  std::vector<T> kv(static_cast<std::size_t>(hd));
  for (int qi = 0; qi < Q.rows; ++qi) {
    const int b = pairs.offsets[static_cast<std::size_t>(qi)];
    const int e = pairs.offsets[static_cast<std::size_t>(qi) + 1];
    if (b == e) continue;
    for (int h = 0; h < heads; ++h) {
      const T* qr = Q.row(qi) + h * hd;
      T mx = -std::numeric_limits<T>::infinity();
      for (int p = b; p < e; ++p) {
        const T* kr = K.row(pairs.context[static_cast<std::size_t>(p)]) + h * hd;
        const int rr = pairs.rel[static_cast<std::size_t>(p)];
        const T* relr = rr >= 0 ? R->row(rr) + h * hd : nullptr;
        T s = 0;
        for (int j = 0; j < hd; ++j) s += qr[j] * (kr[j] + (relr ? relr[j] : T(0)));
        s *= sc;
        if (B) s += (*B)(pairs.context[static_cast<std::size_t>(p)], h);
        (*probs)[static_cast<std::size_t>(p) * heads + h] = s;
        mx = std::max(mx, s);
      }
      T z = 0;
      for (int p = b; p < e; ++p) {
        T& s = (*probs)[static_cast<std::size_t>(p) * heads + h];
        s = std::exp(s - mx);
        z += s;
      }
      T* o = out.row(qi) + h * hd;
      for (int p = b; p < e; ++p) {
        T& a = (*probs)[static_cast<std::size_t>(p) * heads + h];
        a /= z;
        const T* vr = V.row(pairs.context[static_cast<std::size_t>(p)]) + h * hd;
        const int rr = pairs.rel[static_cast<std::size_t>(p)];
        const T* relr = rr >= 0 ? R->row(rr) + h * hd : nullptr;
        for (int j = 0; j < hd; ++j) o[j] += a * (vr[j] + (relr ? relr[j] : T(0)));
      }
    }
  }
  const bool ng = needs(q) || needs(k) || needs(v) || needs(rel) || needs(key_bias);
  Var r = push(std::move(out), "attention", ng);
  if (ng) {
    node(r).backward = [this, q, k, v, rel, key_bias, r, probs, pairs, heads, hd, sc] {
      const auto& Q = value(q);
      const auto& K = value(k);
      const auto& V = value(v);
      const Tensor<T>* R = rel.valid() ? &value(rel) : nullptr;
      const auto& G = node(r).grad;
      Tensor<T>* gq = needs(q) ? &grad_of(q) : nullptr;
      Tensor<T>* gk = needs(k) ? &grad_of(k) : nullptr;
      Tensor<T>* gv = needs(v) ? &grad_of(v) : nullptr;
      Tensor<T>* gr = needs(rel) ? &grad_of(rel) : nullptr;
      Tensor<T>* gb = needs(key_bias) ? &grad_of(key_bias) : nullptr;
      std::vector<T> da;
      for (int qi = 0; qi < Q.rows; ++qi) {
        const int b = pairs.offsets[static_cast<std::size_t>(qi)];
        const int e = pairs.offsets[static_cast<std::size_t>(qi) + 1];
        if (b == e) continue;
        da.assign(static_cast<std::size_t>(e - b), T(0));
        for (int h = 0; h < heads; ++h) {
          const T* go = G.row(qi) + h * hd;
          const T* qr = Q.row(qi) + h * hd;
          T dot = 0;
          for (int p = b; p < e; ++p) {
            const T* vr = V.row(pairs.context[static_cast<std::size_t>(p)]) + h * hd;
            const int rr = pairs.rel[static_cast<std::size_t>(p)];
            const T* relr = rr >= 0 ? R->row(rr) + h * hd : nullptr;
            T s = 0;
            for (int j = 0; j < hd; ++j) s += go[j] * (vr[j] + (relr ? relr[j] : T(0)));
            da[static_cast<std::size_t>(p - b)] = s;
            dot += (*probs)[static_cast<std::size_t>(p) * heads + h] * s;
          }
          for (int p = b; p < e; ++p) {
            const int c = pairs.context[static_cast<std::size_t>(p)];
            const int rr = pairs.rel[static_cast<std::size_t>(p)];
            const T a = (*probs)[static_cast<std::size_t>(p) * heads + h];
            const T ds = a * (da[static_cast<std::size_t>(p - b)] - dot) * sc;
            if (gb) (*gb)(c, h) += ds / sc;
            const T* kr = K.row(c) + h * hd;
            const T* relr = rr >= 0 ? R->row(rr) + h * hd : nullptr;
            if (gq) {
              T* g = gq->row(qi) + h * hd;
              for (int j = 0; j < hd; ++j) g[j] += ds * (kr[j] + (relr ? relr[j] : T(0)));
            }
            if (gk) {
              T* g = gk->row(c) + h * hd;
              for (int j = 0; j < hd; ++j) g[j] += ds * qr[j];
            }
            if (gv) {
              T* g = gv->row(c) + h * hd;
              for (int j = 0; j < hd; ++j) g[j] += a * go[j];
            }
            if (gr && rr >= 0) {
              T* g = gr->row(rr) + h * hd;
              for (int j = 0; j < hd; ++j) g[j] += ds * qr[j] + a * go[j];
            }
          }
        }
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
Var Graph<T>::weighted_cross_entropy(Var logits, std::vector<int> target, std::vector<T> weight) {
  const auto& L = value(logits);
  require(static_cast<int>(target.size()) == L.rows && target.size() == weight.size(),
          "weighted_cross_entropy: target/weight size mismatch");
  T wsum = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (weight[i] == T(0)) continue;
    require(target[i] >= 0 && target[i] < L.cols, "weighted_cross_entropy: target out of range");
    wsum += weight[i];
  }
  auto softmax = std::make_shared<Tensor<T>>(L.rows, L.cols);
  T total = 0;
  for (int i = 0; i < L.rows; ++i) {
    if (weight[static_cast<std::size_t>(i)] == T(0)) continue;
    const T* l = L.row(i);
    const T mx = *std::max_element(l, l + L.cols);
    T z = 0;
    for (int j = 0; j < L.cols; ++j) z += std::exp(l[j] - mx);
    const T lz = std::log(z) + mx;
    T* s = softmax->row(i);
    for (int j = 0; j < L.cols; ++j) s[j] = std::exp(l[j] - lz);
    total += weight[static_cast<std::size_t>(i)] * (lz - l[target[static_cast<std::size_t>(i)]]);
  }
  Tensor<T> out(1, 1);
  out.data[0] = wsum > T(0) ? total / wsum : T(0);
  Var r = push(std::move(out), "cross_entropy", needs(logits) && wsum > T(0));
  if (node(r).needs_grad) {
    node(r).backward = [this, logits, r, softmax, wsum, target = std::move(target), weight = std::move(weight)] {
      const T g0 = node(r).grad.data[0];
      auto& g = grad_of(logits);
      for (int i = 0; i < g.rows; ++i) {
        const T w = weight[static_cast<std::size_t>(i)];
        if (w == T(0)) continue;
        const T c = g0 * w / wsum;
        const T* s = softmax->row(i);
        T* gr = g.row(i);
        for (int j = 0; j < g.cols; ++j) gr[j] += c * s[j];
        gr[target[static_cast<std::size_t>(i)]] -= c;
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::weighted_l1(Var pred, Tensor<T> target, std::vector<T> weight) {
  const auto& P = value(pred);
  require(P.same_shape(target) && static_cast<int>(weight.size()) == P.rows, "weighted_l1: shape mismatch");
  T wsum = 0;
  T total = 0;
  for (int i = 0; i < P.rows; ++i) {
    const T w = weight[static_cast<std::size_t>(i)];
    if (w == T(0)) continue;
    wsum += w;
    T s = 0;
    for (int j = 0; j < P.cols; ++j) s += std::abs(P(i, j) - target(i, j));
    total += w * s / P.cols;
  }
  Tensor<T> out(1, 1);
  out.data[0] = wsum > T(0) ? total / wsum : T(0);
  Var r = push(std::move(out), "l1", needs(pred) && wsum > T(0));
  if (node(r).needs_grad) {
    node(r).backward = [this, pred, r, wsum, target = std::move(target), weight = std::move(weight)] {
      const T g0 = node(r).grad.data[0];
      const auto& P = value(pred);
      auto& g = grad_of(pred);
      for (int i = 0; i < P.rows; ++i) {
        const T w = weight[static_cast<std::size_t>(i)];
        if (w == T(0)) continue;
        const T c = g0 * w / (wsum * P.cols);
        for (int j = 0; j < P.cols; ++j) {
          const T d = P(i, j) - target(i, j);
          g(i, j) += d > T(0) ? c : (d < T(0) ? -c : T(0));
        }
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::weighted_sum(const std::vector<std::pair<Var, T>>& terms) {
  T total = 0;
  bool ng = false;
  for (const auto& [v, w] : terms) {
    require(value(v).size() == 1, "weighted_sum: terms must be scalars");
    total += w * value(v).data[0];
    ng = ng || needs(v);
  }
  Tensor<T> out(1, 1);
  out.data[0] = total;
  Var r = push(std::move(out), "weighted_sum", ng);
  if (ng) {
    node(r).backward = [this, terms, r] {
      const T g0 = node(r).grad.data[0];
      for (const auto& [v, w] : terms) {
        if (needs(v)) grad_of(v).data[0] += w * g0;
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

double cosine_lr(long step, long total_steps, double base_lr) {
  if (total_steps <= 0) return base_lr;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * frac));
}

template <class T>
AdamW<T>::AdamW(const ParamSet<T>& params, AdamWConfig config)
    : cfg_(config), m_(params.zeros_like()), v_(params.zeros_like()) {}

template <class T>
double AdamW<T>::step(ParamSet<T>& params, std::vector<Tensor<T>>& grads, double lr) {
  double sq = 0.0;
  for (int id = 0; id < params.size(); ++id) {
    for (T g : grads[static_cast<std::size_t>(id)].data) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient at optimizer step " + std::to_string(t_));
  const double clip = cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (int id = 0; id < params.size(); ++id) {
    auto& p = params.value(id);
    auto& g = grads[static_cast<std::size_t>(id)];
    auto& m = m_[static_cast<std::size_t>(id)];
    auto& v = v_[static_cast<std::size_t>(id)];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g.data[i]) * clip;
      const double mi = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
      const double vi = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      double pi = p.data[i];
      pi -= lr * cfg_.weight_decay * pi;
      pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
      p.data[i] = static_cast<T>(pi);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian):
//   magic "LSCKPT01" | u64 config_hash | u64 vocab_hash | u32 len + config text |
//   u32 tensor count | per tensor: u32 name len, name, i32 rows, i32 cols, f32 data

namespace {

constexpr char kMagic[8] = {'L', 'S', 'C', 'K', 'P', 'T', '0', '1'};

template <class V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("truncated checkpoint");
  return v;
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("truncated checkpoint");
  return s;
}

CheckpointHeader read_header(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("not a longsim checkpoint");
  CheckpointHeader h;
  h.config_hash = get<std::uint64_t>(in);
  h.vocab_hash = get<std::uint64_t>(in);
  h.config_text = get_string(in);
  return h;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamSet<float>& params, const CheckpointHeader& header) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out.write(kMagic, 8);
  put(out, header.config_hash);
  put(out, header.vocab_hash);
  put(out, static_cast<std::uint32_t>(header.config_text.size()));
  out.write(header.config_text.data(), static_cast<std::streamsize>(header.config_text.size()));
  put(out, static_cast<std::uint32_t>(params.size()));
  for (int id = 0; id < params.size(); ++id) {
    const auto& name = params.name(id);
    const auto& v = params.value(id);
    put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<std::int32_t>(v.rows));
    put(out, static_cast<std::int32_t>(v.cols));
    out.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  return read_header(in);
}

CheckpointHeader load_checkpoint(const std::filesystem::path& path, ParamSet<float>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  CheckpointHeader h = read_header(in);
  const auto count = get<std::uint32_t>(in);
  if (static_cast<int>(count) != params.size()) throw std::runtime_error("checkpoint tensor count mismatch");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_string(in);
    const int id = params.id(name);
    auto& v = params.value(id);
    const auto rows = get<std::int32_t>(in);
    const auto cols = get<std::int32_t>(in);
    if (rows != v.rows || cols != v.cols) throw std::runtime_error("checkpoint shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint");
  }
  return h;
}

template class ParamSet<float>;
template class ParamSet<double>;
template class Graph<float>;
template class Graph<double>;
template class AdamW<float>;
template class AdamW<double>;

}  // namespace longsim::nn
