#include "storm/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "storm/error.hpp"
#include "storm/kernels.hpp"

namespace storm::num {

// ---- ParamSet ----------------------------------------------------------------

std::size_t ParamSet::add(std::string name, Tensor value) {
  if (find(name)) fail(ErrorKind::Config, "duplicate parameter name " + name);
  grads_.emplace_back(value.shape());
  values_.push_back(std::move(value));
  names_.push_back(std::move(name));
  return values_.size() - 1;
}

std::optional<std::size_t> ParamSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  return std::nullopt;
}

std::size_t ParamSet::index(const std::string& name) const {
  auto i = find(name);
  if (!i) fail(ErrorKind::Config, "unknown parameter " + name);
  return *i;
}

void ParamSet::zero_grad() {
  for (auto& g : grads_) g.fill(0.0);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

double ParamSet::grad_norm() const {
  double s = 0.0;
  for (const auto& g : grads_)
    for (double x : g.values()) s += x * x;
  return std::sqrt(s);
}

// ---- Graph -------------------------------------------------------------------

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, false, {}});
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, record_, {}});
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::param(ParamSet& params, std::size_t i) {
  Node n;
  n.external_value = &params.value(i);
  n.external_grad = &params.grad(i);
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::view(const Tensor& value) {
  Node n;
  n.external_value = &value;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.external_value ? *n.external_value : n.value;
}

const Tensor& Graph::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.external_grad ? *n.external_grad : n.grad;
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (n.external_grad) return *n.external_grad;
  if (n.grad.empty() && !value(v).empty()) n.grad = Tensor(value(v).shape());
  return n.grad;
}

bool Graph::needs_grad(std::span<const Var> inputs) const {
  if (!record_) return false;
  for (Var in : inputs)
    if (nodes_[in.id].requires_grad) return true;
  return false;
}

Var Graph::push(Tensor value, std::span<const Var> inputs, Backward backward) {
  const bool needs = needs_grad(inputs);
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Graph::backward(Var root) {
  if (value(root).size() != 1)
    fail(ErrorKind::Dimension, "backward root must hold one value, got " + shape_str(value(root).shape()));
  if (!record_) fail(ErrorKind::Config, "backward on a non-recording graph");
  grad_buffer(root)[0] += 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

// ---- value-level ops ---------------------------------------------------------

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) fail(ErrorKind::Dimension, std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    fail(ErrorKind::Dimension,
         std::string(what) + " shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

const kernels::KernelTable& kt() { return kernels::active(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.shape()[1] != b.shape()[0])
    fail(ErrorKind::Dimension, "matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor c({m, n});
  kt().gemm_acc(m, n, k, a.data(), b.data(), c.data());
  return c;
}

Tensor transpose(const Tensor& x) {
  require_matrix(x, "transpose");
  Tensor out({x.shape()[1], x.shape()[0]});
  kernels::transpose(x.shape()[0], x.shape()[1], x.data(), out.data());
  return out;
}

Tensor row_softmax(const Tensor& x) {
  Tensor y(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    double mx = -INFINITY;
    for (double v : in) {
      if (std::isnan(v)) fail(ErrorKind::Numeric, "NaN in softmax input row " + std::to_string(r));
      mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
  }
  return y;
}

namespace {

struct NormStats {
  std::vector<double> xhat;
  std::vector<double> inv_std;
};

Tensor layer_norm_impl(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                       NormStats* stats) {
  const std::size_t d = x.cols();
  if (d == 0) fail(ErrorKind::Dimension, "layer_norm needs d >= 1");
  if (gain.size() != d || bias.size() != d)
    fail(ErrorKind::Dimension, "layer_norm gain/bias " + shape_str(gain.shape()) + "/" +
                                   shape_str(bias.shape()) + " do not match width " + std::to_string(d));
  if (!(eps > 0.0)) fail(ErrorKind::Config, "layer_norm epsilon must be positive");
  Tensor y(x.shape());
  if (stats) {
    stats->xhat.resize(x.size());
    stats->inv_std.resize(x.rows());
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto out = y.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (in[j] - mean) * inv;
      if (stats) stats->xhat[r * d + j] = xh;
      out[j] = xh * gain[j] + bias[j];
    }
    if (stats) stats->inv_std[r] = inv;
  }
  return y;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  return layer_norm_impl(x, gain, bias, epsilon, nullptr);
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_value(x[i]);
  return y;
}

// ---- differentiable ops --------------------------------------------------------

Var matmul(Graph& g, Var a, Var b) {
  Tensor out = matmul(g.value(a), g.value(b));
  return g.push(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dc) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
    if (g.requires_grad(a)) {
      Tensor bt = transpose(bv);
      kt().gemm_acc(m, k, n, dc.data(), bt.data(), g.grad_buffer(a).data());
    }
    if (g.requires_grad(b)) kt().gemm_tn_acc(k, n, m, av.data(), dc.data(), g.grad_buffer(b).data());
  });
}

Var add(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_same(av, bv, "add");
  Tensor out(av.shape());
  kt().add(av.size(), av.data(), bv.data(), out.data());
  return g.push(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dc) {
    if (g.requires_grad(a)) kt().axpy(dc.size(), 1.0, dc.data(), g.grad_buffer(a).data());
    if (g.requires_grad(b)) kt().axpy(dc.size(), 1.0, dc.data(), g.grad_buffer(b).data());
  });
}

Var sub(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_same(av, bv, "sub");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return g.push(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dc) {
    if (g.requires_grad(a)) kt().axpy(dc.size(), 1.0, dc.data(), g.grad_buffer(a).data());
    if (g.requires_grad(b)) kt().axpy(dc.size(), -1.0, dc.data(), g.grad_buffer(b).data());
  });
}

Var scale(Graph& g, Var x, double factor) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  kt().scale(xv.size(), factor, xv.data(), out.data());
  return g.push(std::move(out), {x}, [x, factor](Graph& g, const Tensor& dc) {
    kt().axpy(dc.size(), factor, dc.data(), g.grad_buffer(x).data());
  });
}

Var add_row_bias(Graph& g, Var x, Var bias) {
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.value(bias);
  if (bv.size() != xv.cols())
    fail(ErrorKind::Dimension, "row bias " + shape_str(bv.shape()) + " does not match " + shape_str(xv.shape()));
  Tensor out(xv.shape());
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) kt().add(n, xv.data() + r * n, bv.data(), out.data() + r * n);
  return g.push(std::move(out), {x, bias}, [x, bias, n](Graph& g, const Tensor& dc) {
    if (g.requires_grad(x)) kt().axpy(dc.size(), 1.0, dc.data(), g.grad_buffer(x).data());
    if (g.requires_grad(bias)) {
      double* db = g.grad_buffer(bias).data();
      for (std::size_t r = 0; r < dc.rows(); ++r) kt().axpy(n, 1.0, dc.data() + r * n, db);
    }
  });
}

Var layer_norm(Graph& g, Var x, Var gain, Var bias, double epsilon) {
  NormStats stats;
  Tensor out = layer_norm_impl(g.value(x), g.value(gain), g.value(bias), epsilon,
                               g.recording() ? &stats : nullptr);
  return g.push(std::move(out), {x, gain, bias},
                [x, gain, bias, stats = std::move(stats)](Graph& g, const Tensor& dy) {
                  const std::size_t d = dy.cols();
                  const Tensor& gv = g.value(gain);
                  if (g.requires_grad(gain)) {
                    double* dg = g.grad_buffer(gain).data();
                    for (std::size_t r = 0; r < dy.rows(); ++r)
                      for (std::size_t j = 0; j < d; ++j) dg[j] += dy.at(r, j) * stats.xhat[r * d + j];
                  }
                  if (g.requires_grad(bias)) {
                    double* db = g.grad_buffer(bias).data();
                    for (std::size_t r = 0; r < dy.rows(); ++r) kt().axpy(d, 1.0, dy.data() + r * d, db);
                  }
                  if (!g.requires_grad(x)) return;
                  Tensor& dx = g.grad_buffer(x);
                  std::vector<double> dxhat(d);
                  for (std::size_t r = 0; r < dy.rows(); ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      dxhat[j] = dy.at(r, j) * gv[j];
                      mean_d += dxhat[j];
                      mean_dx += dxhat[j] * stats.xhat[r * d + j];
                    }
                    mean_d /= static_cast<double>(d);
                    mean_dx /= static_cast<double>(d);
                    const double inv = stats.inv_std[r];
                    for (std::size_t j = 0; j < d; ++j)
                      dx.at(r, j) += inv * (dxhat[j] - mean_d - stats.xhat[r * d + j] * mean_dx);
                  }
                });
}

Var gelu(Graph& g, Var x) {
  return g.push(gelu(g.value(x)), {x}, [x](Graph& g, const Tensor& dy) {
    const Tensor& xv = g.value(x);
    Tensor& dx = g.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += dy[i] * gelu_grad(xv[i]);
  });
}

Var row_softmax(Graph& g, Var x) {
  Tensor y = row_softmax(g.value(x));
  Tensor saved = g.needs_grad({x}) ? y : Tensor();
  return g.push(std::move(y), {x}, [x, yv = std::move(saved)](Graph& g, const Tensor& dy) {
    Tensor& dx = g.grad_buffer(x);
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      auto yr = yv.row(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += dy.at(r, j) * yr[j];
      for (std::size_t j = 0; j < yr.size(); ++j) dx.at(r, j) += yr[j] * (dy.at(r, j) - dot);
    }
  });
}

Var concat_rows(Graph& g, std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat_rows of nothing");
  const std::size_t cols = g.value(parts[0]).cols();
  std::size_t rows = 0;
  for (Var p : parts) {
    if (g.value(p).cols() != cols)
      fail(ErrorKind::Dimension, "concat_rows width mismatch " + shape_str(g.value(parts[0]).shape()) +
                                     " vs " + shape_str(g.value(p).shape()));
    rows += g.value(p).rows();
  }
  Tensor out({rows, cols});
  std::size_t at = 0;
  for (Var p : parts) {
    const Tensor& v = g.value(p);
    std::copy(v.data(), v.data() + v.size(), out.data() + at);
    at += v.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.push(std::move(out), parts, [inputs](Graph& g, const Tensor& dy) {
    std::size_t at = 0;
    for (Var p : inputs) {
      const std::size_t n = g.value(p).size();
      if (g.requires_grad(p)) kt().axpy(n, 1.0, dy.data() + at, g.grad_buffer(p).data());
      at += n;
    }
  });
}

Var slice_rows(Graph& g, Var x, std::size_t begin, std::size_t end) {
  Tensor out = g.value(x).rows_slice(begin, end);
  return g.push(std::move(out), {x}, [x, begin](Graph& g, const Tensor& dy) {
    Tensor& dx = g.grad_buffer(x);
    kt().axpy(dy.size(), 1.0, dy.data(), dx.data() + begin * dx.cols());
  });
}

Var gather_rows(Graph& g, Var table, std::span<const int> ids) {
  const Tensor& tv = g.value(table);
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows())
      fail(ErrorKind::Vocabulary, "token id " + std::to_string(ids[r]) + " outside vocabulary of " +
                                      std::to_string(tv.rows()));
    auto src = tv.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return g.push(std::move(out), {table}, [table, idv, d](Graph& g, const Tensor& dy) {
    Tensor& dt = g.grad_buffer(table);
    for (std::size_t r = 0; r < idv.size(); ++r)
      kt().axpy(d, 1.0, dy.data() + r * d, dt.data() + static_cast<std::size_t>(idv[r]) * d);
  });
}

Var causal_attention(Graph& g, Var q, Var k, Var v, std::size_t heads, std::size_t query_offset) {
  const Tensor& qv = g.value(q);
  const Tensor& kv = g.value(k);
  const Tensor& vv = g.value(v);
  const std::size_t n = qv.rows(), m = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != m)
    fail(ErrorKind::Dimension, "attention shapes q" + shape_str(qv.shape()) + " k" + shape_str(kv.shape()) +
                                   " v" + shape_str(vv.shape()));
  if (heads == 0 || d % heads != 0) fail(ErrorKind::Config, "attention width not divisible by heads");
  if (query_offset + n > m)
    fail(ErrorKind::SequenceLength, "attention queries reach past the key history");
  const std::size_t hd = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  // probs[(r * heads + h) * m + j]
  std::vector<double> probs(n * heads * m, 0.0);
  Tensor out({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t limit = query_offset + r + 1;
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (r * heads + h) * m;
      const double* qr = qv.data() + r * d + h * hd;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < limit; ++j) {
        const double* kj = kv.data() + j * d + h * hd;
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) s += qr[t] * kj[t];
        p[j] = s * sc;
        mx = std::max(mx, p[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < limit; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
      }
      double* o = out.data() + r * d + h * hd;
      for (std::size_t j = 0; j < limit; ++j) {
        p[j] /= sum;
        kt().axpy(hd, p[j], vv.data() + j * d + h * hd, o);
      }
    }
  }
  if (!g.needs_grad({q, k, v})) probs = {};
  return g.push(std::move(out), {q, k, v},
                [q, k, v, heads, query_offset, probs = std::move(probs)](Graph& g, const Tensor& dout) {
                  const Tensor& qv = g.value(q);
                  const Tensor& kv = g.value(k);
                  const Tensor& vv = g.value(v);
                  const std::size_t n = qv.rows(), m = kv.rows(), d = qv.cols(), hd = d / heads;
                  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
                  const bool gq = g.requires_grad(q), gk = g.requires_grad(k), gv = g.requires_grad(v);
                  double* dq = gq ? g.grad_buffer(q).data() : nullptr;
                  double* dk = gk ? g.grad_buffer(k).data() : nullptr;
                  double* dv = gv ? g.grad_buffer(v).data() : nullptr;
                  std::vector<double> ds(m);
                  for (std::size_t r = 0; r < n; ++r) {
                    const std::size_t limit = query_offset + r + 1;
                    for (std::size_t h = 0; h < heads; ++h) {
                      const double* p = probs.data() + (r * heads + h) * m;
                      const double* dor = dout.data() + r * d + h * hd;
                      double dot = 0.0;
                      for (std::size_t j = 0; j < limit; ++j) {
                        const double* vj = vv.data() + j * d + h * hd;
                        double dp = 0.0;
                        for (std::size_t t = 0; t < hd; ++t) dp += dor[t] * vj[t];
                        ds[j] = dp;
                        dot += dp * p[j];
                        if (gv) kt().axpy(hd, p[j], dor, dv + j * d + h * hd);
                      }
                      for (std::size_t j = 0; j < limit; ++j) {
                        const double s = p[j] * (ds[j] - dot) * sc;
                        if (gq) kt().axpy(hd, s, kv.data() + j * d + h * hd, dq + r * d + h * hd);
                        if (gk) kt().axpy(hd, s, qv.data() + r * d + h * hd, dk + j * d + h * hd);
                      }
                    }
                  }
                });
}

Var sum_squares(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  double s = 0.0;
  for (double v : xv.values()) s += v * v;
  return g.push(Tensor::scalar(s), {x}, [x](Graph& g, const Tensor& dy) {
    const Tensor& xv = g.value(x);
    kt().axpy(xv.size(), 2.0 * dy[0], xv.data(), g.grad_buffer(x).data());
  });
}

Var cross_entropy_sum(Graph& g, Var logits, std::span<const int> targets) {
  const Tensor& lv = g.value(logits);
  if (targets.size() != lv.rows())
    fail(ErrorKind::Dimension, "cross entropy has " + std::to_string(targets.size()) + " targets for " +
                                   std::to_string(lv.rows()) + " rows");
  for (int t : targets)
    if (t >= static_cast<int>(lv.cols()))
      fail(ErrorKind::Vocabulary, "target id " + std::to_string(t) + " outside vocabulary of " +
                                      std::to_string(lv.cols()));
  Tensor probs = row_softmax(lv);
  double total = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (targets[r] < 0) continue;
    auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    total += (mx + std::log(sum)) - row[static_cast<std::size_t>(targets[r])];
  }
  std::vector<int> tv(targets.begin(), targets.end());
  return g.push(Tensor::scalar(total), {logits},
                [logits, tv, probs = std::move(probs)](Graph& g, const Tensor& dy) {
                  Tensor& dl = g.grad_buffer(logits);
                  for (std::size_t r = 0; r < tv.size(); ++r) {
                    if (tv[r] < 0) continue;
                    kt().axpy(probs.cols(), dy[0], probs.data() + r * probs.cols(), dl.data() + r * dl.cols());
                    dl.at(r, static_cast<std::size_t>(tv[r])) -= dy[0];
                  }
                });
}

}  // namespace storm::num
