#include "deskalign/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace deskalign::tn {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;
using Strided = Eigen::OuterStride<>;
using SMap = Eigen::Map<Mat, 0, Strided>;
using CSMap = Eigen::Map<const Mat, 0, Strided>;

thread_local bool t_grad_enabled = true;

MatMap as_mat(Tensor& t) { return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }

bool any_requires(std::initializer_list<const Var*> vars) {
  if (!t_grad_enabled) return false;
  for (const Var* v : vars) {
    if (*v && (*v)->requires_grad) return true;
  }
  return false;
}

Var make_node(Tensor value, std::initializer_list<const Var*> parents,
              std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (any_requires(parents)) {
    node->requires_grad = true;
    for (const Var* p : parents) {
      if (*p) node->parents.push_back(*p);
    }
    node->backward_fn = std::move(fn);
  }
  return node;
}

void check_same_size(const Var& a, const Var& b, const char* op) {
  if (a->value.size() != b->value.size()) {
    throw std::invalid_argument(std::string(op) + ": size mismatch " + shape_str(a->value.shape) +
                                " vs " + shape_str(b->value.shape));
  }
}

Node& grad_target(const Var& v) {
  v->ensure_grad();
  return *v;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "x" : "") << s[i];
  out << ']';
  return out.str();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

void backward(const Var& root) {
  if (root->value.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " + shape_str(root->value.shape));
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
  }
}

// ---- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_size(a, b, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {&a, &b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = grad_target(p).grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_size(a, b, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  const bool a_req = a->requires_grad, b_req = b->requires_grad;
  return make_node(std::move(out), {&a, &b}, [a, b, a_req, b_req](Node& self) {
    if (a_req) {
      auto& g = grad_target(a).grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b_req) {
      auto& g = grad_target(b).grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_size(a, b, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {&a, &b}, [a, b](Node& self) {
    if (a->requires_grad) {
      auto& g = grad_target(a).grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = grad_target(b).grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.data) v *= s;
  return make_node(std::move(out), {&a}, [a, s](Node& self) {
    auto& g = grad_target(a).grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.data) v += s;
  return make_node(std::move(out), {&a}, [a](Node& self) {
    auto& g = grad_target(a).grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var square(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v *= v;
  return make_node(std::move(out), {&a}, [a](Node& self) {
    auto& g = grad_target(a).grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * a->value[i] * self.grad[i];
  });
}

Var gelu(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  return make_node(std::move(out), {&a}, [a](Node& self) {
    auto& g = grad_target(a).grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

Var softplus(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  return make_node(std::move(out), {&a}, [a](Node& self) {
    auto& g = grad_target(a).grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a->value[i];
      const double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += self.grad[i] * sig;
    }
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a->value.data) total += v;
  return make_node(Tensor::scalar(total), {&a}, [a](Node& self) {
    auto& g = grad_target(a).grad;
    const double d = self.grad[0];
    for (double& v : g.data) v += d;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a->value.size());
  return scale(sum(a), 1.0 / n);
}

Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a->value.size()) {
    throw std::invalid_argument("reshape: " + shape_str(a->value.shape) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), a->value.data);
  return make_node(std::move(out), {&a}, [a](Node& self) {
    auto& g = grad_target(a).grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  const std::size_t cols = a->value.cols();
  const std::size_t n_rows = a->value.rows();
  Tensor out({rows.size(), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n_rows) throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(a->value.data.data() + rows[r] * cols, cols, out.data.data() + r * cols);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_node(std::move(out), {&a}, [a, idx = std::move(idx), cols](Node& self) {
    auto& g = grad_target(a).grad;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double* dst = g.data.data() + idx[r] * cols;
      const double* src = self.grad.data.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

// ---- layers --------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) { return linear(a, b, nullptr); }

Var linear(const Var& x, const Var& w, const Var& bias) {
  const std::size_t n = x->value.rows(), k = x->value.cols();
  if (w->value.shape.size() != 2 || w->value.shape[0] != k) {
    throw std::invalid_argument("linear: input " + shape_str(x->value.shape) + " vs weight " +
                                shape_str(w->value.shape));
  }
  const std::size_t m = w->value.shape[1];
  if (bias && bias->value.size() != m) {
    throw std::invalid_argument("linear: bias " + shape_str(bias->value.shape) + " for width " +
                                std::to_string(m));
  }
  Tensor out({n, m});
  auto y = as_mat(out);
  y.noalias() = as_mat(x->value) * as_mat(w->value);
  if (bias) {
    for (std::size_t r = 0; r < n; ++r) {
      double* row = out.data.data() + r * m;
      for (std::size_t c = 0; c < m; ++c) row[c] += bias->value[c];
    }
  }
  return make_node(std::move(out), {&x, &w, &bias}, [x, w, bias, n, m](Node& self) {
    auto dy = as_mat(self.grad);
    if (x->requires_grad) as_mat(grad_target(x).grad).noalias() += dy * as_mat(w->value).transpose();
    if (w->requires_grad) as_mat(grad_target(w).grad).noalias() += as_mat(x->value).transpose() * dy;
    if (bias && bias->requires_grad) {
      auto& g = grad_target(bias).grad;
      for (std::size_t r = 0; r < n; ++r) {
        const double* row = self.grad.data.data() + r * m;
        for (std::size_t c = 0; c < m; ++c) g[c] += row[c];
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& shift, double eps) {
  const std::size_t n = x->value.rows(), d = x->value.cols();
  if (gain->value.size() != d || shift->value.size() != d) {
    throw std::invalid_argument("layer_norm: parameter width mismatch for " + shape_str(x->value.shape));
  }
  Tensor out(x->value.shape);
  Tensor xhat({n, d});
  std::vector<double> rstd(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = x->value.data.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    double* xh = xhat.data.data() + r * d;
    double* o = out.data.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) {
      xh[c] = (in[c] - mu) * rstd[r];
      o[c] = xh[c] * gain->value[c] + shift->value[c];
    }
  }
  return make_node(std::move(out), {&x, &gain, &shift},
                   [x, gain, shift, xhat = std::move(xhat), rstd = std::move(rstd), n, d](Node& self) {
                     const double inv_d = 1.0 / static_cast<double>(d);
                     if (gain->requires_grad) {
                       auto& gg = grad_target(gain).grad;
                       for (std::size_t r = 0; r < n; ++r) {
                         const double* dy = self.grad.data.data() + r * d;
                         const double* xh = xhat.data.data() + r * d;
                         for (std::size_t c = 0; c < d; ++c) gg[c] += dy[c] * xh[c];
                       }
                     }
                     if (shift->requires_grad) {
                       auto& gs = grad_target(shift).grad;
                       for (std::size_t r = 0; r < n; ++r) {
                         const double* dy = self.grad.data.data() + r * d;
                         for (std::size_t c = 0; c < d; ++c) gs[c] += dy[c];
                       }
                     }
                     if (!x->requires_grad) return;
                     auto& gx = grad_target(x).grad;
                     std::vector<double> dxh(d);
                     for (std::size_t r = 0; r < n; ++r) {
                       const double* dy = self.grad.data.data() + r * d;
                       const double* xh = xhat.data.data() + r * d;
                       double m1 = 0.0, m2 = 0.0;
                       for (std::size_t c = 0; c < d; ++c) {
                         dxh[c] = dy[c] * gain->value[c];
                         m1 += dxh[c];
                         m2 += dxh[c] * xh[c];
                       }
                       m1 *= inv_d;
                       m2 *= inv_d;
                       double* out = gx.data.data() + r * d;
                       for (std::size_t c = 0; c < d; ++c) out[c] += rstd[r] * (dxh[c] - m1 - xh[c] * m2);
                     }
                   });
}

Var causal_attention(const Var& qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
  const std::size_t width = qkv->value.cols();
  if (width % 3 != 0 || qkv->value.rows() != batch * seq) {
    throw std::invalid_argument("causal_attention: qkv " + shape_str(qkv->value.shape) +
                                " for batch " + std::to_string(batch) + " seq " + std::to_string(seq));
  }
  const std::size_t dim = width / 3;
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("causal_attention: dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const std::size_t hd = dim / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto T = static_cast<Eigen::Index>(seq);
  const auto HD = static_cast<Eigen::Index>(hd);
  const Strided in_stride(static_cast<Eigen::Index>(width));
  const Strided out_stride(static_cast<Eigen::Index>(dim));

  Tensor out({batch * seq, dim});
  // Attention probabilities, one seq×seq block per (sequence, head).
  Tensor probs({batch * heads * seq, seq});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = qkv->value.data.data() + b * seq * width;
    for (std::size_t h = 0; h < heads; ++h) {
      CSMap q(base + h * hd, T, HD, in_stride);
      CSMap k(base + dim + h * hd, T, HD, in_stride);
      CSMap v(base + 2 * dim + h * hd, T, HD, in_stride);
      MatMap p(probs.data.data() + (b * heads + h) * seq * seq, T, T);
      p.noalias() = (q * k.transpose()) * scale_factor;
      for (Eigen::Index i = 0; i < T; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, p(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          z += p(i, j);
        }
        const double inv = 1.0 / z;
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) *= inv;
        for (Eigen::Index j = i + 1; j < T; ++j) p(i, j) = 0.0;
      }
      SMap o(out.data.data() + b * seq * dim + h * hd, T, HD, out_stride);
      o.noalias() = p * v;
    }
  }
  return make_node(std::move(out), {&qkv},
                   [qkv, probs = std::move(probs), batch, seq, heads, dim, hd, width, scale_factor](Node& self) {
                     const auto T = static_cast<Eigen::Index>(seq);
                     const auto HD = static_cast<Eigen::Index>(hd);
                     const Strided in_stride(static_cast<Eigen::Index>(width));
                     const Strided out_stride(static_cast<Eigen::Index>(dim));
                     auto& g = grad_target(qkv).grad;
                     Mat dp(T, T), ds(T, T);
                     for (std::size_t b = 0; b < batch; ++b) {
                       const double* base = qkv->value.data.data() + b * seq * width;
                       double* gbase = g.data.data() + b * seq * width;
                       for (std::size_t h = 0; h < heads; ++h) {
                         CSMap q(base + h * hd, T, HD, in_stride);
                         CSMap k(base + dim + h * hd, T, HD, in_stride);
                         CSMap v(base + 2 * dim + h * hd, T, HD, in_stride);
                         SMap dq(gbase + h * hd, T, HD, in_stride);
                         SMap dk(gbase + dim + h * hd, T, HD, in_stride);
                         SMap dv(gbase + 2 * dim + h * hd, T, HD, in_stride);
                         CMatMap p(probs.data.data() + (b * heads + h) * seq * seq, T, T);
                         CSMap dout(self.grad.data.data() + b * seq * dim + h * hd, T, HD, out_stride);
                         dv.noalias() += p.transpose() * dout;
                         dp.noalias() = dout * v.transpose();
                         for (Eigen::Index i = 0; i < T; ++i) {
                           double dot = 0.0;
                           for (Eigen::Index j = 0; j <= i; ++j) dot += p(i, j) * dp(i, j);
                           for (Eigen::Index j = 0; j <= i; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale_factor;
                           for (Eigen::Index j = i + 1; j < T; ++j) ds(i, j) = 0.0;
                         }
                         dq.noalias() += ds * k;
                         dk.noalias() += ds.transpose() * q;
                       }
                     }
                   });
}

Var embedding_sum(const Var& table, std::span<const std::int64_t> indices, std::size_t per_row) {
  if (per_row == 0 || indices.size() % per_row != 0) {
    throw std::invalid_argument("embedding_sum: index count not a multiple of per_row");
  }
  const std::size_t vocab = table->value.rows(), d = table->value.cols();
  const std::size_t n = indices.size() / per_row;
  Tensor out({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    double* dst = out.data.data() + r * d;
    for (std::size_t j = 0; j < per_row; ++j) {
      const std::int64_t id = indices[r * per_row + j];
      if (id < 0) continue;
      if (static_cast<std::size_t>(id) >= vocab) throw std::out_of_range("embedding_sum: index out of range");
      const double* src = table->value.data.data() + static_cast<std::size_t>(id) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  }
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return make_node(std::move(out), {&table}, [table, idx = std::move(idx), per_row, n, d](Node& self) {
    auto& g = grad_target(table).grad;
    for (std::size_t r = 0; r < n; ++r) {
      const double* src = self.grad.data.data() + r * d;
      for (std::size_t j = 0; j < per_row; ++j) {
        const std::int64_t id = idx[r * per_row + j];
        if (id < 0) continue;
        double* dst = g.data.data() + static_cast<std::size_t>(id) * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    }
  });
}

// ---- losses ----------------------------------------------------------------------

namespace {

// In-place log-softmax of one block; returns nothing, writes log-probs.
void log_softmax_block(const double* in, double* out, std::size_t k) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) z += std::exp(in[j] - mx);
  const double lz = mx + std::log(z);
  for (std::size_t j = 0; j < k; ++j) out[j] = in[j] - lz;
}

void check_blocks(const Tensor& logits, std::size_t components, std::size_t buckets, std::size_t weights,
                  const char* op) {
  if (logits.cols() != components * buckets) {
    throw std::invalid_argument(std::string(op) + ": logits width " + std::to_string(logits.cols()) +
                                " != components*buckets");
  }
  if (weights != logits.rows()) {
    throw std::invalid_argument(std::string(op) + ": one weight per row required");
  }
}

}  // namespace

Var categorical_nll(const Var& logits, std::span<const std::int64_t> targets,
                    std::span<const double> row_weights, std::size_t components, std::size_t buckets) {
  const Tensor& z = logits->value;
  check_blocks(z, components, buckets, row_weights.size(), "categorical_nll");
  const std::size_t n = z.rows();
  if (targets.size() != n * components) throw std::invalid_argument("categorical_nll: target count mismatch");
  Tensor logp(z.shape);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < components; ++c) {
      const std::size_t off = r * components * buckets + c * buckets;
      log_softmax_block(z.data.data() + off, logp.data.data() + off, buckets);
      const std::int64_t t = targets[r * components + c];
      if (t < 0) continue;
      if (static_cast<std::size_t>(t) >= buckets) throw std::out_of_range("categorical_nll: target out of range");
      loss -= row_weights[r] * logp[off + static_cast<std::size_t>(t)];
    }
  }
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  std::vector<double> w(row_weights.begin(), row_weights.end());
  return make_node(Tensor::scalar(loss), {&logits},
                   [logits, logp = std::move(logp), tgt = std::move(tgt), w = std::move(w), n, components,
                    buckets](Node& self) {
                     auto& g = grad_target(logits).grad;
                     const double d = self.grad[0];
                     for (std::size_t r = 0; r < n; ++r) {
                       for (std::size_t c = 0; c < components; ++c) {
                         const std::int64_t t = tgt[r * components + c];
                         if (t < 0) continue;
                         const std::size_t off = r * components * buckets + c * buckets;
                         const double s = d * w[r];
                         for (std::size_t j = 0; j < buckets; ++j) g[off + j] += s * std::exp(logp[off + j]);
                         g[off + static_cast<std::size_t>(t)] -= s;
                       }
                     }
                   });
}

Var categorical_kl(const Var& logits, const Tensor& ref_logits, std::span<const double> row_weights,
                   std::size_t components, std::size_t buckets) {
  const Tensor& z = logits->value;
  check_blocks(z, components, buckets, row_weights.size(), "categorical_kl");
  if (ref_logits.size() != z.size()) throw std::invalid_argument("categorical_kl: reference shape mismatch");
  const std::size_t n = z.rows();
  Tensor logp(z.shape), logq(z.shape);
  std::vector<double> block_kl(n * components, 0.0);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < components; ++c) {
      const std::size_t off = r * components * buckets + c * buckets;
      log_softmax_block(z.data.data() + off, logp.data.data() + off, buckets);
      log_softmax_block(ref_logits.data.data() + off, logq.data.data() + off, buckets);
      double kl = 0.0;
      for (std::size_t j = 0; j < buckets; ++j) {
        kl += std::exp(logp[off + j]) * (logp[off + j] - logq[off + j]);
      }
      block_kl[r * components + c] = kl;
      loss += row_weights[r] * kl;
    }
  }
  std::vector<double> w(row_weights.begin(), row_weights.end());
  return make_node(Tensor::scalar(loss), {&logits},
                   [logits, logp = std::move(logp), logq = std::move(logq), block_kl = std::move(block_kl),
                    w = std::move(w), n, components, buckets](Node& self) {
                     auto& g = grad_target(logits).grad;
                     const double d = self.grad[0];
                     for (std::size_t r = 0; r < n; ++r) {
                       for (std::size_t c = 0; c < components; ++c) {
                         const std::size_t off = r * components * buckets + c * buckets;
                         const double kl = block_kl[r * components + c];
                         for (std::size_t j = 0; j < buckets; ++j) {
                           const double p = std::exp(logp[off + j]);
                           g[off + j] += d * w[r] * p * (logp[off + j] - logq[off + j] - kl);
                         }
                       }
                     }
                   });
}

Var cross_entropy(const Var& logits, std::size_t target) {
  const std::size_t k = logits->value.size();
  if (target >= k) throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " >= " + std::to_string(k));
  Var row = logits->value.shape.size() == 1 ? reshape(logits, {1, k}) : logits;
  const std::int64_t t = static_cast<std::int64_t>(target);
  const double w = 1.0;
  return categorical_nll(row, std::span(&t, 1), std::span(&w, 1), 1, k);
}

// ---- helpers ------------------------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("softmax: temperature must be positive and finite");
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) {
    if (!std::isfinite(l)) throw std::invalid_argument("softmax: non-finite logit");
    mx = std::max(mx, l / temperature);
  }
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
  if (probs.empty()) throw std::invalid_argument("sample_categorical: empty distribution");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("sample_categorical: invalid probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("sample_categorical: probabilities do not sum to 1");
  double u = rng.uniform();
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = i;
    if (u < probs[i]) return i;
    u -= probs[i];
  }
  return last_positive;
}

}  // namespace deskalign::tn
