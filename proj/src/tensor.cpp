#include "normlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace normlab {

namespace {

// ==================== raw kernels ====================

// C[m x n] (+)= A[m x k] * B[k x n]
void gemm_nn(const double* __restrict a, const double* __restrict b,
             double* __restrict c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::int64_t l = 0; l < k; ++l) {
      const double av = ai[l];
      const double* bl = b + l * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// C[m x q] (+)= A[m x p] * B[q x p]^T
void gemm_nt(const double* __restrict a, const double* __restrict b,
             double* __restrict c, std::int64_t m, std::int64_t p, std::int64_t q,
             bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * p;
    double* ci = c + i * q;
    for (std::int64_t j = 0; j < q; ++j) {
      const double* bj = b + j * p;
      double acc = 0.0;
      for (std::int64_t l = 0; l < p; ++l) acc += ai[l] * bj[l];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

// C[m x n] (+)= A[p x m]^T * B[p x n]
void gemm_tn(const double* __restrict a, const double* __restrict b,
             double* __restrict c, std::int64_t p, std::int64_t m, std::int64_t n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::int64_t l = 0; l < p; ++l) {
    const double* al = a + l * m;
    const double* bl = b + l * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = al[i];
      double* ci = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

void copy_head_cols(const double* x, std::int64_t rows, std::int64_t d,
                    std::int64_t col0, std::int64_t dk, double* out) {
  for (std::int64_t i = 0; i < rows; ++i)
    std::copy(x + i * d + col0, x + i * d + col0 + dk, out + i * dk);
}

void add_head_cols(double* x, std::int64_t rows, std::int64_t d,
                   std::int64_t col0, std::int64_t dk, const double* g) {
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < dk; ++j) x[i * d + col0 + j] += g[i * dk + j];
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

// ==================== Tensor ====================

Tensor Tensor::leaf(Shape shape, std::vector<double> value, bool requires_grad) {
  auto d = std::make_shared<TensorData>();
  require(shape_numel(shape) == std::int64_t(value.size()),
          "tensor: shape does not match value size");
  d->shape = std::move(shape);
  d->value = std::move(value);
  d->needs_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return leaf(std::move(shape), std::vector<double>(std::size_t(n), 0.0), requires_grad);
}

const Shape& Tensor::shape() const { return d_->shape; }

std::int64_t Tensor::numel() const { return shape_numel(d_->shape); }

std::int64_t Tensor::rows() const {
  require(d_->shape.size() == 2, "tensor: rank-2 access on non-matrix");
  return d_->shape[0];
}

std::int64_t Tensor::cols() const {
  require(d_->shape.size() == 2, "tensor: rank-2 access on non-matrix");
  return d_->shape[1];
}

std::vector<double>& Tensor::value() { return d_->value; }
const std::vector<double>& Tensor::value() const { return d_->value; }

std::vector<double>& Tensor::grad() const {
  if (d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), 0.0);
  return d_->grad;
}

bool Tensor::has_grad() const { return d_ && d_->grad.size() == d_->value.size(); }
bool Tensor::needs_grad() const { return d_ && d_->needs_grad; }

void Tensor::zero_grad() {
  if (d_) d_->grad.assign(d_->value.size(), 0.0);
}

double Tensor::item() const {
  require(numel() == 1, "tensor: item() on non-scalar");
  return d_->value[0];
}

Tensor Tensor::clone() const {
  auto d = std::make_shared<TensorData>(*d_);
  return Tensor(std::move(d));
}

// ==================== Tape ====================

Tensor Tape::node(Shape shape, bool needs_grad) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.d_->needs_grad = needs_grad;
  return t;
}

void Tape::reset() { ops_.clear(); }

void Tape::backward(const Tensor& root) {
  require(root.defined() && root.numel() == 1, "backward: root must be a scalar");
  root.d_->grad.assign(1, 0.0);
  root.d_->grad[0] = 1.0;
  // Exact reverse recording order; this is what makes runs reproducible.
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: rank-2 operands required");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, "matmul: inner dimensions disagree");
  Tensor out = node({m, n}, a.needs_grad() || b.needs_grad());
  gemm_nn(a.value().data(), b.value().data(), out.value().data(), m, k, n, false);
  if (out.needs_grad()) {
    record([a, b, out, m, k, n]() mutable {
      const double* go = out.grad().data();
      if (a.needs_grad()) gemm_nt(go, b.value().data(), a.grad().data(), m, n, k, true);
      if (b.needs_grad()) gemm_tn(a.value().data(), go, b.grad().data(), m, k, n, true);
    });
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shapes disagree");
  Tensor out = node(a.shape(), a.needs_grad() || b.needs_grad());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] + b.value()[i];
  if (out.needs_grad()) {
    record([a, b, out, n]() mutable {
      const auto& go = out.grad();
      if (a.needs_grad()) {
        auto& ga = a.grad();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (b.needs_grad()) {
        auto& gb = b.grad();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor Tape::add_scaled(const Tensor& x, double alpha, const Tensor& g) {
  require(x.shape() == g.shape(), "add_scaled: shapes disagree");
  Tensor out = node(x.shape(), x.needs_grad() || g.needs_grad());
  const auto n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.value()[i] = alpha * x.value()[i] + g.value()[i];
  if (out.needs_grad()) {
    record([x, g, out, alpha, n]() mutable {
      const auto& go = out.grad();
      if (x.needs_grad()) {
        auto& gx = x.grad();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += alpha * go[i];
      }
      if (g.needs_grad()) {
        auto& gg = g.grad();
        for (std::int64_t i = 0; i < n; ++i) gg[i] += go[i];
      }
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& a, double s) {
  Tensor out = node(a.shape(), a.needs_grad());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.value()[i] = s * a.value()[i];
  if (out.needs_grad()) {
    record([a, out, s, n]() mutable {
      const auto& go = out.grad();
      auto& ga = a.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += s * go[i];
    });
  }
  return out;
}

Tensor Tape::relu(const Tensor& a) {
  Tensor out = node(a.shape(), a.needs_grad());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
  if (out.needs_grad()) {
    record([a, out, n]() mutable {
      const auto& go = out.grad();
      auto& ga = a.grad();
      for (std::int64_t i = 0; i < n; ++i)
        if (a.value()[i] > 0.0) ga[i] += go[i];
    });
  }
  return out;
}

Tensor Tape::dropout(const Tensor& a, double p, Philox& rng) {
  require(p >= 0.0 && p < 1.0, "dropout: p must lie in [0, 1)");
  if (p == 0.0) return a;
  const auto n = a.numel();
  auto mask = std::make_shared<std::vector<double>>(n);
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::int64_t i = 0; i < n; ++i) (*mask)[i] = rng.uniform01() >= p ? keep_scale : 0.0;

  Tensor out = node(a.shape(), a.needs_grad());
  for (std::int64_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * (*mask)[i];
  if (out.needs_grad()) {
    record([a, out, mask, n]() mutable {
      const auto& go = out.grad();
      auto& ga = a.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor Tape::softmax_rows(const Tensor& a) {
  require(a.shape().size() == 2, "softmax_rows: rank-2 input required");
  const auto r = a.rows(), c = a.cols();
  Tensor out = node(a.shape(), a.needs_grad());
  for (std::int64_t i = 0; i < r; ++i) {
    const double* xi = a.value().data() + i * c;
    double* yi = out.value().data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < c; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) z += (yi[j] = std::exp(xi[j] - mx));
    for (std::int64_t j = 0; j < c; ++j) yi[j] /= z;
  }
  if (out.needs_grad()) {
    record([a, out, r, c]() mutable {
      auto& ga = a.grad();
      for (std::int64_t i = 0; i < r; ++i) {
        const double* yi = out.value().data() + i * c;
        const double* gi = out.grad().data() + i * c;
        double dot = 0.0;
        for (std::int64_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
        for (std::int64_t j = 0; j < c; ++j) ga[i * c + j] += yi[j] * (gi[j] - dot);
      }
    });
  }
  return out;
}

namespace {

// Shared LN forward: y = (x - mean) / sqrt(popvar + eps), per trailing-axis row.
void layer_norm_rows(const std::vector<double>& x, std::int64_t nrows, std::int64_t d,
                     double eps, std::vector<double>& y, std::vector<double>& inv_std) {
  inv_std.resize(std::size_t(nrows));
  for (std::int64_t i = 0; i < nrows; ++i) {
    const double* xi = x.data() + i * d;
    double* yi = y.data() + i * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += xi[j];
    mu /= double(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double t = xi[j] - mu;
      var += t * t;
    }
    var /= double(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[std::size_t(i)] = is;
    for (std::int64_t j = 0; j < d; ++j) yi[j] = (xi[j] - mu) * is;
  }
}

// dx = inv_std * (dy - mean(dy) - y * mean(dy .* y)), accumulated.
void layer_norm_backward_rows(const std::vector<double>& y, const std::vector<double>& dy,
                              const std::vector<double>& inv_std, std::int64_t nrows,
                              std::int64_t d, std::vector<double>& dx) {
  for (std::int64_t i = 0; i < nrows; ++i) {
    const double* yi = y.data() + i * d;
    const double* gi = dy.data() + i * d;
    double m1 = 0.0, m2 = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      m1 += gi[j];
      m2 += gi[j] * yi[j];
    }
    m1 /= double(d);
    m2 /= double(d);
    const double is = inv_std[std::size_t(i)];
    for (std::int64_t j = 0; j < d; ++j) dx[i * d + j] += is * (gi[j] - m1 - yi[j] * m2);
  }
}

}  // namespace

Tensor Tape::layer_norm(const Tensor& a, double eps) {
  require(!a.shape().empty() && a.shape().back() >= 2,
          "layer_norm: trailing axis must have at least 2 entries");
  require(eps > 0.0, "layer_norm: eps must be positive");
  const std::int64_t d = a.shape().back();
  const std::int64_t nrows = a.numel() / d;
  Tensor out = node(a.shape(), a.needs_grad());
  auto inv_std = std::make_shared<std::vector<double>>();
  layer_norm_rows(a.value(), nrows, d, eps, out.value(), *inv_std);
  if (out.needs_grad()) {
    record([a, out, inv_std, nrows, d]() mutable {
      layer_norm_backward_rows(out.value(), out.grad(), *inv_std, nrows, d, a.grad());
    });
  }
  return out;
}

Tensor Tape::layer_norm_affine(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                               double eps) {
  require(!a.shape().empty() && a.shape().back() >= 2,
          "layer_norm_affine: trailing axis must have at least 2 entries");
  require(eps > 0.0, "layer_norm_affine: eps must be positive");
  const std::int64_t d = a.shape().back();
  require(gamma.numel() == d && beta.numel() == d, "layer_norm_affine: gamma/beta must be [d]");
  const std::int64_t nrows = a.numel() / d;
  Tensor out = node(a.shape(), a.needs_grad() || gamma.needs_grad() || beta.needs_grad());
  auto inv_std = std::make_shared<std::vector<double>>();
  auto ycore = std::make_shared<std::vector<double>>(a.value().size());
  {
    layer_norm_rows(a.value(), nrows, d, eps, *ycore, *inv_std);
    for (std::int64_t i = 0; i < nrows; ++i)
      for (std::int64_t j = 0; j < d; ++j)
        out.value()[i * d + j] = (*ycore)[i * d + j] * gamma.value()[j] + beta.value()[j];
  }
  if (out.needs_grad()) {
    record([a, gamma, beta, out, inv_std, ycore, nrows, d]() mutable {
      const auto& go = out.grad();
      if (beta.needs_grad()) {
        auto& gb = beta.grad();
        for (std::int64_t i = 0; i < nrows; ++i)
          for (std::int64_t j = 0; j < d; ++j) gb[j] += go[i * d + j];
      }
      if (gamma.needs_grad()) {
        auto& gg = gamma.grad();
        for (std::int64_t i = 0; i < nrows; ++i)
          for (std::int64_t j = 0; j < d; ++j) gg[j] += go[i * d + j] * (*ycore)[i * d + j];
      }
      if (a.needs_grad()) {
        std::vector<double> dy(go.size());
        for (std::int64_t i = 0; i < nrows; ++i)
          for (std::int64_t j = 0; j < d; ++j) dy[i * d + j] = go[i * d + j] * gamma.value()[j];
        layer_norm_backward_rows(*ycore, dy, *inv_std, nrows, d, a.grad());
      }
    });
  }
  return out;
}

Tensor Tape::attention_heads(const Tensor& q, const Tensor& k, const Tensor& v,
                             int n_heads, bool causal) {
  require(q.shape().size() == 2 && k.shape().size() == 2 && v.shape().size() == 2,
          "attention_heads: rank-2 inputs required");
  const auto lq = q.rows(), lk = k.rows(), d = q.cols();
  require(k.cols() == d && v.cols() == d && v.rows() == lk,
          "attention_heads: operand shapes disagree");
  require(n_heads >= 1 && d % n_heads == 0, "attention_heads: d must be divisible by n_heads");
  require(!causal || lq == lk, "attention_heads: causal masking needs square scores");
  const std::int64_t dk = d / n_heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(double(dk));

  Tensor out = node({lq, d}, q.needs_grad() || k.needs_grad() || v.needs_grad());
  // Per-head softmax weights, kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(std::size_t(n_heads) * lq * lk, 0.0);

  std::vector<double> qh(std::size_t(lq) * dk), kh(std::size_t(lk) * dk), vh(std::size_t(lk) * dk);
  std::vector<double> ctx(std::size_t(lq) * dk);
  for (int h = 0; h < n_heads; ++h) {
    copy_head_cols(q.value().data(), lq, d, h * dk, dk, qh.data());
    copy_head_cols(k.value().data(), lk, d, h * dk, dk, kh.data());
    copy_head_cols(v.value().data(), lk, d, h * dk, dk, vh.data());
    double* ph = probs->data() + std::size_t(h) * lq * lk;
    for (std::int64_t i = 0; i < lq; ++i) {
      const std::int64_t jmax = causal ? i + 1 : lk;  // causal: keys j <= i only
      double* pi = ph + i * lk;
      const double* qi = qh.data() + i * dk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < jmax; ++j) {
        double s = 0.0;
        const double* kj = kh.data() + j * dk;
        for (std::int64_t t = 0; t < dk; ++t) s += qi[t] * kj[t];
        pi[j] = s * inv_sqrt_dk;
        mx = std::max(mx, pi[j]);
      }
      double z = 0.0;
      for (std::int64_t j = 0; j < jmax; ++j) z += (pi[j] = std::exp(pi[j] - mx));
      for (std::int64_t j = 0; j < jmax; ++j) pi[j] /= z;
    }
    gemm_nn(ph, vh.data(), ctx.data(), lq, lk, dk, false);
    for (std::int64_t i = 0; i < lq; ++i)
      std::copy(ctx.data() + i * dk, ctx.data() + (i + 1) * dk,
                out.value().data() + i * d + h * dk);
  }

  if (out.needs_grad()) {
    record([q, k, v, out, probs, n_heads, causal, lq, lk, d, dk, inv_sqrt_dk]() mutable {
      std::vector<double> qh(std::size_t(lq) * dk), kh(std::size_t(lk) * dk),
          vh(std::size_t(lk) * dk);
      std::vector<double> dctx(std::size_t(lq) * dk), dp(std::size_t(lq) * lk),
          ds(std::size_t(lq) * lk), dqh(std::size_t(lq) * dk), dkh(std::size_t(lk) * dk),
          dvh(std::size_t(lk) * dk);
      for (int h = 0; h < n_heads; ++h) {
        copy_head_cols(q.value().data(), lq, d, h * dk, dk, qh.data());
        copy_head_cols(k.value().data(), lk, d, h * dk, dk, kh.data());
        copy_head_cols(v.value().data(), lk, d, h * dk, dk, vh.data());
        copy_head_cols(out.grad().data(), lq, d, h * dk, dk, dctx.data());
        const double* ph = probs->data() + std::size_t(h) * lq * lk;
        // dP = dctx * Vh^T ; dV = P^T * dctx
        gemm_nt(dctx.data(), vh.data(), dp.data(), lq, dk, lk, false);
        gemm_tn(ph, dctx.data(), dvh.data(), lq, lk, dk, false);
        // softmax rows: dS = P .* (dP - rowsum(dP .* P)); masked slots have P = 0.
        for (std::int64_t i = 0; i < lq; ++i) {
          const double* pi = ph + i * lk;
          const double* dpi = dp.data() + i * lk;
          double dot = 0.0;
          for (std::int64_t j = 0; j < lk; ++j) dot += dpi[j] * pi[j];
          for (std::int64_t j = 0; j < lk; ++j) ds[i * lk + j] = pi[j] * (dpi[j] - dot);
        }
        // dQ = dS * K / sqrt(dk) ; dK = dS^T * Q / sqrt(dk)
        gemm_nn(ds.data(), kh.data(), dqh.data(), lq, lk, dk, false);
        gemm_tn(ds.data(), qh.data(), dkh.data(), lq, lk, dk, false);
        for (auto& x : dqh) x *= inv_sqrt_dk;
        for (auto& x : dkh) x *= inv_sqrt_dk;
        if (q.needs_grad()) add_head_cols(q.grad().data(), lq, d, h * dk, dk, dqh.data());
        if (k.needs_grad()) add_head_cols(k.grad().data(), lk, d, h * dk, dk, dkh.data());
        if (v.needs_grad()) add_head_cols(v.grad().data(), lk, d, h * dk, dk, dvh.data());
      }
      (void)causal;
    });
  }
  return out;
}

Tensor Tape::embedding_rows(const Tensor& table, std::vector<int> ids, double row_scale) {
  require(table.shape().size() == 2, "embedding_rows: table must be rank-2");
  const auto v = table.rows(), d = table.cols();
  for (int id : ids)
    require(id >= 0 && id < v, "embedding_rows: token id out of range");
  const std::int64_t l = std::int64_t(ids.size());
  Tensor out = node({l, d}, table.needs_grad());
  for (std::int64_t i = 0; i < l; ++i) {
    const double* src = table.value().data() + std::int64_t(ids[std::size_t(i)]) * d;
    double* dst = out.value().data() + i * d;
    for (std::int64_t j = 0; j < d; ++j) dst[j] = src[j] * row_scale;
  }
  if (out.needs_grad()) {
    record([table, out, ids = std::move(ids), row_scale, d]() mutable {
      auto& gt = table.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        double* dst = gt.data() + std::int64_t(ids[i]) * d;
        const double* src = go.data() + std::int64_t(i) * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j] * row_scale;
      }
    });
  }
  return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, std::vector<int> targets,
                           double label_smoothing) {
  require(logits.shape().size() == 2, "cross_entropy: logits must be rank-2");
  const auto r = logits.rows(), c = logits.cols();
  require(std::int64_t(targets.size()) == r, "cross_entropy: one target per row required");
  require(label_smoothing >= 0.0 && label_smoothing < 1.0,
          "cross_entropy: label smoothing must lie in [0, 1)");
  std::int64_t n_valid = 0;
  for (int t : targets) {
    require(t >= -1 && t < c, "cross_entropy: target id out of range");
    if (t >= 0) ++n_valid;
  }
  require(n_valid > 0, "cross_entropy: no unmasked targets");

  Tensor out = node({1}, logits.needs_grad());
  auto lse = std::make_shared<std::vector<double>>(std::size_t(r), 0.0);
  double total = 0.0;
  const double eps_u = label_smoothing / double(c);
  for (std::int64_t i = 0; i < r; ++i) {
    if (targets[std::size_t(i)] < 0) continue;
    const double* zi = logits.value().data() + i * c;
    double mx = zi[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, zi[j]);
    double z = 0.0, zsum = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      z += std::exp(zi[j] - mx);
      zsum += zi[j];
    }
    const double l = mx + std::log(z);
    (*lse)[std::size_t(i)] = l;
    total += l - (1.0 - label_smoothing) * zi[targets[std::size_t(i)]] - eps_u * zsum;
  }
  out.value()[0] = total / double(n_valid);

  if (out.needs_grad()) {
    record([logits, out, targets = std::move(targets), lse, label_smoothing, eps_u, r, c,
            n_valid]() mutable {
      const double go = out.grad()[0] / double(n_valid);
      auto& gl = logits.grad();
      for (std::int64_t i = 0; i < r; ++i) {
        const int t = targets[std::size_t(i)];
        if (t < 0) continue;
        const double* zi = logits.value().data() + i * c;
        const double l = (*lse)[std::size_t(i)];
        for (std::int64_t j = 0; j < c; ++j) {
          const double p = std::exp(zi[j] - l);
          const double tj = (j == t ? 1.0 - label_smoothing : 0.0) + eps_u;
          gl[i * c + j] += go * (p - tj);
        }
      }
    });
  }
  return out;
}

Tensor Tape::mean_all(const Tensor& a) {
  const auto n = a.numel();
  Tensor out = node({1}, a.needs_grad());
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a.value()[i];
  out.value()[0] = s / double(n);
  if (out.needs_grad()) {
    record([a, out, n]() mutable {
      const double g = out.grad()[0] / double(n);
      auto& ga = a.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor Tape::weighted_sum(const Tensor& a, std::vector<double> weights) {
  require(std::int64_t(weights.size()) == a.numel(), "weighted_sum: weight count must match");
  Tensor out = node({1}, a.needs_grad());
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * a.value()[i];
  out.value()[0] = s;
  if (out.needs_grad()) {
    record([a, out, weights = std::move(weights)]() mutable {
      const double g = out.grad()[0];
      auto& ga = a.grad();
      for (std::size_t i = 0; i < weights.size(); ++i) ga[i] += g * weights[i];
    });
  }
  return out;
}

// ==================== init and oracles ====================

Tensor xavier_normal(std::int64_t fan_in, std::int64_t fan_out, double gain, Philox& rng,
                     bool requires_grad) {
  if (fan_in < 1 || fan_out < 1) throw std::invalid_argument("xavier_normal: bad fan dims");
  const double std_dev = gain * std::sqrt(2.0 / double(fan_in + fan_out));
  std::vector<double> v(std::size_t(fan_in * fan_out));
  for (auto& x : v) x = std_dev * rng.normal();
  return Tensor::leaf({fan_in, fan_out}, std::move(v), requires_grad);
}

std::vector<double> finite_diff_grad(const std::function<double(const Tensor&)>& f,
                                     const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  Tensor probe = x.clone();
  const auto n = std::size_t(probe.numel());
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double keep = probe.value()[i];
    probe.value()[i] = keep + h;
    const double fp = f(probe);
    probe.value()[i] = keep - h;
    const double fm = f(probe);
    probe.value()[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff_grad: non-finite probe evaluation");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double l2_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("l2_diff: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double mean_row_norm(const Tensor& t) {
  const auto r = t.rows(), c = t.cols();
  double acc = 0.0;
  for (std::int64_t i = 0; i < r; ++i) {
    double s = 0.0;
    const double* xi = t.value().data() + i * c;
    for (std::int64_t j = 0; j < c; ++j) s += xi[j] * xi[j];
    acc += std::sqrt(s);
  }
  return acc / double(r);
}

}  // namespace normlab
