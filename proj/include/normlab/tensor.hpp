#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "normlab/rng.hpp"

namespace normlab {

using Shape = std::vector<std::int64_t>;

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first touched, then value-sized
  bool needs_grad = false;
};

// Value-semantic handle onto shared storage. Copying a Tensor aliases the
// underlying buffer; clone() makes an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const;
  std::int64_t rows() const;  // rank-2 only
  std::int64_t cols() const;  // rank-2 only

  std::vector<double>& value();
  const std::vector<double>& value() const;

  // Allocates a zero gradient buffer on first use. Handles alias shared
  // storage, so gradient access follows pointer semantics and stays
  // available through const handles (backward closures rely on this).
  std::vector<double>& grad() const;
  bool has_grad() const;
  bool needs_grad() const;
  void zero_grad();

  double item() const;  // numel() == 1 only
  Tensor clone() const;

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
  friend class Tape;
};

// Records one op per forward call; backward() replays the records in exact
// reverse order, accumulating into .grad buffers with a fixed in-place
// summation order, so gradients are bit-reproducible for a given program.
// One Tape per model instance; not thread-safe across threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  // alpha * x + g, the residual junction. alpha == 1 reproduces x + g bit
  // for bit (IEEE multiplication by 1.0 is exact).
  Tensor add_scaled(const Tensor& x, double alpha, const Tensor& g);
  Tensor scale(const Tensor& a, double s);
  Tensor relu(const Tensor& a);
  // Inverted dropout: keeps an element with probability 1-p and scales it by
  // 1/(1-p); the mask is drawn from rng at call time and frozen into the
  // recorded op. p == 0 returns the input unchanged with nothing recorded.
  Tensor dropout(const Tensor& a, double p, Philox& rng);
  Tensor softmax_rows(const Tensor& a);
  Tensor layer_norm(const Tensor& a, double eps);
  Tensor layer_norm_affine(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps);
  // Merged-head scaled dot-product attention core: q,k,v are [L x d] with
  // d = n_heads * d_k; returns the concatenated per-head contexts (the
  // output projection is applied by the caller). causal restricts row i to
  // keys j <= i and requires square score matrices.
  Tensor attention_heads(const Tensor& q, const Tensor& k, const Tensor& v,
                         int n_heads, bool causal);
  // Gathers rows of table by id and scales them (the sqrt(d_model) factor).
  Tensor embedding_rows(const Tensor& table, std::vector<int> ids, double row_scale);
  // Mean over rows of smoothed negative log-likelihood; target -1 skips a row.
  Tensor cross_entropy(const Tensor& logits, std::vector<int> targets, double label_smoothing);
  Tensor mean_all(const Tensor& a);
  // sum_i w[i] * a[i]; the scalar-functional builder used by tests.
  Tensor weighted_sum(const Tensor& a, std::vector<double> weights);

  void backward(const Tensor& root);
  void reset();
  std::size_t recorded_ops() const { return ops_.size(); }

 private:
  Tensor node(Shape shape, bool needs_grad);
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  std::vector<std::function<void()>> ops_;
};

// Xavier (Glorot) normal init: std = gain * sqrt(2 / (fan_in + fan_out)),
// drawn row-major as a [fan_in x fan_out] tensor from the given stream.
Tensor xavier_normal(std::int64_t fan_in, std::int64_t fan_out, double gain,
                     Philox& rng, bool requires_grad = false);

// Central-difference gradient oracle: (f(x + h e_i) - f(x - h e_i)) / 2h.
// Deliberately independent of the tape; tests compare the two paths.
std::vector<double> finite_diff_grad(const std::function<double(const Tensor&)>& f,
                                     const Tensor& x, double h = 1e-5);

double l2_norm(const std::vector<double>& v);
double l2_diff(const std::vector<double>& a, const std::vector<double>& b);
// Mean over rows of the per-row euclidean norm of a rank-2 tensor.
double mean_row_norm(const Tensor& t);

}  // namespace normlab
