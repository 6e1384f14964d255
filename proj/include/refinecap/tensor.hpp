#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "refinecap/errors.hpp"

namespace refinecap {

using Shape = std::vector<int>;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major tensor handle. Copies share the underlying buffer;
// clone() makes an independent copy. 64-bit storage throughout.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const;
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }

  std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void ensure_grad() const;  // allocate zero grad if absent
  void zero_grad() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) const { impl_->requires_grad = v; }

  double item() const;  // numel()==1 only
  Tensor clone() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Reverse-mode tape. Constructing a Tape makes it the active one for the
// current thread (ops record backward rules onto it); destruction restores
// the previous tape. One backward() per tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> rule);
  std::size_t size() const { return rules_.size(); }

  // Seeds d(loss)/d(loss)=1 and runs every recorded rule in reverse order.
  // Gradients accumulate additively across fan-out.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> rules_;
  bool consumed_ = false;
  Tape* parent_ = nullptr;
};

// ==== differentiable ops =====================================================
// Every op validates shapes (DimensionError names the op and shapes) and
// records its backward rule on the active tape when any input requires grad.

// Rank-2 matrix product with optional transposes.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);

// Elementwise sum; b's shape may be a trailing suffix of a's (broadcast
// over the leading axes).
Tensor add(const Tensor& a, const Tensor& b);

// Elementwise product; equal shapes, or one operand with numel()==1.
Tensor mul(const Tensor& a, const Tensor& b);

// Concatenate along the last axis; leading dims must agree.
Tensor concat_last(const std::vector<Tensor>& parts);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);

// (x - mean) / sqrt(var + eps) per row over the last axis, no affine part.
Tensor layer_norm_last(const Tensor& x, double eps = 1e-12);

// Row lookup: out[i] = table[ids[i]]. Backward scatter-adds into the table.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// out[index[k]] += src[k] into a fresh zero vector of length out_size.
// Duplicate indices accumulate.
Tensor scatter_add(const Tensor& src, const std::vector<int>& index,
                   int out_size);

// out[i] = value where mask!=0, x[i] otherwise. mask is a non-differentiable
// constant; broadcast rules as add().
Tensor mask_fill(const Tensor& x, const Tensor& mask, double value);

Tensor sum(const Tensor& x);   // -> shape {1}
Tensor mean(const Tensor& x);  // -> shape {1}

// Inverted dropout with a per-call seed; rate==0 is the identity.
Tensor dropout(const Tensor& x, double rate, std::uint64_t seed);

// Copying reshape; numel must be preserved.
Tensor reshape(const Tensor& x, Shape shape);

// ==== optimizer ==============================================================

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // Bias-corrected update in place; parameters must carry gradients.
  void step();
  void zero_grads();
  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// ==== gradient oracle ========================================================

// Central finite differences of a pure scalar function, element by element.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h = 1e-5);

// ==== checkpoint i/o =========================================================
// Byte layout ("RFCP1" format): 5 magic bytes "RFCP1", then one record per
// tensor until EOF: u32 name length (LE), UTF-8 name bytes, u32 rank,
// u32 dims[rank], then prod(dims) IEEE-754 binary32 values (LE).

void save_checkpoint(
    const std::vector<std::pair<std::string, Tensor>>& named_tensors,
    const std::string& path);

std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& path);

// ==== misc ===================================================================

// SplitMix64 step; used to derive independent deterministic seed streams.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt);

}  // namespace refinecap
