#include "refinecap/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace refinecap {

namespace {

thread_local Tape* g_active_tape = nullptr;

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

void ensure_grad_buffer(Impl* t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks the output differentiable and appends the rule.
void record(Tensor& out, std::function<void()> rule) {
  out.set_requires_grad(true);
  g_active_tape->record(std::move(rule));
}

[[noreturn]] void dim_error(const std::string& op, const Shape& a,
                            const Shape& b) {
  throw DimensionError(op + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

// b broadcasts over a's leading axes iff b.shape is a suffix of a.shape.
bool suffix_broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

}  // namespace

// ==== Tensor =================================================================

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) {
      throw DimensionError("tensor: non-positive dimension in " +
                           shape_str(shape));
    }
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> data,
                    bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("tensor: data length " +
                         std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  Tensor t = zeros(std::move(shape), requires_grad);
  t.impl()->data = std::move(data);
  return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

std::int64_t Tensor::numel() const { return shape_numel(impl_->shape); }

void Tensor::ensure_grad() const { ensure_grad_buffer(impl_.get()); }

void Tensor::zero_grad() const {
  impl_->grad.assign(impl_->data.size(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor with shape " + shape_str(shape()) +
                        " is not a scalar");
  }
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  Tensor t = Tensor::zeros(shape(), requires_grad());
  t.impl()->data = impl_->data;
  return t;
}

// ==== Tape ===================================================================

Tape::Tape() : parent_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = parent_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> rule) {
  rules_.push_back(std::move(rule));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  if (consumed_) {
    throw ContractError("backward: tape already consumed by a backward pass");
  }
  consumed_ = true;
  loss.ensure_grad();
  loss.grad()[0] += 1.0;
  for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
}

// ==== ops ====================================================================

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) dim_error("matmul", a.shape(), b.shape());
  const int ar = a.dim(0), ac = a.dim(1);
  const int br = b.dim(0), bc = b.dim(1);
  const int m = trans_a ? ac : ar;
  const int ka = trans_a ? ar : ac;
  const int kb = trans_b ? bc : br;
  const int n = trans_b ? br : bc;
  if (ka != kb) dim_error("matmul", a.shape(), b.shape());
  const int kk = ka;

  Tensor out = Tensor::zeros({m, n});
  {
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.data().data();
    auto at = [&](int i, int k) { return trans_a ? ad[k * ac + i] : ad[i * ac + k]; };
    auto bt = [&](int k, int j) { return trans_b ? bd[j * bc + k] : bd[k * bc + j]; };
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int k = 0; k < kk; ++k) acc += at(i, k) * bt(k, j);
        od[i * n + j] = acc;
      }
    }
  }

  if (should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    record(out, [ai, bi, oi, trans_a, trans_b, m, n, kk, ac, bc]() {
      ensure_grad_buffer(oi.get());
      const double* go = oi->grad.data();
      const double* ad = ai->data.data();
      const double* bd = bi->data.data();
      auto at = [&](int i, int k) { return trans_a ? ad[k * ac + i] : ad[i * ac + k]; };
      auto bt = [&](int k, int j) { return trans_b ? bd[j * bc + k] : bd[k * bc + j]; };
      if (ai->requires_grad) {
        ensure_grad_buffer(ai.get());
        double* ga = ai->grad.data();
        // dA'[i,k] = sum_j dC[i,j] B'[k,j]
        for (int i = 0; i < m; ++i) {
          for (int k = 0; k < kk; ++k) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += go[i * n + j] * bt(k, j);
            ga[trans_a ? k * ac + i : i * ac + k] += acc;
          }
        }
      }
      if (bi->requires_grad) {
        ensure_grad_buffer(bi.get());
        double* gb = bi->grad.data();
        // dB'[k,j] = sum_i A'[i,k] dC[i,j]
        for (int k = 0; k < kk; ++k) {
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += at(i, k) * go[i * n + j];
            gb[trans_b ? j * bc + k : k * bc + j] += acc;
          }
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!suffix_broadcastable(a.shape(), b.shape())) {
    dim_error("add", a.shape(), b.shape());
  }
  const std::int64_t na = a.numel(), nb = b.numel();
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.data().data();
    for (std::int64_t i = 0; i < na; ++i) od[i] = ad[i] + bd[i % nb];
  }
  if (should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    record(out, [ai, bi, oi, na, nb]() {
      ensure_grad_buffer(oi.get());
      const double* go = oi->grad.data();
      if (ai->requires_grad) {
        ensure_grad_buffer(ai.get());
        double* ga = ai->grad.data();
        for (std::int64_t i = 0; i < na; ++i) ga[i] += go[i];
      }
      if (bi->requires_grad) {
        ensure_grad_buffer(bi.get());
        double* gb = bi->grad.data();
        for (std::int64_t i = 0; i < na; ++i) gb[i % nb] += go[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!same && !a_scalar && !b_scalar) {
    dim_error("elementwise-multiply", a.shape(), b.shape());
  }
  const Shape& out_shape = a_scalar && !same ? b.shape() : a.shape();
  const std::int64_t n = shape_numel(out_shape);
  const std::int64_t na = a.numel(), nb = b.numel();
  Tensor out = Tensor::zeros(out_shape);
  {
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = ad[i % na] * bd[i % nb];
  }
  if (should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    record(out, [ai, bi, oi, n, na, nb]() {
      ensure_grad_buffer(oi.get());
      const double* go = oi->grad.data();
      const double* ad = ai->data.data();
      const double* bd = bi->data.data();
      if (ai->requires_grad) {
        ensure_grad_buffer(ai.get());
        double* ga = ai->grad.data();
        for (std::int64_t i = 0; i < n; ++i) ga[i % na] += go[i] * bd[i % nb];
      }
      if (bi->requires_grad) {
        ensure_grad_buffer(bi.get());
        double* gb = bi->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gb[i % nb] += go[i] * ad[i % na];
      }
    });
  }
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) {
    throw ContractError("concat-last-axis: no inputs");
  }
  const Shape& first = parts[0].shape();
  int total_last = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != parts[0].rank()) dim_error("concat-last-axis", first, p.shape());
    for (int i = 0; i + 1 < p.rank(); ++i) {
      if (p.dim(i) != parts[0].dim(i)) dim_error("concat-last-axis", first, p.shape());
    }
    total_last += p.dim(p.rank() - 1);
  }
  Shape out_shape = first;
  out_shape.back() = total_last;
  const std::int64_t rows = shape_numel(out_shape) / total_last;

  Tensor out = Tensor::zeros(out_shape);
  {
    double* od = out.data().data();
    int offset = 0;
    for (const Tensor& p : parts) {
      const int w = p.dim(p.rank() - 1);
      const double* pd = p.data().data();
      for (std::int64_t r = 0; r < rows; ++r) {
        std::memcpy(od + r * total_last + offset, pd + r * w,
                    static_cast<std::size_t>(w) * sizeof(double));
      }
      offset += w;
    }
  }

  bool any_grad = false;
  for (const Tensor& p : parts) any_grad |= p.requires_grad();
  if (g_active_tape != nullptr && any_grad) {
    std::vector<ImplPtr> impls;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
      impls.push_back(p.impl_ptr());
      widths.push_back(p.dim(p.rank() - 1));
    }
    auto oi = out.impl_ptr();
    record(out, [impls, widths, oi, rows, total_last]() {
      ensure_grad_buffer(oi.get());
      const double* go = oi->grad.data();
      int offset = 0;
      for (std::size_t p = 0; p < impls.size(); ++p) {
        const int w = widths[p];
        if (impls[p]->requires_grad) {
          ensure_grad_buffer(impls[p].get());
          double* gp = impls[p]->grad.data();
          for (std::int64_t r = 0; r < rows; ++r) {
            for (int j = 0; j < w; ++j) {
              gp[r * w + j] += go[r * total_last + offset + j];
            }
          }
        }
        offset += w;
      }
    });
  }
  return out;
}

namespace {

// Elementwise op with derivative expressed in terms of the output value.
template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Bwd dydx_from_y) {
  Tensor out = Tensor::zeros(x.shape());
  const std::int64_t n = x.numel();
  const double* xd = x.data().data();
  double* od = out.data().data();
  for (std::int64_t i = 0; i < n; ++i) od[i] = fwd(xd[i]);
  if (should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    record(out, [xi, oi, n, dydx_from_y]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(xi.get());
      const double* go = oi->grad.data();
      const double* od = oi->data.data();
      const double* xd = xi->data.data();
      double* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i] * dydx_from_y(od[i], xd[i]);
    });
  }
  return out;
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double y, double) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary_elementwise(x, [](double v) { return std::tanh(v); },
                           [](double y, double) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary_elementwise(x, [](double v) { return v > 0.0 ? v : 0.0; },
                           [](double, double xv) { return xv > 0.0 ? 1.0 : 0.0; });
}

namespace {

struct RowIter {
  std::int64_t rows;
  int width;
};

RowIter last_axis_rows(const Tensor& x, const char* op) {
  if (x.rank() < 1) {
    throw DimensionError(std::string(op) + ": rank-0 input");
  }
  const int w = x.dim(x.rank() - 1);
  return RowIter{x.numel() / w, w};
}

}  // namespace

Tensor softmax_last(const Tensor& x) {
  const RowIter it = last_axis_rows(x, "softmax-last-axis");
  Tensor out = Tensor::zeros(x.shape());
  const double* xd = x.data().data();
  double* od = out.data().data();
  for (std::int64_t r = 0; r < it.rows; ++r) {
    const double* row = xd + r * it.width;
    double* orow = od + r * it.width;
    double mx = row[0];
    for (int j = 1; j < it.width; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < it.width; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    for (int j = 0; j < it.width; ++j) orow[j] /= s;
  }
  if (should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    record(out, [xi, oi, it]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(xi.get());
      const double* go = oi->grad.data();
      const double* y = oi->data.data();
      double* gx = xi->grad.data();
      for (std::int64_t r = 0; r < it.rows; ++r) {
        const std::int64_t base = r * it.width;
        double dot = 0.0;
        for (int j = 0; j < it.width; ++j) dot += go[base + j] * y[base + j];
        for (int j = 0; j < it.width; ++j) {
          gx[base + j] += y[base + j] * (go[base + j] - dot);
        }
      }
    });
  }
  return out;
}

Tensor log_softmax_last(const Tensor& x) {
  const RowIter it = last_axis_rows(x, "log-softmax-last-axis");
  Tensor out = Tensor::zeros(x.shape());
  const double* xd = x.data().data();
  double* od = out.data().data();
  for (std::int64_t r = 0; r < it.rows; ++r) {
    const double* row = xd + r * it.width;
    double* orow = od + r * it.width;
    double mx = row[0];
    for (int j = 1; j < it.width; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < it.width; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < it.width; ++j) orow[j] = row[j] - lse;
  }
  if (should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    record(out, [xi, oi, it]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(xi.get());
      const double* go = oi->grad.data();
      const double* y = oi->data.data();
      double* gx = xi->grad.data();
      for (std::int64_t r = 0; r < it.rows; ++r) {
        const std::int64_t base = r * it.width;
        double gsum = 0.0;
        for (int j = 0; j < it.width; ++j) gsum += go[base + j];
        for (int j = 0; j < it.width; ++j) {
          gx[base + j] += go[base + j] - std::exp(y[base + j]) * gsum;
        }
      }
    });
  }
  return out;
}

Tensor layer_norm_last(const Tensor& x, double eps) {
  const RowIter it = last_axis_rows(x, "layer-norm-last-axis");
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(it.rows));
  const double* xd = x.data().data();
  double* od = out.data().data();
  for (std::int64_t r = 0; r < it.rows; ++r) {
    const double* row = xd + r * it.width;
    double mu = 0.0;
    for (int j = 0; j < it.width; ++j) mu += row[j];
    mu /= it.width;
    double var = 0.0;
    for (int j = 0; j < it.width; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= it.width;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = inv;
    for (int j = 0; j < it.width; ++j) od[r * it.width + j] = (row[j] - mu) * inv;
  }
  if (should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    record(out, [xi, oi, it, inv_std = std::move(inv_std)]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(xi.get());
      const double* go = oi->grad.data();
      const double* y = oi->data.data();
      double* gx = xi->grad.data();
      for (std::int64_t r = 0; r < it.rows; ++r) {
        const std::int64_t base = r * it.width;
        double gmean = 0.0, gydot = 0.0;
        for (int j = 0; j < it.width; ++j) {
          gmean += go[base + j];
          gydot += go[base + j] * y[base + j];
        }
        gmean /= it.width;
        gydot /= it.width;
        const double inv = inv_std[static_cast<std::size_t>(r)];
        for (int j = 0; j < it.width; ++j) {
          gx[base + j] += inv * (go[base + j] - gmean - y[base + j] * gydot);
        }
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding-gather: table must be rank 2, got " +
                         shape_str(table.shape()));
  }
  const int rows = table.dim(0), width = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= rows) {
      throw IndexError("embedding-gather: index " + std::to_string(id) +
                       " out of range [0," + std::to_string(rows) + ")");
    }
  }
  if (ids.empty()) {
    throw ContractError("embedding-gather: empty index list");
  }
  const int n = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({n, width});
  {
    const double* td = table.data().data();
    double* od = out.data().data();
    for (int i = 0; i < n; ++i) {
      std::memcpy(od + static_cast<std::int64_t>(i) * width,
                  td + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)]) * width,
                  static_cast<std::size_t>(width) * sizeof(double));
    }
  }
  if (should_record({&table})) {
    auto ti = table.impl_ptr(), oi = out.impl_ptr();
    record(out, [ti, oi, ids, n, width]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(ti.get());
      const double* go = oi->grad.data();
      double* gt = ti->grad.data();
      for (int i = 0; i < n; ++i) {
        double* dst = gt + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)]) * width;
        const double* src = go + static_cast<std::int64_t>(i) * width;
        for (int j = 0; j < width; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor scatter_add(const Tensor& src, const std::vector<int>& index,
                   int out_size) {
  if (src.rank() != 1) {
    throw DimensionError("index-scatter-add: source must be rank 1, got " +
                         shape_str(src.shape()));
  }
  if (static_cast<std::size_t>(src.dim(0)) != index.size()) {
    throw DimensionError("index-scatter-add: source shape " +
                         shape_str(src.shape()) + " vs " +
                         std::to_string(index.size()) + " indices");
  }
  for (int id : index) {
    if (id < 0 || id >= out_size) {
      throw IndexError("index-scatter-add: index " + std::to_string(id) +
                       " out of range [0," + std::to_string(out_size) + ")");
    }
  }
  const int k = src.dim(0);
  Tensor out = Tensor::zeros({out_size});
  {
    const double* sd = src.data().data();
    double* od = out.data().data();
    for (int i = 0; i < k; ++i) od[index[static_cast<std::size_t>(i)]] += sd[i];
  }
  if (should_record({&src})) {
    auto si = src.impl_ptr(), oi = out.impl_ptr();
    record(out, [si, oi, index, k]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(si.get());
      const double* go = oi->grad.data();
      double* gs = si->grad.data();
      for (int i = 0; i < k; ++i) gs[i] += go[index[static_cast<std::size_t>(i)]];
    });
  }
  return out;
}

Tensor mask_fill(const Tensor& x, const Tensor& mask, double value) {
  if (!suffix_broadcastable(x.shape(), mask.shape())) {
    dim_error("mask-fill", x.shape(), mask.shape());
  }
  const std::int64_t n = x.numel(), nm = mask.numel();
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* xd = x.data().data();
    const double* md = mask.data().data();
    double* od = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
      od[i] = md[i % nm] != 0.0 ? value : xd[i];
    }
  }
  if (should_record({&x})) {
    auto xi = x.impl_ptr(), mi = mask.impl_ptr(), oi = out.impl_ptr();
    record(out, [xi, mi, oi, n, nm]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(xi.get());
      const double* go = oi->grad.data();
      const double* md = mi->data.data();
      double* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i) {
        if (md[i % nm] == 0.0) gx[i] += go[i];
      }
    });
  }
  return out;
}

namespace {

Tensor reduce_all(const Tensor& x, bool take_mean, const char* /*op*/) {
  const std::int64_t n = x.numel();
  double acc = 0.0;
  const double* xd = x.data().data();
  for (std::int64_t i = 0; i < n; ++i) acc += xd[i];
  if (take_mean) acc /= static_cast<double>(n);
  Tensor out = Tensor::scalar(acc);
  if (should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    const double w = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
    record(out, [xi, oi, n, w]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(xi.get());
      const double g = oi->grad[0] * w;
      double* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, false, "sum"); }

Tensor mean(const Tensor& x) { return reduce_all(x, true, "mean"); }

Tensor dropout(const Tensor& x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractError("dropout: rate " + std::to_string(rate) +
                        " outside [0,1)");
  }
  if (rate == 0.0) return x;
  const std::int64_t n = x.numel();
  // Inverted dropout; kept units scaled by 1/(1-rate). Hand-rolled uniform
  // draw keeps the mask identical across compilers.
  std::vector<double> scale(static_cast<std::size_t>(n));
  std::uint64_t state = seed;
  const double keep = 1.0 - rate;
  for (std::int64_t i = 0; i < n; ++i) {
    state = mix_seed(state, 0x9e3779b97f4a7c15ULL);
    const double u = static_cast<double>(state >> 11) * 0x1.0p-53;
    scale[static_cast<std::size_t>(i)] = u < rate ? 0.0 : 1.0 / keep;
  }
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* xd = x.data().data();
    double* od = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = xd[i] * scale[static_cast<std::size_t>(i)];
  }
  if (should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    record(out, [xi, oi, n, scale = std::move(scale)]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(xi.get());
      const double* go = oi->grad.data();
      double* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i] * scale[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    dim_error("reshape", x.shape(), shape);
  }
  Tensor out = Tensor::zeros(std::move(shape));
  out.data() = x.data();
  if (should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    const std::int64_t n = x.numel();
    record(out, [xi, oi, n]() {
      ensure_grad_buffer(oi.get());
      ensure_grad_buffer(xi.get());
      const double* go = oi->grad.data();
      double* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i];
    });
  }
  return out;
}

// ==== Adam ===================================================================

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.emplace_back(p.data().size(), 0.0);
    v_.emplace_back(p.data().size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& param = params_[p];
    if (!param.has_grad()) {
      throw ContractError("adam: parameter " + std::to_string(p) +
                          " has no gradient");
    }
    double* w = param.data().data();
    const double* g = param.grad().data();
    double* m = m_[p].data();
    double* v = v_[p].data();
    const std::size_t n = param.data().size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grads() {
  for (Tensor& p : params_) p.zero_grad();
}

// ==== finite differences =====================================================

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h) {
  Tensor probe = x.clone();
  Tensor out = Tensor::zeros(x.shape());
  double* od = out.data().data();
  double* pd = probe.data().data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double orig = pd[i];
    pd[i] = orig + h;
    const double fp = f(probe);
    pd[i] = orig - h;
    const double fm = f(probe);
    pd[i] = orig;
    od[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

// ==== checkpoint i/o =========================================================

namespace {

void write_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

bool read_u32le(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) |
      (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

constexpr char kMagic[5] = {'R', 'F', 'C', 'P', '1'};

}  // namespace

void save_checkpoint(
    const std::vector<std::pair<std::string, Tensor>>& named_tensors,
    const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
  os.write(kMagic, 5);
  for (const auto& [name, tensor] : named_tensors) {
    write_u32le(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32le(os, static_cast<std::uint32_t>(tensor.rank()));
    for (int i = 0; i < tensor.rank(); ++i) {
      write_u32le(os, static_cast<std::uint32_t>(tensor.dim(i)));
    }
    for (double d : tensor.data()) {
      write_u32le(os, std::bit_cast<std::uint32_t>(static_cast<float>(d)));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[5];
  if (!is.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  std::vector<std::pair<std::string, Tensor>> out;
  std::uint32_t name_len;
  while (read_u32le(is, name_len)) {
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw std::runtime_error("checkpoint: truncated name in " + path);
    }
    std::uint32_t rank;
    if (!read_u32le(is, rank)) {
      throw std::runtime_error("checkpoint: truncated rank in " + path);
    }
    Shape shape;
    std::int64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t d;
      if (!read_u32le(is, d)) {
        throw std::runtime_error("checkpoint: truncated dims in " + path);
      }
      shape.push_back(static_cast<int>(d));
      count *= d;
    }
    std::vector<double> data(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
      std::uint32_t bits;
      if (!read_u32le(is, bits)) {
        throw std::runtime_error("checkpoint: truncated data in " + path);
      }
      data[static_cast<std::size_t>(i)] =
          static_cast<double>(std::bit_cast<float>(bits));
    }
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return out;
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL + salt;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace refinecap
