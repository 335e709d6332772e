// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dig/common.hpp"

namespace dig {

// ============================================================================
// MAC counting (used by the flops instrumentation; off by default)
// ============================================================================

namespace flops {
inline thread_local std::int64_t counter = 0;
inline thread_local bool enabled = false;

inline void reset() { counter = 0; }
inline void add(std::int64_t macs) {
  if (enabled) counter += macs;
}
struct ScopedCount {
  ScopedCount() {
    enabled = true;
    counter = 0;
  }
  ~ScopedCount() { enabled = false; }
};
}  // namespace flops

// ============================================================================
// Tensor: dense row-major f64 array, immutable by convention after build
// ============================================================================

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(checked_numel(shape_), 0.0)) {}

  Tensor(std::vector<std::int64_t> shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (static_cast<std::int64_t>(values.size()) != checked_numel(shape_))
      throw ShapeError("data length does not match shape");
    data_ = std::make_shared<std::vector<double>>(std::move(values));
  }

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.mut().begin(), t.mut().end(), v);
    return t;
  }

  static Tensor ones(std::vector<std::int64_t> shape) { return full(std::move(shape), 1.0); }

  static Tensor eye(std::int64_t n) {
    Tensor t({n, n});
    for (std::int64_t i = 0; i < n; ++i) t.mut()[i * n + i] = 1.0;
    return t;
  }

  static Tensor randn(Rng& rng, std::vector<std::int64_t> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.mut()) v = stddev * rng.normal();
    return t;
  }

  static Tensor uniform(Rng& rng, std::vector<std::int64_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.mut()) v = lo + (hi - lo) * rng.uniform();
    return t;
  }

  /// 2-D convenience: rows of an initializer list.
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::int64_t r = static_cast<std::int64_t>(rows.size());
    std::int64_t c = static_cast<std::int64_t>(rows.begin()->size());
    Tensor t({r, c});
    std::int64_t i = 0;
    for (const auto& row : rows) {
      if (static_cast<std::int64_t>(row.size()) != c) throw ShapeError("ragged rows");
      for (double v : row) t.mut()[i++] = v;
    }
    return t;
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t extent(std::int64_t axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::int64_t numel() const {
    return std::accumulate(shape_.begin(), shape_.end(), std::int64_t{1}, std::multiplies<>());
  }
  bool defined() const { return data_ != nullptr; }

  const double* data() const { return data_->data(); }
  double* mutable_data() { return data_->data(); }
  std::vector<double>& mut() { return *data_; }
  const std::vector<double>& vec() const { return *data_; }

  double at(std::int64_t flat) const { return (*data_)[static_cast<std::size_t>(flat)]; }
  double operator()(std::int64_t i, std::int64_t j) const { return (*data_)[i * shape_[1] + j]; }
  double operator()(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return (*data_)[(i * shape_[1] + j) * shape_[2] + k];
  }
  void set(std::int64_t flat, double v) { (*data_)[static_cast<std::size_t>(flat)] = v; }
  void set(std::int64_t i, std::int64_t j, double v) { (*data_)[i * shape_[1] + j] = v; }
  void set(std::int64_t i, std::int64_t j, std::int64_t k, double v) {
    (*data_)[(i * shape_[1] + j) * shape_[2] + k] = v;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
  }

  /// Zero-copy reshape (row-major layout is unchanged).
  Tensor reshape(std::vector<std::int64_t> new_shape) const {
    if (checked_numel(new_shape) != numel()) throw ShapeError("reshape numel mismatch " + shape_str());
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

 private:
  static std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
    if (shape.empty()) throw ShapeError("rank-0 tensor not supported");
    std::int64_t n = 1;
    for (auto e : shape) {
      if (e < 1) throw ShapeError("extents must be >= 1");
      n *= e;
    }
    return n;
  }

  std::vector<std::int64_t> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

// ============================================================================
// Elementwise and scalar ops
// ============================================================================

inline Tensor map(const Tensor& a, const std::function<double(double)>& f) {
  Tensor out(a.shape());
  const double* x = a.data();
  double* y = out.mutable_data();
  for (std::int64_t i = 0, n = a.numel(); i < n; ++i) y[i] = f(x[i]);
  return out;
}

inline Tensor zip(const Tensor& a, const Tensor& b, const std::function<double(double, double)>& f,
                  const char* name) {
  if (!a.same_shape(b)) throw ShapeError(std::string(name) + ": " + a.shape_str() + " vs " + b.shape_str());
  Tensor out(a.shape());
  const double* x = a.data();
  const double* y = b.data();
  double* z = out.mutable_data();
  for (std::int64_t i = 0, n = a.numel(); i < n; ++i) z[i] = f(x[i], y[i]);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x + y; }, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x - y; }, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x * y; }, "mul");
}
inline Tensor scale(const Tensor& a, double s) {
  return map(a, [s](double x) { return s * x; });
}
inline Tensor add_scalar(const Tensor& a, double s) {
  return map(a, [s](double x) { return x + s; });
}
inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sigmoid(const Tensor& a) {
  return map(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}
inline Tensor exp_t(const Tensor& a) {
  return map(a, [](double x) { return std::exp(x); });
}
inline Tensor log_t(const Tensor& a) {
  return map(a, [](double x) { return std::log(x); });
}
inline Tensor pow_scalar(const Tensor& a, double p) {
  return map(a, [p](double x) { return std::pow(x, p); });
}
inline Tensor sqrt_t(const Tensor& a) {
  return map(a, [](double x) { return std::sqrt(x); });
}

inline double silu_fn(double x) { return x / (1.0 + std::exp(-x)); }
/// Swish(x) = x * sigmoid(x)
inline Tensor silu(const Tensor& a) { return map(a, silu_fn); }

inline double gelu_fn(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline Tensor gelu(const Tensor& a) { return map(a, gelu_fn); }

inline double sum(const Tensor& a) {
  const double* x = a.data();
  double s = 0.0;
  for (std::int64_t i = 0, n = a.numel(); i < n; ++i) s += x[i];
  return s;
}
inline double mean(const Tensor& a) { return sum(a) / static_cast<double>(a.numel()); }

inline double max_abs(const Tensor& a) {
  const double* x = a.data();
  double m = 0.0;
  for (std::int64_t i = 0, n = a.numel(); i < n; ++i) m = std::max(m, std::abs(x[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch");
  const double* x = a.data();
  const double* y = b.data();
  double m = 0.0;
  for (std::int64_t i = 0, n = a.numel(); i < n; ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

inline bool has_nan(const Tensor& a) {
  const double* x = a.data();
  for (std::int64_t i = 0, n = a.numel(); i < n; ++i)
    if (std::isnan(x[i])) return true;
  return false;
}

// ============================================================================
// Matrix ops (2-D views)
// ============================================================================

using EigenRowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
  std::int64_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    throw ShapeError("matmul inner dimensions disagree: " + a.shape_str() + " x " + b.shape_str());
  Tensor out({m, n});
  Eigen::Map<const EigenRowMat> ma(a.data(), m, k);
  Eigen::Map<const EigenRowMat> mb(b.data(), k, n);
  Eigen::Map<EigenRowMat> mo(out.mutable_data(), m, n);
  mo.noalias() = ma * mb;
  flops::add(m * k * n);
  return out;
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d expects rank-2");
  std::int64_t r = a.extent(0), c = a.extent(1);
  Tensor out({c, r});
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out.set(j, i, a(i, j));
  return out;
}

/// [T x D] -> [sqrt(T) x sqrt(T) x D] token grid; T must be a perfect square.
inline std::int64_t grid_side(std::int64_t tokens) {
  auto n = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  if (n * n != tokens) throw ShapeError("token count " + std::to_string(tokens) + " is not a perfect square");
  return n;
}

inline Tensor reshape2d(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("reshape2d expects [T x D]");
  std::int64_t n = grid_side(a.extent(0));
  return a.reshape({n, n, a.extent(1)});
}

inline Tensor flatten_grid(const Tensor& a) {
  if (a.rank() != 3) throw ShapeError("flatten expects [n x n x D]");
  return a.reshape({a.extent(0) * a.extent(1), a.extent(2)});
}

/// Swap the two spatial axes of a [n x n x D] grid.
inline Tensor transpose_grid(const Tensor& a) {
  if (a.rank() != 3 || a.extent(0) != a.extent(1)) throw ShapeError("transpose_grid expects [n x n x D]");
  std::int64_t n = a.extent(0), d = a.extent(2);
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t c = 0; c < d; ++c) out.set(j, i, c, a(i, j, c));
  return out;
}

/// Reverse along the leading (token) axis.
inline Tensor flip_seq(const Tensor& a) {
  std::int64_t t = a.extent(0);
  std::int64_t row = a.numel() / t;
  Tensor out(a.shape());
  const double* x = a.data();
  double* y = out.mutable_data();
  for (std::int64_t i = 0; i < t; ++i)
    std::copy(x + i * row, x + (i + 1) * row, y + (t - 1 - i) * row);
  return out;
}

/// out[i] = a[perm[i]] (gather rows).
inline Tensor permute_rows(const Tensor& a, const std::vector<std::int64_t>& perm) {
  std::int64_t t = a.extent(0);
  if (static_cast<std::int64_t>(perm.size()) != t) throw ShapeError("permutation length mismatch");
  std::int64_t row = a.numel() / t;
  Tensor out(a.shape());
  const double* x = a.data();
  double* y = out.mutable_data();
  for (std::int64_t i = 0; i < t; ++i) {
    std::int64_t src = perm[i];
    if (src < 0 || src >= t) throw ShapeError("permutation index out of range");
    std::copy(x + src * row, x + (src + 1) * row, y + i * row);
  }
  return out;
}

inline Tensor slice_rows(const Tensor& a, std::int64_t lo, std::int64_t hi) {
  if (a.rank() != 2) throw ShapeError("slice_rows expects rank-2");
  if (lo < 0 || hi > a.extent(0) || lo >= hi) throw ShapeError("slice_rows range");
  Tensor out({hi - lo, a.extent(1)});
  std::copy(a.data() + lo * a.extent(1), a.data() + hi * a.extent(1), out.mutable_data());
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::int64_t lo, std::int64_t hi) {
  if (a.rank() != 2) throw ShapeError("slice_cols expects rank-2");
  if (lo < 0 || hi > a.extent(1) || lo >= hi) throw ShapeError("slice_cols range");
  std::int64_t r = a.extent(0), c = a.extent(1), w = hi - lo;
  Tensor out({r, w});
  for (std::int64_t i = 0; i < r; ++i)
    std::copy(a.data() + i * c + lo, a.data() + i * c + hi, out.mutable_data() + i * w);
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty");
  std::int64_t r = parts[0].extent(0), c = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.extent(0) != r) throw ShapeError("concat_cols row mismatch");
    c += p.extent(1);
  }
  Tensor out({r, c});
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::int64_t w = p.extent(1);
    for (std::int64_t i = 0; i < r; ++i)
      std::copy(p.data() + i * w, p.data() + (i + 1) * w, out.mutable_data() + i * c + off);
    off += w;
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty");
  std::int64_t c = parts[0].extent(1), r = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.extent(1) != c) throw ShapeError("concat_rows col mismatch");
    r += p.extent(0);
  }
  Tensor out({r, c});
  double* y = out.mutable_data();
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), y);
    y += p.numel();
  }
  return out;
}

// ============================================================================
// Row-broadcast ops: X [T x D] combined with a vector [1 x D] or [D]
// ============================================================================

inline const double* row_vec_data(const Tensor& v, std::int64_t d, const char* name) {
  bool ok = (v.rank() == 1 && v.extent(0) == d) || (v.rank() == 2 && v.extent(0) == 1 && v.extent(1) == d);
  if (!ok) throw ShapeError(std::string(name) + ": expected row vector of width " + std::to_string(d));
  return v.data();
}

inline Tensor add_row(const Tensor& x, const Tensor& v) {
  std::int64_t t = x.extent(0), d = x.extent(1);
  const double* b = row_vec_data(v, d, "add_row");
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t j = 0; j < d; ++j) out.set(i, j, x(i, j) + b[j]);
  return out;
}

inline Tensor mul_row(const Tensor& x, const Tensor& v) {
  std::int64_t t = x.extent(0), d = x.extent(1);
  const double* b = row_vec_data(v, d, "mul_row");
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t j = 0; j < d; ++j) out.set(i, j, x(i, j) * b[j]);
  return out;
}

/// Column sums of a [T x D] matrix -> [1 x D].
inline Tensor col_sum(const Tensor& x) {
  std::int64_t t = x.extent(0), d = x.extent(1);
  Tensor out({1, d});
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t j = 0; j < d; ++j) out.mutable_data()[j] += x(i, j);
  return out;
}

// ============================================================================
// LayerNorm / softmax over the last axis of a [T x D] matrix
// ============================================================================

inline constexpr double kLayerNormEps = 1e-6;

/// Non-affine LN rows; pass gamma/beta for the affine variant.
inline Tensor layernorm_rows(const Tensor& x, const Tensor* gamma = nullptr, const Tensor* beta = nullptr,
                             double eps = kLayerNormEps) {
  if (x.rank() != 2) throw ShapeError("layernorm_rows expects rank-2");
  std::int64_t t = x.extent(0), d = x.extent(1);
  const double* g = gamma ? row_vec_data(*gamma, d, "layernorm gamma") : nullptr;
  const double* b = beta ? row_vec_data(*beta, d, "layernorm beta") : nullptr;
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < t; ++i) {
    double m = 0.0;
    for (std::int64_t j = 0; j < d; ++j) m += x(i, j);
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double c = x(i, j) - m;
      v += c * c;
    }
    v /= static_cast<double>(d);
    double r = 1.0 / std::sqrt(v + eps);
    for (std::int64_t j = 0; j < d; ++j) {
      double y = (x(i, j) - m) * r;
      if (g) y = y * g[j] + (b ? b[j] : 0.0);
      out.set(i, j, y);
    }
  }
  return out;
}

inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("softmax_rows expects rank-2");
  std::int64_t t = x.extent(0), d = x.extent(1);
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < t; ++i) {
    double mx = -1e300;
    for (std::int64_t j = 0; j < d; ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::int64_t j = 0; j < d; ++j) z += std::exp(x(i, j) - mx);
    for (std::int64_t j = 0; j < d; ++j) out.set(i, j, std::exp(x(i, j) - mx) / z);
  }
  return out;
}

}  // namespace dig
