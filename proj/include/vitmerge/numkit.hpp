#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vitmerge/errors.hpp"

namespace vitmerge {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Storage is float for model weights and double
/// wherever grams or solves are involved.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_product(shape_), T{}) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

namespace kernels {

// Row-major GEMM kernels on raw spans. All accumulate in double regardless of
// the storage type so results do not depend on the element type's rounding
// during summation.

/// out[r x c] (+)= a[r x k] * b[k x c]
template <class T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t r,
             std::size_t k, std::size_t c, bool accumulate = false) {
  std::vector<double> acc(c);
  for (std::size_t i = 0; i < r; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = static_cast<double>(arow[p]);
      if (av == 0.0) continue;
      const T* brow = b.data() + p * c;
      for (std::size_t j = 0; j < c; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    T* orow = out.data() + i * c;
    if (accumulate) {
      for (std::size_t j = 0; j < c; ++j) orow[j] = static_cast<T>(orow[j] + acc[j]);
    } else {
      for (std::size_t j = 0; j < c; ++j) orow[j] = static_cast<T>(acc[j]);
    }
  }
}

/// out[r x c] (+)= a[k x r]^T * b[k x c]
template <class T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t r,
             std::size_t k, std::size_t c, bool accumulate = false) {
  std::vector<double> acc(r * c, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * r;
    const T* brow = b.data() + p * c;
    for (std::size_t i = 0; i < r; ++i) {
      const double av = static_cast<double>(arow[i]);
      if (av == 0.0) continue;
      double* accrow = acc.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) accrow[j] += av * static_cast<double>(brow[j]);
    }
  }
  for (std::size_t i = 0; i < r * c; ++i) {
    out[i] = accumulate ? static_cast<T>(out[i] + acc[i]) : static_cast<T>(acc[i]);
  }
}

/// out[r x c] (+)= a[r x k] * b[c x k]^T
template <class T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t r,
             std::size_t k, std::size_t c, bool accumulate = false) {
  // Transposing b keeps the inner loop a contiguous axpy instead of a dot
  // product, which vectorizes without reassociating the sum.
  std::vector<T> bt(k * c);
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * c + j] = b[j * k + p];
  gemm_nn<T>(a, bt, out, r, k, c, accumulate);
}

}  // namespace kernels

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  kernels::gemm_nn<T>(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix");
  Tensor<T> out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
  return out;
}

struct SolveResult {
  Tensor<double> solution;
  bool regularized = false;
};

namespace detail {

// In-place LU with partial pivoting; returns false if a pivot falls below
// `pivot_floor`. On success `a` holds L\U and `perm` the row permutation.
inline bool lu_factor(std::vector<double>& a, std::size_t d, std::vector<std::size_t>& perm,
                      double pivot_floor) {
  perm.resize(d);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t col = 0; col < d; ++col) {
    std::size_t piv = col;
    double best = std::abs(a[col * d + col]);
    for (std::size_t r = col + 1; r < d; ++r) {
      const double v = std::abs(a[r * d + col]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (!(best > pivot_floor)) return false;
    if (piv != col) {
      for (std::size_t j = 0; j < d; ++j) std::swap(a[piv * d + j], a[col * d + j]);
      std::swap(perm[piv], perm[col]);
    }
    const double inv = 1.0 / a[col * d + col];
    for (std::size_t r = col + 1; r < d; ++r) {
      const double f = a[r * d + col] * inv;
      a[r * d + col] = f;
      if (f == 0.0) continue;
      for (std::size_t j = col + 1; j < d; ++j) a[r * d + j] -= f * a[col * d + j];
    }
  }
  return true;
}

inline std::vector<double> lu_solve(const std::vector<double>& lu,
                                    const std::vector<std::size_t>& perm,
                                    const std::vector<double>& b, std::size_t d, std::size_t c) {
  std::vector<double> x(d * c);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < c; ++j) x[i * c + j] = b[perm[i] * c + j];
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < i; ++k) {
      const double l = lu[i * d + k];
      if (l == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) x[i * c + j] -= l * x[k * c + j];
    }
  for (std::size_t ii = d; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < d; ++k) {
      const double u = lu[ii * d + k];
      if (u == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) x[ii * c + j] -= u * x[k * c + j];
    }
    const double inv = 1.0 / lu[ii * d + ii];
    for (std::size_t j = 0; j < c; ++j) x[ii * c + j] *= inv;
  }
  return x;
}

}  // namespace detail

/// Solves a * x = b for square `a`. A pivot below 1e-10 * max|a| marks the
/// system singular; one retry adds eps * I with eps = 1e-6 * trace(a) / d.
template <class T>
SolveResult solve(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw DimensionError("solve: matrix must be square, got " + shape_string(a.shape()));
  }
  const std::size_t d = a.dim(0);
  const bool b_is_vector = b.rank() == 1;
  if ((b.rank() != 2 && !b_is_vector) || b.dim(0) != d) {
    throw DimensionError("solve: right-hand side " + shape_string(b.shape()) +
                         " incompatible with " + shape_string(a.shape()));
  }
  const std::size_t c = b_is_vector ? 1 : b.dim(1);

  std::vector<double> lu(a.size());
  std::transform(a.data().begin(), a.data().end(), lu.begin(),
                 [](T v) { return static_cast<double>(v); });
  std::vector<double> rhs(b.size());
  std::transform(b.data().begin(), b.data().end(), rhs.begin(),
                 [](T v) { return static_cast<double>(v); });

  double max_abs = 0.0;
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    trace += lu[i * d + i];
    for (std::size_t j = 0; j < d; ++j) max_abs = std::max(max_abs, std::abs(lu[i * d + j]));
  }
  const double floor = 1e-10 * max_abs;

  std::vector<std::size_t> perm;
  std::vector<double> work = lu;
  bool regularized = false;
  if (!detail::lu_factor(work, d, perm, floor)) {
    const double eps = 1e-6 * trace / static_cast<double>(d);
    if (!(eps > 0.0)) throw SingularError("solve: singular system and no usable ridge term");
    work = lu;
    for (std::size_t i = 0; i < d; ++i) work[i * d + i] += eps;
    double ridged_max = 0.0;
    for (double v : work) ridged_max = std::max(ridged_max, std::abs(v));
    if (!detail::lu_factor(work, d, perm, 1e-10 * ridged_max)) {
      throw SingularError("solve: system still singular after ridge regularization");
    }
    regularized = true;
  }
  Shape out_shape = b_is_vector ? Shape{d} : Shape{d, c};
  return {Tensor<double>(std::move(out_shape), detail::lu_solve(work, perm, rhs, d, c)),
          regularized};
}

/// Numerically stable softmax over a flat vector.
template <class T>
Tensor<T> softmax(const Tensor<T>& v) {
  if (v.size() == 0) throw DimensionError("softmax of an empty vector");
  const T mx = *std::max_element(v.data().begin(), v.data().end());
  std::vector<double> e(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    e[i] = std::exp(static_cast<double>(v[i]) - static_cast<double>(mx));
    sum += e[i];
  }
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(e[i] / sum);
  return Tensor<T>({v.size()}, std::move(out));
}

/// In-place row softmax used inside the model.
template <class T>
void softmax_inplace(std::span<T> row) {
  T mx = row[0];
  for (T v : row) mx = std::max(mx, v);
  double sum = 0.0;
  for (T& v : row) {
    const double e = std::exp(static_cast<double>(v - mx));
    v = static_cast<T>(e);
    sum += e;
  }
  const double inv = 1.0 / sum;
  for (T& v : row) v = static_cast<T>(v * inv);
}

struct CosineResult {
  double value = 0.0;
  bool degenerate = false;
};

template <class T>
CosineResult cosine_similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " differ");
  }
  if (a.empty()) throw DimensionError("cosine_similarity of empty vectors");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (std::sqrt(na) < 1e-12 || std::sqrt(nb) < 1e-12) return {0.0, true};
  // sqrt(x * x) == x exactly, so self-similarity is exactly 1.
  return {std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0), false};
}

template <class T>
CosineResult cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  return cosine_similarity<T>(a.data(), b.data());
}

template <class T>
double frobenius_norm(std::span<const T> v) {
  double s = 0.0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

}  // namespace vitmerge
