#pragma once

// Dense row-major matrices and vectors with deterministic arithmetic.
//
// Every reduction (matmul inner products, norms, dot products) accumulates
// left to right in index order, so results are bit-identical across runs and
// independent of any thread count. No BLAS, no SIMD intrinsics: sizes in this
// library are small (states are d_k x d_v with d <= a few hundred) and
// reproducibility is worth more than peak throughput.

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kla/errors.hpp"

namespace kla {

// Gate for optional (O(n)) validation work: data finiteness at construction,
// structural preconditions of solvers. Shape checks are always on; they are
// O(1) and catching them late is miserable.
enum class Check { off, on };

template <typename T>
class Vec {
 public:
  Vec() = default;
  explicit Vec(std::size_t n) : data_(n, T(0)) {}

  static Vec from_data(std::vector<T> values, Check check = Check::on) {
    Vec v;
    v.data_ = std::move(values);
    if (check == Check::on) v.require_finite("Vec::from_data");
    return v;
  }

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  const std::vector<T>& values() const { return data_; }

  bool all_finite() const {
    for (const T& x : data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  void require_finite(const char* who) const {
    if (!all_finite()) throw numeric_error(std::string(who) + ": non-finite entry");
  }

 private:
  std::vector<T> data_;
};

template <typename T>
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {}

  static Mat from_data(std::size_t rows, std::size_t cols, std::vector<T> values,
                       Check check = Check::on) {
    if (values.size() != rows * cols) {
      std::ostringstream os;
      os << "Mat::from_data: " << rows << "x" << cols << " needs " << rows * cols
         << " values, got " << values.size();
      throw shape_error(os.str());
    }
    Mat m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_ = std::move(values);
    if (check == Check::on) m.require_finite("Mat::from_data");
    return m;
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  T* row(std::size_t i) { return data_.data() + i * cols_; }
  const T* row(std::size_t i) const { return data_.data() + i * cols_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T value) {
    for (T& x : data_) x = value;
  }

  bool all_finite() const {
    for (const T& x : data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  void require_finite(const char* who) const {
    if (!all_finite()) throw numeric_error(std::string(who) + ": non-finite entry");
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << rows_ << "x" << cols_;
    return os.str();
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = Mat<double>;
using Vector = Vec<double>;

namespace detail {
inline void shape_fail(const char* op, const std::string& lhs, const std::string& rhs) {
  throw shape_error(std::string(op) + ": incompatible shapes " + lhs + " and " + rhs);
}
}  // namespace detail

// C = A * B. Inner accumulation runs k = 0..n-1 per output element.
template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.rows()) detail::shape_fail("matmul", a.shape_str(), b.shape_str());
  Mat<T> c(a.rows(), b.cols());
  const std::size_t n = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ai = a.row(i);
    T* ci = c.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      T acc = T(0);
      for (std::size_t k = 0; k < n; ++k) acc += ai[k] * b(k, j);
      ci[j] = acc;
    }
  }
  return c;
}

// C = A * B^T.
template <typename T>
Mat<T> matmul_nt(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.cols()) detail::shape_fail("matmul_nt", a.shape_str(), b.shape_str());
  Mat<T> c(a.rows(), b.rows());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* bj = b.row(j);
      T acc = T(0);
      for (std::size_t k = 0; k < n; ++k) acc += ai[k] * bj[k];
      c(i, j) = acc;
    }
  }
  return c;
}

// C = A^T * B.
template <typename T>
Mat<T> matmul_tn(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows()) detail::shape_fail("matmul_tn", a.shape_str(), b.shape_str());
  Mat<T> c(a.cols(), b.cols());
  for (std::size_t i = 0; i < c.rows(); ++i) {
    for (std::size_t j = 0; j < c.cols(); ++j) {
      T acc = T(0);
      for (std::size_t k = 0; k < a.rows(); ++k) acc += a(k, i) * b(k, j);
      c(i, j) = acc;
    }
  }
  return c;
}

// y = A * x.
template <typename T>
Vec<T> matvec(const Mat<T>& a, const Vec<T>& x) {
  if (a.cols() != x.size())
    detail::shape_fail("matvec", a.shape_str(), std::to_string(x.size()));
  Vec<T> y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ai = a.row(i);
    T acc = T(0);
    for (std::size_t k = 0; k < a.cols(); ++k) acc += ai[k] * x[k];
    y[i] = acc;
  }
  return y;
}

// y = A^T * x. This is the readout direction: states are d_k x d_v and are
// probed with d_k-sized keys/queries.
template <typename T>
Vec<T> matvec_t(const Mat<T>& a, const Vec<T>& x) {
  if (a.rows() != x.size())
    detail::shape_fail("matvec_t", a.shape_str(), std::to_string(x.size()));
  Vec<T> y(a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) {
    T acc = T(0);
    for (std::size_t k = 0; k < a.rows(); ++k) acc += a(k, j) * x[k];
    y[j] = acc;
  }
  return y;
}

// Rank-one product k e^T, the write primitive of every delta-style update.
template <typename T>
Mat<T> outer(const Vec<T>& k, const Vec<T>& e) {
  Mat<T> m(k.size(), e.size());
  for (std::size_t i = 0; i < k.size(); ++i) {
    T* mi = m.row(i);
    for (std::size_t j = 0; j < e.size(); ++j) mi[j] = k[i] * e[j];
  }
  return m;
}

template <typename T>
Mat<T> hadamard(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    detail::shape_fail("hadamard", a.shape_str(), b.shape_str());
  Mat<T> c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * b.data()[i];
  return c;
}

template <typename T>
Mat<T> diag_from(const Vec<T>& v) {
  Mat<T> m(v.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m(i, i) = v[i];
  return m;
}

template <typename T>
Mat<T> add(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    detail::shape_fail("add", a.shape_str(), b.shape_str());
  Mat<T> c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] + b.data()[i];
  return c;
}

template <typename T>
Mat<T> sub(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    detail::shape_fail("sub", a.shape_str(), b.shape_str());
  Mat<T> c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] - b.data()[i];
  return c;
}

template <typename T>
Mat<T> scale(const Mat<T>& a, T s) {
  Mat<T> c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * s;
  return c;
}

// a += s * b, in place (hot-loop variant, no allocation).
template <typename T>
void add_scaled_inplace(Mat<T>& a, T s, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    detail::shape_fail("add_scaled_inplace", a.shape_str(), b.shape_str());
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += s * b.data()[i];
}

template <typename T>
Vec<T> add(const Vec<T>& a, const Vec<T>& b) {
  if (a.size() != b.size())
    detail::shape_fail("add", std::to_string(a.size()), std::to_string(b.size()));
  Vec<T> c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] + b[i];
  return c;
}

template <typename T>
Vec<T> sub(const Vec<T>& a, const Vec<T>& b) {
  if (a.size() != b.size())
    detail::shape_fail("sub", std::to_string(a.size()), std::to_string(b.size()));
  Vec<T> c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] - b[i];
  return c;
}

template <typename T>
Vec<T> scale(const Vec<T>& a, T s) {
  Vec<T> c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] * s;
  return c;
}

template <typename T>
T dot(const Vec<T>& a, const Vec<T>& b) {
  if (a.size() != b.size())
    detail::shape_fail("dot", std::to_string(a.size()), std::to_string(b.size()));
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T l2_norm_sq(const Vec<T>& v) {
  T acc = T(0);
  for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * v[i];
  return acc;
}

template <typename T>
T l2_norm(const Vec<T>& v) {
  return std::sqrt(l2_norm_sq(v));
}

template <typename T>
T frobenius_norm_sq(const Mat<T>& m) {
  T acc = T(0);
  for (std::size_t i = 0; i < m.size(); ++i) acc += m.data()[i] * m.data()[i];
  return acc;
}

template <typename T>
T frobenius_norm(const Mat<T>& m) {
  return std::sqrt(frobenius_norm_sq(m));
}

template <typename T>
T max_abs(const Mat<T>& m) {
  T best = T(0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    T v = std::abs(m.data()[i]);
    if (v > best) best = v;
  }
  return best;
}

template <typename T>
T max_abs(const Vec<T>& v) {
  T best = T(0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    T x = std::abs(v[i]);
    if (x > best) best = x;
  }
  return best;
}

template <typename T>
T max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    detail::shape_fail("max_abs_diff", a.shape_str(), b.shape_str());
  T best = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    T v = std::abs(a.data()[i] - b.data()[i]);
    if (v > best) best = v;
  }
  return best;
}

template <typename T>
T max_abs_diff(const Vec<T>& a, const Vec<T>& b) {
  if (a.size() != b.size())
    detail::shape_fail("max_abs_diff", std::to_string(a.size()), std::to_string(b.size()));
  T best = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    T v = std::abs(a[i] - b[i]);
    if (v > best) best = v;
  }
  return best;
}

// Solves L * U = RHS for U where L is unit lower-triangular, by forward
// substitution in row order. With Check::on the structure is verified
// exactly: diagonal == 1, strict upper triangle == 0. Row i of the solution
// reads U_i = RHS_i - sum_{j<i} L_ij U_j, so the cost is O(C^2 * d_v).
template <typename T>
Mat<T> forward_substitution(const Mat<T>& l, const Mat<T>& rhs, Check check = Check::on) {
  if (l.rows() != l.cols()) detail::shape_fail("forward_substitution", l.shape_str(), "square");
  if (l.rows() != rhs.rows())
    detail::shape_fail("forward_substitution", l.shape_str(), rhs.shape_str());
  if (check == Check::on) {
    for (std::size_t i = 0; i < l.rows(); ++i) {
      if (l(i, i) != T(1)) {
        std::ostringstream os;
        os << "forward_substitution: diagonal entry (" << i << "," << i << ") is "
           << l(i, i) << ", expected exactly 1";
        throw structural_error(os.str());
      }
      for (std::size_t j = i + 1; j < l.cols(); ++j) {
        if (l(i, j) != T(0)) {
          std::ostringstream os;
          os << "forward_substitution: upper entry (" << i << "," << j << ") is "
             << l(i, j) << ", expected exactly 0";
          throw structural_error(os.str());
        }
      }
    }
  }
  Mat<T> u(rhs.rows(), rhs.cols());
  const std::size_t d = rhs.cols();
  for (std::size_t i = 0; i < rhs.rows(); ++i) {
    T* ui = u.row(i);
    const T* ri = rhs.row(i);
    for (std::size_t c = 0; c < d; ++c) ui[c] = ri[c];
    const T* li = l.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      const T lij = li[j];
      if (lij == T(0)) continue;
      const T* uj = u.row(j);
      for (std::size_t c = 0; c < d; ++c) ui[c] -= lij * uj[c];
    }
  }
  return u;
}

}  // namespace kla
