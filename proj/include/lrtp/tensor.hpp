// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lrtp/error.hpp"

namespace lrtp {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor of doubles.
///
/// Arithmetic is always 64-bit; `element_bytes` is only the width charged when
/// the tensor's size is converted to bytes (communication/memory accounting).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, int element_bytes = 2)
      : shape_(std::move(shape)), element_bytes_(element_bytes) {
    check_shape();
    data_.assign(shape_numel(shape_), fill);
    check_element_bytes();
  }

  Tensor(Shape shape, std::vector<double> data, int element_bytes = 2)
      : shape_(std::move(shape)), data_(std::move(data)), element_bytes_(element_bytes) {
    check_shape();
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
    check_element_bytes();
  }

  /// Row-major 2-D tensor from nested rows.
  static Tensor matrix(const std::vector<std::vector<double>>& rows, int element_bytes = 2) {
    if (rows.empty() || rows.front().empty()) throw DimensionError("empty matrix literal");
    const std::size_t cols = rows.front().size();
    std::vector<double> flat;
    flat.reserve(rows.size() * cols);
    for (const auto& row : rows) {
      if (row.size() != cols) throw DimensionError("ragged matrix literal");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    return Tensor({rows.size(), cols}, std::move(flat), element_bytes);
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  int element_bytes() const { return element_bytes_; }
  void set_element_bytes(int bytes) {
    element_bytes_ = bytes;
    check_element_bytes();
  }
  std::uint64_t bytes() const { return static_cast<std::uint64_t>(numel()) * element_bytes_; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  /// Width of the innermost axis.
  std::size_t cols() const { return shape_.back(); }
  /// Number of rows when all leading axes are flattened.
  std::size_t rows() const { return shape_.empty() ? 0 : numel() / shape_.back(); }

  /// Same data under a different shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_, element_bytes_);
  }

  /// View of all leading axes as rows: [..., w] -> [rows, w].
  Tensor as_matrix() const { return reshaped({rows(), cols()}); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }
  void check_element_bytes() const {
    if (element_bytes_ != 1 && element_bytes_ != 2 && element_bytes_ != 4 && element_bytes_ != 8) {
      throw DimensionError("element_bytes must be one of 1,2,4,8");
    }
  }

  Shape shape_;
  std::vector<double> data_;
  int element_bytes_ = 2;
};

struct MatmulResult {
  Tensor out;
  std::uint64_t flops = 0;
};

/// Dense product of [M,K] x [K,N]. The k loop is innermost and ascending, so any
/// two products over identical rows and columns are bitwise equal.
inline MatmulResult matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects 2-D operands");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n}, 0.0, a.element_bytes());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  }
  return {std::move(out), 2ULL * m * n * k};
}

inline Tensor transpose(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("transpose expects a 2-D tensor");
  Tensor out({t.extent(1), t.extent(0)}, 0.0, t.element_bytes());
  for (std::size_t i = 0; i < t.extent(0); ++i)
    for (std::size_t j = 0; j < t.extent(1); ++j) out(j, i) = t(i, j);
  return out;
}

/// x [rows, in] times a weight stored as [out, in]; returns [rows, out].
inline MatmulResult linear(const Tensor& x, const Tensor& weight) {
  if (weight.rank() != 2) throw DimensionError("linear weight must be 2-D");
  if (x.cols() != weight.extent(1)) {
    throw DimensionError("linear input width " + std::to_string(x.cols()) +
                         " does not match weight " + shape_str(weight.shape()));
  }
  return matmul(x.as_matrix(), transpose(weight));
}

struct BatchedResult {
  std::vector<Tensor> outs;
  std::uint64_t flops = 0;
  int launches = 0;
};

/// One launch computing every (a, b) product.
inline BatchedResult batched_matmul(std::span<const std::pair<Tensor, Tensor>> pairs) {
  BatchedResult result;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& [a, b] = pairs[i];
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
      throw DimensionError("batched_matmul pair " + std::to_string(i) + " has mismatched extents " +
                           shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
  }
  for (const auto& [a, b] : pairs) {
    auto r = matmul(a, b);
    result.flops += r.flops;
    result.outs.push_back(std::move(r.out));
  }
  result.launches = pairs.empty() ? 0 : 1;
  return result;
}

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

inline Tensor swiglu(const Tensor& gate, const Tensor& up) {
  if (gate.shape() != up.shape()) {
    throw DimensionError("swiglu operands differ: " + shape_str(gate.shape()) + " vs " +
                         shape_str(up.shape()));
  }
  Tensor out(gate.shape(), 0.0, gate.element_bytes());
  for (std::size_t i = 0; i < gate.numel(); ++i) out[i] = silu(gate[i]) * up[i];
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add operands differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] += b[i];
  return out;
}

/// Multiplies row i (all leading axes flattened) by factors[i].
inline Tensor scale_rows(const Tensor& t, std::span<const double> factors) {
  if (factors.size() != t.rows()) throw DimensionError("scale_rows factor count mismatch");
  Tensor out = t;
  const std::size_t w = t.cols();
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] *= factors[i];
  return out;
}

inline std::vector<Tensor> split_axis(const Tensor& t, std::size_t axis, std::size_t parts) {
  if (axis >= t.rank()) throw DimensionError("split axis out of range");
  if (parts == 0) throw DivisibilityError("cannot split into zero parts");
  const std::size_t extent = t.extent(axis);
  if (extent % parts != 0) {
    throw DivisibilityError("extent " + std::to_string(extent) + " on axis " +
                            std::to_string(axis) + " is not divisible by " +
                            std::to_string(parts));
  }
  if (parts == 1) return {t};
  const std::size_t piece = extent / parts;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= t.extent(a);
  for (std::size_t a = axis + 1; a < t.rank(); ++a) inner *= t.extent(a);

  std::vector<Tensor> out;
  out.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    Shape shape = t.shape();
    shape[axis] = piece;
    std::vector<double> data;
    data.reserve(outer * piece * inner);
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = (o * extent + p * piece) * inner;
      data.insert(data.end(), t.data().begin() + static_cast<std::ptrdiff_t>(base),
                  t.data().begin() + static_cast<std::ptrdiff_t>(base + piece * inner));
    }
    out.emplace_back(std::move(shape), std::move(data), t.element_bytes());
  }
  return out;
}

inline Tensor concat_axis(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of an empty list");
  const Tensor& first = parts.front();
  if (axis >= first.rank()) throw DimensionError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.rank()) throw DimensionError("concat rank mismatch");
    for (std::size_t a = 0; a < p.rank(); ++a) {
      if (a != axis && p.extent(a) != first.extent(a)) {
        throw DimensionError("concat non-axis extents differ: " + shape_str(p.shape()) + " vs " +
                             shape_str(first.shape()));
      }
    }
    total += p.extent(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= first.extent(a);
  for (std::size_t a = axis + 1; a < first.rank(); ++a) inner *= first.extent(a);

  Shape shape = first.shape();
  shape[axis] = total;
  std::vector<double> data;
  data.reserve(shape_numel(shape));
  for (std::size_t o = 0; o < outer; ++o) {
    for (const auto& p : parts) {
      const std::size_t len = p.extent(axis) * inner;
      const auto begin = p.data().begin() + static_cast<std::ptrdiff_t>(o * len);
      data.insert(data.end(), begin, begin + static_cast<std::ptrdiff_t>(len));
    }
  }
  return Tensor(std::move(shape), std::move(data), first.element_bytes());
}

inline Tensor concat_axis(const std::vector<Tensor>& parts, std::size_t axis) {
  return concat_axis(std::span<const Tensor>(parts), axis);
}

/// Maps one 64-bit draw to [-1, 1) using its top 53 bits.
inline double unit_interval_value(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

/// Deterministic fill from std::mt19937_64 seeded with `seed`, one draw per element
/// in row-major order. The engine's output sequence is fixed by the standard.
inline Tensor seeded_fill(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  Tensor out(shape);
  for (auto& v : out.data()) v = unit_interval_value(engine());
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace lrtp
