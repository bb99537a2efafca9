#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dproxy/error.hpp"

namespace dproxy {

/// Dense row-major matrix. The only storage type used across the engine:
/// embeddings, parameters, gradients and intermediate activations.
template <typename T>
struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  static Tensor2 from(std::size_t r, std::size_t c, std::vector<T> values) {
    if (values.size() != r * c) {
      throw Error(ErrorCode::ShapeMismatch, "Tensor2::from: expected " + std::to_string(r * c) +
                                                " values, got " + std::to_string(values.size()));
    }
    Tensor2 t;
    t.rows = r;
    t.cols = c;
    t.data = std::move(values);
    return t;
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }

  template <typename U>
  Tensor2<U> cast() const {
    Tensor2<U> out(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool operator==(const Tensor2&) const = default;
};

/// Copies the listed rows, in order, into a new matrix.
template <typename T>
Tensor2<T> gather_rows(const Tensor2<T>& src, std::span<const std::size_t> idx) {
  Tensor2<T> out(idx.size(), src.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto from = src.row(idx[i]);
    std::copy(from.begin(), from.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace dproxy
