#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace loopeval {

/// Raised when shapes or configuration values do not agree.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a value that must be finite is not.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace loopeval

namespace loopeval::nn {

/// A learnable tensor: values plus an equally shaped gradient buffer.
template <typename Real>
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<Real> values;
  std::vector<Real> grad;

  ParamTensor() = default;
  ParamTensor(std::string name, std::vector<std::size_t> shape);

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  Real& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  void zero_grad();
  bool all_finite() const;
};

template <typename Real>
using ParamRefs = std::vector<ParamTensor<Real>*>;

template <typename Real>
using ConstParamRefs = std::vector<const ParamTensor<Real>*>;

/// Row-major dense matrix used for activations.
template <typename Real>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, Real fill = Real(0)) : rows(r), cols(c), data(r * c, fill) {}

  std::span<Real> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const Real> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  Real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

template <typename Real>
void zero_grads(const ParamRefs<Real>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename Real>
std::size_t total_size(const ParamRefs<Real>& params) {
  std::size_t n = 0;
  for (auto* p : params) n += p->size();
  return n;
}

/// Throws NumericError naming the first parameter holding a non-finite value or gradient.
template <typename Real>
void require_finite(const ParamRefs<Real>& params);

}  // namespace loopeval::nn
