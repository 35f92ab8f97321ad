// SPDX-License-Identifier: Apache-2.0
#include "lrnet/tensor.hpp"

#include <atomic>
#include <cmath>

namespace lrnet {

namespace {
std::atomic<bool> g_verify_finite{false};
}

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

void require_shape(const Shape& got, const Shape& expected, const std::string& what) {
  if (got != expected) {
    throw ShapeError(what + ": expected shape " + expected.str() + ", got " + got.str());
  }
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.storage()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void set_verify_finite(bool enabled) { g_verify_finite.store(enabled); }
bool verify_finite() { return g_verify_finite.load(); }

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what) {
  if (!all_finite(t)) throw NumericError("non-finite value in " + what);
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(b.shape(), a.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);
template void check_finite(const Tensor<float>&, const std::string&);
template void check_finite(const Tensor<double>&, const std::string&);
template double max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace lrnet
