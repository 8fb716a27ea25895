#pragma once

// Shared numeric building blocks of the forward and backward passes.

#include <cmath>

#include "iapo/model.hpp"

namespace iapo::kernels {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

// tanh-approximation GELU written through the logistic function,
// 0.5 (1 + tanh z) = sigmoid(2z), so it vectorizes and has no cancellation.
inline Eigen::ArrayXXd gelu_gate(const Mat& u) {
  const Eigen::ArrayXXd a = u.array();
  const Eigen::ArrayXXd z2 = (2.0 * kGeluC) * (a + kGeluA * a.cube());
  return ((-z2).exp() + 1.0).inverse();
}

inline Mat gelu(const Mat& u) { return (u.array() * gelu_gate(u)).matrix(); }

// d gelu / du, using 1 - tanh^2 z = 4 s (1 - s).
inline Mat gelu_grad(const Mat& u) {
  const Eigen::ArrayXXd a = u.array();
  const Eigen::ArrayXXd s = gelu_gate(u);
  return (s + 2.0 * kGeluC * a * s * (1.0 - s) * (1.0 + 3.0 * kGeluA * a.square())).matrix();
}

// Row-wise LayerNorm. `xhat` and `rstd` are filled when non-null.
inline void layer_norm(const Mat& x, const Eigen::Map<const RowVec>& gain,
                       const Eigen::Map<const RowVec>& bias, Mat& y, Mat* xhat = nullptr,
                       Eigen::VectorXd* rstd = nullptr) {
  const Eigen::Index n = x.rows(), d = x.cols();
  y.resize(n, d);
  if (xhat) xhat->resize(n, d);
  if (rstd) rstd->resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    if (rstd) (*rstd)(i) = r;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double h = (x(i, j) - mean) * r;
      if (xhat) (*xhat)(i, j) = h;
      y(i, j) = h * gain(j) + bias(j);
    }
  }
}

inline double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace iapo::kernels
