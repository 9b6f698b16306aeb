#include <cmath>
#include <vector>

#include "dsbn/kernels.hpp"
#include "kernels/variants.hpp"

namespace dsbn::kernels {
namespace {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* crow = c.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b.data() + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void col_sum(std::size_t m, std::size_t n, std::span<const double> a,
             std::span<double> out) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
}

void col_moments(std::size_t m, std::size_t n, std::span<const double> a,
                 std::span<double> mean, std::span<double> var) {
  for (std::size_t j = 0; j < n; ++j) mean[j] = var[j] = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) mean[j] += a[i * n + j];
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < n; ++j) mean[j] *= inv_m;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = a[i * n + j] - mean[j];
      var[j] += d * d;
    }
  for (std::size_t j = 0; j < n; ++j) var[j] *= inv_m;
}

void bn_apply(std::size_t m, std::size_t n, std::span<const double> x,
              std::span<const double> mean, std::span<const double> inv_std,
              std::span<const double> gamma, std::span<const double> beta,
              std::span<double> xhat, std::span<double> y) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t idx = i * n + j;
      const double h = (x[idx] - mean[j]) * inv_std[j];
      xhat[idx] = h;
      y[idx] = gamma[j] * h + beta[j];
    }
}

void bn_backward(std::size_t m, std::size_t n, std::span<const double> dy,
                 std::span<const double> xhat, std::span<const double> inv_std,
                 std::span<const double> gamma, std::span<double> dx,
                 std::span<double> dgamma, std::span<double> dbeta) {
  // dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
  std::vector<double> sum_dy(n, 0.0);
  std::vector<double> sum_dy_xhat(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t idx = i * n + j;
      sum_dy[j] += dy[idx];
      sum_dy_xhat[j] += dy[idx] * xhat[idx];
    }
  const double md = static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t idx = i * n + j;
      const double scale = gamma[j] * inv_std[j] / md;
      dx[idx] += scale * (md * dy[idx] - sum_dy[j] - xhat[idx] * sum_dy_xhat[j]);
    }
  for (std::size_t j = 0; j < n; ++j) {
    dgamma[j] += sum_dy_xhat[j];
    dbeta[j] += sum_dy[j];
  }
}

void adam_update(const AdamCoefficients& c, std::span<double> param,
                 std::span<const double> grad, std::span<double> m,
                 std::span<double> v) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / c.bias_correction1;
    const double v_hat = v[i] / c.bias_correction2;
    param[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

constexpr KernelTable kScalarTable{
    Isa::kScalar, "scalar", gemm_nn,  gemm_tn,     gemm_nt,
    axpy,         col_sum,  col_moments, bn_apply, bn_backward,
    adam_update,
};

}  // namespace

const KernelTable& scalar_table() { return kScalarTable; }

}  // namespace dsbn::kernels
