// AVX2 + FMA variants. This file is compiled with -mavx2 -mfma and must only be
// entered after a runtime CPU check (see dispatch.cpp).

#include "kernels/variants.hpp"

#if defined(__x86_64__) && defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>
#include <vector>

namespace dsbn::kernels {
namespace {

constexpr std::size_t kLanes = 4;

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

// crow[0..n) += s * brow[0..n)
inline void row_fma(double s, const double* brow, double* crow, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t j = 0;
  for (; j + kLanes <= n; j += kLanes) {
    const __m256d c = _mm256_loadu_pd(crow + j);
    _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(vs, _mm256_loadu_pd(brow + j), c));
  }
  for (; j < n; ++j) crow[j] = std::fma(s, brow[j], crow[j]);
}

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      row_fma(a[i * k + p], b.data() + p * n, c.data() + i * n, n);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      row_fma(a[i * k + p], b.data() + i * n, c.data() + p * n, n);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b.data() + p * n;
      __m256d acc = _mm256_setzero_pd();
      std::size_t j = 0;
      for (; j + kLanes <= n; j += kLanes)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(arow + j),
                              _mm256_loadu_pd(brow + j), acc);
      double tail = 0.0;
      for (; j < n; ++j) tail = std::fma(arow[j], brow[j], tail);
      c[i * k + p] += hsum(acc) + tail;
    }
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  row_fma(alpha, x.data(), y.data(), x.size());
}

void col_sum(std::size_t m, std::size_t n, std::span<const double> a,
             std::span<double> out) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data() + i * n;
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes)
      _mm256_storeu_pd(out.data() + j,
                       _mm256_add_pd(_mm256_loadu_pd(out.data() + j),
                                     _mm256_loadu_pd(row + j)));
    for (; j < n; ++j) out[j] += row[j];
  }
}

void col_moments(std::size_t m, std::size_t n, std::span<const double> a,
                 std::span<double> mean, std::span<double> var) {
  for (std::size_t j = 0; j < n; ++j) mean[j] = var[j] = 0.0;
  col_sum(m, n, a, mean);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < n; ++j) mean[j] *= inv_m;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data() + i * n;
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes) {
      const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(row + j),
                                      _mm256_loadu_pd(mean.data() + j));
      _mm256_storeu_pd(var.data() + j,
                       _mm256_fmadd_pd(d, d, _mm256_loadu_pd(var.data() + j)));
    }
    for (; j < n; ++j) {
      const double d = row[j] - mean[j];
      var[j] = std::fma(d, d, var[j]);
    }
  }
  for (std::size_t j = 0; j < n; ++j) var[j] *= inv_m;
}

void bn_apply(std::size_t m, std::size_t n, std::span<const double> x,
              std::span<const double> mean, std::span<const double> inv_std,
              std::span<const double> gamma, std::span<const double> beta,
              std::span<double> xhat, std::span<double> y) {
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t base = i * n;
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes) {
      const __m256d h = _mm256_mul_pd(
          _mm256_sub_pd(_mm256_loadu_pd(x.data() + base + j),
                        _mm256_loadu_pd(mean.data() + j)),
          _mm256_loadu_pd(inv_std.data() + j));
      _mm256_storeu_pd(xhat.data() + base + j, h);
      _mm256_storeu_pd(y.data() + base + j,
                       _mm256_fmadd_pd(_mm256_loadu_pd(gamma.data() + j), h,
                                       _mm256_loadu_pd(beta.data() + j)));
    }
    for (; j < n; ++j) {
      const double h = (x[base + j] - mean[j]) * inv_std[j];
      xhat[base + j] = h;
      y[base + j] = std::fma(gamma[j], h, beta[j]);
    }
  }
}

void bn_backward(std::size_t m, std::size_t n, std::span<const double> dy,
                 std::span<const double> xhat, std::span<const double> inv_std,
                 std::span<const double> gamma, std::span<double> dx,
                 std::span<double> dgamma, std::span<double> dbeta) {
  std::vector<double> sum_dy(n, 0.0);
  std::vector<double> sum_dy_xhat(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t base = i * n;
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes) {
      const __m256d g = _mm256_loadu_pd(dy.data() + base + j);
      const __m256d h = _mm256_loadu_pd(xhat.data() + base + j);
      _mm256_storeu_pd(sum_dy.data() + j,
                       _mm256_add_pd(_mm256_loadu_pd(sum_dy.data() + j), g));
      _mm256_storeu_pd(
          sum_dy_xhat.data() + j,
          _mm256_fmadd_pd(g, h, _mm256_loadu_pd(sum_dy_xhat.data() + j)));
    }
    for (; j < n; ++j) {
      sum_dy[j] += dy[base + j];
      sum_dy_xhat[j] = std::fma(dy[base + j], xhat[base + j], sum_dy_xhat[j]);
    }
  }
  const double md = static_cast<double>(m);
  std::vector<double> scale(n);
  for (std::size_t j = 0; j < n; ++j) scale[j] = gamma[j] * inv_std[j] / md;
  const __m256d vm = _mm256_set1_pd(md);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t base = i * n;
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes) {
      const __m256d g = _mm256_loadu_pd(dy.data() + base + j);
      const __m256d h = _mm256_loadu_pd(xhat.data() + base + j);
      // m*dy - sum_dy - xhat*sum_dy_xhat
      __m256d t = _mm256_fmsub_pd(vm, g, _mm256_loadu_pd(sum_dy.data() + j));
      t = _mm256_fnmadd_pd(h, _mm256_loadu_pd(sum_dy_xhat.data() + j), t);
      _mm256_storeu_pd(dx.data() + base + j,
                       _mm256_fmadd_pd(_mm256_loadu_pd(scale.data() + j), t,
                                       _mm256_loadu_pd(dx.data() + base + j)));
    }
    for (; j < n; ++j) {
      const std::size_t idx = base + j;
      const double t = md * dy[idx] - sum_dy[j] - xhat[idx] * sum_dy_xhat[j];
      dx[idx] += scale[j] * t;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    dgamma[j] += sum_dy_xhat[j];
    dbeta[j] += sum_dy[j];
  }
}

void adam_update(const AdamCoefficients& c, std::span<double> param,
                 std::span<const double> grad, std::span<double> m,
                 std::span<double> v) {
  const __m256d b1 = _mm256_set1_pd(c.beta1);
  const __m256d b2 = _mm256_set1_pd(c.beta2);
  const __m256d one_b1 = _mm256_set1_pd(1.0 - c.beta1);
  const __m256d one_b2 = _mm256_set1_pd(1.0 - c.beta2);
  const __m256d bc1 = _mm256_set1_pd(c.bias_correction1);
  const __m256d bc2 = _mm256_set1_pd(c.bias_correction2);
  const __m256d lr = _mm256_set1_pd(c.lr);
  const __m256d eps = _mm256_set1_pd(c.eps);
  const std::size_t n = param.size();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const __m256d g = _mm256_loadu_pd(grad.data() + i);
    const __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m.data() + i)),
                                     _mm256_mul_pd(one_b1, g));
    const __m256d vi = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v.data() + i)),
                                     _mm256_mul_pd(_mm256_mul_pd(one_b2, g), g));
    _mm256_storeu_pd(m.data() + i, mi);
    _mm256_storeu_pd(v.data() + i, vi);
    const __m256d m_hat = _mm256_div_pd(mi, bc1);
    const __m256d v_hat = _mm256_div_pd(vi, bc2);
    const __m256d step = _mm256_div_pd(_mm256_mul_pd(lr, m_hat),
                                       _mm256_add_pd(_mm256_sqrt_pd(v_hat), eps));
    _mm256_storeu_pd(param.data() + i,
                     _mm256_sub_pd(_mm256_loadu_pd(param.data() + i), step));
  }
  for (; i < n; ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / c.bias_correction1;
    const double v_hat = v[i] / c.bias_correction2;
    param[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

constexpr KernelTable kAvx2Table{
    Isa::kAvx2, "avx2", gemm_nn,  gemm_tn,     gemm_nt,
    axpy,       col_sum, col_moments, bn_apply, bn_backward,
    adam_update,
};

}  // namespace

const KernelTable* detail::compiled_avx2_table() { return &kAvx2Table; }

}  // namespace dsbn::kernels

#else

namespace dsbn::kernels {
const KernelTable* detail::compiled_avx2_table() { return nullptr; }
}  // namespace dsbn::kernels

#endif
