#pragma once

// Dense f64 inner loops used by the tensor core, normalization layers and the
// optimizer. Every kernel has a scalar reference implementation; SIMD variants
// are compiled separately and picked once at runtime from CPU capabilities.
//
// All matrices are row-major. Kernels accumulate into their outputs ("+=")
// unless stated otherwise.

#include <cstddef>
#include <span>
#include <string_view>

namespace dsbn::kernels {

enum class Isa { kScalar, kAvx2 };

struct AdamCoefficients {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

struct KernelTable {
  Isa isa;
  std::string_view name;

  // c[m x n] += a[m x k] * b[k x n]
  void (*gemm_nn)(std::size_t m, std::size_t k, std::size_t n,
                  std::span<const double> a, std::span<const double> b,
                  std::span<double> c);
  // c[k x n] += a[m x k]^T * b[m x n]
  void (*gemm_tn)(std::size_t m, std::size_t k, std::size_t n,
                  std::span<const double> a, std::span<const double> b,
                  std::span<double> c);
  // c[m x k] += a[m x n] * b[k x n]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k,
                  std::span<const double> a, std::span<const double> b,
                  std::span<double> c);

  // y += alpha * x
  void (*axpy)(double alpha, std::span<const double> x, std::span<double> y);

  // out[j] += sum_i a[i, j]
  void (*col_sum)(std::size_t m, std::size_t n, std::span<const double> a,
                  std::span<double> out);

  // Per-column mean and biased (divisor m) variance, two-pass. Overwrites.
  void (*col_moments)(std::size_t m, std::size_t n, std::span<const double> a,
                      std::span<double> mean, std::span<double> var);

  // xhat = (x - mean) * inv_std; y = gamma * xhat + beta. Overwrites.
  void (*bn_apply)(std::size_t m, std::size_t n, std::span<const double> x,
                   std::span<const double> mean,
                   std::span<const double> inv_std,
                   std::span<const double> gamma,
                   std::span<const double> beta, std::span<double> xhat,
                   std::span<double> y);

  // Batch-statistics BN backward. Accumulates into dx, dgamma, dbeta.
  void (*bn_backward)(std::size_t m, std::size_t n, std::span<const double> dy,
                      std::span<const double> xhat,
                      std::span<const double> inv_std,
                      std::span<const double> gamma, std::span<double> dx,
                      std::span<double> dgamma, std::span<double> dbeta);

  // In-place bias-corrected Adam update on one parameter buffer.
  void (*adam_update)(const AdamCoefficients& coeff, std::span<double> param,
                      std::span<const double> grad, std::span<double> m,
                      std::span<double> v);
};

const KernelTable& scalar_table();

// nullptr when the variant was not compiled in or the CPU lacks the features.
const KernelTable* avx2_table();

// Table used by the library. Chosen on first use: DSBN_KERNELS=scalar|avx2
// overrides detection.
const KernelTable& active();

// Forces a variant; returns false (and changes nothing) if unavailable.
bool select(Isa isa);

}  // namespace dsbn::kernels
