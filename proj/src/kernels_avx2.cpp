#include <immintrin.h>

#include <algorithm>

#include "thzsim/kernels.hpp"

namespace thz::kernels::avx2 {

namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

// y[0..n) += a0*x0 + a1*x1 + a2*x2 + a3*x3
inline void axpy4(std::size_t n, const double* a, const double* x0, const double* x1, const double* x2,
                  const double* x3, double* y) {
  const __m256d va0 = _mm256_set1_pd(a[0]);
  const __m256d va1 = _mm256_set1_pd(a[1]);
  const __m256d va2 = _mm256_set1_pd(a[2]);
  const __m256d va3 = _mm256_set1_pd(a[3]);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    __m256d c = _mm256_loadu_pd(y + j);
    c = _mm256_fmadd_pd(va0, _mm256_loadu_pd(x0 + j), c);
    c = _mm256_fmadd_pd(va1, _mm256_loadu_pd(x1 + j), c);
    c = _mm256_fmadd_pd(va2, _mm256_loadu_pd(x2 + j), c);
    c = _mm256_fmadd_pd(va3, _mm256_loadu_pd(x3 + j), c);
    _mm256_storeu_pd(y + j, c);
  }
  for (; j < n; ++j) y[j] += a[0] * x0[j] + a[1] * x1[j] + a[2] * x2[j] + a[3] * x3[j];
}

}  // namespace

void axpy(std::size_t n, double a, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

double dot(std::size_t n, const double* x, const double* y) {
  __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate) {
  const std::size_t k4 = k & ~std::size_t{3};
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = A + i * k;
    double* c = C + i * m;
    std::size_t j = 0;
    for (; j + 4 <= m; j += 4) {
      const double* b0 = B + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
      __m256d s2 = _mm256_setzero_pd(), s3 = _mm256_setzero_pd();
      for (std::size_t p = 0; p < k4; p += 4) {
        const __m256d va = _mm256_loadu_pd(a + p);
        s0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b0 + p), s0);
        s1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b1 + p), s1);
        s2 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b2 + p), s2);
        s3 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b3 + p), s3);
      }
      double r[4] = {hsum(s0), hsum(s1), hsum(s2), hsum(s3)};
      for (std::size_t p = k4; p < k; ++p) {
        r[0] += a[p] * b0[p];
        r[1] += a[p] * b1[p];
        r[2] += a[p] * b2[p];
        r[3] += a[p] * b3[p];
      }
      for (int q = 0; q < 4; ++q) c[j + q] = accumulate ? c[j + q] + r[q] : r[q];
    }
    for (; j < m; ++j) {
      const double s = dot(k, a, B + j * k);
      c[j] = accumulate ? c[j] + s : s;
    }
  }
}

void gemm_nn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = A + i * k;
    double* c = C + i * m;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      if (a[p] == 0.0 && a[p + 1] == 0.0 && a[p + 2] == 0.0 && a[p + 3] == 0.0) continue;
      const double* b = B + p * m;
      axpy4(m, a + p, b, b + m, b + 2 * m, b + 3 * m, c);
    }
    for (; p < k; ++p) {
      if (a[p] != 0.0) axpy(m, a[p], B + p * m, c);
    }
  }
}

void gemm_tn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + m * k, 0.0);
  std::size_t i = 0;
  // Four rows of A/B at a time so each row of C is loaded and stored once.
  for (; i + 4 <= n; i += 4) {
    const double* b0 = B + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double a[4] = {A[i * m + j], A[(i + 1) * m + j], A[(i + 2) * m + j], A[(i + 3) * m + j]};
      if (a[0] == 0.0 && a[1] == 0.0 && a[2] == 0.0 && a[3] == 0.0) continue;
      axpy4(k, a, b0, b0 + k, b0 + 2 * k, b0 + 3 * k, C + j * k);
    }
  }
  for (; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double a = A[i * m + j];
      if (a != 0.0) axpy(k, a, B + i * k, C + j * k);
    }
  }
}

}  // namespace thz::kernels::avx2
