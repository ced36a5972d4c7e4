#include "thzsim/kernels.hpp"

#include <algorithm>

#include "thzsim/geometry.hpp"

namespace thz::kernels {

namespace scalar {

void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = A + i * k;
    double* c = C + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* b = B + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
      c[j] = accumulate ? c[j] + s : s;
    }
  }
}

void gemm_nn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* c = C + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      if (a == 0.0) continue;
      const double* b = B + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += a * b[j];
    }
  }
}

void gemm_tn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + m * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* b = B + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double a = A[i * m + j];
      if (a == 0.0) continue;
      double* c = C + j * k;
      for (std::size_t p = 0; p < k; ++p) c[p] += a * b[p];
    }
  }
}

void axpy(std::size_t n, double a, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

double dot(std::size_t n, const double* x, const double* y) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

}  // namespace scalar

namespace {

struct Table {
  decltype(&scalar::gemm_nt) gemm_nt;
  decltype(&scalar::gemm_nn) gemm_nn;
  decltype(&scalar::gemm_tn) gemm_tn;
  decltype(&scalar::axpy) axpy;
  decltype(&scalar::dot) dot;
};

constexpr Table kScalar{scalar::gemm_nt, scalar::gemm_nn, scalar::gemm_tn, scalar::axpy, scalar::dot};
#if defined(THZ_HAVE_AVX2)
constexpr Table kAvx2{avx2::gemm_nt, avx2::gemm_nn, avx2::gemm_tn, avx2::axpy, avx2::dot};
#endif

bool cpu_has_avx2() {
#if defined(THZ_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Table& table_for(Isa isa) {
#if defined(THZ_HAVE_AVX2)
  if (isa == Isa::Avx2) return kAvx2;
#endif
  (void)isa;
  return kScalar;
}

struct State {
  Isa isa;
  const Table* t;
  State() : isa(detected_isa()), t(&table_for(isa)) {}
};

State& state() {
  static State s;
  return s;
}

}  // namespace

Isa detected_isa() { return cpu_has_avx2() ? Isa::Avx2 : Isa::Scalar; }

Isa active_isa() { return state().isa; }

void set_isa(Isa isa) {
  if (isa == Isa::Avx2 && !cpu_has_avx2()) throw Error("AVX2/FMA kernels are not available on this build or CPU");
  state().isa = isa;
  state().t = &table_for(isa);
}

std::string_view isa_name(Isa isa) { return isa == Isa::Avx2 ? "avx2" : "scalar"; }

void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate) {
  state().t->gemm_nt(n, m, k, A, B, C, accumulate);
}
void gemm_nn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate) {
  state().t->gemm_nn(n, m, k, A, B, C, accumulate);
}
void gemm_tn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate) {
  state().t->gemm_tn(n, m, k, A, B, C, accumulate);
}
void axpy(std::size_t n, double a, const double* x, double* y) { state().t->axpy(n, a, x, y); }
double dot(std::size_t n, const double* x, const double* y) { return state().t->dot(n, x, y); }

}  // namespace thz::kernels
