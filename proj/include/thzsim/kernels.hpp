#pragma once

#include <cstddef>
#include <string_view>

// Dense double-precision kernels used by the autodiff engine. Every kernel has
// a scalar reference implementation; an AVX2/FMA variant is selected at
// runtime when the CPU supports it. All matrices are row-major and contiguous.
namespace thz::kernels {

enum class Isa { Scalar, Avx2 };

/// Best variant supported by this binary on this CPU.
Isa detected_isa();
/// Variant currently used by the dispatching entry points.
Isa active_isa();
/// Throws thz::Error when the requested variant is unavailable.
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);

/// C[n x m] (+)= A[n x k] * B[m x k]^T
void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate);
/// C[n x m] (+)= A[n x k] * B[k x m]
void gemm_nn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate);
/// C[m x k] (+)= A[n x m]^T * B[n x k]
void gemm_tn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate);
/// y += a * x
void axpy(std::size_t n, double a, const double* x, double* y);
double dot(std::size_t n, const double* x, const double* y);

namespace scalar {
void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate);
void gemm_nn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate);
void gemm_tn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate);
void axpy(std::size_t n, double a, const double* x, double* y);
double dot(std::size_t n, const double* x, const double* y);
}  // namespace scalar

#if defined(THZ_HAVE_AVX2)
namespace avx2 {
void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate);
void gemm_nn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate);
void gemm_tn(std::size_t n, std::size_t m, std::size_t k, const double* A, const double* B, double* C,
             bool accumulate);
void axpy(std::size_t n, double a, const double* x, double* y);
double dot(std::size_t n, const double* x, const double* y);
}  // namespace avx2
#endif

}  // namespace thz::kernels
