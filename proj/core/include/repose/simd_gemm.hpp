#pragma once

// Hand-written dense kernels. Row-major, contiguous. These are the only
// compute-heavy primitives in the library; everything model-sized funnels
// through them.
//
// Determinism contract: for every output element the reduction order over k
// is ascending and independent of blocking, so results are bitwise
// reproducible run-to-run on the same build.

#include <cstdint>

namespace repose::kern {

// C[M,N] += A[M,K] * B[K,N]
void gemm_acc(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C);
void gemm_acc(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C);

// C[M,N] = A[M,K] * B[K,N]
void gemm(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C);
void gemm(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C);

// out[c*rows + r] = in[r*cols + c]
void transpose(int64_t rows, int64_t cols, const float* in, float* out);
void transpose(int64_t rows, int64_t cols, const double* in, double* out);

// out[j] += sum_i in[i*cols + j]  (column sums, row-ascending order)
void colsum_acc(int64_t rows, int64_t cols, const float* in, float* out);
void colsum_acc(int64_t rows, int64_t cols, const double* in, double* out);

// Human-readable name of the compiled kernel path ("avx512", "avx2", "scalar").
const char* kernel_arch();

}  // namespace repose::kern
