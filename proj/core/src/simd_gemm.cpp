#include "repose/simd_gemm.hpp"

#include <algorithm>
#include <cstring>

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

namespace repose::kern {

namespace {

// Cache blocking: the (KC x NC) B panel stays L2-resident while the M loop
// streams over it. Accumulation order over k is kc-major then k-minor,
// ascending, for every C element and every kernel path.
constexpr int64_t KC = 256;
constexpr int64_t NC = 512;

template <class T>
void gemm_generic(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
    for (int64_t kc = 0; kc < K; kc += KC) {
        const int64_t kend = std::min(kc + KC, K);
        for (int64_t i = 0; i < M; ++i) {
            const T* Ai = A + i * K;
            T* Ci = C + i * N;
            for (int64_t k = kc; k < kend; ++k) {
                const T a = Ai[k];
                const T* Bk = B + k * N;
                for (int64_t j = 0; j < N; ++j) Ci[j] += a * Bk[j];
            }
        }
    }
}

#if defined(__AVX512F__)

constexpr int64_t MR = 8;
constexpr int64_t NR = 32;

// C[8 x 32] += A[8 x kb] * B[kb x 32]
inline void mk_8x32(int64_t kb, const float* A, int64_t lda, const float* B,
                    int64_t ldb, float* C, int64_t ldc) {
    __m512 c[8][2];
#pragma GCC unroll 8
    for (int r = 0; r < 8; ++r) {
        c[r][0] = _mm512_loadu_ps(C + r * ldc);
        c[r][1] = _mm512_loadu_ps(C + r * ldc + 16);
    }
#pragma GCC unroll 2
    for (int64_t k = 0; k < kb; ++k) {
        const __m512 b0 = _mm512_loadu_ps(B + k * ldb);
        const __m512 b1 = _mm512_loadu_ps(B + k * ldb + 16);
#pragma GCC unroll 8
        for (int r = 0; r < 8; ++r) {
            const __m512 a = _mm512_set1_ps(A[r * lda + k]);
            c[r][0] = _mm512_fmadd_ps(a, b0, c[r][0]);
            c[r][1] = _mm512_fmadd_ps(a, b1, c[r][1]);
        }
    }
#pragma GCC unroll 8
    for (int r = 0; r < 8; ++r) {
        _mm512_storeu_ps(C + r * ldc, c[r][0]);
        _mm512_storeu_ps(C + r * ldc + 16, c[r][1]);
    }
}

// Masked edge tile: mr in [1,8], nr in [1,32].
inline void mk_edge(int64_t mr, int64_t nr, int64_t kb, const float* A, int64_t lda,
                    const float* B, int64_t ldb, float* C, int64_t ldc) {
    const __mmask16 m0 = nr >= 16 ? __mmask16(0xFFFFu) : __mmask16((1u << nr) - 1u);
    const __mmask16 m1 = nr > 16 ? __mmask16((1u << (nr - 16)) - 1u) : __mmask16(0);
    __m512 c[8][2];
    for (int64_t r = 0; r < mr; ++r) {
        c[r][0] = _mm512_maskz_loadu_ps(m0, C + r * ldc);
        c[r][1] = m1 ? _mm512_maskz_loadu_ps(m1, C + r * ldc + 16) : _mm512_setzero_ps();
    }
    for (int64_t k = 0; k < kb; ++k) {
        const __m512 b0 = _mm512_maskz_loadu_ps(m0, B + k * ldb);
        const __m512 b1 = m1 ? _mm512_maskz_loadu_ps(m1, B + k * ldb + 16) : _mm512_setzero_ps();
        for (int64_t r = 0; r < mr; ++r) {
            const __m512 a = _mm512_set1_ps(A[r * lda + k]);
            c[r][0] = _mm512_fmadd_ps(a, b0, c[r][0]);
            c[r][1] = _mm512_fmadd_ps(a, b1, c[r][1]);
        }
    }
    for (int64_t r = 0; r < mr; ++r) {
        _mm512_mask_storeu_ps(C + r * ldc, m0, c[r][0]);
        if (m1) _mm512_mask_storeu_ps(C + r * ldc + 16, m1, c[r][1]);
    }
}

void gemm_f32(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C) {
    for (int64_t jc = 0; jc < N; jc += NC) {
        const int64_t jend = std::min(jc + NC, N);
        for (int64_t kc = 0; kc < K; kc += KC) {
            const int64_t kb = std::min(KC, K - kc);
            for (int64_t i = 0; i < M; i += MR) {
                const int64_t mr = std::min(MR, M - i);
                const float* Ai = A + i * K + kc;
                int64_t j = jc;
                if (mr == MR) {
                    for (; j + NR <= jend; j += NR)
                        mk_8x32(kb, Ai, K, B + kc * N + j, N, C + i * N + j, N);
                }
                for (; j < jend; j += NR) {
                    const int64_t nr = std::min(NR, jend - j);
                    mk_edge(mr, nr, kb, Ai, K, B + kc * N + j, N, C + i * N + j, N);
                }
            }
        }
    }
}

const char* kArch = "avx512";

#elif defined(__AVX2__)

constexpr int64_t MR = 6;
constexpr int64_t NR = 16;

// C[6 x 16] += A[6 x kb] * B[kb x 16]
inline void mk_6x16(int64_t kb, const float* A, int64_t lda, const float* B,
                    int64_t ldb, float* C, int64_t ldc) {
    __m256 c[6][2];
#pragma GCC unroll 6
    for (int r = 0; r < 6; ++r) {
        c[r][0] = _mm256_loadu_ps(C + r * ldc);
        c[r][1] = _mm256_loadu_ps(C + r * ldc + 8);
    }
    for (int64_t k = 0; k < kb; ++k) {
        const __m256 b0 = _mm256_loadu_ps(B + k * ldb);
        const __m256 b1 = _mm256_loadu_ps(B + k * ldb + 8);
#pragma GCC unroll 6
        for (int r = 0; r < 6; ++r) {
            const __m256 a = _mm256_set1_ps(A[r * lda + k]);
            c[r][0] = _mm256_fmadd_ps(a, b0, c[r][0]);
            c[r][1] = _mm256_fmadd_ps(a, b1, c[r][1]);
        }
    }
#pragma GCC unroll 6
    for (int r = 0; r < 6; ++r) {
        _mm256_storeu_ps(C + r * ldc, c[r][0]);
        _mm256_storeu_ps(C + r * ldc + 8, c[r][1]);
    }
}

// Scalar edge tile, same k order.
inline void mk_edge(int64_t mr, int64_t nr, int64_t kb, const float* A, int64_t lda,
                    const float* B, int64_t ldb, float* C, int64_t ldc) {
    for (int64_t k = 0; k < kb; ++k)
        for (int64_t r = 0; r < mr; ++r) {
            const float a = A[r * lda + k];
            for (int64_t j = 0; j < nr; ++j) C[r * ldc + j] += a * B[k * ldb + j];
        }
}

void gemm_f32(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C) {
    for (int64_t jc = 0; jc < N; jc += NC) {
        const int64_t jend = std::min(jc + NC, N);
        for (int64_t kc = 0; kc < K; kc += KC) {
            const int64_t kb = std::min(KC, K - kc);
            for (int64_t i = 0; i < M; i += MR) {
                const int64_t mr = std::min(MR, M - i);
                const float* Ai = A + i * K + kc;
                int64_t j = jc;
                if (mr == MR) {
                    for (; j + NR <= jend; j += NR)
                        mk_6x16(kb, Ai, K, B + kc * N + j, N, C + i * N + j, N);
                }
                for (; j < jend; j += NR) {
                    const int64_t nr = std::min(NR, jend - j);
                    mk_edge(mr, nr, kb, Ai, K, B + kc * N + j, N, C + i * N + j, N);
                }
            }
        }
    }
}

const char* kArch = "avx2";

#else

void gemm_f32(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C) {
    gemm_generic(M, N, K, A, B, C);
}

const char* kArch = "scalar";

#endif

}  // namespace

void gemm_acc(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C) {
    gemm_f32(M, N, K, A, B, C);
}

void gemm_acc(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C) {
    gemm_generic(M, N, K, A, B, C);
}

void gemm(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C) {
    std::memset(C, 0, size_t(M * N) * sizeof(float));
    gemm_acc(M, N, K, A, B, C);
}

void gemm(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C) {
    std::memset(C, 0, size_t(M * N) * sizeof(double));
    gemm_acc(M, N, K, A, B, C);
}

namespace {
template <class T>
void transpose_generic(int64_t rows, int64_t cols, const T* in, T* out) {
    constexpr int64_t TB = 32;
    for (int64_t i0 = 0; i0 < rows; i0 += TB)
        for (int64_t j0 = 0; j0 < cols; j0 += TB) {
            const int64_t i1 = std::min(i0 + TB, rows);
            const int64_t j1 = std::min(j0 + TB, cols);
            for (int64_t i = i0; i < i1; ++i)
                for (int64_t j = j0; j < j1; ++j) out[j * rows + i] = in[i * cols + j];
        }
}

template <class T>
void colsum_generic(int64_t rows, int64_t cols, const T* in, T* out) {
    for (int64_t i = 0; i < rows; ++i) {
        const T* row = in + i * cols;
        for (int64_t j = 0; j < cols; ++j) out[j] += row[j];
    }
}
}  // namespace

void transpose(int64_t rows, int64_t cols, const float* in, float* out) {
    transpose_generic(rows, cols, in, out);
}
void transpose(int64_t rows, int64_t cols, const double* in, double* out) {
    transpose_generic(rows, cols, in, out);
}
void colsum_acc(int64_t rows, int64_t cols, const float* in, float* out) {
    colsum_generic(rows, cols, in, out);
}
void colsum_acc(int64_t rows, int64_t cols, const double* in, double* out) {
    colsum_generic(rows, cols, in, out);
}

const char* kernel_arch() { return kArch; }

}  // namespace repose::kern
