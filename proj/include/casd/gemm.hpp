#pragma once

#include <algorithm>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "casd/common.hpp"

// Small dense GEMM used by conv/linear/attention. Single-threaded by design:
// every output element is produced by one fixed-order summation, so results
// are bitwise reproducible run to run. On AVX-512 targets a hand-written
// microkernel is used (gcc's auto-vectorizer spills the accumulator tile);
// elsewhere a generic blocked loop nest takes over.

namespace casd {
namespace gemm {

#if defined(__GNUC__)
#define CASD_NOINLINE __attribute__((noinline))
#else
#define CASD_NOINLINE
#endif

#if defined(__AVX512F__)

namespace simd {

struct VF32 {
  using scalar = float;
  using reg = __m512;
  using mask = __mmask16;
  static constexpr int lanes = 16;
  static reg zero() { return _mm512_setzero_ps(); }
  static reg load(const float* p) { return _mm512_loadu_ps(p); }
  static reg load_m(const float* p, mask m) { return _mm512_maskz_loadu_ps(m, p); }
  static void store(float* p, reg v) { _mm512_storeu_ps(p, v); }
  static void store_m(float* p, reg v, mask m) { _mm512_mask_storeu_ps(p, m, v); }
  static reg set1(float v) { return _mm512_set1_ps(v); }
  static reg fma(reg a, reg b, reg c) { return _mm512_fmadd_ps(a, b, c); }
  static mask tail_mask(int n) { return mask((1u << n) - 1u); }
};

struct VF64 {
  using scalar = double;
  using reg = __m512d;
  using mask = __mmask8;
  static constexpr int lanes = 8;
  static reg zero() { return _mm512_setzero_pd(); }
  static reg load(const double* p) { return _mm512_loadu_pd(p); }
  static reg load_m(const double* p, mask m) { return _mm512_maskz_loadu_pd(m, p); }
  static void store(double* p, reg v) { _mm512_storeu_pd(p, v); }
  static void store_m(double* p, reg v, mask m) { _mm512_mask_storeu_pd(p, m, v); }
  static reg set1(double v) { return _mm512_set1_pd(v); }
  static reg fma(reg a, reg b, reg c) { return _mm512_fmadd_pd(a, b, c); }
  static mask tail_mask(int n) { return mask((1u << n) - 1u); }
};

template <typename T>
struct vec_for;
template <>
struct vec_for<float> {
  using type = VF32;
};
template <>
struct vec_for<double> {
  using type = VF64;
};

// MR x (NC vector columns) tile; when FULL is false the last column is
// masked, which lets any N run through the vector path.
template <typename V, int MR, int NC, bool FULL>
CASD_NOINLINE void tile(const typename V::scalar* __restrict__ A, int lda,
                        const typename V::scalar* __restrict__ B, int ldb,
                        typename V::scalar* __restrict__ C, int ldc, int K, typename V::mask tm,
                        bool acc) {
  using reg = typename V::reg;
  reg c[MR][NC];
  for (int m = 0; m < MR; ++m)
    for (int j = 0; j < NC; ++j) {
      const typename V::scalar* p = C + m * size_t(ldc) + j * V::lanes;
      c[m][j] = acc ? ((j + 1 < NC || FULL) ? V::load(p) : V::load_m(p, tm)) : V::zero();
    }
  for (int k = 0; k < K; ++k) {
    const typename V::scalar* bp = B + size_t(k) * ldb;
    reg b[NC];
    for (int j = 0; j < NC; ++j)
      b[j] = (j + 1 < NC || FULL) ? V::load(bp + j * V::lanes) : V::load_m(bp + j * V::lanes, tm);
    for (int m = 0; m < MR; ++m) {
      reg a = V::set1(A[m * size_t(lda) + k]);
      for (int j = 0; j < NC; ++j) c[m][j] = V::fma(a, b[j], c[m][j]);
    }
  }
  for (int m = 0; m < MR; ++m)
    for (int j = 0; j < NC; ++j) {
      typename V::scalar* p = C + m * size_t(ldc) + j * V::lanes;
      if (j + 1 < NC || FULL)
        V::store(p, c[m][j]);
      else
        V::store_m(p, c[m][j], tm);
    }
}

template <typename V, int NC, bool FULL>
void rows(const typename V::scalar* A, int lda, const typename V::scalar* B, int ldb,
          typename V::scalar* C, int ldc, int M, int K, typename V::mask tm, bool acc) {
  constexpr int MR = NC <= 2 ? 8 : 4;
  int m0 = 0;
  for (; m0 + MR <= M; m0 += MR)
    tile<V, MR, NC, FULL>(A + size_t(m0) * lda, lda, B, ldb, C + size_t(m0) * ldc, ldc, K, tm, acc);
  for (; m0 + 2 <= M; m0 += 2)
    tile<V, 2, NC, FULL>(A + size_t(m0) * lda, lda, B, ldb, C + size_t(m0) * ldc, ldc, K, tm, acc);
  if (m0 < M) tile<V, 1, NC, FULL>(A + size_t(m0) * lda, lda, B, ldb, C + size_t(m0) * ldc, ldc, K, tm, acc);
}

template <typename T>
void gemm_simd(const T* A, int lda, const T* B, int ldb, T* C, int ldc, int M, int K, int N,
               bool acc) {
  using V = typename vec_for<T>::type;
  constexpr int L = V::lanes;
  int j0 = 0;
  while (j0 < N) {
    int rem = N - j0;
    int cols = std::min(rem, 4 * L);
    int nc = (cols + L - 1) / L;
    int tail = cols - (nc - 1) * L;  // lanes in last column, 1..L
    typename V::mask tm = V::tail_mask(tail);
    const T* b = B + j0;
    T* c = C + j0;
    if (tail == L) {
      switch (nc) {
        case 1: rows<V, 1, true>(A, lda, b, ldb, c, ldc, M, K, tm, acc); break;
        case 2: rows<V, 2, true>(A, lda, b, ldb, c, ldc, M, K, tm, acc); break;
        case 3: rows<V, 3, true>(A, lda, b, ldb, c, ldc, M, K, tm, acc); break;
        default: rows<V, 4, true>(A, lda, b, ldb, c, ldc, M, K, tm, acc); break;
      }
    } else {
      switch (nc) {
        case 1: rows<V, 1, false>(A, lda, b, ldb, c, ldc, M, K, tm, acc); break;
        case 2: rows<V, 2, false>(A, lda, b, ldb, c, ldc, M, K, tm, acc); break;
        case 3: rows<V, 3, false>(A, lda, b, ldb, c, ldc, M, K, tm, acc); break;
        default: rows<V, 4, false>(A, lda, b, ldb, c, ldc, M, K, tm, acc); break;
      }
    }
    j0 += cols;
  }
}

}  // namespace simd

#endif  // __AVX512F__

template <typename T>
CASD_NOINLINE void generic_tile(const T* __restrict__ A, int lda, const T* __restrict__ B, int ldb,
                                T* __restrict__ C, int ldc, int M, int K, int N, bool acc) {
  for (int m = 0; m < M; ++m) {
    T* __restrict__ crow = C + size_t(m) * ldc;
    if (!acc)
      for (int n = 0; n < N; ++n) crow[n] = T(0);
    for (int k = 0; k < K; ++k) {
      T a = A[m * size_t(lda) + k];
      const T* __restrict__ b = B + size_t(k) * ldb;
      for (int n = 0; n < N; ++n) crow[n] += a * b[n];
    }
  }
}

template <typename T>
void gemm_nn_strided(const T* A, int lda, const T* B, int ldb, T* C, int ldc, int M, int K, int N,
                     bool acc) {
#if defined(__AVX512F__)
  simd::gemm_simd(A, lda, B, ldb, C, ldc, M, K, N, acc);
#else
  generic_tile(A, lda, B, ldb, C, ldc, M, K, N, acc);
#endif
}

template <typename T>
inline void gemm_nn(const T* A, const T* B, T* C, int M, int K, int N, bool acc = false) {
  gemm_nn_strided(A, K, B, N, C, N, M, K, N, acc);
}

// OUT[N,M] = A[M,N], tiled copy
template <typename T>
inline void transpose(const T* A, T* out, int M, int N) {
  constexpr int TB = 32;
  for (int i0 = 0; i0 < M; i0 += TB)
    for (int j0 = 0; j0 < N; j0 += TB) {
      int i1 = std::min(i0 + TB, M), j1 = std::min(j0 + TB, N);
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j) out[size_t(j) * M + i] = A[size_t(i) * N + j];
    }
}

template <typename T>
inline std::vector<T>& scratch(int which) {
  thread_local std::vector<T> bufs[4];
  return bufs[which];
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
inline void gemm_tn(const T* A, const T* B, T* C, int K, int M, int N, bool acc = false) {
  auto& at = scratch<T>(0);
  at.resize(size_t(M) * K);
  transpose(A, at.data(), K, M);
  gemm_nn(at.data(), B, C, M, K, N, acc);
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
inline void gemm_nt(const T* A, const T* B, T* C, int M, int K, int N, bool acc = false) {
  auto& bt = scratch<T>(1);
  bt.resize(size_t(K) * N);
  transpose(B, bt.data(), N, K);
  gemm_nn(A, bt.data(), C, M, K, N, acc);
}

#undef CASD_NOINLINE

}  // namespace gemm
}  // namespace casd
