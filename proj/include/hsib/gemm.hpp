#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

namespace hsib {

// C[M,N] += A[M,K] * B[K,N], all row-major contiguous.
// Written in saxpy form (innermost loop over independent outputs) so the
// compiler vectorizes it without reassociating reductions; results stay
// bit-reproducible run to run. K is blocked to keep B panels in L2.
template <class T>
void gemm_acc(int64_t M, int64_t N, int64_t K,
              const T* __restrict A, const T* __restrict B, T* __restrict C) {
    constexpr int64_t KC = 144;
    for (int64_t k0 = 0; k0 < K; k0 += KC) {
        const int64_t k1 = std::min(K, k0 + KC);
        int64_t i = 0;
        for (; i + 4 <= M; i += 4) {
            const T* __restrict a0 = A + (i + 0) * K;
            const T* __restrict a1 = A + (i + 1) * K;
            const T* __restrict a2 = A + (i + 2) * K;
            const T* __restrict a3 = A + (i + 3) * K;
            T* __restrict c0 = C + (i + 0) * N;
            T* __restrict c1 = C + (i + 1) * N;
            T* __restrict c2 = C + (i + 2) * N;
            T* __restrict c3 = C + (i + 3) * N;
            for (int64_t k = k0; k < k1; ++k) {
                const T v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
                const T* __restrict b = B + k * N;
                for (int64_t j = 0; j < N; ++j) {
                    const T bj = b[j];
                    c0[j] += v0 * bj;
                    c1[j] += v1 * bj;
                    c2[j] += v2 * bj;
                    c3[j] += v3 * bj;
                }
            }
        }
        for (; i < M; ++i) {
            const T* __restrict a = A + i * K;
            T* __restrict c = C + i * N;
            for (int64_t k = k0; k < k1; ++k) {
                const T av = a[k];
                const T* __restrict b = B + k * N;
                for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
            }
        }
    }
}

template <class T>
void transpose(int64_t R, int64_t C, const T* __restrict src, T* __restrict dst) {
    for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) dst[c * R + r] = src[r * C + c];
}

}  // namespace hsib
