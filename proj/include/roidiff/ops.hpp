#pragma once

#include <cstddef>

namespace roidiff::ops {

// Dense kernels over row-major float buffers. Parallel loops are arranged so
// every output element is reduced serially in a fixed order, which keeps
// results bitwise identical for any OpenMP thread count.

// C[M,N] = A[M,K] @ B[K,N]
void matmul(const float* A, const float* B, float* C, int M, int K, int N);
// C[M,N] += A[M,K] @ B[K,N]
void matmul_acc(const float* A, const float* B, float* C, int M, int K, int N);
// C[M,K] = A[M,N] @ B[K,N]^T
void matmul_nt(const float* A, const float* B, float* C, int M, int N, int K);
// C[K,N] += A[M,K]^T @ B[M,N]
void matmul_tn_acc(const float* A, const float* B, float* C, int M, int K, int N);

// Y[M,N] = X[M,K] @ W[K,N] + b[N]  (b may be null)
void linear(const float* X, const float* W, const float* b, float* Y, int M, int K, int N);
// Backward of linear: dX[M,K] = dY @ W^T, dW[K,N] += X^T @ dY, db[N] += colsum(dY).
// dX may be null (inputs that need no gradient); db may be null.
void linear_backward(const float* X, const float* W, const float* dY, float* dX,
                     float* dW, float* db, int M, int K, int N);

// Per-row layernorm over the last dimension, no affine parameters.
// mean/rstd are per-row buffers of length R, saved for backward.
void layernorm(const float* X, float* Y, float* mean, float* rstd, int R, int C, float eps);
void layernorm_backward(const float* dY, const float* X, const float* mean,
                        const float* rstd, float* dX, int R, int C);

// Row-wise softmax over the last dimension.
void softmax(const float* X, float* Y, int rows, int cols);
// dX = Y .* (dY - rowsum(dY .* Y))
void softmax_backward(const float* dY, const float* Y, float* dX, int rows, int cols);

// Elementwise activations. Backward takes the forward *input*.
void gelu_tanh(const float* X, float* Y, size_t n);
void gelu_tanh_backward(const float* dY, const float* X, float* dX, size_t n);
void silu(const float* X, float* Y, size_t n);
// dX += dY * silu'(X)
void silu_backward_acc(const float* dY, const float* X, float* dX, size_t n);

// Multi-head self-attention over one already-projected sequence.
// Q,K,V point into rows of length qkv_stride (so a packed [q|k|v] buffer
// works directly); head h occupies columns [h*hd, (h+1)*hd) of each row.
// A (saved for backward): [H, L, L] softmax probabilities. O: [L, H*hd].
// dA_scratch: [H, L]. dQ/dK/dV accumulate.
void attention(const float* Q, const float* K, const float* V, float* A, float* O,
               int L, int H, int hd, int qkv_stride);
void attention_backward(const float* Q, const float* K, const float* V, const float* A,
                        const float* dO, float* dQ, float* dK, float* dV, float* dA_scratch,
                        int L, int H, int hd, int qkv_stride);

}  // namespace roidiff::ops
