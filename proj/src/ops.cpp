#include "roidiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace roidiff::ops {

void matmul(const float* A, const float* B, float* C, int M, int K, int N) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    float* c = C + static_cast<size_t>(i) * N;
    std::memset(c, 0, sizeof(float) * N);
    const float* a = A + static_cast<size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      float av = a[k];
      const float* b = B + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

void matmul_acc(const float* A, const float* B, float* C, int M, int K, int N) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    float* c = C + static_cast<size_t>(i) * N;
    const float* a = A + static_cast<size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      float av = a[k];
      const float* b = B + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

void matmul_nt(const float* A, const float* B, float* C, int M, int N, int K) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    const float* a = A + static_cast<size_t>(i) * N;
    float* c = C + static_cast<size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const float* b = B + static_cast<size_t>(k) * N;
      float acc = 0.0f;
      for (int j = 0; j < N; ++j) acc += a[j] * b[j];
      c[k] = acc;
    }
  }
}

void matmul_tn_acc(const float* A, const float* B, float* C, int M, int K, int N) {
  // Each thread owns a contiguous range of output rows k; the reduction over
  // m stays serial per row. m is blocked so the B tile stays cache-resident.
  constexpr int kBlock = 64;
#pragma omp parallel
  {
#ifdef _OPENMP
    int nt = omp_get_num_threads();
    int tid = omp_get_thread_num();
#else
    int nt = 1, tid = 0;
#endif
    int k0 = static_cast<int>(static_cast<long>(K) * tid / nt);
    int k1 = static_cast<int>(static_cast<long>(K) * (tid + 1) / nt);
    for (int m0 = 0; m0 < M; m0 += kBlock) {
      int m1 = std::min(m0 + kBlock, M);
      for (int k = k0; k < k1; ++k) {
        float* c = C + static_cast<size_t>(k) * N;
        for (int m = m0; m < m1; ++m) {
          float av = A[static_cast<size_t>(m) * K + k];
          if (av == 0.0f) continue;
          const float* b = B + static_cast<size_t>(m) * N;
          for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
      }
    }
  }
}

void linear(const float* X, const float* W, const float* b, float* Y, int M, int K, int N) {
  matmul(X, W, Y, M, K, N);
  if (b) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < M; ++i) {
      float* y = Y + static_cast<size_t>(i) * N;
      for (int j = 0; j < N; ++j) y[j] += b[j];
    }
  }
}

void linear_backward(const float* X, const float* W, const float* dY, float* dX,
                     float* dW, float* db, int M, int K, int N) {
  if (dX) matmul_nt(dY, W, dX, M, N, K);
  if (dW) matmul_tn_acc(X, dY, dW, M, K, N);
  if (db) {
    for (int i = 0; i < M; ++i) {
      const float* dy = dY + static_cast<size_t>(i) * N;
      for (int j = 0; j < N; ++j) db[j] += dy[j];
    }
  }
}

void layernorm(const float* X, float* Y, float* mean, float* rstd, int R, int C, float eps) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < R; ++r) {
    const float* x = X + static_cast<size_t>(r) * C;
    float* y = Y + static_cast<size_t>(r) * C;
    float m = 0.0f;
    for (int c = 0; c < C; ++c) m += x[c];
    m /= C;
    float var = 0.0f;
    for (int c = 0; c < C; ++c) {
      float d = x[c] - m;
      var += d * d;
    }
    var /= C;
    float rs = 1.0f / std::sqrt(var + eps);
    if (mean) mean[r] = m;
    if (rstd) rstd[r] = rs;
    for (int c = 0; c < C; ++c) y[c] = (x[c] - m) * rs;
  }
}

void layernorm_backward(const float* dY, const float* X, const float* mean,
                        const float* rstd, float* dX, int R, int C) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < R; ++r) {
    const float* dy = dY + static_cast<size_t>(r) * C;
    const float* x = X + static_cast<size_t>(r) * C;
    float* dx = dX + static_cast<size_t>(r) * C;
    float m = mean[r], rs = rstd[r];
    float dmean = 0.0f, dnorm = 0.0f;
    for (int c = 0; c < C; ++c) {
      float n = (x[c] - m) * rs;
      dmean += dy[c];
      dnorm += dy[c] * n;
    }
    dmean /= C;
    dnorm /= C;
    for (int c = 0; c < C; ++c) {
      float n = (x[c] - m) * rs;
      dx[c] += (dy[c] - dmean - n * dnorm) * rs;
    }
  }
}

void softmax(const float* X, float* Y, int rows, int cols) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const float* x = X + static_cast<size_t>(r) * cols;
    float* y = Y + static_cast<size_t>(r) * cols;
    float mx = x[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    float sum = 0.0f;
    for (int c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    float inv = 1.0f / sum;
    for (int c = 0; c < cols; ++c) y[c] *= inv;
  }
}

void softmax_backward(const float* dY, const float* Y, float* dX, int rows, int cols) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const float* dy = dY + static_cast<size_t>(r) * cols;
    const float* y = Y + static_cast<size_t>(r) * cols;
    float* dx = dX + static_cast<size_t>(r) * cols;
    float dot = 0.0f;
    for (int c = 0; c < cols; ++c) dot += dy[c] * y[c];
    for (int c = 0; c < cols; ++c) dx[c] = y[c] * (dy[c] - dot);
  }
}

namespace {
constexpr float kGeluC = 0.044715f;
const float kGeluP = std::sqrt(2.0f / static_cast<float>(M_PI));
}  // namespace

void gelu_tanh(const float* X, float* Y, size_t n) {
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    float x = X[i];
    Y[i] = 0.5f * x * (1.0f + std::tanh(kGeluP * (x + kGeluC * x * x * x)));
  }
}

void gelu_tanh_backward(const float* dY, const float* X, float* dX, size_t n) {
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    float x = X[i];
    float u = kGeluP * (x + kGeluC * x * x * x);
    float t = std::tanh(u);
    float du = kGeluP * (1.0f + 3.0f * kGeluC * x * x);
    float grad = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
    dX[i] = dY[i] * grad;
  }
}

void silu(const float* X, float* Y, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    float s = 1.0f / (1.0f + std::exp(-X[i]));
    Y[i] = X[i] * s;
  }
}

void silu_backward_acc(const float* dY, const float* X, float* dX, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    float s = 1.0f / (1.0f + std::exp(-X[i]));
    dX[i] += dY[i] * s * (1.0f + X[i] * (1.0f - s));
  }
}

void attention(const float* Q, const float* K, const float* V, float* A, float* O,
               int L, int H, int hd, int qkv_stride) {
  const int D = H * hd;
  const int ld = qkv_stride;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
#pragma omp parallel for schedule(static) collapse(2)
  for (int h = 0; h < H; ++h) {
    for (int t = 0; t < L; ++t) {
      const float* q = Q + static_cast<size_t>(t) * ld + h * hd;
      float* arow = A + (static_cast<size_t>(h) * L + t) * L;
      float mx = -INFINITY;
      for (int l = 0; l < L; ++l) {
        const float* k = K + static_cast<size_t>(l) * ld + h * hd;
        float dot = 0.0f;
        for (int d = 0; d < hd; ++d) dot += q[d] * k[d];
        dot *= scale;
        arow[l] = dot;
        mx = std::max(mx, dot);
      }
      float sum = 0.0f;
      for (int l = 0; l < L; ++l) {
        arow[l] = std::exp(arow[l] - mx);
        sum += arow[l];
      }
      float inv = 1.0f / sum;
      for (int l = 0; l < L; ++l) arow[l] *= inv;

      float* o = O + static_cast<size_t>(t) * D + h * hd;
      for (int d = 0; d < hd; ++d) o[d] = 0.0f;
      for (int l = 0; l < L; ++l) {
        const float* v = V + static_cast<size_t>(l) * ld + h * hd;
        float a = arow[l];
        for (int d = 0; d < hd; ++d) o[d] += a * v[d];
      }
    }
  }
}

void attention_backward(const float* Q, const float* K, const float* V, const float* A,
                        const float* dO, float* dQ, float* dK, float* dV, float* dA_scratch,
                        int L, int H, int hd, int qkv_stride) {
  const int D = H * hd;
  const int ld = qkv_stride;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  // dV and dK accumulate across query positions t, so parallelism is over
  // heads only; rows of different heads never alias.
#pragma omp parallel for schedule(static)
  for (int h = 0; h < H; ++h) {
    float* dS = dA_scratch + static_cast<size_t>(h) * L;  // one row of scratch per head
    for (int t = 0; t < L; ++t) {
      const float* arow = A + (static_cast<size_t>(h) * L + t) * L;
      const float* dout = dO + static_cast<size_t>(t) * D + h * hd;

      // dA[l] = dO . V_l ; dV_l += A[l] * dO
      float dot_a = 0.0f;
      for (int l = 0; l < L; ++l) {
        const float* v = V + static_cast<size_t>(l) * ld + h * hd;
        float* dv = dV + static_cast<size_t>(l) * ld + h * hd;
        float da = 0.0f;
        float a = arow[l];
        for (int d = 0; d < hd; ++d) {
          da += dout[d] * v[d];
          dv[d] += a * dout[d];
        }
        dS[l] = da;
        dot_a += da * a;
      }
      // softmax backward: dS = A .* (dA - sum(dA .* A))
      for (int l = 0; l < L; ++l) dS[l] = arow[l] * (dS[l] - dot_a);

      // dQ_t += scale * sum_l dS[l] K_l ; dK_l += scale * dS[l] Q_t
      const float* q = Q + static_cast<size_t>(t) * ld + h * hd;
      float* dq = dQ + static_cast<size_t>(t) * ld + h * hd;
      for (int l = 0; l < L; ++l) {
        const float* k = K + static_cast<size_t>(l) * ld + h * hd;
        float* dk = dK + static_cast<size_t>(l) * ld + h * hd;
        float ds = dS[l] * scale;
        for (int d = 0; d < hd; ++d) {
          dq[d] += ds * k[d];
          dk[d] += ds * q[d];
        }
      }
    }
  }
}

}  // namespace roidiff::ops
