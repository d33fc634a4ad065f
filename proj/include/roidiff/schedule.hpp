#pragma once

#include <utility>
#include <vector>

#include "roidiff/tensor.hpp"

namespace roidiff {

// Precomputed variance-preserving schedule coefficients. alpha_bar is
// tabulated at S+1 points with alpha_bar[0] = 1 so t = 0 denotes the clean
// signal. Immutable after construction; safe to share across threads.
struct NoiseSchedule {
  int steps = 0;                  // S
  std::vector<double> alpha_bar;  // length S+1, strictly decreasing, in (0, 1]
  std::vector<double> alpha;      // sqrt(alpha_bar)
  std::vector<double> sigma;      // sqrt(1 - alpha_bar)

  float alpha_f(int t) const { return static_cast<float>(alpha[check_t(t)]); }
  float sigma_f(int t) const { return static_cast<float>(sigma[check_t(t)]); }
  int check_t(int t) const;
};

// Cosine schedule: abar(t) = f(t/S)/f(0), f(u) = cos^2(((u + s)/(1 + s)) * pi/2)
// with offset s = 0.008, clamped to [1e-5, 1]. Where the clamp would create
// ties at the tail, entries are nudged down by a relative 1e-6 per step to
// keep alpha_bar strictly decreasing.
NoiseSchedule cosine_schedule(int steps);

struct NoisedSample {
  Tensor x_t;
  int t = 0;
  Tensor eps;  // the Gaussian draw, retained for target computation
};

// x_t = alpha[t] * x0 + sigma[t] * eps. Accepts t in [0, S]; t = 0 returns
// x0 unchanged.
NoisedSample forward_noise(const Tensor& x0, int t, const Tensor& eps,
                           const NoiseSchedule& sched);

// v = alpha[t] * eps - sigma[t] * x0
Tensor v_target(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched);

// Algebraic inverse of (forward_noise, v_target):
//   x0_hat  = alpha[t] * x_t - sigma[t] * v
//   eps_hat = sigma[t] * x_t + alpha[t] * v
std::pair<Tensor, Tensor> recover_x0_eps(const Tensor& x_t, const Tensor& v, int t,
                                         const NoiseSchedule& sched);

// Mean squared error over all elements.
double diffusion_loss(const Tensor& v_hat, const Tensor& v);

}  // namespace roidiff
