#include "roidiff/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace roidiff {

int NoiseSchedule::check_t(int t) const {
  if (t < 0 || t > steps) throw std::invalid_argument("timestep out of [0, S]");
  return t;
}

NoiseSchedule cosine_schedule(int steps) {
  if (steps < 1) throw std::invalid_argument("cosine_schedule: steps must be >= 1");

  constexpr double kOffset = 0.008;
  constexpr double kFloor = 1e-5;
  auto f = [&](double u) {
    double c = std::cos(((u + kOffset) / (1.0 + kOffset)) * M_PI / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);

  NoiseSchedule s;
  s.steps = steps;
  s.alpha_bar.resize(steps + 1);
  s.alpha.resize(steps + 1);
  s.sigma.resize(steps + 1);

  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= steps; ++t) {
    double ab = f(static_cast<double>(t) / steps) / f0;
    ab = std::min(std::max(ab, kFloor), 1.0);
    // keep the sequence strictly decreasing when the floor clamp flattens it
    if (ab >= s.alpha_bar[t - 1]) ab = s.alpha_bar[t - 1] * (1.0 - 1e-6);
    s.alpha_bar[t] = ab;
  }
  for (int t = 0; t <= steps; ++t) {
    s.alpha[t] = std::sqrt(s.alpha_bar[t]);
    s.sigma[t] = std::sqrt(1.0 - s.alpha_bar[t]);
  }
  return s;
}

namespace {

// out = a * x + b * y, elementwise, in 32-bit arithmetic
Tensor axpby(float a, const Tensor& x, float b, const Tensor& y) {
  Tensor out(x.shape());
  const float* px = x.data();
  const float* py = y.data();
  float* po = out.data();
  size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) po[i] = a * px[i] + b * py[i];
  return out;
}

}  // namespace

NoisedSample forward_noise(const Tensor& x0, int t, const Tensor& eps,
                           const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "forward_noise");
  sched.check_t(t);
  NoisedSample out;
  out.t = t;
  out.eps = eps;
  out.x_t = axpby(sched.alpha_f(t), x0, sched.sigma_f(t), eps);
  return out;
}

Tensor v_target(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "v_target");
  sched.check_t(t);
  return axpby(sched.alpha_f(t), eps, -sched.sigma_f(t), x0);
}

std::pair<Tensor, Tensor> recover_x0_eps(const Tensor& x_t, const Tensor& v, int t,
                                         const NoiseSchedule& sched) {
  require_same_shape(x_t, v, "recover_x0_eps");
  sched.check_t(t);
  float a = sched.alpha_f(t);
  float s = sched.sigma_f(t);
  return {axpby(a, x_t, -s, v), axpby(s, x_t, a, v)};
}

double diffusion_loss(const Tensor& v_hat, const Tensor& v) {
  require_same_shape(v_hat, v, "diffusion_loss");
  const float* a = v_hat.data();
  const float* b = v.data();
  size_t n = v.numel();
  if (n == 0) throw std::invalid_argument("diffusion_loss: empty input");
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(n);
}

}  // namespace roidiff
