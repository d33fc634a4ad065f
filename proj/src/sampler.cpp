#include "roidiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "roidiff/errors.hpp"
#include "roidiff/rng.hpp"

namespace roidiff {

namespace {

// descending timestep subsequence S = t_0 > t_1 > ... > t_{n-1} >= 1
std::vector<int> timestep_sequence(int steps, int n_steps) {
  if (n_steps <= 0 || n_steps >= steps) {
    std::vector<int> seq(steps);
    for (int i = 0; i < steps; ++i) seq[i] = steps - i;
    return seq;
  }
  std::vector<int> seq;
  seq.reserve(n_steps);
  for (int i = 0; i < n_steps; ++i) {
    double u = n_steps == 1 ? 0.0 : static_cast<double>(i) / (n_steps - 1);
    int t = static_cast<int>(std::lround(steps - u * (steps - 1)));
    if (seq.empty() || t < seq.back()) seq.push_back(t);
  }
  if (seq.back() != 1) seq.push_back(1);
  return seq;
}

}  // namespace

Tensor sample(const DitModel& model, const NoiseSchedule& sched, int batch,
              const std::vector<const MetadataRecord*>& conds, const SampleOptions& opt) {
  const ModelConfig& cfg = model.config();
  if (sched.steps != cfg.steps)
    throw CheckpointError("sample: schedule length does not match the checkpoint");
  if (batch < 1) throw std::invalid_argument("sample: batch must be >= 1");
  if (!conds.empty() && static_cast<int>(conds.size()) != batch)
    throw std::invalid_argument("sample: conds must be empty or one per sample");
  if (opt.guidance < 0.0f) throw std::invalid_argument("sample: guidance must be >= 0");

  const int N = cfg.n_rois, T = cfg.n_timepoints;
  const size_t sig = static_cast<size_t>(N) * T;
  const bool conditioned = !conds.empty();
  const bool cfg_mix = conditioned && opt.guidance != 1.0f;

  Rng rng(derive_seed(opt.seed, 0x5a3f));
  Tensor x({batch, N, T});
  rng.fill_normal(x.data(), x.numel());

  std::vector<const MetadataRecord*> uncond(batch, nullptr);
  std::vector<int> seq = timestep_sequence(sched.steps, opt.n_steps);

  Tensor x0_hat({batch, N, T});
  for (size_t si = 0; si < seq.size(); ++si) {
    const int t = seq[si];
    const int t_prev = (si + 1 < seq.size()) ? seq[si + 1] : 0;
    std::vector<int> ts(batch, t);

    Tensor v_hat = conditioned ? model.forward(x, ts, conds, {}, nullptr)
                               : model.forward(x, ts, uncond, {}, nullptr);
    if (cfg_mix) {
      Tensor v_u = model.forward(x, ts, uncond, {}, nullptr);
      for (size_t i = 0; i < v_hat.numel(); ++i)
        v_hat.data()[i] = v_u.data()[i] + opt.guidance * (v_hat.data()[i] - v_u.data()[i]);
    }

    const float a = sched.alpha_f(t), s = sched.sigma_f(t);
    for (size_t i = 0; i < x.numel(); ++i) {
      float v0 = a * x.data()[i] - s * v_hat.data()[i];
      if (opt.clip_x0 > 0.0f) v0 = std::clamp(v0, -opt.clip_x0, opt.clip_x0);
      x0_hat.data()[i] = v0;
    }

    const double ab_t = sched.alpha_bar[t];
    const double ab_p = sched.alpha_bar[t_prev];
    const double beta = 1.0 - ab_t / ab_p;
    const float c0 = static_cast<float>(std::sqrt(ab_p) * beta / (1.0 - ab_t));
    const float ct = static_cast<float>(std::sqrt(ab_t / ab_p) * (1.0 - ab_p) / (1.0 - ab_t));
    const double post_var = beta * (1.0 - ab_p) / (1.0 - ab_t);
    const float noise_scale = t_prev > 0 ? static_cast<float>(std::sqrt(std::max(post_var, 0.0))) : 0.0f;

    for (size_t i = 0; i < x.numel(); ++i) {
      float mean = c0 * x0_hat.data()[i] + ct * x.data()[i];
      float z = noise_scale > 0.0f ? noise_scale * static_cast<float>(rng.normal()) : 0.0f;
      x.data()[i] = mean + z;
    }
    for (size_t i = 0; i < x.numel(); ++i)
      if (!std::isfinite(x.data()[i]))
        throw std::runtime_error("sample: non-finite state at t=" + std::to_string(t));
  }
  return x;
}

FidelityReport fidelity_protocol(const DitModel& model, const NoiseSchedule& sched,
                                 const std::vector<Tensor>& cohort_windows,
                                 const std::vector<MetadataRecord>& cohort_meta,
                                 int n_virtual, uint64_t seed, const SampleOptions& opt) {
  if (cohort_windows.empty() || cohort_meta.empty())
    throw std::invalid_argument("fidelity_protocol: empty cohort");
  if (n_virtual < 1) throw std::invalid_argument("fidelity_protocol: n_virtual must be >= 1");
  const ModelConfig& cfg = model.config();

  FidelityReport rep;
  rep.empirical = group_fc(cohort_windows);

  auto arm_error = [&](const Tensor& g) {
    FidelityArm arm;
    arm.group = g;
    arm.error = fc_error(g, rep.empirical);
    return arm;
  };

  // random-signal arm: white Gaussian windows
  {
    std::vector<Tensor> noise;
    Rng rng(derive_seed(seed, 0xa0a0));
    for (int i = 0; i < n_virtual; ++i) {
      Tensor w({cfg.n_rois, cfg.n_timepoints});
      rng.fill_normal(w.data(), w.numel());
      noise.push_back(std::move(w));
    }
    rep.random = arm_error(group_fc(noise));
  }

  const size_t sig = static_cast<size_t>(cfg.n_rois) * cfg.n_timepoints;
  auto split_batch = [&](const Tensor& batch) {
    std::vector<Tensor> out;
    for (long b = 0; b < batch.dim(0); ++b) {
      Tensor w({cfg.n_rois, cfg.n_timepoints});
      std::copy(batch.data() + b * sig, batch.data() + (b + 1) * sig, w.data());
      out.push_back(std::move(w));
    }
    return out;
  };

  const int chunk = 50;
  // unconditional arm
  {
    std::vector<Tensor> gen;
    for (int start = 0; start < n_virtual; start += chunk) {
      int bs = std::min(chunk, n_virtual - start);
      SampleOptions o = opt;
      o.seed = derive_seed(seed, 0xdcb1, static_cast<uint64_t>(start));
      Tensor batch = sample(model, sched, bs, {}, o);
      auto ws = split_batch(batch);
      for (auto& w : ws) gen.push_back(std::move(w));
    }
    rep.unconditional = arm_error(group_fc(gen));
  }
  // conditional arm: metadata records cycled from the cohort
  {
    std::vector<Tensor> gen;
    for (int start = 0; start < n_virtual; start += chunk) {
      int bs = std::min(chunk, n_virtual - start);
      std::vector<const MetadataRecord*> conds(bs);
      for (int b = 0; b < bs; ++b)
        conds[b] = &cohort_meta[(start + b) % cohort_meta.size()];
      SampleOptions o = opt;
      o.seed = derive_seed(seed, 0xc0d1, static_cast<uint64_t>(start));
      Tensor batch = sample(model, sched, bs, conds, o);
      auto ws = split_batch(batch);
      for (auto& w : ws) gen.push_back(std::move(w));
    }
    rep.conditional = arm_error(group_fc(gen));
  }
  return rep;
}

}  // namespace roidiff
