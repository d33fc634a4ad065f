#pragma once

#include <cstdint>
#include <vector>

#include "roidiff/evalmetrics.hpp"
#include "roidiff/model.hpp"
#include "roidiff/schedule.hpp"
#include "roidiff/tensor.hpp"

namespace roidiff {

struct SampleOptions {
  int n_steps = 0;          // 0 (or >= S) runs all S ancestral steps
  float guidance = 1.0f;    // 1.0 = plain conditional sampling (no CFG extrapolation)
  float clip_x0 = 8.0f;     // clamp for the denoised estimate; <= 0 disables
  uint64_t seed = 0;
};

// Ancestral DDPM sampling with the v-parameterization and the small-variance
// posterior. When n_steps < S the chain runs over an evenly strided
// descending timestep subsequence (posterior ratios use the tabulated
// alpha_bar values). conds empty means unconditional; otherwise one record
// pointer per sample (nullptr entries sample unconditionally). With a
// condition and guidance != 1, v = v_uncond + guidance * (v_cond - v_uncond).
Tensor sample(const DitModel& model, const NoiseSchedule& sched, int batch,
              const std::vector<const MetadataRecord*>& conds, const SampleOptions& opt);

struct FidelityArm {
  FcError error;
  Tensor group;  // group FC of the arm's cohort
};

struct FidelityReport {
  FidelityArm random;         // white-noise signals
  FidelityArm unconditional;  // plain unconditional samples
  FidelityArm conditional;    // samples conditioned on the cohort's metadata
  Tensor empirical;           // group FC of the empirical cohort
};

// Three-arm generative fidelity comparison against an empirical cohort of
// windows. All arms generate exactly n_virtual windows. A degenerate
// (e.g. untrained) model is reported, not an error.
FidelityReport fidelity_protocol(const DitModel& model, const NoiseSchedule& sched,
                                 const std::vector<Tensor>& cohort_windows,
                                 const std::vector<MetadataRecord>& cohort_meta,
                                 int n_virtual, uint64_t seed, const SampleOptions& opt);

}  // namespace roidiff
