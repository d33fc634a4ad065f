#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "roidiff/tensor.hpp"

namespace roidiff {

// Pairwise Pearson correlation across time for x {N,T}. Zero-variance ROIs
// correlate as 0 (diagonal stays 1). Requires T >= 3.
Tensor fc_matrix(const Tensor& x);

// Elementwise mean of per-session FC matrices.
Tensor group_fc(const std::vector<Tensor>& sessions);

struct FcError {
  double mae = 0.0;
  double rmse = 0.0;
  double mse = 0.0;  // reported alongside, some summaries quote MSE
};

// Off-diagonal upper-triangle error between two FC matrices.
FcError fc_error(const Tensor& a, const Tensor& b);

enum class TaskKind { Classification, Regression };

struct ProbeResult {
  std::string task;
  TaskKind kind = TaskKind::Classification;
  int folds = 0;
  uint64_t seed = 0;
  // classification
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  // regression
  double mse_mean = 0.0, mse_std = 0.0;
  double r_mean = 0.0, r_std = 0.0;
  std::vector<double> fold_primary;  // accuracy or r, per fold
};

// Stratified fold assignment at group granularity (classification strata by
// class, regression by target quantiles). Exposed so protocols comparing
// feature sets can share the exact same splits.
std::vector<std::vector<int>> stratified_folds(const std::vector<float>& labels,
                                               const std::vector<int>& groups, TaskKind kind,
                                               int folds, uint64_t seed);

// Ridge probe with stratified k-fold cross-validation. Feature
// standardization and the ridge strength (grid 1e-3..1e3, inner folds) are
// fit on training folds only; regression targets are standardized on
// training folds only. groups, when nonempty, keeps equal group ids in the
// same fold (e.g. windows of one session).
ProbeResult linear_probe(const Tensor& features /* {B,D} */, const std::vector<float>& labels,
                         TaskKind kind, int folds, uint64_t seed,
                         const std::vector<int>& groups = {});

}  // namespace roidiff
