#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "roidiff/evalmetrics.hpp"
#include "roidiff/model.hpp"
#include "roidiff/schedule.hpp"
#include "roidiff/tensor.hpp"

namespace roidiff {

struct ExtractionSpec {
  std::vector<int> timesteps;  // ordered, values in [0, S]; t = 0 means clean input
  std::vector<int> layers;     // 1-based block indices, ascending
  uint64_t noise_seed = 0;
  bool use_metadata = false;  // default: null condition, so probes see no labels

  int slots() const { return static_cast<int>(timesteps.size() * layers.size()); }
  void validate(const ModelConfig& cfg) const;
  // default: timesteps {0,50,100,150} (clamped into [0,S]), last 4 blocks
  static ExtractionSpec defaults(const ModelConfig& cfg, uint64_t noise_seed);
};

struct FeatureBank {
  Tensor e;                                // {B, Q, D}
  std::vector<std::pair<int, int>> slots;  // (t, layer) per slot, timestep-major
  std::vector<std::string> window_ids;     // provenance, one per row
  std::vector<int> groups;                 // session index per row (fold grouping)
};

// Noise x0 at each spec timestep (shared eps per timestep per window, drawn
// from noise_seed), capture the spec layers, mean-pool tokens, concatenate
// slot vectors timestep-major.
FeatureBank extract_features(const DitModel& model, const NoiseSchedule& sched,
                             const std::vector<Tensor>& windows /* each {N,T} */,
                             const std::vector<const MetadataRecord*>& conds,
                             const ExtractionSpec& spec);

// Single-head cross-attention aggregator: a learnable query against key/value
// projections of the bank slots, plus an output projection.
struct AggregatorState {
  int dim = 0;
  std::vector<float> q;       // D
  std::vector<float> wk, wv;  // D x D
  std::vector<float> wo;      // D x D
  std::vector<float> bo;      // D

  AggregatorState() = default;
  AggregatorState(int dim, uint64_t seed);
};

// Returns (z {B,D}, w {B,Q}); each weight row is a probability vector.
std::pair<Tensor, Tensor> aggregate(const FeatureBank& bank, const AggregatorState& agg);

struct ContributionReport {
  std::vector<std::pair<int, int>> slots;
  std::vector<double> mean_weight;          // per slot, mean over samples
  std::vector<double> timestep_marginal;    // per unique timestep (sums to 1)
  std::vector<double> layer_marginal;       // per unique layer (sums to 1)
  std::vector<int> timesteps, layers;       // the unique values, in slot order
  // raw softmax means renormalized within each marginal are identical to the
  // sums above (weights already sum to 1); kept separately for the CSV
};

ContributionReport contribution_report(const Tensor& w /* {B,Q} */,
                                       const std::vector<std::pair<int, int>>& slots);

// Frozen-backbone downstream head: aggregator + linear layer trained jointly
// on an extracted bank (featured in the probe CLI as --finetune-agg).
struct FinetuneOptions {
  int folds = 5;
  uint64_t seed = 0;
  int epochs = 300;
  int batch = 64;
  double lr = 3e-3;
  double weight_decay = 1e-4;
};

ProbeResult finetune_probe(const FeatureBank& bank, const std::vector<float>& labels,
                           TaskKind kind, const FinetuneOptions& opt);

// Fit on all rows (no CV) and return the trained aggregator along with its
// attention weights over the (standardized) bank. Feeds the contribution
// analysis.
struct TrainedAggregator {
  AggregatorState agg;
  Tensor weights;  // {B,Q}
};
TrainedAggregator finetune_aggregator_full(const FeatureBank& bank,
                                           const std::vector<float>& labels, TaskKind kind,
                                           const FinetuneOptions& opt);

}  // namespace roidiff
