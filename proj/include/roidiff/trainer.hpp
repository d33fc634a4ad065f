#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "roidiff/model.hpp"
#include "roidiff/schedule.hpp"
#include "roidiff/session_io.hpp"
#include "roidiff/tensor.hpp"

namespace roidiff {

enum class MissingLabelPolicy { Unconditional, Drop };

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 16;
  int epochs = 1;
  long max_steps = 0;  // 0: run epochs * ceil(windows/batch) steps
  uint64_t seed = 1;
  MissingLabelPolicy policy = MissingLabelPolicy::Unconditional;
  int window_stride = 0;      // 0 -> non-overlapping (stride = window length)
  bool strip_metadata = false;  // unconditional-pretraining ablation
  int checkpoint_every_epochs = 0;  // 0: only the final checkpoint

  std::string manifest_path;
  std::string checkpoint_path;
  std::string log_path;
};

struct RunLogRow {
  int epoch = 0;
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

void write_run_log(const std::filesystem::path& path, const std::vector<RunLogRow>& rows);

// In-memory training set: windows plus per-window condition records.
struct TrainingSet {
  std::vector<Tensor> windows;        // each {N, T}
  std::vector<MetadataRecord> records;
  std::vector<uint8_t> labeled;       // 0 when every metadata field is missing
  std::vector<int> session_of;        // provenance
};

// Loads sessions from a manifest and windows them. The label set for
// diagnosis resolution comes from the model's diagnosis_labels.
TrainingSet load_training_set(const std::filesystem::path& manifest_path,
                              const std::vector<std::string>& diagnosis_labels, int window,
                              int stride, const std::vector<int>& session_subset = {});

// AdamW with decoupled weight decay over a flat parameter store.
class AdamW {
 public:
  AdamW(size_t n, double lr, double wd, double beta1, double beta2, double eps);
  void step(std::vector<float>& w, const std::vector<float>& g);
  double lr;

 private:
  double wd_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

// v-prediction pretraining. Samples windows uniformly, one timestep per
// sample in [1, S], per-sample condition dropout with probability p_drop.
// Deterministic given cfg.seed. Throws on non-finite loss.
std::vector<RunLogRow> pretrain_loop(DitModel& model, const NoiseSchedule& sched,
                                     const TrainingSet& data, const TrainConfig& cfg);

// End-to-end: build model + schedule, load the manifest, train, write the
// checkpoint and run log when paths are set.
DitModel pretrain(const TrainConfig& cfg, std::vector<RunLogRow>* log_out = nullptr);

// Checkpoint archive: every parameter tensor plus model config, schedule
// length, diagnosis label set and age statistics in the header payload.
void save_checkpoint(const DitModel& model, const std::filesystem::path& path);
DitModel load_checkpoint(const std::filesystem::path& path);

// Age standardization statistics from the observed ages in a manifest.
AgeStats age_stats_from(const std::vector<ManifestEntry>& entries);

// Diagnosis label set: sorted unique observed labels, padded with synthetic
// names up to n; throws ConfigError when the manifest has more than n.
std::vector<std::string> diagnosis_labels_from(const std::vector<ManifestEntry>& entries,
                                               int n);

}  // namespace roidiff
