#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "roidiff/session_io.hpp"
#include "roidiff/tensor.hpp"

namespace roidiff {

// Five state analogs and a binary diagnosis label set.
const std::vector<std::string>& state_names();      // rest, task, naturalistic, disease, sleep
const std::vector<std::string>& diagnosis_names();  // control, case

struct GeneratorConfig {
  int n_rois = 64;
  int session_length = 200;  // T_total
  int window = 40;           // T consumed downstream
  int n_networks = 4;        // block count; must divide n_rois
  int n_sessions = 2000;

  // planted metadata effects
  float age_smooth_effect = 0.35f;  // log length-scale shift per age z-score
  float sex_amp_ratio = 1.3f;       // network-0 amplitude multiplier for sex = 1
  float sex_speed_ratio = 0.55f;    // network-0 length-scale multiplier for sex = 1
  float diagnosis_delta = 0.30f;    // cross-network correlation shift for cases

  float noise_level = 0.60f;       // white observation noise sigma
  float base_length_scale = 3.0f;  // GP kernel length scale, in samples
  float missing_rate = 0.20f;      // per metadata field
  uint64_t seed = 1;

  void validate() const;
};

struct SessionRecord {
  ManifestEntry manifest;  // observed (possibly masked) metadata
  Tensor x;                // {N, T_total}, z-scored per ROI
};

struct GroundTruth {
  struct Latent {
    float age;
    int sex;
    int diagnosis;
    int state;
  };
  std::vector<Latent> latents;             // per session, unmasked
  std::vector<float> loadings;             // per-ROI mixing loadings
  std::vector<Tensor> cell_fc;             // [state*2 + diagnosis] -> {N,N} target FC
  int n_states = 0;

  const Tensor& cell(int state, int diagnosis) const { return cell_fc[state * 2 + diagnosis]; }
};

struct Corpus {
  GeneratorConfig cfg;
  std::vector<SessionRecord> sessions;
  GroundTruth gt;
};

// Network-level correlation matrix for a (state, diagnosis) cell; entries
// planted per state with the diagnosis delta applied on designated pairs.
// Throws invalid_argument when the configured delta breaks positive
// definiteness.
std::vector<double> network_corr(int state, int diagnosis, const GeneratorConfig& cfg);

// Analytic ROI-level FC implied by the mixing construction, marginalized
// over the sex distribution (50/50).
Tensor analytic_cell_fc(int state, int diagnosis, const GeneratorConfig& cfg,
                        const std::vector<float>& loadings);
// Same, for a fixed sex.
Tensor analytic_fc(int state, int diagnosis, int sex, const GeneratorConfig& cfg,
                   const std::vector<float>& loadings);

Corpus generate_corpus(const GeneratorConfig& cfg);

// Writes RTS1 sessions, manifest.jsonl, ground_truth.rta (+ latents in its
// config payload) into dir. Returns the manifest path.
std::filesystem::path write_corpus(const Corpus& corpus, const std::filesystem::path& dir);

// Loads just the ground truth back from a corpus directory.
GroundTruth load_ground_truth(const std::filesystem::path& dir);

// Fixed-size stratified subset of session indices drawn per state mixture
// (shares must sum to ~1). Deterministic in seed; throws ConfigError when a
// state pool cannot cover its share.
std::vector<int> state_mixture_split(const std::vector<ManifestEntry>& manifest,
                                     const std::map<std::string, double>& mixture, int budget,
                                     uint64_t seed);

}  // namespace roidiff
