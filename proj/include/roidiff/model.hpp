#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "roidiff/tensor.hpp"

namespace roidiff {

struct ModelConfig {
  int n_rois = 64;        // N
  int n_timepoints = 40;  // T (window length)
  int patch = 4;          // p
  int embed_dim = 128;    // D
  int n_layers = 6;       // K
  int n_heads = 4;        // H
  int cond_dim = 64;      // d_c
  float p_drop = 0.1f;
  int steps = 1000;       // S (schedule length the model was trained with)
  int n_diagnoses = 2;    // size of the diagnosis label set
  int freq_dim = 256;     // sinusoidal width feeding the timestep encoder

  int grid_rows() const { return n_rois / patch; }
  int grid_cols() const { return n_timepoints / patch; }
  int tokens() const { return grid_rows() * grid_cols(); }  // L = (N/p)*(T/p)
  int patch_elems() const { return patch * patch; }
  // [age, age_flag, sex one-hot (2), sex_flag, diag one-hot, diag_flag]
  int tab_width() const { return 6 + n_diagnoses; }
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct MetadataRecord {
  std::optional<float> age;      // years
  std::optional<int> sex;        // 0 or 1
  std::optional<int> diagnosis;  // id into the label set
  bool fully_missing() const { return !age && !sex && !diagnosis; }
};

struct AgeStats {
  float mean = 0.0f;
  float stddev = 1.0f;
};

// Flat parameter/gradient storage with a named-segment registry. Segment
// order is fixed by construction order, which pins the checkpoint layout.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::vector<long> shape;
    size_t offset = 0;
    size_t size = 0;
  };

  int add(const std::string& name, std::vector<long> shape);
  void finalize();  // allocates storage once all entries are registered

  float* param(int id) { return weights_.data() + entries_[id].offset; }
  const float* param(int id) const { return weights_.data() + entries_[id].offset; }
  float* grad(int id) { return grads_.data() + entries_[id].offset; }
  const Entry& entry(int id) const { return entries_[id]; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<float>& weights() { return weights_; }
  const std::vector<float>& weights() const { return weights_; }
  std::vector<float>& grads() { return grads_; }
  const std::vector<float>& grads() const { return grads_; }
  size_t size() const { return weights_.size(); }
  void zero_grad();
  int find(const std::string& name) const;  // -1 when absent

 private:
  std::vector<Entry> entries_;
  std::vector<float> weights_;
  std::vector<float> grads_;
  bool finalized_ = false;
};

// Activations saved by a training-mode forward pass, consumed by backward().
struct ForwardCache {
  int batch = 0;
  std::vector<int> t;
  std::vector<uint8_t> use_null;  // per sample: condition replaced by null embedding

  std::vector<float> patches;  // B*L*p2 raw input patches
  std::vector<float> tokens;   // B*L*D after embed + posenc (input to block 0)

  // condition path
  std::vector<float> sin_emb;           // B*F
  std::vector<float> t_h1, t_h1_act;    // B*d_c
  std::vector<float> tab;               // B*tabw (zeroed rows for null samples)
  std::vector<float> c_h1, c_h1_act;    // B*d_c
  std::vector<float> y, silu_y;         // B*d_c

  struct Block {
    std::vector<float> mod;                  // B*6D
    std::vector<float> ln1_mean, ln1_rstd;   // B*L
    std::vector<float> m1;                   // B*L*D
    std::vector<float> qkv;                  // B*L*3D
    std::vector<float> attn_probs;           // B*H*L*L
    std::vector<float> attn_cat;             // B*L*D
    std::vector<float> attn_out;             // B*L*D
    std::vector<float> x_mid;                // B*L*D
    std::vector<float> ln2_mean, ln2_rstd;   // B*L
    std::vector<float> m2;                   // B*L*D
    std::vector<float> mlp_pre;              // B*L*4D
    std::vector<float> mlp_out;              // B*L*D
    std::vector<float> x_out;                // B*L*D
  };
  std::vector<Block> blocks;

  std::vector<float> fmod;                 // B*2D final modulation
  std::vector<float> lnf_mean, lnf_rstd;   // B*L
  std::vector<float> mf;                   // B*L*D
};

// Patchified Diffusion Transformer denoiser with AdaLN-Zero conditioning.
class DitModel {
 public:
  DitModel(ModelConfig cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  AgeStats age_stats;                         // corpus statistics, stored in checkpoints
  std::vector<std::string> diagnosis_labels;  // label-set order defines diagnosis ids

  // --- patch machinery ---------------------------------------------------
  // x {B,N,T} -> value grid {B,L,p^2}; pure layout transform.
  static Tensor extract_patches(const Tensor& x, const ModelConfig& cfg);
  // exact inverse of extract_patches (bitwise)
  static Tensor unpatchify(const Tensor& grid, const ModelConfig& cfg);
  // x {B,N,T} -> embedded tokens {B,L,D} with the fixed 2-D sinusoidal
  // positional encoding added
  Tensor patchify(const Tensor& x) const;
  const std::vector<float>& positional_encoding() const { return posenc_; }

  // --- condition encoders --------------------------------------------------
  std::vector<float> metadata_tabular(const MetadataRecord& rec) const;
  Tensor metadata_encode(const MetadataRecord& rec) const;  // f_phi(c) -> d_c
  Tensor timestep_embed(int t) const;                       // -> d_c

  // --- denoiser ------------------------------------------------------------
  // x_t {B,N,T}; t: one timestep per sample; cond[b] == nullptr means
  // unconditional; drop_condition[b] forces the null embedding. cache may be
  // null for inference. capture_layers uses 1-based block indices; captured
  // post-block hidden states {B,L,D} land in *hidden_out.
  Tensor forward(const Tensor& x_t, const std::vector<int>& t,
                 const std::vector<const MetadataRecord*>& cond,
                 const std::vector<uint8_t>& drop_condition, ForwardCache* cache,
                 const std::set<int>& capture_layers = {},
                 std::map<int, Tensor>* hidden_out = nullptr) const;

  // Convenience single-sample forward (cond may be null).
  Tensor forward_one(const Tensor& x_t, int t, const MetadataRecord* cond) const;

  // Accumulates parameter gradients for d(loss)/d(v_hat). Must be paired
  // with the cache produced by the forward pass.
  void backward(const Tensor& dv_hat, const ForwardCache& cache);

  void zero_grad() { params_.zero_grad(); }

  // Randomizes every parameter (including the normally zero-initialized
  // ones); gradient checks use this to exercise the full graph.
  void randomize_all(uint64_t seed, float scale);

 private:
  void register_params();
  void init_weights(uint64_t seed);

  ModelConfig cfg_;
  ParamStore params_;
  std::vector<float> posenc_;  // L*D, fixed

  struct BlockIds {
    int mod_w, mod_b;
    int qkv_w, qkv_b;
    int proj_w, proj_b;
    int mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };
  struct Ids {
    int patch_w, patch_b;
    int temb_w1, temb_b1, temb_w2, temb_b2;
    int meta_w1, meta_b1, meta_w2, meta_b2;
    int null_emb;
    std::vector<BlockIds> block;
    int final_mod_w, final_mod_b;
    int head_w, head_b;
  };
  Ids ids_;
};

// 2-D sin/cos positional table for an R x C grid, D columns (D % 4 == 0).
std::vector<float> sincos_posenc_2d(int rows, int cols, int dim);

// Deterministic Gaussian tensor (seeded), shared by trainer/sampler/extractor.
Tensor gaussian_like(const std::vector<long>& shape, uint64_t seed);

}  // namespace roidiff
