#include "roidiff/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "roidiff/ops.hpp"
#include "roidiff/rng.hpp"

namespace roidiff {

void ModelConfig::validate() const {
  if (n_rois <= 0 || n_timepoints <= 0 || patch <= 0)
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  if (n_rois % patch != 0 || n_timepoints % patch != 0)
    throw std::invalid_argument("ModelConfig: N and T must be divisible by patch");
  if (embed_dim <= 0 || embed_dim % n_heads != 0)
    throw std::invalid_argument("ModelConfig: embed_dim must be divisible by n_heads");
  if (embed_dim % 4 != 0)
    throw std::invalid_argument("ModelConfig: embed_dim must be divisible by 4");
  if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (cond_dim <= 0) throw std::invalid_argument("ModelConfig: cond_dim must be positive");
  if (p_drop < 0.0f || p_drop > 1.0f)
    throw std::invalid_argument("ModelConfig: p_drop must be in [0,1]");
  if (steps < 1) throw std::invalid_argument("ModelConfig: steps must be >= 1");
  if (freq_dim <= 0 || freq_dim % 2 != 0)
    throw std::invalid_argument("ModelConfig: freq_dim must be positive and even");
  if (n_diagnoses < 1) throw std::invalid_argument("ModelConfig: n_diagnoses must be >= 1");
  if (tokens() < 1) throw std::invalid_argument("ModelConfig: token count must be >= 1");
}

// ---------------------------------------------------------------------------
// ParamStore

int ParamStore::add(const std::string& name, std::vector<long> shape) {
  if (finalized_) throw std::logic_error("ParamStore: add after finalize");
  Entry e;
  e.name = name;
  e.size = Tensor::numel_of(shape);
  e.shape = std::move(shape);
  e.offset = entries_.empty() ? 0 : entries_.back().offset + entries_.back().size;
  entries_.push_back(std::move(e));
  return static_cast<int>(entries_.size()) - 1;
}

void ParamStore::finalize() {
  size_t total = entries_.empty() ? 0 : entries_.back().offset + entries_.back().size;
  weights_.assign(total, 0.0f);
  grads_.assign(total, 0.0f);
  finalized_ = true;
}

void ParamStore::zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0f); }

int ParamStore::find(const std::string& name) const {
  for (size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return static_cast<int>(i);
  return -1;
}

// ---------------------------------------------------------------------------
// Fixed embeddings

std::vector<float> sincos_posenc_2d(int rows, int cols, int dim) {
  // half the channels encode the row coordinate, half the column; each half
  // is [sin(pos*w_i) | cos(pos*w_i)] with dim/4 frequencies
  const int quarter = dim / 4;
  std::vector<float> pe(static_cast<size_t>(rows) * cols * dim);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      float* out = pe.data() + (static_cast<size_t>(r) * cols + c) * dim;
      for (int i = 0; i < quarter; ++i) {
        double w = std::pow(10000.0, -static_cast<double>(i) / quarter);
        out[i] = static_cast<float>(std::sin(r * w));
        out[quarter + i] = static_cast<float>(std::cos(r * w));
        out[2 * quarter + i] = static_cast<float>(std::sin(c * w));
        out[3 * quarter + i] = static_cast<float>(std::cos(c * w));
      }
    }
  }
  return pe;
}

namespace {

void timestep_sincos(int t, int freq_dim, float* out) {
  const int half = freq_dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    double arg = static_cast<double>(t) * freq;
    out[i] = static_cast<float>(std::cos(arg));
    out[half + i] = static_cast<float>(std::sin(arg));
  }
}

}  // namespace

Tensor gaussian_like(const std::vector<long>& shape, uint64_t seed) {
  Tensor t(shape);
  Rng rng(seed);
  rng.fill_normal(t.data(), t.numel());
  return t;
}

// ---------------------------------------------------------------------------
// DitModel

DitModel::DitModel(ModelConfig cfg, uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  register_params();
  params_.finalize();
  init_weights(init_seed);
  posenc_ = sincos_posenc_2d(cfg_.grid_rows(), cfg_.grid_cols(), cfg_.embed_dim);
  diagnosis_labels.resize(cfg_.n_diagnoses);
  for (int i = 0; i < cfg_.n_diagnoses; ++i)
    diagnosis_labels[i] = "dx" + std::to_string(i);
}

void DitModel::register_params() {
  const long D = cfg_.embed_dim, dc = cfg_.cond_dim, p2 = cfg_.patch_elems();
  const long F = cfg_.freq_dim, tabw = cfg_.tab_width();
  ids_.patch_w = params_.add("patch_embed.w", {p2, D});
  ids_.patch_b = params_.add("patch_embed.b", {D});
  ids_.temb_w1 = params_.add("t_encoder.w1", {F, dc});
  ids_.temb_b1 = params_.add("t_encoder.b1", {dc});
  ids_.temb_w2 = params_.add("t_encoder.w2", {dc, dc});
  ids_.temb_b2 = params_.add("t_encoder.b2", {dc});
  ids_.meta_w1 = params_.add("meta_encoder.w1", {tabw, dc});
  ids_.meta_b1 = params_.add("meta_encoder.b1", {dc});
  ids_.meta_w2 = params_.add("meta_encoder.w2", {dc, dc});
  ids_.meta_b2 = params_.add("meta_encoder.b2", {dc});
  ids_.null_emb = params_.add("null_embedding", {dc});
  ids_.block.resize(cfg_.n_layers);
  for (int k = 0; k < cfg_.n_layers; ++k) {
    auto& b = ids_.block[k];
    std::string pre = "block" + std::to_string(k) + ".";
    b.mod_w = params_.add(pre + "adaln.w", {dc, 6 * D});
    b.mod_b = params_.add(pre + "adaln.b", {6 * D});
    b.qkv_w = params_.add(pre + "attn.qkv.w", {D, 3 * D});
    b.qkv_b = params_.add(pre + "attn.qkv.b", {3 * D});
    b.proj_w = params_.add(pre + "attn.proj.w", {D, D});
    b.proj_b = params_.add(pre + "attn.proj.b", {D});
    b.mlp_w1 = params_.add(pre + "mlp.w1", {D, 4 * D});
    b.mlp_b1 = params_.add(pre + "mlp.b1", {4 * D});
    b.mlp_w2 = params_.add(pre + "mlp.w2", {4 * D, D});
    b.mlp_b2 = params_.add(pre + "mlp.b2", {D});
  }
  ids_.final_mod_w = params_.add("final.adaln.w", {dc, 2 * D});
  ids_.final_mod_b = params_.add("final.adaln.b", {2 * D});
  ids_.head_w = params_.add("head.w", {D, p2});
  ids_.head_b = params_.add("head.b", {p2});
}

void DitModel::init_weights(uint64_t seed) {
  Rng rng(seed);
  auto xavier = [&](int id) {
    const auto& e = params_.entry(id);
    float a = std::sqrt(6.0f / static_cast<float>(e.shape[0] + e.shape[1]));
    rng.fill_uniform(params_.param(id), e.size, -a, a);
  };
  auto normal02 = [&](int id) {
    float* p = params_.param(id);
    for (size_t i = 0; i < params_.entry(id).size; ++i)
      p[i] = 0.02f * static_cast<float>(rng.normal());
  };
  xavier(ids_.patch_w);
  normal02(ids_.temb_w1);
  normal02(ids_.temb_w2);
  normal02(ids_.meta_w1);
  normal02(ids_.meta_w2);
  normal02(ids_.null_emb);
  for (auto& b : ids_.block) {
    xavier(b.qkv_w);
    xavier(b.proj_w);
    xavier(b.mlp_w1);
    xavier(b.mlp_w2);
    // b.mod_w / b.mod_b stay zero: AdaLN-Zero gates start closed
  }
  // final modulation and head stay zero so a fresh model emits exactly 0
}

void DitModel::randomize_all(uint64_t seed, float scale) {
  Rng rng(seed);
  for (auto& v : params_.weights()) v = scale * static_cast<float>(rng.normal());
}

// ---------------------------------------------------------------------------
// Patch machinery

Tensor DitModel::extract_patches(const Tensor& x, const ModelConfig& cfg) {
  if (x.rank() != 3 || x.dim(1) != cfg.n_rois || x.dim(2) != cfg.n_timepoints)
    throw std::invalid_argument("extract_patches: input shape mismatch");
  const long B = x.dim(0);
  const int p = cfg.patch, gr = cfg.grid_rows(), gc = cfg.grid_cols();
  const int N = cfg.n_rois, T = cfg.n_timepoints;
  Tensor out({B, cfg.tokens(), cfg.patch_elems()});
  for (long b = 0; b < B; ++b) {
    const float* src = x.data() + static_cast<size_t>(b) * N * T;
    float* dst = out.data() + static_cast<size_t>(b) * cfg.tokens() * cfg.patch_elems();
    for (int gi = 0; gi < gr; ++gi)
      for (int gj = 0; gj < gc; ++gj) {
        float* patch = dst + (static_cast<size_t>(gi) * gc + gj) * p * p;
        for (int pi = 0; pi < p; ++pi)
          for (int pj = 0; pj < p; ++pj)
            patch[pi * p + pj] = src[(gi * p + pi) * static_cast<size_t>(T) + gj * p + pj];
      }
  }
  return out;
}

Tensor DitModel::unpatchify(const Tensor& grid, const ModelConfig& cfg) {
  if (grid.rank() != 3 || grid.dim(1) != cfg.tokens() || grid.dim(2) != cfg.patch_elems())
    throw std::invalid_argument("unpatchify: grid shape mismatch");
  const long B = grid.dim(0);
  const int p = cfg.patch, gr = cfg.grid_rows(), gc = cfg.grid_cols();
  const int N = cfg.n_rois, T = cfg.n_timepoints;
  Tensor out({B, N, T});
  for (long b = 0; b < B; ++b) {
    const float* src = grid.data() + static_cast<size_t>(b) * cfg.tokens() * cfg.patch_elems();
    float* dst = out.data() + static_cast<size_t>(b) * N * T;
    for (int gi = 0; gi < gr; ++gi)
      for (int gj = 0; gj < gc; ++gj) {
        const float* patch = src + (static_cast<size_t>(gi) * gc + gj) * p * p;
        for (int pi = 0; pi < p; ++pi)
          for (int pj = 0; pj < p; ++pj)
            dst[(gi * p + pi) * static_cast<size_t>(T) + gj * p + pj] = patch[pi * p + pj];
      }
  }
  return out;
}

Tensor DitModel::patchify(const Tensor& x) const {
  Tensor patches = extract_patches(x, cfg_);
  const long B = patches.dim(0);
  const int L = cfg_.tokens(), D = cfg_.embed_dim, p2 = cfg_.patch_elems();
  Tensor tok({B, L, D});
  ops::linear(patches.data(), params_.param(ids_.patch_w), params_.param(ids_.patch_b),
              tok.data(), static_cast<int>(B) * L, p2, D);
  for (long b = 0; b < B; ++b) {
    float* t = tok.data() + static_cast<size_t>(b) * L * D;
    for (size_t i = 0; i < posenc_.size(); ++i) t[i] += posenc_[i];
  }
  return tok;
}

// ---------------------------------------------------------------------------
// Condition encoders

std::vector<float> DitModel::metadata_tabular(const MetadataRecord& rec) const {
  std::vector<float> tab(cfg_.tab_width(), 0.0f);
  if (rec.age) {
    float sd = age_stats.stddev > 0.0f ? age_stats.stddev : 1.0f;
    tab[0] = (*rec.age - age_stats.mean) / sd;
    tab[1] = 1.0f;
  }
  if (rec.sex) {
    if (*rec.sex != 0 && *rec.sex != 1)
      throw std::invalid_argument("metadata_tabular: sex must be 0 or 1");
    tab[2 + *rec.sex] = 1.0f;
    tab[4] = 1.0f;
  }
  if (rec.diagnosis) {
    if (*rec.diagnosis < 0 || *rec.diagnosis >= cfg_.n_diagnoses)
      throw std::invalid_argument("metadata_tabular: diagnosis id outside label set");
    tab[5 + *rec.diagnosis] = 1.0f;
    tab[5 + cfg_.n_diagnoses] = 1.0f;
  }
  return tab;
}

Tensor DitModel::metadata_encode(const MetadataRecord& rec) const {
  const int dc = cfg_.cond_dim, tabw = cfg_.tab_width();
  std::vector<float> tab = metadata_tabular(rec);
  std::vector<float> h1(dc), h1a(dc);
  Tensor out({dc});
  ops::linear(tab.data(), params_.param(ids_.meta_w1), params_.param(ids_.meta_b1), h1.data(),
              1, tabw, dc);
  ops::silu(h1.data(), h1a.data(), dc);
  ops::linear(h1a.data(), params_.param(ids_.meta_w2), params_.param(ids_.meta_b2), out.data(),
              1, dc, dc);
  return out;
}

Tensor DitModel::timestep_embed(int t) const {
  if (t < 0 || t > cfg_.steps) throw std::invalid_argument("timestep_embed: t out of [0, S]");
  const int dc = cfg_.cond_dim, F = cfg_.freq_dim;
  std::vector<float> sin_emb(F), h1(dc), h1a(dc);
  timestep_sincos(t, F, sin_emb.data());
  Tensor out({dc});
  ops::linear(sin_emb.data(), params_.param(ids_.temb_w1), params_.param(ids_.temb_b1),
              h1.data(), 1, F, dc);
  ops::silu(h1.data(), h1a.data(), dc);
  ops::linear(h1a.data(), params_.param(ids_.temb_w2), params_.param(ids_.temb_b2), out.data(),
              1, dc, dc);
  return out;
}

// ---------------------------------------------------------------------------
// Forward

Tensor DitModel::forward(const Tensor& x_t, const std::vector<int>& t,
                         const std::vector<const MetadataRecord*>& cond,
                         const std::vector<uint8_t>& drop_condition, ForwardCache* cache,
                         const std::set<int>& capture_layers,
                         std::map<int, Tensor>* hidden_out) const {
  if (x_t.rank() != 3 || x_t.dim(1) != cfg_.n_rois || x_t.dim(2) != cfg_.n_timepoints)
    throw std::invalid_argument("forward: x_t shape mismatch");
  const int B = static_cast<int>(x_t.dim(0));
  if (static_cast<int>(t.size()) != B || static_cast<int>(cond.size()) != B)
    throw std::invalid_argument("forward: per-sample t/cond size mismatch");
  if (!drop_condition.empty() && static_cast<int>(drop_condition.size()) != B)
    throw std::invalid_argument("forward: drop_condition size mismatch");
  for (int lk : capture_layers)
    if (lk < 1 || lk > cfg_.n_layers)
      throw std::invalid_argument("forward: capture layer index out of range");
  for (int tb : t)
    if (tb < 0 || tb > cfg_.steps) throw std::invalid_argument("forward: t out of [0, S]");

  const int L = cfg_.tokens(), D = cfg_.embed_dim, H = cfg_.n_heads, hd = D / H;
  const int p2 = cfg_.patch_elems(), dc = cfg_.cond_dim, F = cfg_.freq_dim;
  const int tabw = cfg_.tab_width();
  const int rows = B * L;

  ForwardCache local;
  ForwardCache& cc = cache ? *cache : local;
  const bool save = cache != nullptr;
  cc.batch = B;
  cc.t = t;

  // which samples take the null-condition path
  cc.use_null.assign(B, 0);
  for (int b = 0; b < B; ++b) {
    bool drop = !drop_condition.empty() && drop_condition[b];
    cc.use_null[b] = (cond[b] == nullptr || drop) ? 1 : 0;
  }

  // tokens
  {
    Tensor patches = extract_patches(x_t, cfg_);
    cc.patches.assign(patches.data(), patches.data() + patches.numel());
  }
  cc.tokens.resize(static_cast<size_t>(rows) * D);
  ops::linear(cc.patches.data(), params_.param(ids_.patch_w), params_.param(ids_.patch_b),
              cc.tokens.data(), rows, p2, D);
  for (int b = 0; b < B; ++b) {
    float* tk = cc.tokens.data() + static_cast<size_t>(b) * L * D;
    for (size_t i = 0; i < posenc_.size(); ++i) tk[i] += posenc_[i];
  }

  // condition vector y = y_t + y_c
  cc.sin_emb.resize(static_cast<size_t>(B) * F);
  for (int b = 0; b < B; ++b) timestep_sincos(t[b], F, cc.sin_emb.data() + static_cast<size_t>(b) * F);
  cc.t_h1.resize(static_cast<size_t>(B) * dc);
  cc.t_h1_act.resize(cc.t_h1.size());
  cc.y.resize(cc.t_h1.size());
  ops::linear(cc.sin_emb.data(), params_.param(ids_.temb_w1), params_.param(ids_.temb_b1),
              cc.t_h1.data(), B, F, dc);
  ops::silu(cc.t_h1.data(), cc.t_h1_act.data(), cc.t_h1.size());
  ops::linear(cc.t_h1_act.data(), params_.param(ids_.temb_w2), params_.param(ids_.temb_b2),
              cc.y.data(), B, dc, dc);  // y holds y_t for now

  cc.tab.assign(static_cast<size_t>(B) * tabw, 0.0f);
  for (int b = 0; b < B; ++b) {
    if (!cc.use_null[b]) {
      std::vector<float> row = metadata_tabular(*cond[b]);
      std::memcpy(cc.tab.data() + static_cast<size_t>(b) * tabw, row.data(),
                  sizeof(float) * tabw);
    }
  }
  cc.c_h1.resize(static_cast<size_t>(B) * dc);
  cc.c_h1_act.resize(cc.c_h1.size());
  std::vector<float> y_c(static_cast<size_t>(B) * dc);
  ops::linear(cc.tab.data(), params_.param(ids_.meta_w1), params_.param(ids_.meta_b1),
              cc.c_h1.data(), B, tabw, dc);
  ops::silu(cc.c_h1.data(), cc.c_h1_act.data(), cc.c_h1.size());
  ops::linear(cc.c_h1_act.data(), params_.param(ids_.meta_w2), params_.param(ids_.meta_b2),
              y_c.data(), B, dc, dc);
  const float* null_emb = params_.param(ids_.null_emb);
  for (int b = 0; b < B; ++b) {
    float* yb = cc.y.data() + static_cast<size_t>(b) * dc;
    const float* add = cc.use_null[b] ? null_emb : y_c.data() + static_cast<size_t>(b) * dc;
    for (int i = 0; i < dc; ++i) yb[i] += add[i];
  }
  cc.silu_y.resize(cc.y.size());
  ops::silu(cc.y.data(), cc.silu_y.data(), cc.y.size());

  // transformer blocks
  cc.blocks.resize(cfg_.n_layers);
  std::vector<float> x_cur = cc.tokens;  // working tokens, B*L*D
  std::vector<float> scratch_probs;      // inference-mode attention probs, reused
  std::vector<float> n_buf(static_cast<size_t>(rows) * D);
  std::vector<float> mlp_act(static_cast<size_t>(rows) * 4 * D);

  for (int k = 0; k < cfg_.n_layers; ++k) {
    const auto& bi = ids_.block[k];
    auto& bc = cc.blocks[k];

    bc.mod.resize(static_cast<size_t>(B) * 6 * D);
    ops::linear(cc.silu_y.data(), params_.param(bi.mod_w), params_.param(bi.mod_b),
                bc.mod.data(), B, dc, 6 * D);

    bc.ln1_mean.resize(rows);
    bc.ln1_rstd.resize(rows);
    ops::layernorm(x_cur.data(), n_buf.data(), bc.ln1_mean.data(), bc.ln1_rstd.data(), rows, D,
                   1e-6f);
    bc.m1.resize(static_cast<size_t>(rows) * D);
    for (int b = 0; b < B; ++b) {
      const float* shift = bc.mod.data() + static_cast<size_t>(b) * 6 * D;
      const float* scale = shift + D;
      for (int l = 0; l < L; ++l) {
        const float* n = n_buf.data() + (static_cast<size_t>(b) * L + l) * D;
        float* m = bc.m1.data() + (static_cast<size_t>(b) * L + l) * D;
        for (int d = 0; d < D; ++d) m[d] = n[d] * (1.0f + scale[d]) + shift[d];
      }
    }

    bc.qkv.resize(static_cast<size_t>(rows) * 3 * D);
    ops::linear(bc.m1.data(), params_.param(bi.qkv_w), params_.param(bi.qkv_b), bc.qkv.data(),
                rows, D, 3 * D);

    bc.attn_cat.resize(static_cast<size_t>(rows) * D);
    float* probs;
    if (save) {
      bc.attn_probs.resize(static_cast<size_t>(B) * H * L * L);
      probs = bc.attn_probs.data();
    } else {
      scratch_probs.resize(static_cast<size_t>(H) * L * L);
      probs = scratch_probs.data();
    }
    for (int b = 0; b < B; ++b) {
      const float* qkv = bc.qkv.data() + static_cast<size_t>(b) * L * 3 * D;
      float* a = save ? probs + static_cast<size_t>(b) * H * L * L : probs;
      ops::attention(qkv, qkv + D, qkv + 2 * D, a,
                     bc.attn_cat.data() + static_cast<size_t>(b) * L * D, L, H, hd, 3 * D);
    }

    bc.attn_out.resize(static_cast<size_t>(rows) * D);
    ops::linear(bc.attn_cat.data(), params_.param(bi.proj_w), params_.param(bi.proj_b),
                bc.attn_out.data(), rows, D, D);

    bc.x_mid.resize(static_cast<size_t>(rows) * D);
    for (int b = 0; b < B; ++b) {
      const float* gate = bc.mod.data() + static_cast<size_t>(b) * 6 * D + 2 * D;
      for (int l = 0; l < L; ++l) {
        size_t off = (static_cast<size_t>(b) * L + l) * D;
        for (int d = 0; d < D; ++d)
          bc.x_mid[off + d] = x_cur[off + d] + gate[d] * bc.attn_out[off + d];
      }
    }

    bc.ln2_mean.resize(rows);
    bc.ln2_rstd.resize(rows);
    ops::layernorm(bc.x_mid.data(), n_buf.data(), bc.ln2_mean.data(), bc.ln2_rstd.data(), rows,
                   D, 1e-6f);
    bc.m2.resize(static_cast<size_t>(rows) * D);
    for (int b = 0; b < B; ++b) {
      const float* shift = bc.mod.data() + static_cast<size_t>(b) * 6 * D + 3 * D;
      const float* scale = shift + D;
      for (int l = 0; l < L; ++l) {
        const float* n = n_buf.data() + (static_cast<size_t>(b) * L + l) * D;
        float* m = bc.m2.data() + (static_cast<size_t>(b) * L + l) * D;
        for (int d = 0; d < D; ++d) m[d] = n[d] * (1.0f + scale[d]) + shift[d];
      }
    }

    bc.mlp_pre.resize(static_cast<size_t>(rows) * 4 * D);
    ops::linear(bc.m2.data(), params_.param(bi.mlp_w1), params_.param(bi.mlp_b1),
                bc.mlp_pre.data(), rows, D, 4 * D);
    ops::gelu_tanh(bc.mlp_pre.data(), mlp_act.data(), bc.mlp_pre.size());
    bc.mlp_out.resize(static_cast<size_t>(rows) * D);
    ops::linear(mlp_act.data(), params_.param(bi.mlp_w2), params_.param(bi.mlp_b2),
                bc.mlp_out.data(), rows, 4 * D, D);

    bc.x_out.resize(static_cast<size_t>(rows) * D);
    for (int b = 0; b < B; ++b) {
      const float* gate = bc.mod.data() + static_cast<size_t>(b) * 6 * D + 5 * D;
      for (int l = 0; l < L; ++l) {
        size_t off = (static_cast<size_t>(b) * L + l) * D;
        for (int d = 0; d < D; ++d)
          bc.x_out[off + d] = bc.x_mid[off + d] + gate[d] * bc.mlp_out[off + d];
      }
    }

    if (hidden_out && capture_layers.count(k + 1)) {
      Tensor h({B, L, D});
      std::memcpy(h.data(), bc.x_out.data(), sizeof(float) * bc.x_out.size());
      (*hidden_out)[k + 1] = std::move(h);
    }

    x_cur = bc.x_out;
    if (!save) {
      // inference mode: block activations are not kept
      bc = ForwardCache::Block{};
    }
  }

  // final layer
  cc.fmod.resize(static_cast<size_t>(B) * 2 * D);
  ops::linear(cc.silu_y.data(), params_.param(ids_.final_mod_w), params_.param(ids_.final_mod_b),
              cc.fmod.data(), B, dc, 2 * D);
  cc.lnf_mean.resize(rows);
  cc.lnf_rstd.resize(rows);
  ops::layernorm(x_cur.data(), n_buf.data(), cc.lnf_mean.data(), cc.lnf_rstd.data(), rows, D,
                 1e-6f);
  cc.mf.resize(static_cast<size_t>(rows) * D);
  for (int b = 0; b < B; ++b) {
    const float* shift = cc.fmod.data() + static_cast<size_t>(b) * 2 * D;
    const float* scale = shift + D;
    for (int l = 0; l < L; ++l) {
      const float* n = n_buf.data() + (static_cast<size_t>(b) * L + l) * D;
      float* m = cc.mf.data() + (static_cast<size_t>(b) * L + l) * D;
      for (int d = 0; d < D; ++d) m[d] = n[d] * (1.0f + scale[d]) + shift[d];
    }
  }

  Tensor grid({B, L, p2});
  ops::linear(cc.mf.data(), params_.param(ids_.head_w), params_.param(ids_.head_b), grid.data(),
              rows, D, p2);
  return unpatchify(grid, cfg_);
}

Tensor DitModel::forward_one(const Tensor& x_t, int t, const MetadataRecord* cond) const {
  if (x_t.rank() != 2) throw std::invalid_argument("forward_one: expected {N,T}");
  Tensor batched({1, x_t.dim(0), x_t.dim(1)}, x_t.storage());
  Tensor v = forward(batched, {t}, {cond}, {}, nullptr);
  return Tensor({x_t.dim(0), x_t.dim(1)}, std::move(v.storage()));
}

// ---------------------------------------------------------------------------
// Backward

void DitModel::backward(const Tensor& dv_hat, const ForwardCache& cc) {
  const int B = cc.batch;
  if (dv_hat.rank() != 3 || dv_hat.dim(0) != B)
    throw std::invalid_argument("backward: dv_hat shape mismatch");
  if (cc.blocks.empty() || cc.blocks[0].m1.empty())
    throw std::logic_error("backward: forward cache was not populated in training mode");
  const int L = cfg_.tokens(), D = cfg_.embed_dim, H = cfg_.n_heads, hd = D / H;
  const int p2 = cfg_.patch_elems(), dc = cfg_.cond_dim, F = cfg_.freq_dim;
  const int tabw = cfg_.tab_width();
  const int rows = B * L;

  std::vector<float> dsilu_y(static_cast<size_t>(B) * dc, 0.0f);
  std::vector<float> dX(static_cast<size_t>(rows) * D, 0.0f);
  std::vector<float> n_buf(static_cast<size_t>(rows) * D);
  std::vector<float> dbuf(static_cast<size_t>(rows) * D);
  std::vector<float> dbuf2(static_cast<size_t>(rows) * D);

  auto recompute_norm = [&](const std::vector<float>& X, const std::vector<float>& mean,
                            const std::vector<float>& rstd) {
    for (int r = 0; r < rows; ++r) {
      const float* x = X.data() + static_cast<size_t>(r) * D;
      float* n = n_buf.data() + static_cast<size_t>(r) * D;
      float m = mean[r], rs = rstd[r];
      for (int d = 0; d < D; ++d) n[d] = (x[d] - m) * rs;
    }
  };

  // head + final modulation
  {
    Tensor dgrid = extract_patches(dv_hat, cfg_);  // unpatchify backward
    // head linear
    std::vector<float> dmf(static_cast<size_t>(rows) * D);
    ops::linear_backward(cc.mf.data(), params_.param(ids_.head_w), dgrid.data(), dmf.data(),
                         params_.grad(ids_.head_w), params_.grad(ids_.head_b), rows, D, p2);

    const std::vector<float>& x_final = cc.blocks.back().x_out;
    recompute_norm(x_final, cc.lnf_mean, cc.lnf_rstd);

    std::vector<float> dfmod(static_cast<size_t>(B) * 2 * D, 0.0f);
    for (int b = 0; b < B; ++b) {
      const float* scale = cc.fmod.data() + static_cast<size_t>(b) * 2 * D + D;
      float* dshift = dfmod.data() + static_cast<size_t>(b) * 2 * D;
      float* dscale = dshift + D;
      for (int l = 0; l < L; ++l) {
        size_t off = (static_cast<size_t>(b) * L + l) * D;
        for (int d = 0; d < D; ++d) {
          float g = dmf[off + d];
          dshift[d] += g;
          dscale[d] += g * n_buf[off + d];
          dbuf[off + d] = g * (1.0f + scale[d]);  // d n_f
        }
      }
    }
    ops::layernorm_backward(dbuf.data(), x_final.data(), cc.lnf_mean.data(), cc.lnf_rstd.data(),
                            dX.data(), rows, D);
    ops::linear_backward(cc.silu_y.data(), params_.param(ids_.final_mod_w), dfmod.data(),
                         dbuf2.data(), params_.grad(ids_.final_mod_w),
                         params_.grad(ids_.final_mod_b), B, dc, 2 * D);
    for (size_t i = 0; i < dsilu_y.size(); ++i) dsilu_y[i] += dbuf2[i];
  }

  // blocks, last to first; dX enters as d(x_out), leaves as d(x_in)
  std::vector<float> dmod(static_cast<size_t>(B) * 6 * D);
  std::vector<float> dqkv(static_cast<size_t>(rows) * 3 * D);
  std::vector<float> d4(static_cast<size_t>(rows) * 4 * D);
  std::vector<float> act4(static_cast<size_t>(rows) * 4 * D);
  std::vector<float> datt_scratch(static_cast<size_t>(H) * L);

  for (int k = cfg_.n_layers - 1; k >= 0; --k) {
    const auto& bi = ids_.block[k];
    const auto& bc = cc.blocks[k];
    const std::vector<float>& x_in = (k == 0) ? cc.tokens : cc.blocks[k - 1].x_out;
    std::fill(dmod.begin(), dmod.end(), 0.0f);

    // x_out = x_mid + gate2 .* mlp_out
    for (int b = 0; b < B; ++b) {
      const float* gate = bc.mod.data() + static_cast<size_t>(b) * 6 * D + 5 * D;
      float* dgate = dmod.data() + static_cast<size_t>(b) * 6 * D + 5 * D;
      for (int l = 0; l < L; ++l) {
        size_t off = (static_cast<size_t>(b) * L + l) * D;
        for (int d = 0; d < D; ++d) {
          float g = dX[off + d];
          dgate[d] += g * bc.mlp_out[off + d];
          dbuf[off + d] = g * gate[d];  // d mlp_out
        }
      }
    }

    // MLP backward (recompute gelu activation)
    ops::gelu_tanh(bc.mlp_pre.data(), act4.data(), bc.mlp_pre.size());
    ops::linear_backward(act4.data(), params_.param(bi.mlp_w2), dbuf.data(), d4.data(),
                         params_.grad(bi.mlp_w2), params_.grad(bi.mlp_b2), rows, 4 * D, D);
    ops::gelu_tanh_backward(d4.data(), bc.mlp_pre.data(), d4.data(), bc.mlp_pre.size());
    ops::linear_backward(bc.m2.data(), params_.param(bi.mlp_w1), d4.data(), dbuf.data(),
                         params_.grad(bi.mlp_w1), params_.grad(bi.mlp_b1), rows, D, 4 * D);

    // modulate 2 backward; dbuf holds d m2 -> becomes d n2
    recompute_norm(bc.x_mid, bc.ln2_mean, bc.ln2_rstd);
    for (int b = 0; b < B; ++b) {
      const float* scale = bc.mod.data() + static_cast<size_t>(b) * 6 * D + 4 * D;
      float* dshift = dmod.data() + static_cast<size_t>(b) * 6 * D + 3 * D;
      float* dscale = dshift + D;
      for (int l = 0; l < L; ++l) {
        size_t off = (static_cast<size_t>(b) * L + l) * D;
        for (int d = 0; d < D; ++d) {
          float g = dbuf[off + d];
          dshift[d] += g;
          dscale[d] += g * n_buf[off + d];
          dbuf[off + d] = g * (1.0f + scale[d]);
        }
      }
    }
    ops::layernorm_backward(dbuf.data(), bc.x_mid.data(), bc.ln2_mean.data(),
                            bc.ln2_rstd.data(), dX.data(), rows, D);
    // dX now holds d x_mid

    // x_mid = x_in + gate1 .* attn_out
    for (int b = 0; b < B; ++b) {
      const float* gate = bc.mod.data() + static_cast<size_t>(b) * 6 * D + 2 * D;
      float* dgate = dmod.data() + static_cast<size_t>(b) * 6 * D + 2 * D;
      for (int l = 0; l < L; ++l) {
        size_t off = (static_cast<size_t>(b) * L + l) * D;
        for (int d = 0; d < D; ++d) {
          float g = dX[off + d];
          dgate[d] += g * bc.attn_out[off + d];
          dbuf[off + d] = g * gate[d];  // d attn_out
        }
      }
    }

    // attention out-projection
    ops::linear_backward(bc.attn_cat.data(), params_.param(bi.proj_w), dbuf.data(),
                         dbuf2.data(), params_.grad(bi.proj_w), params_.grad(bi.proj_b), rows,
                         D, D);
    // attention core
    std::fill(dqkv.begin(), dqkv.end(), 0.0f);
    for (int b = 0; b < B; ++b) {
      const float* qkv = bc.qkv.data() + static_cast<size_t>(b) * L * 3 * D;
      float* dq = dqkv.data() + static_cast<size_t>(b) * L * 3 * D;
      ops::attention_backward(qkv, qkv + D, qkv + 2 * D,
                              bc.attn_probs.data() + static_cast<size_t>(b) * H * L * L,
                              dbuf2.data() + static_cast<size_t>(b) * L * D, dq, dq + D,
                              dq + 2 * D, datt_scratch.data(), L, H, hd, 3 * D);
    }
    // qkv projection
    ops::linear_backward(bc.m1.data(), params_.param(bi.qkv_w), dqkv.data(), dbuf.data(),
                         params_.grad(bi.qkv_w), params_.grad(bi.qkv_b), rows, D, 3 * D);

    // modulate 1 backward; dbuf holds d m1 -> becomes d n1
    recompute_norm(x_in, bc.ln1_mean, bc.ln1_rstd);
    for (int b = 0; b < B; ++b) {
      const float* scale = bc.mod.data() + static_cast<size_t>(b) * 6 * D + D;
      float* dshift = dmod.data() + static_cast<size_t>(b) * 6 * D;
      float* dscale = dshift + D;
      for (int l = 0; l < L; ++l) {
        size_t off = (static_cast<size_t>(b) * L + l) * D;
        for (int d = 0; d < D; ++d) {
          float g = dbuf[off + d];
          dshift[d] += g;
          dscale[d] += g * n_buf[off + d];
          dbuf[off + d] = g * (1.0f + scale[d]);
        }
      }
    }
    ops::layernorm_backward(dbuf.data(), x_in.data(), bc.ln1_mean.data(), bc.ln1_rstd.data(),
                            dX.data(), rows, D);
    // dX now holds d x_in

    // modulation producer
    std::vector<float> dsy(static_cast<size_t>(B) * dc);
    ops::linear_backward(cc.silu_y.data(), params_.param(bi.mod_w), dmod.data(), dsy.data(),
                         params_.grad(bi.mod_w), params_.grad(bi.mod_b), B, dc, 6 * D);
    for (size_t i = 0; i < dsilu_y.size(); ++i) dsilu_y[i] += dsy[i];
  }

  // patch embedding (positional encoding is constant)
  ops::linear_backward(cc.patches.data(), params_.param(ids_.patch_w), dX.data(), nullptr,
                       params_.grad(ids_.patch_w), params_.grad(ids_.patch_b), rows, p2, D);

  // condition path: dy = silu'(y) .* dsilu_y
  std::vector<float> dy(static_cast<size_t>(B) * dc, 0.0f);
  ops::silu_backward_acc(dsilu_y.data(), cc.y.data(), dy.data(), dy.size());

  // timestep encoder
  std::vector<float> dh(static_cast<size_t>(B) * dc, 0.0f);
  ops::linear_backward(cc.t_h1_act.data(), params_.param(ids_.temb_w2), dy.data(), dbuf.data(),
                       params_.grad(ids_.temb_w2), params_.grad(ids_.temb_b2), B, dc, dc);
  ops::silu_backward_acc(dbuf.data(), cc.t_h1.data(), dh.data(), dh.size());
  ops::linear_backward(cc.sin_emb.data(), params_.param(ids_.temb_w1), dh.data(), nullptr,
                       params_.grad(ids_.temb_w1), params_.grad(ids_.temb_b1), B, F, dc);

  // metadata encoder / null embedding
  std::vector<float> dy_c = dy;
  float* dnull = params_.grad(ids_.null_emb);
  for (int b = 0; b < B; ++b) {
    float* row = dy_c.data() + static_cast<size_t>(b) * dc;
    if (cc.use_null[b]) {
      for (int i = 0; i < dc; ++i) dnull[i] += row[i];
      std::fill(row, row + dc, 0.0f);
    }
  }
  std::fill(dh.begin(), dh.end(), 0.0f);
  ops::linear_backward(cc.c_h1_act.data(), params_.param(ids_.meta_w2), dy_c.data(),
                       dbuf.data(), params_.grad(ids_.meta_w2), params_.grad(ids_.meta_b2), B,
                       dc, dc);
  ops::silu_backward_acc(dbuf.data(), cc.c_h1.data(), dh.data(), dh.size());
  ops::linear_backward(cc.tab.data(), params_.param(ids_.meta_w1), dh.data(), nullptr,
                       params_.grad(ids_.meta_w1), params_.grad(ids_.meta_b1), B, tabw, dc);
}

}  // namespace roidiff
