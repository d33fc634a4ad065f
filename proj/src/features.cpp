#include "roidiff/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "roidiff/ops.hpp"
#include "roidiff/rng.hpp"

namespace roidiff {

void ExtractionSpec::validate(const ModelConfig& cfg) const {
  if (timesteps.empty() || layers.empty())
    throw std::invalid_argument("ExtractionSpec: timesteps and layers must be nonempty");
  for (int t : timesteps)
    if (t < 0 || t > cfg.steps)
      throw std::invalid_argument("ExtractionSpec: timestep outside [0, S]");
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 1 || layers[i] > cfg.n_layers)
      throw std::invalid_argument("ExtractionSpec: layer index outside [1, K]");
    if (i > 0 && layers[i] <= layers[i - 1])
      throw std::invalid_argument("ExtractionSpec: layers must be strictly ascending");
  }
}

ExtractionSpec ExtractionSpec::defaults(const ModelConfig& cfg, uint64_t noise_seed) {
  ExtractionSpec spec;
  spec.noise_seed = noise_seed;
  for (int t : {0, 50, 100, 150})
    if (t <= cfg.steps) spec.timesteps.push_back(t);
  if (spec.timesteps.empty()) spec.timesteps.push_back(0);
  int first = std::max(1, cfg.n_layers - 3);
  for (int k = first; k <= cfg.n_layers; ++k) spec.layers.push_back(k);
  return spec;
}

FeatureBank extract_features(const DitModel& model, const NoiseSchedule& sched,
                             const std::vector<Tensor>& windows,
                             const std::vector<const MetadataRecord*>& conds,
                             const ExtractionSpec& spec) {
  const ModelConfig& cfg = model.config();
  spec.validate(cfg);
  if (sched.steps != cfg.steps)
    throw std::invalid_argument("extract_features: schedule length mismatch");
  if (windows.empty()) throw std::invalid_argument("extract_features: no windows");
  if (spec.use_metadata && conds.size() != windows.size())
    throw std::invalid_argument("extract_features: conds size mismatch");

  const int B = static_cast<int>(windows.size());
  const int L = cfg.tokens(), D = cfg.embed_dim;
  const int n_t = static_cast<int>(spec.timesteps.size());
  const int n_l = static_cast<int>(spec.layers.size());

  FeatureBank bank;
  bank.e = Tensor({B, spec.slots(), D});
  for (int t : spec.timesteps)
    for (int l : spec.layers) bank.slots.push_back({t, l});

  const std::set<int> capture(spec.layers.begin(), spec.layers.end());
  const int chunk = 16;
  size_t sig = static_cast<size_t>(cfg.n_rois) * cfg.n_timepoints;

  for (int start = 0; start < B; start += chunk) {
    int bs = std::min(chunk, B - start);
    Tensor x({bs, cfg.n_rois, cfg.n_timepoints});
    for (int b = 0; b < bs; ++b) {
      const Tensor& w = windows[start + b];
      if (w.rank() != 2 || w.dim(0) != cfg.n_rois || w.dim(1) != cfg.n_timepoints)
        throw std::invalid_argument("extract_features: window shape mismatch");
      std::memcpy(x.data() + b * sig, w.data(), sizeof(float) * sig);
    }
    std::vector<const MetadataRecord*> cchunk(bs, nullptr);
    if (spec.use_metadata)
      for (int b = 0; b < bs; ++b) cchunk[b] = conds[start + b];

    for (int ti = 0; ti < n_t; ++ti) {
      const int t = spec.timesteps[ti];
      Tensor x_t = x;
      if (t > 0) {
        const float a = sched.alpha_f(t), s = sched.sigma_f(t);
        for (int b = 0; b < bs; ++b) {
          Rng rng(derive_seed(spec.noise_seed, static_cast<uint64_t>(start + b),
                              static_cast<uint64_t>(t)));
          float* xb = x_t.data() + b * sig;
          const float* x0 = x.data() + b * sig;
          for (size_t i = 0; i < sig; ++i)
            xb[i] = a * x0[i] + s * static_cast<float>(rng.normal());
        }
      }
      std::map<int, Tensor> hidden;
      model.forward(x_t, std::vector<int>(bs, t), cchunk, {}, nullptr, capture, &hidden);
      for (int li = 0; li < n_l; ++li) {
        const Tensor& h = hidden.at(spec.layers[li]);
        const int slot = ti * n_l + li;
        for (int b = 0; b < bs; ++b) {
          float* dst =
              bank.e.data() + (static_cast<size_t>(start + b) * spec.slots() + slot) * D;
          const float* hb = h.data() + static_cast<size_t>(b) * L * D;
          for (int d = 0; d < D; ++d) {
            double acc = 0.0;
            for (int l = 0; l < L; ++l) acc += hb[static_cast<size_t>(l) * D + d];
            dst[d] = static_cast<float>(acc / L);
          }
        }
      }
    }
  }
  return bank;
}

AggregatorState::AggregatorState(int dim_, uint64_t seed) : dim(dim_) {
  Rng rng(seed);
  q.resize(dim);
  for (auto& v : q) v = 0.02f * static_cast<float>(rng.normal());
  float a = std::sqrt(6.0f / (2.0f * dim));
  wk.resize(static_cast<size_t>(dim) * dim);
  wv.resize(static_cast<size_t>(dim) * dim);
  wo.resize(static_cast<size_t>(dim) * dim);
  rng.fill_uniform(wk.data(), wk.size(), -a, a);
  rng.fill_uniform(wv.data(), wv.size(), -a, a);
  rng.fill_uniform(wo.data(), wo.size(), -a, a);
  bo.assign(dim, 0.0f);
}

std::pair<Tensor, Tensor> aggregate(const FeatureBank& bank, const AggregatorState& agg) {
  if (bank.e.rank() != 3) throw std::invalid_argument("aggregate: bank must be {B,Q,D}");
  const int B = static_cast<int>(bank.e.dim(0));
  const int Q = static_cast<int>(bank.e.dim(1));
  const int D = static_cast<int>(bank.e.dim(2));
  if (D != agg.dim) throw std::invalid_argument("aggregate: dimension mismatch");

  Tensor z({B, D}), w({B, Q});
  const float scale = 1.0f / std::sqrt(static_cast<float>(D));
  std::vector<float> k(static_cast<size_t>(Q) * D), v(static_cast<size_t>(Q) * D);
  std::vector<float> scores(Q), pooled(D);
  for (int b = 0; b < B; ++b) {
    const float* e = bank.e.data() + static_cast<size_t>(b) * Q * D;
    ops::matmul(e, agg.wk.data(), k.data(), Q, D, D);
    ops::matmul(e, agg.wv.data(), v.data(), Q, D, D);
    for (int qi = 0; qi < Q; ++qi) {
      float dot = 0.0f;
      const float* krow = k.data() + static_cast<size_t>(qi) * D;
      for (int d = 0; d < D; ++d) dot += agg.q[d] * krow[d];
      scores[qi] = dot * scale;
    }
    ops::softmax(scores.data(), w.data() + static_cast<size_t>(b) * Q, 1, Q);
    const float* wb = w.data() + static_cast<size_t>(b) * Q;
    std::fill(pooled.begin(), pooled.end(), 0.0f);
    for (int qi = 0; qi < Q; ++qi) {
      const float* vrow = v.data() + static_cast<size_t>(qi) * D;
      for (int d = 0; d < D; ++d) pooled[d] += wb[qi] * vrow[d];
    }
    float* zb = z.data() + static_cast<size_t>(b) * D;
    for (int d = 0; d < D; ++d) {
      float acc = agg.bo[d];
      for (int j = 0; j < D; ++j) acc += pooled[j] * agg.wo[static_cast<size_t>(j) * D + d];
      zb[d] = acc;
    }
  }
  return {std::move(z), std::move(w)};
}

ContributionReport contribution_report(const Tensor& w,
                                       const std::vector<std::pair<int, int>>& slots) {
  if (w.rank() != 2 || w.dim(0) < 1) throw std::invalid_argument("contribution_report: empty");
  const int B = static_cast<int>(w.dim(0));
  const int Q = static_cast<int>(w.dim(1));
  if (static_cast<int>(slots.size()) != Q)
    throw std::invalid_argument("contribution_report: slot labels mismatch");

  ContributionReport rep;
  rep.slots = slots;
  rep.mean_weight.assign(Q, 0.0);
  for (int b = 0; b < B; ++b)
    for (int q = 0; q < Q; ++q) rep.mean_weight[q] += w.at({b, q});
  for (auto& v : rep.mean_weight) v /= B;

  for (const auto& [t, l] : slots) {
    if (std::find(rep.timesteps.begin(), rep.timesteps.end(), t) == rep.timesteps.end())
      rep.timesteps.push_back(t);
    if (std::find(rep.layers.begin(), rep.layers.end(), l) == rep.layers.end())
      rep.layers.push_back(l);
  }
  rep.timestep_marginal.assign(rep.timesteps.size(), 0.0);
  rep.layer_marginal.assign(rep.layers.size(), 0.0);
  for (int q = 0; q < Q; ++q) {
    auto ti = std::find(rep.timesteps.begin(), rep.timesteps.end(), slots[q].first) -
              rep.timesteps.begin();
    auto li = std::find(rep.layers.begin(), rep.layers.end(), slots[q].second) -
              rep.layers.begin();
    rep.timestep_marginal[ti] += rep.mean_weight[q];
    rep.layer_marginal[li] += rep.mean_weight[q];
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Aggregator + head training (frozen backbone)

namespace {

struct AggHead {
  AggregatorState agg;
  std::vector<float> head_w;  // D x C
  std::vector<float> head_b;  // C
  int n_out = 0;

  AggHead(int dim, int n_out_, uint64_t seed) : agg(dim, seed), n_out(n_out_) {
    Rng rng(derive_seed(seed, 0xead));
    float a = std::sqrt(6.0f / (dim + n_out));
    head_w.resize(static_cast<size_t>(dim) * n_out);
    rng.fill_uniform(head_w.data(), head_w.size(), -a, a);
    head_b.assign(n_out, 0.0f);
  }
};

// flat view over all trainable values, fixed order
struct FlatView {
  std::vector<float*> ptrs;
  std::vector<size_t> sizes;
  size_t total = 0;
  void add(std::vector<float>& v) {
    ptrs.push_back(v.data());
    sizes.push_back(v.size());
    total += v.size();
  }
};

FlatView flat_view(AggHead& m) {
  FlatView f;
  f.add(m.agg.q);
  f.add(m.agg.wk);
  f.add(m.agg.wv);
  f.add(m.agg.wo);
  f.add(m.agg.bo);
  f.add(m.head_w);
  f.add(m.head_b);
  return f;
}

struct AggGrads {
  std::vector<float> q, wk, wv, wo, bo, head_w, head_b;
  explicit AggGrads(const AggHead& m)
      : q(m.agg.q.size(), 0.0f),
        wk(m.agg.wk.size(), 0.0f),
        wv(m.agg.wv.size(), 0.0f),
        wo(m.agg.wo.size(), 0.0f),
        bo(m.agg.bo.size(), 0.0f),
        head_w(m.head_w.size(), 0.0f),
        head_b(m.head_b.size(), 0.0f) {}
  void zero() {
    auto z = [](std::vector<float>& v) { std::fill(v.begin(), v.end(), 0.0f); };
    z(q), z(wk), z(wv), z(wo), z(bo), z(head_w), z(head_b);
  }
};

FlatView flat_view(AggGrads& g) {
  FlatView f;
  f.add(g.q);
  f.add(g.wk);
  f.add(g.wv);
  f.add(g.wo);
  f.add(g.bo);
  f.add(g.head_w);
  f.add(g.head_b);
  return f;
}

// forward + backward for one standardized sample; accumulates grads scaled
// by grad_scale and returns the per-sample loss.
double agg_head_step(const AggHead& m, AggGrads& g, const float* e, int Q, int D,
                     float target, TaskKind kind, float grad_scale) {
  const int C = m.n_out;
  const float scale = 1.0f / std::sqrt(static_cast<float>(D));
  std::vector<float> k(static_cast<size_t>(Q) * D), v(static_cast<size_t>(Q) * D);
  ops::matmul(e, m.agg.wk.data(), k.data(), Q, D, D);
  ops::matmul(e, m.agg.wv.data(), v.data(), Q, D, D);

  std::vector<float> s(Q), w(Q), pooled(D, 0.0f), z(D), logits(C);
  for (int qi = 0; qi < Q; ++qi) {
    float dot = 0.0f;
    const float* kr = k.data() + static_cast<size_t>(qi) * D;
    for (int d = 0; d < D; ++d) dot += m.agg.q[d] * kr[d];
    s[qi] = dot * scale;
  }
  ops::softmax(s.data(), w.data(), 1, Q);
  for (int qi = 0; qi < Q; ++qi) {
    const float* vr = v.data() + static_cast<size_t>(qi) * D;
    for (int d = 0; d < D; ++d) pooled[d] += w[qi] * vr[d];
  }
  for (int d = 0; d < D; ++d) {
    float acc = m.agg.bo[d];
    for (int j = 0; j < D; ++j) acc += pooled[j] * m.agg.wo[static_cast<size_t>(j) * D + d];
    z[d] = acc;
  }
  for (int c = 0; c < C; ++c) {
    float acc = m.head_b[c];
    for (int d = 0; d < D; ++d) acc += z[d] * m.head_w[static_cast<size_t>(d) * C + c];
    logits[c] = acc;
  }

  double loss = 0.0;
  std::vector<float> dlogits(C);
  if (kind == TaskKind::Classification) {
    std::vector<float> p(C);
    ops::softmax(logits.data(), p.data(), 1, C);
    int y = static_cast<int>(target);
    loss = -std::log(std::max(p[y], 1e-12f));
    for (int c = 0; c < C; ++c) dlogits[c] = (p[c] - (c == y ? 1.0f : 0.0f)) * grad_scale;
  } else {
    float d = logits[0] - target;
    loss = static_cast<double>(d) * d;
    dlogits[0] = 2.0f * d * grad_scale;
  }

  std::vector<float> dz(D, 0.0f);
  for (int d = 0; d < D; ++d) {
    float acc = 0.0f;
    for (int c = 0; c < C; ++c) {
      g.head_w[static_cast<size_t>(d) * C + c] += z[d] * dlogits[c];
      acc += m.head_w[static_cast<size_t>(d) * C + c] * dlogits[c];
    }
    dz[d] = acc;
  }
  for (int c = 0; c < C; ++c) g.head_b[c] += dlogits[c];

  std::vector<float> dpooled(D, 0.0f);
  for (int j = 0; j < D; ++j) {
    float acc = 0.0f;
    for (int d = 0; d < D; ++d) {
      g.wo[static_cast<size_t>(j) * D + d] += pooled[j] * dz[d];
      acc += m.agg.wo[static_cast<size_t>(j) * D + d] * dz[d];
    }
    dpooled[j] = acc;
  }
  for (int d = 0; d < D; ++d) g.bo[d] += dz[d];

  std::vector<float> dw(Q), ds(Q);
  for (int qi = 0; qi < Q; ++qi) {
    const float* vr = v.data() + static_cast<size_t>(qi) * D;
    float acc = 0.0f;
    for (int d = 0; d < D; ++d) acc += dpooled[d] * vr[d];
    dw[qi] = acc;
  }
  float dot = 0.0f;
  for (int qi = 0; qi < Q; ++qi) dot += dw[qi] * w[qi];
  for (int qi = 0; qi < Q; ++qi) ds[qi] = w[qi] * (dw[qi] - dot);

  std::vector<float> dk(static_cast<size_t>(Q) * D), dv(static_cast<size_t>(Q) * D);
  for (int qi = 0; qi < Q; ++qi) {
    const float* kr = k.data() + static_cast<size_t>(qi) * D;
    float* dkr = dk.data() + static_cast<size_t>(qi) * D;
    float* dvr = dv.data() + static_cast<size_t>(qi) * D;
    float dsq = ds[qi] * scale;
    for (int d = 0; d < D; ++d) {
      g.q[d] += dsq * kr[d];
      dkr[d] = dsq * m.agg.q[d];
      dvr[d] = w[qi] * dpooled[d];
    }
  }
  ops::matmul_tn_acc(e, dk.data(), g.wk.data(), Q, D, D);
  ops::matmul_tn_acc(e, dv.data(), g.wv.data(), Q, D, D);
  return loss;
}

// inference-only forward to logits
void agg_head_logits(const AggHead& m, const float* e, int Q, int D, std::vector<float>& out) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(D));
  std::vector<float> k(static_cast<size_t>(Q) * D), v(static_cast<size_t>(Q) * D);
  std::vector<float> s(Q), w(Q), pooled(D, 0.0f), z(D);
  ops::matmul(e, m.agg.wk.data(), k.data(), Q, D, D);
  ops::matmul(e, m.agg.wv.data(), v.data(), Q, D, D);
  for (int qi = 0; qi < Q; ++qi) {
    float dot = 0.0f;
    for (int d = 0; d < D; ++d) dot += m.agg.q[d] * k[static_cast<size_t>(qi) * D + d];
    s[qi] = dot * scale;
  }
  ops::softmax(s.data(), w.data(), 1, Q);
  for (int qi = 0; qi < Q; ++qi)
    for (int d = 0; d < D; ++d) pooled[d] += w[qi] * v[static_cast<size_t>(qi) * D + d];
  for (int d = 0; d < D; ++d) {
    float acc = m.agg.bo[d];
    for (int j = 0; j < D; ++j) acc += pooled[j] * m.agg.wo[static_cast<size_t>(j) * D + d];
    z[d] = acc;
  }
  out.assign(m.n_out, 0.0f);
  for (int c = 0; c < m.n_out; ++c) {
    float acc = m.head_b[c];
    for (int d = 0; d < D; ++d) acc += z[d] * m.head_w[static_cast<size_t>(d) * m.n_out + c];
    out[c] = acc;
  }
}

}  // namespace

namespace {

struct BankStats {
  std::vector<double> mu, sd;  // per (slot, dim)
  double ymu = 0.0, ysd = 1.0;
};

BankStats bank_stats(const FeatureBank& bank, const std::vector<int>& rows,
                     const std::vector<float>& labels, TaskKind kind) {
  const size_t feat = static_cast<size_t>(bank.e.dim(1)) * bank.e.dim(2);
  BankStats st;
  st.mu.assign(feat, 0.0);
  st.sd.assign(feat, 0.0);
  for (int r : rows) {
    const float* e = bank.e.data() + static_cast<size_t>(r) * feat;
    for (size_t i = 0; i < feat; ++i) st.mu[i] += e[i];
  }
  for (auto& v : st.mu) v /= static_cast<double>(rows.size());
  for (int r : rows) {
    const float* e = bank.e.data() + static_cast<size_t>(r) * feat;
    for (size_t i = 0; i < feat; ++i) {
      double d = e[i] - st.mu[i];
      st.sd[i] += d * d;
    }
  }
  for (auto& v : st.sd) {
    v = std::sqrt(v / static_cast<double>(rows.size()));
    if (v <= 0.0) v = 1.0;
  }
  if (kind == TaskKind::Regression) {
    for (int r : rows) st.ymu += labels[r];
    st.ymu /= static_cast<double>(rows.size());
    double var = 0.0;
    for (int r : rows) var += (labels[r] - st.ymu) * (labels[r] - st.ymu);
    st.ysd = std::sqrt(var / static_cast<double>(rows.size()));
    if (st.ysd <= 0.0) st.ysd = 1.0;
  }
  return st;
}

void standardize_row(const FeatureBank& bank, const BankStats& st, int row,
                     std::vector<float>& buf) {
  const size_t feat = st.mu.size();
  const float* e = bank.e.data() + static_cast<size_t>(row) * feat;
  buf.resize(feat);
  for (size_t i = 0; i < feat; ++i)
    buf[i] = static_cast<float>((e[i] - st.mu[i]) / st.sd[i]);
}

AggHead train_agg_head(const FeatureBank& bank, const std::vector<int>& rows,
                       const std::vector<float>& labels, TaskKind kind, int n_out,
                       const BankStats& st, const FinetuneOptions& opt, uint64_t seed) {
  const int Q = static_cast<int>(bank.e.dim(1));
  const int D = static_cast<int>(bank.e.dim(2));
  AggHead model(D, n_out, seed);
  AggGrads grads(model);
  FlatView wview = flat_view(model);
  FlatView gview = flat_view(grads);
  std::vector<double> adam_m(wview.total, 0.0), adam_v(wview.total, 0.0);
  long step = 0;

  Rng shuffle_rng(derive_seed(seed, 0x5f1e));
  std::vector<int> order = rows;
  std::vector<float> ebuf;
  for (int ep = 0; ep < opt.epochs; ++ep) {
    for (size_t k = order.size(); k > 1; --k)
      std::swap(order[k - 1], order[shuffle_rng.below(k)]);
    for (size_t pos = 0; pos < order.size(); pos += opt.batch) {
      size_t end = std::min(pos + static_cast<size_t>(opt.batch), order.size());
      grads.zero();
      float gs = 1.0f / static_cast<float>(end - pos);
      for (size_t i = pos; i < end; ++i) {
        standardize_row(bank, st, order[i], ebuf);
        float tgt = kind == TaskKind::Regression
                        ? static_cast<float>((labels[order[i]] - st.ymu) / st.ysd)
                        : labels[order[i]];
        agg_head_step(model, grads, ebuf.data(), Q, D, tgt, kind, gs);
      }
      ++step;
      double bc1 = 1.0 - std::pow(0.9, static_cast<double>(step));
      double bc2 = 1.0 - std::pow(0.999, static_cast<double>(step));
      size_t off = 0;
      for (size_t seg = 0; seg < wview.ptrs.size(); ++seg) {
        float* wp = wview.ptrs[seg];
        float* gp = gview.ptrs[seg];
        for (size_t i = 0; i < wview.sizes[seg]; ++i, ++off) {
          double gvalue = gp[i];
          adam_m[off] = 0.9 * adam_m[off] + 0.1 * gvalue;
          adam_v[off] = 0.999 * adam_v[off] + 0.001 * gvalue * gvalue;
          double mh = adam_m[off] / bc1;
          double vh = adam_v[off] / bc2;
          wp[i] -= static_cast<float>(opt.lr * (mh / (std::sqrt(vh) + 1e-8) +
                                                opt.weight_decay * wp[i]));
        }
      }
    }
  }
  return model;
}

}  // namespace

ProbeResult finetune_probe(const FeatureBank& bank, const std::vector<float>& labels,
                           TaskKind kind, const FinetuneOptions& opt) {
  if (bank.e.rank() != 3) throw std::invalid_argument("finetune_probe: bank must be {B,Q,D}");
  const int B = static_cast<int>(bank.e.dim(0));
  const int Q = static_cast<int>(bank.e.dim(1));
  const int D = static_cast<int>(bank.e.dim(2));
  if (static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("finetune_probe: label count mismatch");
  if (opt.folds < 2) throw std::invalid_argument("finetune_probe: folds must be >= 2");

  int n_out = 1;
  if (kind == TaskKind::Classification) {
    n_out = 0;
    for (float v : labels) n_out = std::max(n_out, static_cast<int>(v) + 1);
    if (n_out < 2) throw std::invalid_argument("finetune_probe: need at least 2 classes");
  } else {
    float lo = *std::min_element(labels.begin(), labels.end());
    float hi = *std::max_element(labels.begin(), labels.end());
    if (!(hi > lo)) throw std::invalid_argument("finetune_probe: constant regression target");
  }

  auto fold_rows = stratified_folds(labels, bank.groups, kind, opt.folds, opt.seed);

  ProbeResult res;
  res.kind = kind;
  res.folds = opt.folds;
  res.seed = opt.seed;
  std::vector<double> accs, mses, rs;
  std::vector<float> ebuf, logits;

  for (int f = 0; f < opt.folds; ++f) {
    std::vector<int> test_rows = fold_rows[f];
    std::vector<int> train_rows;
    for (int g = 0; g < opt.folds; ++g)
      if (g != f) train_rows.insert(train_rows.end(), fold_rows[g].begin(), fold_rows[g].end());
    if (test_rows.empty() || train_rows.empty())
      throw std::invalid_argument("finetune_probe: degenerate fold");

    BankStats st = bank_stats(bank, train_rows, labels, kind);
    AggHead model =
        train_agg_head(bank, train_rows, labels, kind, n_out, st, opt, derive_seed(opt.seed, 0xa66, f));

    if (kind == TaskKind::Classification) {
      int correct = 0;
      for (int r : test_rows) {
        standardize_row(bank, st, r, ebuf);
        agg_head_logits(model, ebuf.data(), Q, D, logits);
        int best = 0;
        for (int c = 1; c < n_out; ++c)
          if (logits[c] > logits[best]) best = c;
        if (best == static_cast<int>(labels[r])) ++correct;
      }
      double acc = static_cast<double>(correct) / test_rows.size();
      accs.push_back(acc);
      res.fold_primary.push_back(acc);
    } else {
      std::vector<double> pred, tgt;
      for (int r : test_rows) {
        standardize_row(bank, st, r, ebuf);
        agg_head_logits(model, ebuf.data(), Q, D, logits);
        pred.push_back(logits[0]);
        tgt.push_back((labels[r] - st.ymu) / st.ysd);
      }
      double mse = 0.0, pm = 0.0, tm = 0.0;
      for (size_t i = 0; i < pred.size(); ++i) {
        double d = pred[i] - tgt[i];
        mse += d * d;
        pm += pred[i];
        tm += tgt[i];
      }
      mse /= static_cast<double>(pred.size());
      pm /= static_cast<double>(pred.size());
      tm /= static_cast<double>(pred.size());
      double sxy = 0, sxx = 0, syy = 0;
      for (size_t i = 0; i < pred.size(); ++i) {
        sxy += (pred[i] - pm) * (tgt[i] - tm);
        sxx += (pred[i] - pm) * (pred[i] - pm);
        syy += (tgt[i] - tm) * (tgt[i] - tm);
      }
      double r = (sxx > 0 && syy > 0) ? sxy / std::sqrt(sxx * syy) : 0.0;
      mses.push_back(mse);
      rs.push_back(r);
      res.fold_primary.push_back(r);
    }
  }

  auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0.0;
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size()));
  };
  if (kind == TaskKind::Classification) {
    mean_std(accs, res.accuracy_mean, res.accuracy_std);
  } else {
    mean_std(mses, res.mse_mean, res.mse_std);
    mean_std(rs, res.r_mean, res.r_std);
  }
  return res;
}

TrainedAggregator finetune_aggregator_full(const FeatureBank& bank,
                                           const std::vector<float>& labels, TaskKind kind,
                                           const FinetuneOptions& opt) {
  const int B = static_cast<int>(bank.e.dim(0));
  const int Q = static_cast<int>(bank.e.dim(1));
  const int D = static_cast<int>(bank.e.dim(2));
  if (static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("finetune_aggregator_full: label count mismatch");
  int n_out = 1;
  if (kind == TaskKind::Classification) {
    n_out = 0;
    for (float v : labels) n_out = std::max(n_out, static_cast<int>(v) + 1);
  }
  std::vector<int> rows(B);
  for (int i = 0; i < B; ++i) rows[i] = i;
  BankStats st = bank_stats(bank, rows, labels, kind);
  AggHead model =
      train_agg_head(bank, rows, labels, kind, n_out, st, opt, derive_seed(opt.seed, 0xf077));

  // attention weights of the trained aggregator over the standardized bank
  FeatureBank zbank;
  zbank.e = Tensor(bank.e.shape());
  std::vector<float> ebuf;
  const size_t feat = static_cast<size_t>(Q) * D;
  for (int r = 0; r < B; ++r) {
    standardize_row(bank, st, r, ebuf);
    std::copy(ebuf.begin(), ebuf.end(), zbank.e.data() + static_cast<size_t>(r) * feat);
  }
  auto [z, w] = aggregate(zbank, model.agg);
  TrainedAggregator out;
  out.agg = model.agg;
  out.weights = std::move(w);
  return out;
}

}  // namespace roidiff
