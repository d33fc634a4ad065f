// Acceptance suite: one checkable criterion per entry, each printing a
// single [PASS]/[FAIL] line. Heavy artifacts (the shared corpus and the
// pinned pretraining runs) are cached under --cache so later criteria reuse
// earlier work; training is seed-deterministic so cached artifacts are
// byte-identical to freshly built ones.

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "roidiff/archive.hpp"
#include "roidiff/errors.hpp"
#include "roidiff/evalmetrics.hpp"
#include "roidiff/features.hpp"
#include "roidiff/rng.hpp"
#include "roidiff/sampler.hpp"
#include "roidiff/schedule.hpp"
#include "roidiff/session_io.hpp"
#include "roidiff/synthetic.hpp"
#include "roidiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace roidiff;
using Clock = std::chrono::steady_clock;

namespace {

// ---- pinned run configuration --------------------------------------------
// Desk-scale model (N=64, T=40, patch 4, D=128, K=6) everywhere.
constexpr uint64_t kCorpusSeed = 4242;
constexpr int kCorpusSessions = 800;
constexpr uint64_t kTrainSeed = 777;
constexpr long kTrainSteps = 600;
constexpr int kTrainBatch = 16;
constexpr double kTrainLr = 3e-4;
constexpr int kSampleSteps = 40;   // strided ancestral steps for the fidelity arms
constexpr int kVirtualCohort = 200;
constexpr uint64_t kFidelitySeed = 99;
constexpr long kAblateSteps = 250;
constexpr int kAblateBudget = 250;
const char* kCacheTag = "v1";

ModelConfig desk_model() {
  ModelConfig mc;  // struct defaults are the desk-scale configuration
  return mc;
}

GeneratorConfig desk_corpus() {
  GeneratorConfig gc;
  gc.n_rois = 64;
  gc.session_length = 200;
  gc.window = 40;
  gc.n_networks = 4;
  gc.n_sessions = kCorpusSessions;
  gc.seed = kCorpusSeed;
  return gc;
}

struct Ctx {
  fs::path cache;
  fs::path scratch;
  std::string cli;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path ensure_corpus(Ctx& ctx) {
  fs::path dir = ctx.cache / (std::string("corpus_") + kCacheTag);
  fs::path manifest = dir / "manifest.jsonl";
  if (!fs::exists(manifest)) {
    Corpus corpus = generate_corpus(desk_corpus());
    write_corpus(corpus, dir);
  }
  return manifest;
}

TrainConfig pinned_train_config(const fs::path& manifest, bool strip_metadata) {
  TrainConfig cfg;
  cfg.model = desk_model();
  cfg.lr = kTrainLr;
  cfg.batch_size = kTrainBatch;
  cfg.epochs = 1000;  // step cap below controls the actual length
  cfg.max_steps = kTrainSteps;
  cfg.seed = kTrainSeed;
  cfg.strip_metadata = strip_metadata;
  cfg.manifest_path = manifest.string();
  return cfg;
}

fs::path ensure_pinned_model(Ctx& ctx, bool strip_metadata) {
  fs::path path = ctx.cache / (std::string(strip_metadata ? "uncond_" : "cond_") + kCacheTag +
                               ".rta");
  if (fs::exists(path)) return path;
  fs::path manifest = ensure_corpus(ctx);
  TrainConfig cfg = pinned_train_config(manifest, strip_metadata);
  cfg.checkpoint_path = path.string();
  cfg.log_path = (ctx.cache / (std::string(strip_metadata ? "uncond_" : "cond_") + kCacheTag +
                               "_runlog.csv"))
                     .string();
  pretrain(cfg);
  return path;
}

// first window of every session, with ground-truth (unmasked) labels
struct ProbeSet {
  std::vector<Tensor> windows;
  std::vector<float> sex, age, diagnosis;
  std::vector<int> groups;
};

ProbeSet probe_set(const fs::path& manifest_path, const GroundTruth& gt) {
  auto entries = read_manifest(manifest_path);
  ProbeSet ps;
  for (size_t i = 0; i < entries.size(); ++i) {
    Tensor session = load_session(entries[i], manifest_path);
    auto ws = window_stream(session, desk_model().n_timepoints, 0);
    ps.windows.push_back(std::move(ws.at(0)));
    ps.sex.push_back(static_cast<float>(gt.latents[i].sex));
    ps.age.push_back(gt.latents[i].age);
    ps.diagnosis.push_back(static_cast<float>(gt.latents[i].diagnosis));
    ps.groups.push_back(static_cast<int>(i));
  }
  return ps;
}

Tensor flatten_bank(const FeatureBank& bank) {
  const long B = bank.e.dim(0);
  const long F = bank.e.dim(1) * bank.e.dim(2);
  return Tensor({B, F}, bank.e.storage());
}

Tensor fc_features(const std::vector<Tensor>& windows) {
  const int n = static_cast<int>(windows[0].dim(0));
  const int tri = n * (n - 1) / 2;
  Tensor out({static_cast<long>(windows.size()), tri});
  for (size_t i = 0; i < windows.size(); ++i) {
    Tensor fc = fc_matrix(windows[i]);
    size_t k = 0;
    float* row = out.data() + i * static_cast<size_t>(tri);
    for (int r = 0; r < n; ++r)
      for (int q = r + 1; q < n; ++q) row[k++] = fc.at({r, q});
  }
  return out;
}

FeatureBank extract_probe_bank(const DitModel& model, const NoiseSchedule& sched,
                               const ProbeSet& ps) {
  ExtractionSpec spec = ExtractionSpec::defaults(model.config(), 2024);
  std::vector<const MetadataRecord*> conds(ps.windows.size(), nullptr);
  FeatureBank bank = extract_features(model, sched, ps.windows, conds, spec);
  bank.groups = ps.groups;
  return bank;
}

// ---- criteria --------------------------------------------------------------

bool criterion_schedule(Ctx&, std::string& detail) {
  auto t0 = Clock::now();
  struct Spot {
    int S, t;
    double abar;
  };
  const Spot spots[] = {
      {10, 1, 0.97209273711396917},   {10, 3, 0.78691051115082932},
      {10, 5, 0.49384359044063771},   {10, 7, 0.20312147411833755},
      {10, 10, 1.0e-5},               {100, 1, 0.99936871840165848},
      {100, 25, 0.84701216132690473}, {100, 50, 0.49384359044063771},
      {100, 75, 0.14427210238573571}, {100, 100, 1.0e-5},
      {1000, 1, 0.99995871577517822}, {1000, 250, 0.84701216132690473},
      {1000, 500, 0.49384359044063771}, {1000, 750, 0.14427210238573571},
      {1000, 1000, 1.0e-5}};
  bool ok = true;
  for (int S : {10, 100, 1000}) {
    NoiseSchedule s = cosine_schedule(S);
    ok &= s.alpha_bar[0] == 1.0;
    for (int t = 1; t <= S; ++t) {
      ok &= s.alpha_bar[t] < s.alpha_bar[t - 1];
      double vp = s.alpha[t] * s.alpha[t] + s.sigma[t] * s.sigma[t];
      ok &= std::abs(vp - 1.0) < 1e-6;
    }
  }
  double worst = 0.0;
  for (const auto& sp : spots) {
    NoiseSchedule s = cosine_schedule(sp.S);
    worst = std::max(worst, std::abs(s.alpha_bar[sp.t] - sp.abar));
  }
  ok &= worst < 1e-6;
  double secs = seconds_since(t0);
  ok &= secs < 1.0;
  std::ostringstream os;
  os << "spot worst " << worst << ", " << secs << "s";
  detail = os.str();
  return ok;
}

bool criterion_algebra(Ctx&, std::string& detail) {
  auto t0 = Clock::now();
  NoiseSchedule sched = cosine_schedule(1000);
  Rng rng(1);
  float worst = 0.0f;
  for (int c = 0; c < 1000; ++c) {
    int t = 1 + static_cast<int>(rng.below(1000));
    Tensor x0({1, 16, 16}), eps({1, 16, 16});
    rng.fill_normal(x0.data(), x0.numel());
    rng.fill_normal(eps.data(), eps.numel());
    auto ns = forward_noise(x0, t, eps, sched);
    Tensor v = v_target(x0, eps, t, sched);
    auto [x0h, epsh] = recover_x0_eps(ns.x_t, v, t, sched);
    for (size_t i = 0; i < x0.numel(); ++i) {
      worst = std::max(worst, std::abs(x0h.data()[i] - x0.data()[i]));
      worst = std::max(worst, std::abs(epsh.data()[i] - eps.data()[i]));
    }
  }
  double secs = seconds_since(t0);
  std::ostringstream os;
  os << "1000 cases, worst " << worst << ", " << secs << "s";
  detail = os.str();
  return worst < 1e-4f && secs < 5.0;
}

bool criterion_structure(Ctx&, std::string& detail) {
  Rng rng(2);
  bool ok = true;
  for (int c = 0; c < 50; ++c) {
    int p = 1 + static_cast<int>(rng.below(5));
    int n = p * (1 + static_cast<int>(rng.below(14)));
    int t = p * (1 + static_cast<int>(rng.below(14)));
    ModelConfig cfg;
    cfg.n_rois = n;
    cfg.n_timepoints = t;
    cfg.patch = p;
    ok &= cfg.tokens() == (n / p) * (t / p);
    Tensor x({2, n, t});
    rng.fill_normal(x.data(), x.numel());
    Tensor back = DitModel::unpatchify(DitModel::extract_patches(x, cfg), cfg);
    ok &= std::memcmp(back.data(), x.data(), sizeof(float) * x.numel()) == 0;
  }
  detail = "50 shapes, bitwise";
  return ok;
}

bool criterion_init_zero(Ctx&, std::string& detail) {
  DitModel model(desk_model(), 3);
  Rng rng(4);
  Tensor x({2, 64, 40});
  rng.fill_normal(x.data(), x.numel());
  MetadataRecord rec;
  rec.age = 30.0f;
  rec.sex = 1;
  Tensor v = model.forward(x, {17, 903}, {&rec, nullptr}, {}, nullptr);
  for (size_t i = 0; i < v.numel(); ++i)
    if (v.data()[i] != 0.0f) {
      detail = "nonzero output at fresh initialization";
      return false;
    }
  detail = "v_hat == 0 exactly";
  return true;
}

bool criterion_gradient(Ctx&, std::string& detail) {
  auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.n_rois = 8;
  cfg.n_timepoints = 8;
  cfg.patch = 4;
  cfg.embed_dim = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.cond_dim = 12;
  cfg.steps = 50;
  cfg.freq_dim = 32;
  DitModel model(cfg, 55);
  model.randomize_all(56, 0.15f);

  Tensor x_t({2, 8, 8});
  Rng rx(60);
  rx.fill_normal(x_t.data(), x_t.numel());
  std::vector<int> ts = {7, 31};
  MetadataRecord rec;
  rec.age = 40.0f;
  rec.sex = 1;
  rec.diagnosis = 0;
  std::vector<const MetadataRecord*> conds = {&rec, nullptr};

  Tensor v = model.forward(x_t, ts, conds, {}, nullptr);
  Rng rv(61);
  for (size_t i = 0; i < v.numel(); ++i) v.data()[i] += 0.05f * static_cast<float>(rv.normal());

  auto loss_fn = [&]() {
    Tensor vh = model.forward(x_t, ts, conds, {}, nullptr);
    return diffusion_loss(vh, v);
  };
  model.zero_grad();
  ForwardCache cache;
  Tensor vh = model.forward(x_t, ts, conds, {}, &cache);
  Tensor dv(vh.shape());
  double inv_n = 2.0 / static_cast<double>(vh.numel());
  for (size_t i = 0; i < vh.numel(); ++i)
    dv.data()[i] = static_cast<float>(inv_n * (vh.data()[i] - v.data()[i]));
  model.backward(dv, cache);

  Rng pick(99);
  auto& store = model.params();
  int rated = 0;
  double worst_rel = 0.0, worst_abs = 0.0;
  const double h = 1e-3;  // the pinned central-difference step
  for (int trial = 0; trial < 2000 && rated < 24; ++trial) {
    size_t idx = pick.below(store.size());
    float saved = store.weights()[idx];
    store.weights()[idx] = saved + static_cast<float>(h);
    double lp = loss_fn();
    store.weights()[idx] = saved - static_cast<float>(h);
    double lm = loss_fn();
    store.weights()[idx] = saved;
    double fd = (lp - lm) / (2.0 * h);
    double an = store.grads()[idx];
    worst_abs = std::max(worst_abs, std::abs(fd - an));
    if (std::max(std::abs(fd), std::abs(an)) >= 2e-3) {
      worst_rel = std::max(worst_rel, std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)));
      ++rated;
    }
  }
  double secs = seconds_since(t0);
  std::ostringstream os;
  os << rated << " rated params, worst rel " << worst_rel << ", worst abs " << worst_abs
     << ", " << secs << "s";
  detail = os.str();
  return rated >= 20 && worst_rel < 1e-3 && worst_abs < 3e-6 && secs < 60.0;
}

bool criterion_conditioning(Ctx&, std::string& detail) {
  ModelConfig mc;
  mc.n_rois = 16;
  mc.n_timepoints = 16;
  mc.patch = 4;
  mc.embed_dim = 32;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.cond_dim = 16;
  mc.steps = 50;
  mc.freq_dim = 32;
  mc.n_diagnoses = 3;
  bool ok = true;

  // drop-condition forward equals the unconditional forward exactly
  {
    DitModel model(mc, 5);
    model.randomize_all(6, 0.05f);
    Rng rng(7);
    Tensor x({2, 16, 16});
    rng.fill_normal(x.data(), x.numel());
    MetadataRecord rec;
    rec.age = 61.0f;
    rec.diagnosis = 2;
    Tensor vd = model.forward(x, {3, 9}, {&rec, &rec}, {1, 1}, nullptr);
    Tensor vu = model.forward(x, {3, 9}, {nullptr, nullptr}, {}, nullptr);
    ok &= std::memcmp(vd.data(), vu.data(), sizeof(float) * vd.numel()) == 0;
  }

  // tabular layout matches the hand-computed oracle
  {
    DitModel model(mc, 8);
    model.age_stats = {50.0f, 10.0f};
    MetadataRecord rec;
    rec.age = 60.0f;
    rec.sex = 1;
    rec.diagnosis = 2;
    auto tab = model.metadata_tabular(rec);
    std::vector<float> expect = {1, 1, 0, 1, 1, 0, 0, 1, 1};
    ok &= tab.size() == expect.size() && mc.tab_width() == 1 + 1 + 2 + 1 + 3 + 1;
    for (size_t i = 0; i < expect.size() && ok; ++i) ok &= std::abs(tab[i] - expect[i]) < 1e-6f;
    MetadataRecord none;
    auto t0 = model.metadata_tabular(none);
    for (float vv : t0) ok &= vv == 0.0f;
  }

  // 'drop' policy excludes exactly the unlabeled sessions: poisoned
  // unlabeled windows never enter a batch (training would abort on NaN)
  {
    ModelConfig mc2 = mc;
    mc2.n_diagnoses = 2;
    NoiseSchedule sched = cosine_schedule(mc2.steps);
    TrainingSet set;
    Rng rng(9);
    for (int i = 0; i < 12; ++i) {
      Tensor w({mc2.n_rois, mc2.n_timepoints});
      rng.fill_normal(w.data(), w.numel());
      MetadataRecord rec;
      if (i % 3 != 0) {
        rec.sex = i % 2;
      } else {
        w.data()[0] = NAN;  // unlabeled and poisoned
      }
      set.windows.push_back(std::move(w));
      set.records.push_back(rec);
      set.labeled.push_back(rec.fully_missing() ? 0 : 1);
      set.session_of.push_back(i);
    }
    TrainConfig cfg;
    cfg.model = mc2;
    cfg.batch_size = 4;
    cfg.epochs = 3;
    cfg.seed = 10;
    cfg.policy = MissingLabelPolicy::Drop;
    DitModel m1(mc2, 11);
    bool drop_ok = true;
    try {
      pretrain_loop(m1, sched, set, cfg);
    } catch (const std::exception&) {
      drop_ok = false;  // a poisoned window slipped through
    }
    ok &= drop_ok;

    cfg.policy = MissingLabelPolicy::Unconditional;
    DitModel m2(mc2, 11);
    bool saw_poison = false;
    try {
      pretrain_loop(m2, sched, set, cfg);
    } catch (const std::exception&) {
      saw_poison = true;  // the unconditional policy keeps those windows
    }
    ok &= saw_poison;
  }
  detail = "drop equivalence, layout oracle, drop policy";
  return ok;
}

bool criterion_aggregator(Ctx&, std::string& detail) {
  Rng rng(12);
  const int D = 32;
  double worst_sum = 0.0, worst_oracle = 0.0;
  for (int c = 0; c < 1000; ++c) {
    int Q = 1 + static_cast<int>(rng.below(12));
    AggregatorState agg(D, derive_seed(13, c));
    FeatureBank bank;
    bank.e = Tensor({2, Q, D});
    rng.fill_normal(bank.e.data(), bank.e.numel());
    auto [z, w] = aggregate(bank, agg);
    for (int b = 0; b < 2; ++b) {
      double sum = 0.0;
      for (int q = 0; q < Q; ++q) {
        sum += w.at({b, q});
        if (w.at({b, q}) < 0.0f) worst_sum = 1e9;
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      // scalar oracle
      std::vector<double> scores(Q, 0.0);
      for (int q = 0; q < Q; ++q) {
        std::vector<double> k(D, 0.0);
        for (int d = 0; d < D; ++d)
          for (int j = 0; j < D; ++j)
            k[d] += bank.e.at({b, q, j}) * agg.wk[static_cast<size_t>(j) * D + d];
        for (int d = 0; d < D; ++d) scores[q] += agg.q[d] * k[d];
        scores[q] /= std::sqrt(static_cast<double>(D));
      }
      double mx = scores[0];
      for (double s : scores) mx = std::max(mx, s);
      double denom = 0.0;
      for (double s : scores) denom += std::exp(s - mx);
      for (int q = 0; q < Q; ++q)
        worst_oracle =
            std::max(worst_oracle, std::abs(w.at({b, q}) - std::exp(scores[q] - mx) / denom));
    }
    if (Q == 1) {
      if (w.at({0, 0}) != 1.0f || w.at({1, 0}) != 1.0f) worst_sum = 1e9;
    }
  }
  // contribution marginals on a random normalized bank
  Tensor w({64, 8});
  for (int b = 0; b < 64; ++b) {
    double sum = 0.0;
    for (int q = 0; q < 8; ++q) {
      w.at({b, q}) = static_cast<float>(rng.uniform()) + 0.01f;
      sum += w.at({b, q});
    }
    for (int q = 0; q < 8; ++q) w.at({b, q}) = static_cast<float>(w.at({b, q}) / sum);
  }
  std::vector<std::pair<int, int>> slots;
  for (int t : {0, 50})
    for (int l : {3, 4, 5, 6}) slots.push_back({t, l});
  auto rep = contribution_report(w, slots);
  double tsum = 0.0, lsum = 0.0;
  for (double m : rep.timestep_marginal) tsum += m;
  for (double m : rep.layer_marginal) lsum += m;
  bool ok = worst_sum < 1e-6 && worst_oracle < 1e-5 && std::abs(tsum - 1.0) < 1e-6 &&
            std::abs(lsum - 1.0) < 1e-6;
  std::ostringstream os;
  os << "1000 banks, sum err " << worst_sum << ", oracle err " << worst_oracle;
  detail = os.str();
  return ok;
}

bool criterion_training_smoke(Ctx& ctx, std::string& detail) {
  auto t0 = Clock::now();
  fs::path manifest = ensure_corpus(ctx);
  TrainConfig cfg = pinned_train_config(manifest, false);
  cfg.max_steps = 200;

  auto run = [&](DitModel& model) {
    TrainingSet data = load_training_set(manifest, {"case", "control"},
                                         cfg.model.n_timepoints, cfg.window_stride);
    NoiseSchedule sched = cosine_schedule(cfg.model.steps);
    return pretrain_loop(model, sched, data, cfg);
  };
  DitModel m1(cfg.model, derive_seed(cfg.seed, 0x1417));
  auto entries = read_manifest(manifest);
  m1.diagnosis_labels = diagnosis_labels_from(entries, 2);
  m1.age_stats = age_stats_from(entries);
  auto l1 = run(m1);

  DitModel m2(cfg.model, derive_seed(cfg.seed, 0x1417));
  m2.diagnosis_labels = m1.diagnosis_labels;
  m2.age_stats = m1.age_stats;
  auto l2 = run(m2);

  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 20; ++i) head += l1[i].loss;
  for (int i = 0; i < 20; ++i) tail += l1[l1.size() - 1 - i].loss;
  head /= 20.0;
  tail /= 20.0;

  bool bitwise = l1.size() == l2.size();
  for (size_t i = 0; bitwise && i < l1.size(); ++i) bitwise &= l1[i].loss == l2[i].loss;
  bitwise = bitwise && std::memcmp(m1.params().weights().data(), m2.params().weights().data(),
                                   sizeof(float) * m1.params().size()) == 0;
  double secs = seconds_since(t0);
  std::ostringstream os;
  os << "smoothed loss " << head << " -> " << tail << ", bitwise=" << (bitwise ? "yes" : "no")
     << ", " << secs << "s";
  detail = os.str();
  return tail < head && bitwise && secs < 600.0;
}

bool criterion_fidelity(Ctx& ctx, std::string& detail) {
  auto t0 = Clock::now();
  fs::path manifest_path = ensure_corpus(ctx);
  fs::path ckpt = ensure_pinned_model(ctx, false);
  DitModel model = load_checkpoint(ckpt);
  NoiseSchedule sched = cosine_schedule(model.config().steps);
  GroundTruth gt = load_ground_truth(manifest_path.parent_path());

  // cohort: sessions whose observed diagnosis is "case"
  auto entries = read_manifest(manifest_path);
  std::vector<Tensor> windows;
  std::vector<MetadataRecord> meta;
  std::vector<double> gt_acc(static_cast<size_t>(64) * 64, 0.0);
  int cohort_sessions = 0;
  GeneratorConfig gc = desk_corpus();
  for (size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].diagnosis || *entries[i].diagnosis != "case") continue;
    Tensor session = load_session(entries[i], manifest_path);
    MetadataRecord rec = to_record(entries[i], {"case", "control"});
    for (auto& w : window_stream(session, 40, 0)) {
      windows.push_back(std::move(w));
      meta.push_back(rec);
    }
    Tensor cell = analytic_fc(gt.latents[i].state, 1, gt.latents[i].sex, gc, gt.loadings);
    for (size_t k = 0; k < cell.numel(); ++k) gt_acc[k] += cell.data()[k];
    ++cohort_sessions;
  }
  Tensor planted({64, 64});
  for (size_t k = 0; k < planted.numel(); ++k)
    planted.data()[k] = static_cast<float>(gt_acc[k] / cohort_sessions);

  SampleOptions opt;
  opt.n_steps = kSampleSteps;
  FidelityReport rep =
      fidelity_protocol(model, sched, windows, meta, kVirtualCohort, kFidelitySeed, opt);

  double r = rep.random.error.mae;
  double u = rep.unconditional.error.mae;
  double c = rep.conditional.error.mae;
  FcError vs_gt = fc_error(rep.conditional.group, planted);
  double secs = seconds_since(t0);

  std::ostringstream os;
  os << "MAE random " << r << " > uncond " << u << " > cond " << c << "; cond-vs-planted "
     << vs_gt.mae << "; cohort " << cohort_sessions << " sessions; " << secs << "s";
  detail = os.str();
  bool order = c < u && u < r;
  bool gaps = (u - c) / u >= 0.05 && (r - u) / r >= 0.05;
  return order && gaps && vs_gt.mae < 0.15 && secs < 1200.0;
}

bool criterion_probe_ordering(Ctx& ctx, std::string& detail) {
  fs::path manifest_path = ensure_corpus(ctx);
  GroundTruth gt = load_ground_truth(manifest_path.parent_path());
  ProbeSet ps = probe_set(manifest_path, gt);

  DitModel cond = load_checkpoint(ensure_pinned_model(ctx, false));
  NoiseSchedule sched = cosine_schedule(cond.config().steps);
  FeatureBank cond_bank = extract_probe_bank(cond, sched, ps);
  Tensor cond_flat = flatten_bank(cond_bank);
  Tensor fc_flat = fc_features(ps.windows);

  // same splits and seed on both arms
  const uint64_t probe_seed = 31;
  ProbeResult f_sex =
      linear_probe(cond_flat, ps.sex, TaskKind::Classification, 5, probe_seed, ps.groups);
  ProbeResult b_sex =
      linear_probe(fc_flat, ps.sex, TaskKind::Classification, 5, probe_seed, ps.groups);
  ProbeResult f_age =
      linear_probe(cond_flat, ps.age, TaskKind::Regression, 5, probe_seed, ps.groups);
  ProbeResult b_age =
      linear_probe(fc_flat, ps.age, TaskKind::Regression, 5, probe_seed, ps.groups);

  // conditioned vs unconditional pretraining: mean classification accuracy
  // over 5 probe seeds
  DitModel uncond = load_checkpoint(ensure_pinned_model(ctx, true));
  FeatureBank uncond_bank = extract_probe_bank(uncond, sched, ps);
  Tensor uncond_flat = flatten_bank(uncond_bank);
  double cond_mean = 0.0, uncond_mean = 0.0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    auto acc = [&](const Tensor& X, const std::vector<float>& y) {
      return linear_probe(X, y, TaskKind::Classification, 5, seed, ps.groups).accuracy_mean;
    };
    cond_mean += acc(cond_flat, ps.sex) + acc(cond_flat, ps.diagnosis);
    uncond_mean += acc(uncond_flat, ps.sex) + acc(uncond_flat, ps.diagnosis);
  }
  cond_mean /= 10.0;
  uncond_mean /= 10.0;

  std::ostringstream os;
  os << "sex feat " << f_sex.accuracy_mean << " vs fc " << b_sex.accuracy_mean << "; age r feat "
     << f_age.r_mean << " vs fc " << b_age.r_mean << "; cond " << cond_mean << " vs uncond "
     << uncond_mean;
  detail = os.str();
  bool sex_margin = f_sex.accuracy_mean >= b_sex.accuracy_mean + 0.05;
  bool age_better = f_age.r_mean > b_age.r_mean;
  bool cond_ge = cond_mean >= uncond_mean - 0.01;
  return sex_margin && age_better && cond_ge;
}

bool criterion_state_diversity(Ctx& ctx, std::string& detail) {
  fs::path manifest_path = ensure_corpus(ctx);
  GroundTruth gt = load_ground_truth(manifest_path.parent_path());
  ProbeSet ps = probe_set(manifest_path, gt);
  auto entries = read_manifest(manifest_path);

  std::vector<std::vector<std::string>> ladder = {
      {"rest"},
      {"rest", "disease"},
      {"rest", "disease", "task"},
      {"rest", "disease", "task", "naturalistic"},
      {"rest", "disease", "task", "naturalistic", "sleep"}};
  const char* names[] = {"R", "+D", "+T", "+N", "ALL"};

  std::vector<double> scores;
  for (const auto& states : ladder) {
    std::map<std::string, double> mix;
    for (const auto& s : states) mix[s] = 1.0 / states.size();
    auto subset = state_mixture_split(entries, mix, kAblateBudget, kTrainSeed);

    TrainConfig cfg = pinned_train_config(manifest_path, false);
    cfg.max_steps = kAblateSteps;
    DitModel model(cfg.model, derive_seed(cfg.seed, 0x1417));
    model.diagnosis_labels = {"case", "control"};
    model.age_stats = age_stats_from(entries);
    TrainingSet data = load_training_set(manifest_path, model.diagnosis_labels,
                                         cfg.model.n_timepoints, 0, subset);
    NoiseSchedule sched = cosine_schedule(cfg.model.steps);
    pretrain_loop(model, sched, data, cfg);

    FeatureBank bank = extract_probe_bank(model, sched, ps);
    Tensor flat = flatten_bank(bank);
    double mean = 0.0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      mean += linear_probe(flat, ps.sex, TaskKind::Classification, 5, seed, ps.groups)
                  .accuracy_mean;
      mean += linear_probe(flat, ps.diagnosis, TaskKind::Classification, 5, seed, ps.groups)
                  .accuracy_mean;
    }
    scores.push_back(mean / 10.0);
  }

  int inversions = 0;
  double worst_inversion = 0.0;
  for (size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] < scores[i - 1]) {
      ++inversions;
      worst_inversion = std::max(worst_inversion, scores[i - 1] - scores[i]);
    }
  }
  std::ostringstream os;
  for (size_t i = 0; i < scores.size(); ++i) os << names[i] << "=" << scores[i] << " ";
  os << "(inversions " << inversions << ", worst " << worst_inversion << ")";
  detail = os.str();
  return inversions == 0 || (inversions == 1 && worst_inversion <= 0.01);
}

bool criterion_formats(Ctx& ctx, std::string& detail) {
  fs::path dir = ctx.scratch / "formats";
  fs::create_directories(dir);
  bool ok = true;

  // RTS1 + archive round trips (bitwise) and corruption rejection
  {
    Rng rng(20);
    Tensor x({6, 10});
    rng.fill_normal(x.data(), x.numel());
    write_rts1(dir / "s.rts1", x);
    Tensor back = read_rts1(dir / "s.rts1");
    ok &= std::memcmp(back.data(), x.data(), sizeof(float) * x.numel()) == 0;

    TensorArchive a;
    a.put("x", x);
    a.config["k"] = 1;
    a.save(dir / "a.rta");
    TensorArchive b = TensorArchive::load(dir / "a.rta");
    b.save(dir / "b.rta");
    std::ifstream f1(dir / "a.rta", std::ios::binary), f2(dir / "b.rta", std::ios::binary);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    ok &= s1.str() == s2.str();

    auto corrupt = [&](int offset, char val, const fs::path& src, const fs::path& dst) {
      std::string bytes = s1.str();
      std::ifstream in(src, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      bytes = ss.str();
      bytes[offset] = val;
      std::ofstream(dst, std::ios::binary | std::ios::trunc)
          .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    };
    corrupt(0, 'X', dir / "a.rta", dir / "bad_magic.rta");
    corrupt(4, 42, dir / "a.rta", dir / "bad_version.rta");
    bool threw = false;
    try {
      TensorArchive::load(dir / "bad_magic.rta");
    } catch (const CheckpointError&) {
      threw = true;
    }
    ok &= threw;
    threw = false;
    try {
      TensorArchive::load(dir / "bad_version.rta");
    } catch (const CheckpointError&) {
      threw = true;
    }
    ok &= threw;

    corrupt(1, 'Z', dir / "s.rts1", dir / "bad.rts1");
    threw = false;
    try {
      read_rts1(dir / "bad.rts1");
    } catch (const CheckpointError&) {
      threw = true;
    }
    ok &= threw;
  }

  // every CLI subcommand completes its smoke path with exit code 0
  if (ctx.cli.empty()) {
    detail = "no --cli path given";
    return false;
  }
  fs::path cwd = ctx.scratch / "cli";
  fs::create_directories(cwd);
  {
    std::ofstream g(cwd / "gen.cfg");
    g << "n_rois = 16\nsession_length = 80\nwindow = 16\nn_networks = 4\n"
      << "n_sessions = 20\nseed = 5\n";
    std::ofstream t(cwd / "train.cfg");
    t << "manifest = corpus/manifest.jsonl\ncheckpoint = model.rta\nlog = runlog.csv\n"
      << "n_rois = 16\nwindow = 16\npatch = 4\nembed_dim = 32\nn_layers = 2\nn_heads = 2\n"
      << "cond_dim = 16\nsteps = 50\nfreq_dim = 32\nbatch_size = 8\nepochs = 1\nseed = 3\n";
    std::ofstream a(cwd / "ablate.cfg");
    a << "manifest = corpus/manifest.jsonl\ncheckpoint = ab.rta\nlog = ablog.csv\n"
      << "n_rois = 16\nwindow = 16\npatch = 4\nembed_dim = 32\nn_layers = 2\nn_heads = 2\n"
      << "cond_dim = 16\nsteps = 50\nfreq_dim = 32\nbatch_size = 8\nepochs = 1\n"
      << "max_steps = 4\nseed = 3\n";
  }
  auto run = [&](const std::string& args) {
    std::string cmd = "cd " + cwd.string() + " && " + ctx.cli + " " + args + " >> cli.log 2>&1";
    return std::system(cmd.c_str());
  };
  ok &= run("gen-data --config gen.cfg --out corpus") == 0;
  ok &= run("pretrain --config train.cfg") == 0;
  ok &= run("generate --ckpt model.rta --manifest corpus/manifest.jsonl --n 3 --steps 8 --out gen") == 0;
  ok &= run("extract --ckpt model.rta --manifest corpus/manifest.jsonl --timesteps 0,10,20 "
            "--layers last2 --out bank.rta") == 0;
  ok &= run("probe --features bank.rta --manifest corpus/manifest.jsonl --task sex --folds 3 "
            "--out probe_sex") == 0;
  ok &= run("probe --features bank.rta --manifest corpus/manifest.jsonl --task diagnosis "
            "--folds 3 --finetune-agg --out probe_dx") == 0;
  ok &= run("eval-fc --ckpt model.rta --cohort corpus/manifest.jsonl --n 6 --steps 6 "
            "--out fidelity.csv") == 0;
  ok &= run("ablate-states --config ablate.cfg --budget 10 --out ablate.csv") == 0;
  ok &= run("report --run .") == 0;
  // ... and a config error exits nonzero
  ok &= run("ablate-states --config ablate.cfg --budget 10000 --out nope.csv") != 0;
  detail = ok ? "round trips bitwise, corruption rejected, CLI smoke green"
              : "see " + (cwd / "cli.log").string();
  return ok;
}

struct Criterion {
  int id;
  const char* title;
  std::function<bool(Ctx&, std::string&)> fn;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  int criterion = 0;
  std::string cache = "acceptance_cache";
  std::string scratch;
  std::string cli;
  app.add_option("--criterion", criterion, "criterion number (0 = all)");
  app.add_option("--cache", cache, "cache directory for shared artifacts");
  app.add_option("--scratch", scratch, "scratch directory");
  app.add_option("--cli", cli, "path to the roidiff CLI binary");
  CLI11_PARSE(app, argc, argv);

  Ctx ctx;
  ctx.cache = cache;
  ctx.scratch = scratch.empty() ? (fs::temp_directory_path() / "roidiff_acceptance") : scratch;
  ctx.cli = cli;
  fs::create_directories(ctx.cache);
  fs::create_directories(ctx.scratch);

  std::vector<Criterion> criteria = {
      {1, "schedule suite (monotone, variance preserving, oracle spots)", criterion_schedule},
      {2, "algebra suite (1000-case v round trip within 1e-4)", criterion_algebra},
      {3, "structure suite (patch round trip, token-count law)", criterion_structure},
      {4, "init suite (fresh model outputs exactly zero)", criterion_init_zero},
      {5, "gradient suite (finite differences, step 1e-3)", criterion_gradient},
      {6, "conditioning suite (drop equivalence, layout, policy)", criterion_conditioning},
      {7, "aggregator suite (softmax weights, oracle, marginals)", criterion_aggregator},
      {8, "training smoke (loss decreases, bitwise reproducible)", criterion_training_smoke},
      {9, "fidelity ordering (conditional < unconditional < random)", criterion_fidelity},
      {10, "probe ordering (features vs raw-FC baseline, cond vs uncond)",
       criterion_probe_ordering},
      {11, "state-diversity ordering (R -> ALL non-decreasing)", criterion_state_diversity},
      {12, "format suite (round trips, corruption, CLI smoke)", criterion_formats},
  };

  int failures = 0;
  for (auto& c : criteria) {
    if (criterion != 0 && c.id != criterion) continue;
    std::string det;
    bool ok = false;
    try {
      ok = c.fn(ctx, det);
    } catch (const std::exception& e) {
      det = std::string("exception: ") + e.what();
    }
    std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << c.id << ": " << c.title << " ("
              << det << ")" << std::endl;
    if (!ok) ++failures;
  }
  return failures;
}
