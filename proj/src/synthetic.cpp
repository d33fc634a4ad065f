#include "roidiff/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "roidiff/archive.hpp"
#include "roidiff/errors.hpp"
#include "roidiff/rng.hpp"

namespace roidiff {

const std::vector<std::string>& state_names() {
  static const std::vector<std::string> names = {"rest", "task", "naturalistic", "disease",
                                                 "sleep"};
  return names;
}

const std::vector<std::string>& diagnosis_names() {
  static const std::vector<std::string> names = {"control", "case"};
  return names;
}

void GeneratorConfig::validate() const {
  if (n_rois <= 0 || session_length <= 0 || n_sessions <= 0)
    throw std::invalid_argument("GeneratorConfig: sizes must be positive");
  if (n_networks <= 0 || n_rois % n_networks != 0)
    throw std::invalid_argument("GeneratorConfig: n_networks must divide n_rois");
  if (window <= 0 || window > session_length)
    throw std::invalid_argument("GeneratorConfig: window must be in [1, session_length]");
  if (!(std::isfinite(age_smooth_effect) && std::isfinite(sex_amp_ratio) &&
        std::isfinite(diagnosis_delta)))
    throw std::invalid_argument("GeneratorConfig: effect sizes must be finite");
  if (noise_level < 0.0f) throw std::invalid_argument("GeneratorConfig: noise_level < 0");
  if (missing_rate < 0.0f || missing_rate > 1.0f)
    throw std::invalid_argument("GeneratorConfig: missing_rate must be in [0,1]");
  if (base_length_scale <= 0.0f)
    throw std::invalid_argument("GeneratorConfig: base_length_scale must be positive");
}

namespace {

constexpr int kNumStates = 5;
constexpr int kSexNetwork = 0;  // network whose amplitude carries the sex effect

// In-place lower Cholesky of a dense symmetric matrix (double); returns
// false when the matrix is not positive definite.
bool cholesky(std::vector<double>& a, int n) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<size_t>(i) * n + j];
      for (int k = 0; k < j; ++k)
        s -= a[static_cast<size_t>(i) * n + k] * a[static_cast<size_t>(j) * n + k];
      if (i == j) {
        if (s <= 0.0) return false;
        a[static_cast<size_t>(i) * n + j] = std::sqrt(s);
      } else {
        a[static_cast<size_t>(i) * n + j] = s / a[static_cast<size_t>(j) * n + j];
      }
    }
    for (int j = i + 1; j < n; ++j) a[static_cast<size_t>(i) * n + j] = 0.0;
  }
  return true;
}

// per-network amplitude for a state (sleep dampens the "arousal" network)
double state_amplitude(int state, int network) {
  if (state == 4 && network == 1) return 0.55;
  return 1.0;
}

}  // namespace

std::vector<double> network_corr(int state, int diagnosis, const GeneratorConfig& cfg) {
  const int g = cfg.n_networks;
  std::vector<double> c(static_cast<size_t>(g) * g, 0.0);
  auto at = [&](int a, int b) -> double& { return c[static_cast<size_t>(a) * g + b]; };
  for (int a = 0; a < g; ++a)
    for (int b = 0; b < g; ++b) {
      if (a == b) {
        at(a, b) = 1.0;
        continue;
      }
      double v = 0.0;
      switch (state) {
        case 0:  // rest: weak neighbor coupling
          v = (std::abs(a - b) == 1) ? 0.25 : 0.10;
          break;
        case 1:  // task: strong 0-1 coupling
          v = ((a == 0 && b == 1) || (a == 1 && b == 0)) ? 0.55 : 0.10;
          break;
        case 2:  // naturalistic: global coupling
          v = 0.35;
          break;
        case 3:  // disease state: 2-3 coupling, decoupled 0-1
          v = ((a == 2 && b == 3) || (a == 3 && b == 2)) ? 0.45 : 0.05;
          break;
        case 4:  // sleep: near-decoupled
          v = 0.02;
          break;
        default:
          throw std::invalid_argument("network_corr: unknown state");
      }
      at(a, b) = v;
    }
  if (diagnosis == 1 && g >= 2) {
    double d = cfg.diagnosis_delta;
    at(0, 1) = at(1, 0) = std::clamp(at(0, 1) + d, -0.9, 0.95);
    if (g >= 4) at(2, 3) = at(3, 2) = std::clamp(at(2, 3) - 0.5 * d, -0.9, 0.95);
  }
  std::vector<double> chk = c;
  for (int i = 0; i < g; ++i) chk[static_cast<size_t>(i) * g + i] += 1e-9;
  if (!cholesky(chk, g))
    throw std::invalid_argument("network_corr: planted block structure is not positive definite");
  return c;
}

Tensor analytic_fc(int state, int diagnosis, int sex, const GeneratorConfig& cfg,
                   const std::vector<float>& loadings) {
  const int n = cfg.n_rois, g = cfg.n_networks, per = n / g;
  std::vector<double> c = network_corr(state, diagnosis, cfg);
  const double s2 = static_cast<double>(cfg.noise_level) * cfg.noise_level;
  std::vector<double> amp(g);
  for (int k = 0; k < g; ++k) {
    amp[k] = state_amplitude(state, k);
    if (k == kSexNetwork && sex == 1) amp[k] *= cfg.sex_amp_ratio;
  }
  Tensor fc({n, n});
  for (int r = 0; r < n; ++r) {
    const int gr = r / per;
    const double ar = loadings[r] * amp[gr];
    for (int q = 0; q < n; ++q) {
      if (r == q) {
        fc.at({r, q}) = 1.0f;
        continue;
      }
      const int gq = q / per;
      const double aq = loadings[q] * amp[gq];
      double cov = ar * aq * c[static_cast<size_t>(gr) * g + gq];
      double corr = cov / std::sqrt((ar * ar + s2) * (aq * aq + s2));
      fc.at({r, q}) = static_cast<float>(corr);
    }
  }
  return fc;
}

Tensor analytic_cell_fc(int state, int diagnosis, const GeneratorConfig& cfg,
                        const std::vector<float>& loadings) {
  Tensor a = analytic_fc(state, diagnosis, 0, cfg, loadings);
  Tensor b = analytic_fc(state, diagnosis, 1, cfg, loadings);
  for (size_t i = 0; i < a.numel(); ++i)
    a.data()[i] = 0.5f * (a.data()[i] + b.data()[i]);
  return a;
}

Corpus generate_corpus(const GeneratorConfig& cfg) {
  cfg.validate();
  const int n = cfg.n_rois, g = cfg.n_networks, per = n / g, tt = cfg.session_length;

  Corpus corpus;
  corpus.cfg = cfg;
  corpus.gt.n_states = kNumStates;

  // per-ROI loadings, fixed per corpus
  {
    Rng lr(derive_seed(cfg.seed, 0x10adULL));
    corpus.gt.loadings.resize(n);
    for (int r = 0; r < n; ++r)
      corpus.gt.loadings[r] = 0.85f + 0.30f * static_cast<float>(lr.uniform());
  }

  // network mixing cholesky per (state, diagnosis)
  std::vector<std::vector<double>> mix(kNumStates * 2);
  for (int s = 0; s < kNumStates; ++s)
    for (int d = 0; d < 2; ++d) {
      std::vector<double> c = network_corr(s, d, cfg);
      for (int i = 0; i < g; ++i) c[static_cast<size_t>(i) * g + i] += 1e-9;
      if (!cholesky(c, g))
        throw std::invalid_argument("generate_corpus: invalid block structure");
      mix[s * 2 + d] = std::move(c);
    }

  corpus.gt.cell_fc.resize(kNumStates * 2);
  for (int s = 0; s < kNumStates; ++s)
    for (int d = 0; d < 2; ++d)
      corpus.gt.cell_fc[s * 2 + d] = analytic_cell_fc(s, d, cfg, corpus.gt.loadings);

  corpus.sessions.resize(cfg.n_sessions);
  corpus.gt.latents.resize(cfg.n_sessions);

  // Sessions are independent given their derived seed, so generation is
  // parallel; all buffers are preallocated per session.
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < cfg.n_sessions; ++i) {
    Rng rng(derive_seed(cfg.seed, 0x5e55, static_cast<uint64_t>(i)));

    GroundTruth::Latent lat;
    lat.state = i % kNumStates;
    lat.age = 20.0f + 60.0f * static_cast<float>(rng.uniform());
    lat.sex = rng.bernoulli(0.5) ? 1 : 0;
    lat.diagnosis = rng.bernoulli(0.5) ? 1 : 0;

    // temporal kernels: the session length scale is modulated by age; the
    // sex effect additionally speeds up the designated network's dynamics
    // (invisible to zero-lag FC, visible to temporal features)
    double age_z = (lat.age - 50.0) / 15.0;
    double ls = cfg.base_length_scale * std::exp(cfg.age_smooth_effect * age_z);
    auto chol_kernel = [&](double scale) {
      std::vector<double> kern(static_cast<size_t>(tt) * tt);
      for (int a = 0; a < tt; ++a)
        for (int b = 0; b < tt; ++b) {
          double d = (a - b) / scale;
          kern[static_cast<size_t>(a) * tt + b] = std::exp(-0.5 * d * d);
        }
      double jitter = 1e-8;
      std::vector<double> chol_t;
      for (;;) {
        chol_t = kern;
        for (int a = 0; a < tt; ++a) chol_t[static_cast<size_t>(a) * tt + a] += jitter;
        if (cholesky(chol_t, tt)) break;
        jitter *= 10.0;
        if (jitter > 1e-2)
          throw std::runtime_error("generate_corpus: temporal kernel not factorizable");
      }
      return chol_t;
    };
    std::vector<double> chol_t = chol_kernel(ls);
    std::vector<double> chol_sex;
    if (lat.sex == 1 && cfg.sex_speed_ratio != 1.0f)
      chol_sex = chol_kernel(ls * cfg.sex_speed_ratio);

    // latent networks: temporally smooth, instantaneously mixed to the
    // planted network correlation
    std::vector<double> z(static_cast<size_t>(g) * tt);
    for (auto& v : z) v = rng.normal();
    std::vector<double> raw(static_cast<size_t>(g) * tt, 0.0);
    for (int k = 0; k < g; ++k) {
      const std::vector<double>& lt = (k == kSexNetwork && !chol_sex.empty()) ? chol_sex : chol_t;
      const double* zk = z.data() + static_cast<size_t>(k) * tt;
      double* rk = raw.data() + static_cast<size_t>(k) * tt;
      for (int a = 0; a < tt; ++a) {
        double acc = 0.0;
        const double* row = lt.data() + static_cast<size_t>(a) * tt;
        for (int b = 0; b <= a; ++b) acc += row[b] * zk[b];
        rk[a] = acc;
      }
    }
    const std::vector<double>& mx = mix[lat.state * 2 + lat.diagnosis];
    std::vector<double> u(static_cast<size_t>(g) * tt, 0.0);
    for (int k = 0; k < g; ++k)
      for (int j = 0; j <= k; ++j) {
        double w = mx[static_cast<size_t>(k) * g + j];
        if (w == 0.0) continue;
        const double* rj = raw.data() + static_cast<size_t>(j) * tt;
        double* uk = u.data() + static_cast<size_t>(k) * tt;
        for (int a = 0; a < tt; ++a) uk[a] += w * rj[a];
      }

    // mix into ROIs, add observation noise, z-score
    Tensor x({n, tt});
    for (int r = 0; r < n; ++r) {
      const int gr = r / per;
      double amp = state_amplitude(lat.state, gr) * corpus.gt.loadings[r];
      if (gr == kSexNetwork && lat.sex == 1) amp *= cfg.sex_amp_ratio;
      const double* ug = u.data() + static_cast<size_t>(gr) * tt;
      float* row = x.data() + static_cast<size_t>(r) * tt;
      double mean = 0.0;
      for (int a = 0; a < tt; ++a) {
        double v = amp * ug[a] + cfg.noise_level * rng.normal();
        row[a] = static_cast<float>(v);
        mean += v;
      }
      mean /= tt;
      double var = 0.0;
      for (int a = 0; a < tt; ++a) {
        double d = row[a] - mean;
        var += d * d;
      }
      var /= tt;
      double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
      for (int a = 0; a < tt; ++a)
        row[a] = static_cast<float>((row[a] - mean) * inv);
    }

    // observation masks
    ManifestEntry e;
    e.session_id = "s" + std::to_string(100000 + i);
    e.path = "sessions/" + e.session_id + ".rts1";
    e.state = state_names()[lat.state];
    if (!rng.bernoulli(cfg.missing_rate)) e.age = lat.age;
    if (!rng.bernoulli(cfg.missing_rate)) e.sex = lat.sex;
    if (!rng.bernoulli(cfg.missing_rate)) e.diagnosis = diagnosis_names()[lat.diagnosis];

    corpus.gt.latents[i] = lat;
    corpus.sessions[i].manifest = std::move(e);
    corpus.sessions[i].x = std::move(x);
  }
  return corpus;
}

std::filesystem::path write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "sessions");
  for (const auto& s : corpus.sessions) write_rts1(dir / s.manifest.path, s.x);

  std::vector<ManifestEntry> rows;
  rows.reserve(corpus.sessions.size());
  for (const auto& s : corpus.sessions) rows.push_back(s.manifest);
  auto manifest_path = dir / "manifest.jsonl";
  write_manifest(manifest_path, rows);

  TensorArchive gt;
  gt.config["kind"] = "ground_truth";
  gt.config["n_states"] = corpus.gt.n_states;
  nlohmann::json lat = nlohmann::json::array();
  for (const auto& l : corpus.gt.latents)
    lat.push_back({{"age", l.age}, {"sex", l.sex}, {"diagnosis", l.diagnosis}, {"state", l.state}});
  gt.config["latents"] = std::move(lat);
  for (int s = 0; s < corpus.gt.n_states; ++s)
    for (int d = 0; d < 2; ++d)
      gt.put("fc_" + state_names()[s] + "_" + diagnosis_names()[d], corpus.gt.cell(s, d));
  Tensor loads({static_cast<long>(corpus.gt.loadings.size())});
  std::memcpy(loads.data(), corpus.gt.loadings.data(),
              sizeof(float) * corpus.gt.loadings.size());
  gt.put("loadings", std::move(loads));
  gt.save(dir / "ground_truth.rta");
  return manifest_path;
}

GroundTruth load_ground_truth(const std::filesystem::path& dir) {
  TensorArchive a = TensorArchive::load(dir / "ground_truth.rta");
  GroundTruth gt;
  gt.n_states = a.config.at("n_states").get<int>();
  for (const auto& l : a.config.at("latents"))
    gt.latents.push_back({l.at("age").get<float>(), l.at("sex").get<int>(),
                          l.at("diagnosis").get<int>(), l.at("state").get<int>()});
  const Tensor& loads = a.get("loadings");
  gt.loadings.assign(loads.data(), loads.data() + loads.numel());
  gt.cell_fc.resize(gt.n_states * 2);
  for (int s = 0; s < gt.n_states; ++s)
    for (int d = 0; d < 2; ++d)
      gt.cell_fc[s * 2 + d] = a.get("fc_" + state_names()[s] + "_" + diagnosis_names()[d]);
  return gt;
}

std::vector<int> state_mixture_split(const std::vector<ManifestEntry>& manifest,
                                     const std::map<std::string, double>& mixture, int budget,
                                     uint64_t seed) {
  if (budget <= 0) throw ConfigError("state_mixture_split: budget must be positive");
  double total = 0.0;
  for (const auto& [state, share] : mixture) {
    if (share < 0.0) throw ConfigError("state_mixture_split: negative share");
    total += share;
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw ConfigError("state_mixture_split: shares must sum to 1");

  // largest-remainder apportionment of the budget across states
  std::vector<std::pair<std::string, double>> shares(mixture.begin(), mixture.end());
  std::vector<int> counts(shares.size(), 0);
  int assigned = 0;
  std::vector<std::pair<double, size_t>> rema;
  for (size_t i = 0; i < shares.size(); ++i) {
    double exact = shares[i].second * budget;
    counts[i] = static_cast<int>(std::floor(exact));
    assigned += counts[i];
    rema.push_back({exact - counts[i], i});
  }
  std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int k = 0; k < budget - assigned; ++k) counts[rema[k % rema.size()].second] += 1;

  std::vector<int> out;
  Rng rng(derive_seed(seed, 0x3a11));
  for (size_t i = 0; i < shares.size(); ++i) {
    if (counts[i] == 0) continue;
    std::vector<int> pool;
    for (size_t s = 0; s < manifest.size(); ++s)
      if (manifest[s].state == shares[i].first) pool.push_back(static_cast<int>(s));
    if (static_cast<int>(pool.size()) < counts[i])
      throw ConfigError("state_mixture_split: not enough '" + shares[i].first +
                        "' sessions for the requested budget");
    // deterministic Fisher-Yates, then take the prefix
    for (size_t k = pool.size(); k > 1; --k) {
      size_t j = rng.below(k);
      std::swap(pool[k - 1], pool[j]);
    }
    out.insert(out.end(), pool.begin(), pool.begin() + counts[i]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace roidiff
