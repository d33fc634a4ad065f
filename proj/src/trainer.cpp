#include "roidiff/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "roidiff/archive.hpp"
#include "roidiff/errors.hpp"
#include "roidiff/rng.hpp"

namespace roidiff {

void write_run_log(const std::filesystem::path& path, const std::vector<RunLogRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("run log: cannot open for writing: " + path.string());
  f << "epoch,step,loss,lr,wall_ms\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%ld,%.9g,%.9g,%.3f\n", r.epoch, r.step, r.loss, r.lr,
                  r.wall_ms);
    f << buf;
  }
}

TrainingSet load_training_set(const std::filesystem::path& manifest_path,
                              const std::vector<std::string>& diagnosis_labels, int window,
                              int stride, const std::vector<int>& session_subset) {
  auto entries = read_manifest(manifest_path);
  if (entries.empty()) throw ConfigError("training set: empty manifest");

  std::vector<int> take;
  if (session_subset.empty()) {
    take.resize(entries.size());
    for (size_t i = 0; i < take.size(); ++i) take[i] = static_cast<int>(i);
  } else {
    take = session_subset;
  }

  TrainingSet set;
  for (int idx : take) {
    if (idx < 0 || idx >= static_cast<int>(entries.size()))
      throw ConfigError("training set: session index out of range");
    const auto& e = entries[idx];
    Tensor session = load_session(e, manifest_path);
    MetadataRecord rec = to_record(e, diagnosis_labels);
    for (auto& w : window_stream(session, window, stride)) {
      set.windows.push_back(std::move(w));
      set.records.push_back(rec);
      set.labeled.push_back(rec.fully_missing() ? 0 : 1);
      set.session_of.push_back(idx);
    }
  }
  if (set.windows.empty()) throw ConfigError("training set: no windows (window too long?)");
  return set;
}

AdamW::AdamW(size_t n, double lr_, double wd, double beta1, double beta2, double eps)
    : lr(lr_), wd_(wd), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void AdamW::step(std::vector<float>& w, const std::vector<float>& g) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < w.size(); ++i) {
    double gi = g[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * gi;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * gi * gi;
    double mh = m_[i] / bc1;
    double vh = v_[i] / bc2;
    w[i] -= static_cast<float>(lr * (mh / (std::sqrt(vh) + eps_) + wd_ * w[i]));
  }
}

std::vector<RunLogRow> pretrain_loop(DitModel& model, const NoiseSchedule& sched,
                                     const TrainingSet& data, const TrainConfig& cfg) {
  const ModelConfig& mc = model.config();
  if (sched.steps != mc.steps) throw ConfigError("pretrain: schedule/model step mismatch");
  if (cfg.batch_size < 1 || cfg.epochs < 1 || cfg.lr <= 0.0)
    throw ConfigError("pretrain: bad optimizer settings");

  // candidate pool honoring the missing-label policy
  std::vector<int> pool;
  for (size_t i = 0; i < data.windows.size(); ++i) {
    if (cfg.policy == MissingLabelPolicy::Drop && !data.labeled[i]) continue;
    pool.push_back(static_cast<int>(i));
  }
  if (pool.empty()) throw ConfigError("pretrain: no usable windows under the drop policy");
  for (const auto& w : data.windows)
    if (w.dim(0) != mc.n_rois || w.dim(1) != mc.n_timepoints)
      throw ConfigError("pretrain: window shape does not match the model config");

  const int B = cfg.batch_size;
  const long steps_per_epoch =
      std::max<long>(1, (static_cast<long>(pool.size()) + B - 1) / B);
  long total_steps = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  Rng rng(derive_seed(cfg.seed, 0x7a11));
  AdamW opt(model.params().size(), cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2,
            cfg.adam_eps);

  const size_t sig = static_cast<size_t>(mc.n_rois) * mc.n_timepoints;
  Tensor x_t({B, mc.n_rois, mc.n_timepoints});
  Tensor v({B, mc.n_rois, mc.n_timepoints});
  std::vector<int> ts(B);
  std::vector<const MetadataRecord*> conds(B);
  std::vector<uint8_t> drop(B);
  ForwardCache cache;
  std::vector<RunLogRow> log;
  log.reserve(total_steps);
  auto t0 = std::chrono::steady_clock::now();

  for (long step = 1; step <= total_steps; ++step) {
    for (int b = 0; b < B; ++b) {
      int idx = pool[rng.below(pool.size())];
      ts[b] = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(sched.steps)));
      bool dropped = rng.uniform() < mc.p_drop;
      drop[b] = dropped ? 1 : 0;

      const MetadataRecord& rec = data.records[idx];
      if (cfg.strip_metadata || rec.fully_missing()) {
        conds[b] = nullptr;  // treated as unconditional
      } else {
        conds[b] = &rec;
      }

      const float a = sched.alpha_f(ts[b]), s = sched.sigma_f(ts[b]);
      const float* x0 = data.windows[idx].data();
      float* xb = x_t.data() + b * sig;
      float* vb = v.data() + b * sig;
      for (size_t i = 0; i < sig; ++i) {
        float eps = static_cast<float>(rng.normal());
        xb[i] = a * x0[i] + s * eps;
        vb[i] = a * eps - s * x0[i];
      }
    }

    model.zero_grad();
    Tensor v_hat = model.forward(x_t, ts, conds, drop, &cache);
    double loss = diffusion_loss(v_hat, v);
    if (!std::isfinite(loss))
      throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));

    Tensor dv(v_hat.shape());
    const float inv_n = 2.0f / static_cast<float>(v_hat.numel());
    for (size_t i = 0; i < v_hat.numel(); ++i)
      dv.data()[i] = inv_n * (v_hat.data()[i] - v.data()[i]);
    model.backward(dv, cache);
    opt.step(model.params().weights(), model.params().grads());

    RunLogRow row;
    row.epoch = static_cast<int>((step - 1) / steps_per_epoch);
    row.step = step;
    row.loss = loss;
    row.lr = cfg.lr;
    row.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    log.push_back(row);

    if (cfg.checkpoint_every_epochs > 0 && !cfg.checkpoint_path.empty() &&
        step % (steps_per_epoch * cfg.checkpoint_every_epochs) == 0 && step != total_steps) {
      save_checkpoint(model, cfg.checkpoint_path);
    }
  }
  return log;
}

DitModel pretrain(const TrainConfig& cfg, std::vector<RunLogRow>* log_out) {
  if (cfg.manifest_path.empty()) throw ConfigError("pretrain: manifest path is required");

  DitModel model(cfg.model, derive_seed(cfg.seed, 0x1417));
  auto entries = read_manifest(cfg.manifest_path);
  model.diagnosis_labels = diagnosis_labels_from(entries, cfg.model.n_diagnoses);
  model.age_stats = age_stats_from(entries);

  TrainingSet data = load_training_set(cfg.manifest_path, model.diagnosis_labels,
                                       cfg.model.n_timepoints, cfg.window_stride);
  NoiseSchedule sched = cosine_schedule(cfg.model.steps);
  std::vector<RunLogRow> log = pretrain_loop(model, sched, data, cfg);

  if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
  if (!cfg.log_path.empty()) write_run_log(cfg.log_path, log);
  if (log_out) *log_out = std::move(log);
  return model;
}

std::vector<std::string> diagnosis_labels_from(const std::vector<ManifestEntry>& entries,
                                               int n) {
  std::vector<std::string> labels;
  for (const auto& e : entries) {
    if (!e.diagnosis) continue;
    if (std::find(labels.begin(), labels.end(), *e.diagnosis) == labels.end())
      labels.push_back(*e.diagnosis);
  }
  std::sort(labels.begin(), labels.end());
  if (static_cast<int>(labels.size()) > n)
    throw ConfigError("manifest carries more diagnosis labels than the configured set size");
  while (static_cast<int>(labels.size()) < n)
    labels.push_back("dx" + std::to_string(labels.size()));
  return labels;
}

AgeStats age_stats_from(const std::vector<ManifestEntry>& entries) {
  double sum = 0.0, count = 0.0;
  for (const auto& e : entries)
    if (e.age) {
      sum += *e.age;
      count += 1.0;
    }
  AgeStats st;
  if (count < 2.0) return st;
  double mean = sum / count;
  double var = 0.0;
  for (const auto& e : entries)
    if (e.age) var += (*e.age - mean) * (*e.age - mean);
  var /= count;
  st.mean = static_cast<float>(mean);
  st.stddev = var > 0.0 ? static_cast<float>(std::sqrt(var)) : 1.0f;
  return st;
}

void save_checkpoint(const DitModel& model, const std::filesystem::path& path) {
  const ModelConfig& c = model.config();
  TensorArchive a;
  a.config["kind"] = "dit_checkpoint";
  a.config["model"] = {{"n_rois", c.n_rois},       {"n_timepoints", c.n_timepoints},
                       {"patch", c.patch},         {"embed_dim", c.embed_dim},
                       {"n_layers", c.n_layers},   {"n_heads", c.n_heads},
                       {"cond_dim", c.cond_dim},   {"p_drop", c.p_drop},
                       {"steps", c.steps},         {"n_diagnoses", c.n_diagnoses},
                       {"freq_dim", c.freq_dim}};
  a.config["schedule"] = "cosine";
  a.config["age_mean"] = model.age_stats.mean;
  a.config["age_std"] = model.age_stats.stddev;
  a.config["diagnosis_labels"] = model.diagnosis_labels;
  for (const auto& e : model.params().entries()) {
    Tensor t(e.shape);
    std::memcpy(t.data(), model.params().weights().data() + e.offset,
                sizeof(float) * e.size);
    a.put(e.name, std::move(t));
  }
  a.save(path);
}

DitModel load_checkpoint(const std::filesystem::path& path) {
  TensorArchive a = TensorArchive::load(path);
  if (a.config.value("kind", "") != "dit_checkpoint")
    throw CheckpointError("checkpoint: wrong archive kind in " + path.string());
  const auto& m = a.config.at("model");
  ModelConfig c;
  c.n_rois = m.at("n_rois").get<int>();
  c.n_timepoints = m.at("n_timepoints").get<int>();
  c.patch = m.at("patch").get<int>();
  c.embed_dim = m.at("embed_dim").get<int>();
  c.n_layers = m.at("n_layers").get<int>();
  c.n_heads = m.at("n_heads").get<int>();
  c.cond_dim = m.at("cond_dim").get<int>();
  c.p_drop = m.at("p_drop").get<float>();
  c.steps = m.at("steps").get<int>();
  c.n_diagnoses = m.at("n_diagnoses").get<int>();
  c.freq_dim = m.at("freq_dim").get<int>();

  DitModel model(c, 0);
  model.age_stats.mean = a.config.at("age_mean").get<float>();
  model.age_stats.stddev = a.config.at("age_std").get<float>();
  model.diagnosis_labels = a.config.at("diagnosis_labels").get<std::vector<std::string>>();
  if (static_cast<int>(model.diagnosis_labels.size()) != c.n_diagnoses)
    throw CheckpointError("checkpoint: diagnosis label set size mismatch");

  for (const auto& e : model.params().entries()) {
    const Tensor& t = a.get(e.name);
    if (t.numel() != e.size)
      throw CheckpointError("checkpoint: tensor size mismatch for " + e.name);
    std::memcpy(model.params().weights().data() + e.offset, t.data(),
                sizeof(float) * e.size);
  }
  return model;
}

}  // namespace roidiff
