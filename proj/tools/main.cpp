#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "roidiff/archive.hpp"
#include "roidiff/config.hpp"
#include "roidiff/errors.hpp"
#include "roidiff/rng.hpp"
#include "roidiff/evalmetrics.hpp"
#include "roidiff/features.hpp"
#include "roidiff/sampler.hpp"
#include "roidiff/session_io.hpp"
#include "roidiff/synthetic.hpp"
#include "roidiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace roidiff;

namespace {

GeneratorConfig generator_config_from(KvConfig& kv) {
  GeneratorConfig cfg;
  cfg.n_rois = static_cast<int>(kv.get_int("n_rois", cfg.n_rois));
  cfg.session_length = static_cast<int>(kv.get_int("session_length", cfg.session_length));
  cfg.window = static_cast<int>(kv.get_int("window", cfg.window));
  cfg.n_networks = static_cast<int>(kv.get_int("n_networks", cfg.n_networks));
  cfg.n_sessions = static_cast<int>(kv.get_int("n_sessions", cfg.n_sessions));
  cfg.age_smooth_effect = static_cast<float>(kv.get_double("age_smooth_effect", cfg.age_smooth_effect));
  cfg.sex_amp_ratio = static_cast<float>(kv.get_double("sex_amp_ratio", cfg.sex_amp_ratio));
  cfg.sex_speed_ratio = static_cast<float>(kv.get_double("sex_speed_ratio", cfg.sex_speed_ratio));
  cfg.diagnosis_delta = static_cast<float>(kv.get_double("diagnosis_delta", cfg.diagnosis_delta));
  cfg.noise_level = static_cast<float>(kv.get_double("noise_level", cfg.noise_level));
  cfg.base_length_scale = static_cast<float>(kv.get_double("base_length_scale", cfg.base_length_scale));
  cfg.missing_rate = static_cast<float>(kv.get_double("missing_rate", cfg.missing_rate));
  cfg.seed = kv.get_seed("seed", cfg.seed);
  return cfg;
}

ModelConfig model_config_from(KvConfig& kv) {
  ModelConfig mc;  // desk-scale defaults
  mc.n_rois = static_cast<int>(kv.get_int("n_rois", mc.n_rois));
  mc.n_timepoints = static_cast<int>(kv.get_int("window", mc.n_timepoints));
  mc.patch = static_cast<int>(kv.get_int("patch", mc.patch));
  mc.embed_dim = static_cast<int>(kv.get_int("embed_dim", mc.embed_dim));
  mc.n_layers = static_cast<int>(kv.get_int("n_layers", mc.n_layers));
  mc.n_heads = static_cast<int>(kv.get_int("n_heads", mc.n_heads));
  mc.cond_dim = static_cast<int>(kv.get_int("cond_dim", mc.cond_dim));
  mc.p_drop = static_cast<float>(kv.get_double("p_drop", mc.p_drop));
  mc.steps = static_cast<int>(kv.get_int("steps", mc.steps));
  mc.n_diagnoses = static_cast<int>(kv.get_int("n_diagnoses", mc.n_diagnoses));
  mc.freq_dim = static_cast<int>(kv.get_int("freq_dim", mc.freq_dim));
  return mc;
}

TrainConfig train_config_from(KvConfig& kv) {
  TrainConfig cfg;
  cfg.model = model_config_from(kv);
  cfg.lr = kv.get_double("lr", cfg.lr);
  cfg.weight_decay = kv.get_double("weight_decay", cfg.weight_decay);
  cfg.beta1 = kv.get_double("beta1", cfg.beta1);
  cfg.beta2 = kv.get_double("beta2", cfg.beta2);
  cfg.batch_size = static_cast<int>(kv.get_int("batch_size", cfg.batch_size));
  cfg.epochs = static_cast<int>(kv.get_int("epochs", cfg.epochs));
  cfg.max_steps = kv.get_int("max_steps", cfg.max_steps);
  cfg.seed = kv.get_seed("seed", cfg.seed);
  cfg.window_stride = static_cast<int>(kv.get_int("window_stride", cfg.window_stride));
  cfg.strip_metadata = kv.get_bool("strip_metadata", cfg.strip_metadata);
  cfg.checkpoint_every_epochs =
      static_cast<int>(kv.get_int("checkpoint_every_epochs", cfg.checkpoint_every_epochs));
  std::string policy = kv.get_string("missing_label_policy", "unconditional");
  if (policy == "unconditional") {
    cfg.policy = MissingLabelPolicy::Unconditional;
  } else if (policy == "drop") {
    cfg.policy = MissingLabelPolicy::Drop;
  } else {
    throw ConfigError("missing_label_policy must be 'unconditional' or 'drop'");
  }
  cfg.manifest_path = kv.require_string("manifest");
  cfg.checkpoint_path = kv.get_string("checkpoint", "checkpoint.rta");
  cfg.log_path = kv.get_string("log", "runlog.csv");
  return cfg;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::string cur;
  for (char c : csv) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::stoi(cur));
  if (out.empty()) throw ConfigError("expected a comma-separated integer list");
  return out;
}

std::vector<int> parse_layers(const std::string& text, int n_layers) {
  if (text.rfind("last", 0) == 0) {
    int n = std::stoi(text.substr(4));
    if (n < 1) throw ConfigError("--layers lastN needs N >= 1");
    n = std::min(n, n_layers);
    std::vector<int> out;
    for (int k = n_layers - n + 1; k <= n_layers; ++k) out.push_back(k);
    return out;
  }
  return parse_int_list(text);
}

struct ProbeDataset {
  Tensor flat;                 // session-level features {S, F}
  FeatureBank session_bank;    // session-level bank {S, Q, D} (empty for fc baseline)
  std::vector<float> labels;
  std::vector<int> groups;     // session row index (one row per session already)
  bool has_bank = false;
};

float state_label(const std::string& state) {
  const auto& names = state_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == state) return static_cast<float>(i);
  throw ConfigError("unknown state label: " + state);
}

// Average per-window bank rows into per-session rows and join labels.
ProbeDataset probe_dataset_from_bank(const TensorArchive& bank_archive,
                                     const std::vector<ManifestEntry>& manifest,
                                     const std::string& task,
                                     const std::vector<std::string>& dx_labels) {
  const Tensor& e = bank_archive.get("e");
  const int rows = static_cast<int>(e.dim(0));
  const int Q = static_cast<int>(e.dim(1));
  const int D = static_cast<int>(e.dim(2));
  std::vector<int> session_of = bank_archive.config.at("session_of").get<std::vector<int>>();
  if (static_cast<int>(session_of.size()) != rows)
    throw CheckpointError("feature bank: session_of size mismatch");

  // session -> window rows
  std::map<int, std::vector<int>> by_session;
  for (int r = 0; r < rows; ++r) by_session[session_of[r]].push_back(r);

  ProbeDataset ds;
  ds.has_bank = true;
  std::vector<std::pair<int, int>> slots;
  for (const auto& s : bank_archive.config.at("slots"))
    slots.push_back({s.at(0).get<int>(), s.at(1).get<int>()});

  std::vector<std::vector<float>> feat_rows;
  std::vector<float> labels;
  for (const auto& [sid, wrows] : by_session) {
    if (sid < 0 || sid >= static_cast<int>(manifest.size()))
      throw CheckpointError("feature bank: session index outside the manifest");
    const ManifestEntry& m = manifest[sid];
    float label = 0.0f;
    if (task == "sex") {
      if (!m.sex) continue;
      label = static_cast<float>(*m.sex);
    } else if (task == "age") {
      if (!m.age) continue;
      label = *m.age;
    } else if (task == "diagnosis") {
      if (!m.diagnosis) continue;
      MetadataRecord rec = to_record(m, dx_labels);
      label = static_cast<float>(*rec.diagnosis);
    } else if (task == "state") {
      label = state_label(m.state);
    } else {
      throw ConfigError("unknown probe task: " + task);
    }
    std::vector<float> mean(static_cast<size_t>(Q) * D, 0.0f);
    for (int r : wrows)
      for (size_t i = 0; i < mean.size(); ++i)
        mean[i] += e.data()[static_cast<size_t>(r) * mean.size() + i];
    for (auto& v : mean) v /= static_cast<float>(wrows.size());
    feat_rows.push_back(std::move(mean));
    labels.push_back(label);
  }
  if (feat_rows.size() < 4) throw ConfigError("probe: too few labeled sessions for task " + task);

  const int S = static_cast<int>(feat_rows.size());
  ds.flat = Tensor({S, Q * D});
  ds.session_bank.e = Tensor({S, Q, D});
  ds.session_bank.slots = slots;
  for (int s = 0; s < S; ++s) {
    std::copy(feat_rows[s].begin(), feat_rows[s].end(),
              ds.flat.data() + static_cast<size_t>(s) * Q * D);
    std::copy(feat_rows[s].begin(), feat_rows[s].end(),
              ds.session_bank.e.data() + static_cast<size_t>(s) * Q * D);
  }
  ds.labels = std::move(labels);
  ds.groups.resize(S);
  for (int s = 0; s < S; ++s) ds.groups[s] = s;
  ds.session_bank.groups = ds.groups;
  return ds;
}

// Raw-FC baseline features: per-session mean of window FC upper triangles.
ProbeDataset probe_dataset_fc(const std::vector<ManifestEntry>& manifest,
                              const fs::path& manifest_path, int window, int stride,
                              const std::string& task,
                              const std::vector<std::string>& dx_labels) {
  std::vector<std::vector<float>> feat_rows;
  std::vector<float> labels;
  int n = 0;
  for (const auto& m : manifest) {
    float label = 0.0f;
    if (task == "sex") {
      if (!m.sex) continue;
      label = static_cast<float>(*m.sex);
    } else if (task == "age") {
      if (!m.age) continue;
      label = *m.age;
    } else if (task == "diagnosis") {
      if (!m.diagnosis) continue;
      MetadataRecord rec = to_record(m, dx_labels);
      label = static_cast<float>(*rec.diagnosis);
    } else if (task == "state") {
      label = state_label(m.state);
    } else {
      throw ConfigError("unknown probe task: " + task);
    }
    Tensor session = load_session(m, manifest_path);
    auto windows = window_stream(session, window, stride);
    if (windows.empty()) continue;
    n = static_cast<int>(session.dim(0));
    std::vector<double> tri;
    for (const auto& w : windows) {
      Tensor fc = fc_matrix(w);
      size_t k = 0;
      if (tri.empty()) tri.assign(static_cast<size_t>(n) * (n - 1) / 2, 0.0);
      for (int r = 0; r < n; ++r)
        for (int q = r + 1; q < n; ++q) tri[k++] += fc.at({r, q});
    }
    std::vector<float> row(tri.size());
    for (size_t i = 0; i < tri.size(); ++i)
      row[i] = static_cast<float>(tri[i] / windows.size());
    feat_rows.push_back(std::move(row));
    labels.push_back(label);
  }
  if (feat_rows.size() < 4) throw ConfigError("probe: too few labeled sessions for task " + task);
  ProbeDataset ds;
  const int S = static_cast<int>(feat_rows.size());
  const int F = static_cast<int>(feat_rows[0].size());
  ds.flat = Tensor({S, F});
  for (int s = 0; s < S; ++s)
    std::copy(feat_rows[s].begin(), feat_rows[s].end(), ds.flat.data() + static_cast<size_t>(s) * F);
  ds.labels = std::move(labels);
  ds.groups.resize(S);
  for (int s = 0; s < S; ++s) ds.groups[s] = s;
  return ds;
}

void write_probe_outputs(const ProbeResult& res, const std::string& task, bool finetuned,
                         const fs::path& out_prefix) {
  nlohmann::json j;
  j["task"] = task;
  j["kind"] = res.kind == TaskKind::Classification ? "classification" : "regression";
  j["folds"] = res.folds;
  j["seed"] = res.seed;
  j["finetune_agg"] = finetuned;
  j["fold_primary"] = res.fold_primary;
  if (res.kind == TaskKind::Classification) {
    j["accuracy_mean"] = res.accuracy_mean;
    j["accuracy_std"] = res.accuracy_std;
  } else {
    j["mse_mean"] = res.mse_mean;
    j["mse_std"] = res.mse_std;
    j["r_mean"] = res.r_mean;
    j["r_std"] = res.r_std;
  }
  std::ofstream(out_prefix.string() + ".json") << j.dump(2) << "\n";

  std::ofstream csv(out_prefix.string() + ".csv");
  csv << "task,kind,metric,mean,std\n";
  if (res.kind == TaskKind::Classification) {
    csv << task << ",classification,accuracy," << res.accuracy_mean << "," << res.accuracy_std
        << "\n";
  } else {
    csv << task << ",regression,mse," << res.mse_mean << "," << res.mse_std << "\n";
    csv << task << ",regression,r," << res.r_mean << "," << res.r_std << "\n";
  }
}

std::vector<std::map<std::string, double>> mixture_ladder() {
  // R, +D, +T, +N, ALL
  std::vector<std::vector<std::string>> steps = {
      {"rest"},
      {"rest", "disease"},
      {"rest", "disease", "task"},
      {"rest", "disease", "task", "naturalistic"},
      {"rest", "disease", "task", "naturalistic", "sleep"}};
  std::vector<std::map<std::string, double>> out;
  for (const auto& states : steps) {
    std::map<std::string, double> mix;
    for (const auto& s : states) mix[s] = 1.0 / states.size();
    out.push_back(std::move(mix));
  }
  return out;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"metadata-conditioned diffusion pretraining for ROI x time signals"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  std::string gen_config, gen_out;
  gen->add_option("--config", gen_config, "generator config file")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->callback([&]() {
    KvConfig kv = KvConfig::parse_file(gen_config);
    GeneratorConfig cfg = generator_config_from(kv);
    kv.finish();
    Corpus corpus = generate_corpus(cfg);
    auto manifest = write_corpus(corpus, gen_out);
    std::cout << "wrote " << corpus.sessions.size() << " sessions, manifest " << manifest
              << "\n";
  });

  // ---- pretrain ----
  auto* pre = app.add_subcommand("pretrain", "run diffusion pretraining");
  std::string pre_config;
  pre->add_option("--config", pre_config, "training config file")->required();
  pre->callback([&]() {
    KvConfig kv = KvConfig::parse_file(pre_config);
    TrainConfig cfg = train_config_from(kv);
    kv.finish();
    std::vector<RunLogRow> log;
    pretrain(cfg, &log);
    std::cout << "trained " << log.size() << " steps, final loss "
              << (log.empty() ? 0.0 : log.back().loss) << ", checkpoint "
              << cfg.checkpoint_path << "\n";
  });

  // ---- generate ----
  auto* genr = app.add_subcommand("generate", "sample sessions from a checkpoint");
  std::string g_ckpt, g_manifest, g_out;
  int g_n = 16, g_steps = 0;
  double g_guidance = 1.0;
  uint64_t g_seed = 1;
  bool g_uncond = false;
  genr->add_option("--ckpt", g_ckpt)->required();
  genr->add_option("--manifest", g_manifest, "metadata source for conditioning");
  genr->add_option("--n", g_n, "number of sessions to sample");
  genr->add_flag("--uncond", g_uncond, "ignore metadata, sample unconditionally");
  genr->add_option("--guidance", g_guidance, "classifier-free guidance scale");
  genr->add_option("--steps", g_steps, "ancestral steps (0 = full schedule)");
  genr->add_option("--seed", g_seed);
  genr->add_option("--out", g_out, "output directory")->required();
  genr->callback([&]() {
    DitModel model = load_checkpoint(g_ckpt);
    NoiseSchedule sched = cosine_schedule(model.config().steps);
    std::vector<MetadataRecord> recs;
    if (!g_uncond) {
      if (g_manifest.empty())
        throw ConfigError("generate: --manifest is required unless --uncond is given");
      auto entries = read_manifest(g_manifest);
      if (entries.empty()) throw ConfigError("generate: empty manifest");
      for (const auto& e : entries) recs.push_back(to_record(e, model.diagnosis_labels));
    }
    SampleOptions opt;
    opt.guidance = static_cast<float>(g_guidance);
    opt.n_steps = g_steps;
    opt.seed = g_seed;
    fs::create_directories(fs::path(g_out) / "sessions");
    std::vector<ManifestEntry> out_manifest;
    const auto& cfg = model.config();
    const size_t sig = static_cast<size_t>(cfg.n_rois) * cfg.n_timepoints;
    const int chunk = 50;
    for (int start = 0; start < g_n; start += chunk) {
      int bs = std::min(chunk, g_n - start);
      std::vector<const MetadataRecord*> conds;
      if (!g_uncond) {
        conds.resize(bs);
        for (int b = 0; b < bs; ++b) conds[b] = &recs[(start + b) % recs.size()];
      }
      SampleOptions o = opt;
      o.seed = derive_seed(opt.seed, 0x9e4, static_cast<uint64_t>(start));
      Tensor batch = sample(model, sched, bs, conds, o);
      for (int b = 0; b < bs; ++b) {
        Tensor w({cfg.n_rois, cfg.n_timepoints});
        std::copy(batch.data() + b * sig, batch.data() + (b + 1) * sig, w.data());
        ManifestEntry e;
        e.session_id = "gen" + std::to_string(start + b);
        e.path = "sessions/" + e.session_id + ".rts1";
        e.state = "generated";
        write_rts1(fs::path(g_out) / e.path, w);
        out_manifest.push_back(std::move(e));
      }
    }
    write_manifest(fs::path(g_out) / "manifest.jsonl", out_manifest);
    std::cout << "sampled " << g_n << " sessions into " << g_out << "\n";
  });

  // ---- extract ----
  auto* ext = app.add_subcommand("extract", "extract multi-scale features");
  std::string e_ckpt, e_manifest, e_timesteps = "0,50,100,150", e_layers = "last4", e_out;
  int e_stride = 0;
  uint64_t e_noise_seed = 0;
  bool e_use_metadata = false;
  ext->add_option("--ckpt", e_ckpt)->required();
  ext->add_option("--manifest", e_manifest)->required();
  ext->add_option("--timesteps", e_timesteps, "comma-separated timesteps");
  ext->add_option("--layers", e_layers, "lastN or comma-separated 1-based blocks");
  ext->add_option("--stride", e_stride, "window stride (0 = window length)");
  ext->add_option("--noise-seed", e_noise_seed);
  ext->add_flag("--use-metadata", e_use_metadata,
                "condition the extraction pass on true metadata");
  ext->add_option("--out", e_out, "output archive")->required();
  ext->callback([&]() {
    DitModel model = load_checkpoint(e_ckpt);
    NoiseSchedule sched = cosine_schedule(model.config().steps);
    auto entries = read_manifest(e_manifest);
    if (entries.empty()) throw ConfigError("extract: empty manifest");

    ExtractionSpec spec;
    spec.timesteps = parse_int_list(e_timesteps);
    spec.layers = parse_layers(e_layers, model.config().n_layers);
    spec.noise_seed = e_noise_seed;
    spec.use_metadata = e_use_metadata;
    spec.validate(model.config());

    std::vector<Tensor> windows;
    std::vector<MetadataRecord> recs;
    std::vector<int> session_of;
    std::vector<std::string> window_ids;
    for (size_t s = 0; s < entries.size(); ++s) {
      Tensor session = load_session(entries[s], e_manifest);
      auto ws = window_stream(session, model.config().n_timepoints, e_stride);
      MetadataRecord rec = to_record(entries[s], model.diagnosis_labels);
      for (size_t k = 0; k < ws.size(); ++k) {
        windows.push_back(std::move(ws[k]));
        recs.push_back(rec);
        session_of.push_back(static_cast<int>(s));
        window_ids.push_back(entries[s].session_id + "#" + std::to_string(k));
      }
    }
    std::vector<const MetadataRecord*> conds(recs.size());
    for (size_t i = 0; i < recs.size(); ++i) conds[i] = &recs[i];
    FeatureBank bank = extract_features(model, sched, windows, conds, spec);

    TensorArchive a;
    a.config["kind"] = "feature_bank";
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& [t, l] : bank.slots) slots.push_back({t, l});
    a.config["slots"] = std::move(slots);
    a.config["session_of"] = session_of;
    a.config["window_ids"] = window_ids;
    a.config["use_metadata"] = e_use_metadata;
    a.put("e", bank.e);
    a.save(e_out);
    std::cout << "extracted " << windows.size() << " windows x " << bank.slots.size()
              << " slots into " << e_out << "\n";
  });

  // ---- probe ----
  auto* prb = app.add_subcommand("probe", "frozen-feature probing");
  std::string p_features, p_manifest, p_task, p_out = "probe";
  int p_folds = 5;
  uint64_t p_seed = 1;
  bool p_finetune = false, p_fc_baseline = false;
  int p_stride = 0;
  prb->add_option("--features", p_features, "feature bank archive");
  prb->add_option("--manifest", p_manifest)->required();
  prb->add_option("--task", p_task, "sex|age|diagnosis|state")->required();
  prb->add_flag("--finetune-agg", p_finetune, "train the aggregator + head");
  prb->add_flag("--fc-baseline", p_fc_baseline, "raw window-FC features instead of a bank");
  prb->add_option("--folds", p_folds);
  prb->add_option("--seed", p_seed);
  prb->add_option("--stride", p_stride, "fc-baseline window stride");
  prb->add_option("--out", p_out, "output path prefix");
  prb->callback([&]() {
    auto entries = read_manifest(p_manifest);
    TaskKind kind = (p_task == "age") ? TaskKind::Regression : TaskKind::Classification;
    std::vector<std::string> dx_labels = diagnosis_labels_from(entries, 2);

    ProbeDataset ds;
    if (p_fc_baseline) {
      if (p_features.empty()) {
        // infer the window length from the first session
        Tensor first = load_session(entries.at(0), p_manifest);
        int window = static_cast<int>(std::min<long>(first.dim(1), 40));
        ds = probe_dataset_fc(entries, p_manifest, window, p_stride, p_task, dx_labels);
      } else {
        throw ConfigError("probe: --fc-baseline does not take --features");
      }
    } else {
      if (p_features.empty()) throw ConfigError("probe: --features or --fc-baseline required");
      TensorArchive bank = TensorArchive::load(p_features);
      if (bank.config.value("kind", "") != "feature_bank")
        throw CheckpointError("probe: not a feature bank archive");
      ds = probe_dataset_from_bank(bank, entries, p_task, dx_labels);
    }

    ProbeResult res;
    if (p_finetune) {
      if (!ds.has_bank) throw ConfigError("probe: --finetune-agg needs a feature bank");
      FinetuneOptions opt;
      opt.folds = p_folds;
      opt.seed = p_seed;
      res = finetune_probe(ds.session_bank, ds.labels, kind, opt);
      res.task = p_task;
      // refit on all rows for the contribution analysis, then export weights
      TrainedAggregator trained =
          finetune_aggregator_full(ds.session_bank, ds.labels, kind, opt);
      TensorArchive wa;
      wa.config["kind"] = "aggregator_weights";
      nlohmann::json slots = nlohmann::json::array();
      for (const auto& [t, l] : ds.session_bank.slots) slots.push_back({t, l});
      wa.config["slots"] = std::move(slots);
      wa.put("w", trained.weights);
      wa.save(p_out + "_weights.rta");
    } else {
      res = linear_probe(ds.flat, ds.labels, kind, p_folds, p_seed, ds.groups);
      res.task = p_task;
    }
    write_probe_outputs(res, p_task, p_finetune, p_out);
    if (kind == TaskKind::Classification) {
      std::cout << p_task << " accuracy " << res.accuracy_mean << " +/- " << res.accuracy_std
                << "\n";
    } else {
      std::cout << p_task << " mse " << res.mse_mean << " r " << res.r_mean << "\n";
    }
  });

  // ---- eval-fc ----
  auto* efc = app.add_subcommand("eval-fc", "three-arm generative fidelity protocol");
  std::string f_ckpt, f_cohort, f_out = "fidelity.csv";
  int f_n = 200, f_steps = 0;
  uint64_t f_seed = 1;
  double f_guidance = 1.0;
  efc->add_option("--ckpt", f_ckpt)->required();
  efc->add_option("--cohort", f_cohort, "cohort manifest")->required();
  efc->add_option("--n", f_n, "virtual cohort size");
  efc->add_option("--steps", f_steps, "ancestral steps (0 = full schedule)");
  efc->add_option("--guidance", f_guidance);
  efc->add_option("--seed", f_seed);
  efc->add_option("--out", f_out, "output csv");
  efc->callback([&]() {
    DitModel model = load_checkpoint(f_ckpt);
    NoiseSchedule sched = cosine_schedule(model.config().steps);
    auto entries = read_manifest(f_cohort);
    if (entries.empty()) throw ConfigError("eval-fc: empty cohort manifest");
    std::vector<Tensor> windows;
    std::vector<MetadataRecord> meta;
    for (const auto& e : entries) {
      Tensor session = load_session(e, f_cohort);
      auto ws = window_stream(session, model.config().n_timepoints, 0);
      MetadataRecord rec = to_record(e, model.diagnosis_labels);
      for (auto& w : ws) {
        windows.push_back(std::move(w));
        meta.push_back(rec);
      }
    }
    SampleOptions opt;
    opt.n_steps = f_steps;
    opt.guidance = static_cast<float>(f_guidance);
    FidelityReport rep = fidelity_protocol(model, sched, windows, meta, f_n, f_seed, opt);
    std::ofstream csv(f_out);
    csv << "arm,mae,rmse,mse\n";
    csv << "random," << rep.random.error.mae << "," << rep.random.error.rmse << ","
        << rep.random.error.mse << "\n";
    csv << "unconditional," << rep.unconditional.error.mae << ","
        << rep.unconditional.error.rmse << "," << rep.unconditional.error.mse << "\n";
    csv << "conditional," << rep.conditional.error.mae << "," << rep.conditional.error.rmse
        << "," << rep.conditional.error.mse << "\n";
    std::cout << "random " << rep.random.error.mae << " uncond "
              << rep.unconditional.error.mae << " cond " << rep.conditional.error.mae
              << " -> " << f_out << "\n";
  });

  // ---- ablate-states ----
  auto* abl = app.add_subcommand("ablate-states", "state-diversity ablation ladder");
  std::string a_config, a_out = "ablate.csv";
  int a_budget = 0;
  abl->add_option("--config", a_config, "training config file")->required();
  abl->add_option("--budget", a_budget, "sessions per mixture")->required();
  abl->add_option("--out", a_out);
  abl->callback([&]() {
    KvConfig kv = KvConfig::parse_file(a_config);
    TrainConfig cfg = train_config_from(kv);
    kv.finish();
    auto entries = read_manifest(cfg.manifest_path);
    std::vector<std::string> dx_labels = diagnosis_labels_from(entries, cfg.model.n_diagnoses);

    static const char* kNames[] = {"R", "+D", "+T", "+N", "ALL"};
    std::ofstream csv(a_out);
    csv << "mixture,sex_accuracy,diagnosis_accuracy,mean_accuracy\n";
    auto ladder = mixture_ladder();
    for (size_t mi = 0; mi < ladder.size(); ++mi) {
      auto subset = state_mixture_split(entries, ladder[mi], a_budget, cfg.seed);
      DitModel model(cfg.model, derive_seed(cfg.seed, 0x1417));
      model.diagnosis_labels = dx_labels;
      model.age_stats = age_stats_from(entries);
      TrainingSet data = load_training_set(cfg.manifest_path, dx_labels,
                                           cfg.model.n_timepoints, cfg.window_stride, subset);
      NoiseSchedule sched = cosine_schedule(cfg.model.steps);
      pretrain_loop(model, sched, data, cfg);

      // features over the full corpus, probes on sex and diagnosis
      ExtractionSpec spec = ExtractionSpec::defaults(model.config(), cfg.seed);
      TrainingSet all = load_training_set(cfg.manifest_path, dx_labels,
                                          cfg.model.n_timepoints, cfg.window_stride);
      std::vector<const MetadataRecord*> conds(all.windows.size(), nullptr);
      FeatureBank bank = extract_features(model, sched, all.windows, conds, spec);
      bank.groups = all.session_of;

      // session-level averaging + labels
      auto probe_task = [&](const std::string& task) -> double {
        TensorArchive tmp;
        tmp.config["kind"] = "feature_bank";
        nlohmann::json slots = nlohmann::json::array();
        for (const auto& [t, l] : bank.slots) slots.push_back({t, l});
        tmp.config["slots"] = std::move(slots);
        tmp.config["session_of"] = all.session_of;
        tmp.put("e", bank.e);
        ProbeDataset ds = probe_dataset_from_bank(tmp, entries, task, dx_labels);
        ProbeResult r =
            linear_probe(ds.flat, ds.labels, TaskKind::Classification, 5, cfg.seed, ds.groups);
        return r.accuracy_mean;
      };
      double sex_acc = probe_task("sex");
      double dx_acc = probe_task("diagnosis");
      csv << kNames[mi] << "," << sex_acc << "," << dx_acc << "," << 0.5 * (sex_acc + dx_acc)
          << "\n";
      csv.flush();
      std::cout << kNames[mi] << " sex " << sex_acc << " dx " << dx_acc << "\n";
    }
    std::cout << "wrote " << a_out << "\n";
  });

  // ---- report ----
  auto* rep = app.add_subcommand("report", "consolidate run artifacts into CSVs");
  std::string r_run;
  rep->add_option("--run", r_run, "run directory")->required();
  rep->callback([&]() {
    fs::path dir(r_run);
    if (!fs::is_directory(dir)) throw ConfigError("report: not a directory: " + r_run);
    int artifacts = 0;

    // aggregator weights -> contribution CSVs
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() != ".rta") continue;
      TensorArchive a = TensorArchive::load(entry.path());
      if (a.config.value("kind", "") != "aggregator_weights") continue;
      std::vector<std::pair<int, int>> slots;
      for (const auto& s : a.config.at("slots")) slots.push_back({s.at(0), s.at(1)});
      ContributionReport crep = contribution_report(a.get("w"), slots);
      fs::path out = dir / (entry.path().stem().string() + "_contribution.csv");
      std::ofstream csv(out);
      csv << "t,layer,mean_weight\n";
      for (size_t q = 0; q < slots.size(); ++q)
        csv << slots[q].first << "," << slots[q].second << "," << crep.mean_weight[q] << "\n";
      fs::path mout = dir / (entry.path().stem().string() + "_marginals.csv");
      std::ofstream mcsv(mout);
      mcsv << "kind,value,weight,renormalized\n";
      for (size_t i = 0; i < crep.timesteps.size(); ++i)
        mcsv << "timestep," << crep.timesteps[i] << "," << crep.timestep_marginal[i] << ","
             << crep.timestep_marginal[i] << "\n";
      for (size_t i = 0; i < crep.layers.size(); ++i)
        mcsv << "layer," << crep.layers[i] << "," << crep.layer_marginal[i] << ","
             << crep.layer_marginal[i] << "\n";
      ++artifacts;
    }

    // probe JSONs + fidelity/ablation CSVs -> metrics.csv
    std::ofstream metrics(dir / "metrics.csv");
    metrics << "source,metric,value\n";
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() == ".json") {
        std::ifstream f(entry.path());
        nlohmann::json j;
        try {
          f >> j;
        } catch (...) {
          continue;
        }
        if (!j.contains("task")) continue;
        std::string src = entry.path().stem().string();
        if (j.contains("accuracy_mean"))
          metrics << src << ",accuracy," << j["accuracy_mean"].get<double>() << "\n";
        if (j.contains("mse_mean"))
          metrics << src << ",mse," << j["mse_mean"].get<double>() << "\n";
        if (j.contains("r_mean")) metrics << src << ",r," << j["r_mean"].get<double>() << "\n";
        ++artifacts;
      } else if (entry.path().filename() == "fidelity.csv" ||
                 entry.path().filename() == "ablate.csv") {
        std::ifstream f(entry.path());
        std::string line;
        std::getline(f, line);  // header
        std::string src = entry.path().stem().string();
        while (std::getline(f, line)) {
          if (line.empty()) continue;
          size_t comma = line.find(',');
          metrics << src << "," << line.substr(0, comma) << "," << line.substr(comma + 1)
                  << "\n";
        }
        ++artifacts;
      } else if (entry.path().filename() == "runlog.csv") {
        std::ifstream f(entry.path());
        std::string line, last;
        std::getline(f, line);
        while (std::getline(f, line))
          if (!line.empty()) last = line;
        if (!last.empty()) {
          // epoch,step,loss,...
          size_t p1 = last.find(',');
          size_t p2 = last.find(',', p1 + 1);
          size_t p3 = last.find(',', p2 + 1);
          metrics << "runlog,final_loss," << last.substr(p2 + 1, p3 - p2 - 1) << "\n";
        }
        ++artifacts;
      }
    }
    std::cout << "consolidated " << artifacts << " artifacts into "
              << (dir / "metrics.csv") << "\n";
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const CheckpointError& e) {
    std::cerr << "archive error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
