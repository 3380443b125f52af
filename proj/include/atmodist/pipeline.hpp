#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "atmodist/checkpoint.hpp"
#include "atmodist/error.hpp"
#include "atmodist/eval_stats.hpp"
#include "atmodist/field_data.hpp"
#include "atmodist/metric.hpp"
#include "atmodist/pretext_train.hpp"
#include "atmodist/repnet.hpp"
#include "atmodist/sampler.hpp"
#include "atmodist/srgan.hpp"
#include "atmodist/transform.hpp"

namespace atmodist {

namespace fs = std::filesystem;

/// Disjoint train / eval time ranges: the first `train_fraction` of the series
/// and the last `eval_fraction`, with whatever lies between as a gap.
struct SplitConfig {
  double train_fraction = 0.7;
  double eval_fraction = 0.25;
};

struct TimeRange {
  int begin = 0, end = 0;
};

inline std::pair<TimeRange, TimeRange> split_times(int n_times, const SplitConfig& s) {
  if (!(s.train_fraction > 0.0 && s.eval_fraction > 0.0 && s.train_fraction + s.eval_fraction <= 1.0))
    throw ConfigError("split fractions must be positive and sum to at most 1");
  const TimeRange train{0, static_cast<int>(n_times * s.train_fraction)};
  const TimeRange eval{n_times - static_cast<int>(n_times * s.eval_fraction), n_times};
  if (train.end < 2 || eval.end - eval.begin < 2) throw ConfigError("series too short for the requested split");
  return {train, eval};
}

struct ProfileConfig {
  int pairs = 1600;  // eval pairs per profile; at least 100 per lag expected
  int batch_size = 128;
};

struct EvalConfig {
  int patches = 128;
  int max_lag = 8;
  int n_bins = 8;
};

struct PipelineConfig {
  fs::path run_dir = "run";
  std::uint64_t seed = 1;
  std::string input_series;  // existing series file; empty generates synthetic data
  SyntheticConfig data;
  double transform_alpha = 0.2;
  SamplerConfig sampler;
  SplitConfig split;
  RepNetConfig repnet;
  TrainConfig train;
  ProfileConfig profile;
  SRConfig sr;
  EvalConfig eval;
  bool resume = false;
};

/// Cross-module consistency checks that need no data.
inline void validate(const PipelineConfig& c) {
  validate(c.sampler);
  validate(c.train);
  validate(c.sr);
  feature_map_size(c.repnet);
  if (c.repnet.input_size != c.sampler.patch_size)
    throw ConfigError("repnet input_size " + std::to_string(c.repnet.input_size) + " differs from patch_size " +
                      std::to_string(c.sampler.patch_size));
  if (c.repnet.num_classes != c.sampler.max_lag_steps)
    throw ConfigError("repnet num_classes must equal the number of lag classes");
  if (c.sr.scale != c.sampler.sr_scale) throw ConfigError("sr.scale must equal sampler.sr_scale");
  if (c.sampler.patch_size % c.sr.scale != 0) throw ConfigError("patch_size must be divisible by the SR scale");
  if (c.eval.max_lag >= c.sampler.patch_size || c.eval.max_lag < 1 || c.eval.n_bins < 1 || c.eval.patches < 1)
    throw ConfigError("eval needs 1 <= max_lag < patch_size and positive bins/patches");
  if (c.profile.pairs < 1 || c.profile.batch_size < 1) throw ConfigError("profile counts must be positive");
}

/// Module seeds that the config file leaves unset are derived from the global seed.
inline std::uint64_t derive_seed(std::uint64_t global, std::uint64_t salt) {
  std::uint64_t z = global + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  return {{"run_dir", c.run_dir.string()},
          {"seed", c.seed},
          {"input_series", c.input_series},
          {"data", to_json(c.data)},
          {"transform", {{"alpha", c.transform_alpha}}},
          {"sampler", to_json(c.sampler)},
          {"split", {{"train_fraction", c.split.train_fraction}, {"eval_fraction", c.split.eval_fraction}}},
          {"repnet", to_json(c.repnet)},
          {"train", to_json(c.train)},
          {"profile", {{"pairs", c.profile.pairs}, {"batch_size", c.profile.batch_size}}},
          {"sr", to_json(c.sr)},
          {"eval", {{"patches", c.eval.patches}, {"max_lag", c.eval.max_lag}, {"n_bins", c.eval.n_bins}}}};
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  try {
    c.run_dir = j.value("run_dir", c.run_dir.string());
    c.seed = j.value("seed", c.seed);
    c.input_series = j.value("input_series", c.input_series);
    const auto section = [&](const char* key) { return j.contains(key) ? j[key] : nlohmann::json::object(); };
    const auto seeded = [&](const char* key, std::uint64_t salt) {
      auto s = section(key);
      if (!s.contains("seed")) s["seed"] = derive_seed(c.seed, salt);
      return s;
    };
    c.data = synthetic_config_from_json(seeded("data", 0));
    c.transform_alpha = section("transform").value("alpha", c.transform_alpha);
    c.sampler = sampler_config_from_json(seeded("sampler", 1));
    const auto split = section("split");
    c.split.train_fraction = split.value("train_fraction", c.split.train_fraction);
    c.split.eval_fraction = split.value("eval_fraction", c.split.eval_fraction);
    c.repnet = repnet_from_json(section("repnet"));
    c.train = train_config_from_json(seeded("train", 2));
    const auto prof = section("profile");
    c.profile.pairs = prof.value("pairs", c.profile.pairs);
    c.profile.batch_size = prof.value("batch_size", c.profile.batch_size);
    c.sr = sr_config_from_json(seeded("sr", 3));
    const auto ev = section("eval");
    c.eval.patches = ev.value("patches", c.eval.patches);
    c.eval.max_lag = ev.value("max_lag", c.eval.max_lag);
    c.eval.n_bins = ev.value("n_bins", c.eval.n_bins);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed pipeline config: ") + e.what());
  }
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  try {
    return pipeline_config_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Where each stage reads and writes inside a run directory.
struct RunLayout {
  fs::path root;
  fs::path data_dir() const { return root / "data"; }
  fs::path series() const { return data_dir() / "series.f32"; }
  fs::path transform() const { return data_dir() / "transform.json"; }
  fs::path eval_pairs() const { return root / "pairs" / "eval_pairs.f32"; }
  fs::path ckpt() const { return root / "ckpt"; }
  fs::path profile_dir() const { return root / "profile"; }
  fs::path calibration() const { return profile_dir() / "calibration.json"; }
  fs::path sr_dir() const { return root / "sr"; }
  fs::path report_dir() const { return root / "report"; }
  fs::path stage_marker(const std::string& stage) const { return root / "stages" / (stage + ".done"); }
};

using StageLogger = std::function<void(const std::string&)>;

namespace detail {

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw InputError("missing " + what + ": " + p.string());
}

inline FieldSeries load_data(const fs::path& data_dir) {
  require_file(data_dir / "series.f32", "series");
  return load_series(data_dir / "series.f32");
}

inline TransformSpec load_transform(const fs::path& p) {
  require_file(p, "transform");
  return transform_from_json(read_json(p));
}

}  // namespace detail

// ---- stages -----------------------------------------------------------------

inline void stage_gen_data(const PipelineConfig& c, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  FieldSeries s = c.input_series.empty() ? generate_synthetic(c.data) : load_series(c.input_series);
  save_series(s, out_dir / "series.f32");
}

/// Moments come from the training split only.
inline TransformSpec stage_fit_transform(const PipelineConfig& c, const fs::path& data_dir) {
  const auto series = detail::load_data(data_dir);
  const auto [train, eval] = split_times(series.n_times, c.split);
  const auto spec = fit_transform(slice_times(series, train.begin, train.end), c.transform_alpha);
  write_json(data_dir / "transform.json", to_json(spec));
  return spec;
}

/// Eval-split pairs cached for profiling.
inline std::vector<PatchPairSample> stage_sample(const PipelineConfig& c, const fs::path& data_dir,
                                                 const fs::path& out, int count) {
  const auto series = detail::load_data(data_dir);
  const auto spec = detail::load_transform(data_dir / "transform.json");
  const auto [train, eval] = split_times(series.n_times, c.split);
  PairSampler sampler(series, spec, c.sampler, eval.begin, eval.end, derive_seed(c.sampler.seed, 101));
  auto pairs = sampler.take(static_cast<std::size_t>(count));
  fs::create_directories(out.parent_path());
  save_pairs(pairs, series.channels, out);
  return pairs;
}

/// Save a trained model together with everything needed to rebuild and apply it.
template <typename S>
void save_model(RepresentationModel<S>& model, const TransformSpec& spec, const SamplerConfig& sampler,
                const fs::path& data_dir, const fs::path& ckpt) {
  fs::create_directories(ckpt);
  save_tensors(ckpt / "model.bin", model.params(), model.buffers());
  write_json(ckpt / "model.json", {{"version", checkpoint_version},
                                   {"repnet", to_json(model.config())},
                                   {"transform", to_json(spec)},
                                   {"sampler", to_json(sampler)},
                                   {"data", data_dir.string()},
                                   {"parameter_count", model.parameter_count()}});
}

struct LoadedModel {
  std::unique_ptr<RepresentationModel<float>> model;
  TransformSpec transform;
  SamplerConfig sampler;
  fs::path data_dir;
};

inline LoadedModel load_model(const fs::path& ckpt) {
  detail::require_file(ckpt / "model.json", "checkpoint metadata");
  detail::require_file(ckpt / "model.bin", "checkpoint weights");
  const auto meta = read_json(ckpt / "model.json");
  LoadedModel m;
  m.model = std::make_unique<RepresentationModel<float>>(repnet_from_json(meta.at("repnet")), 0);
  load_tensors(ckpt / "model.bin", m.model->params(), m.model->buffers());
  m.transform = transform_from_json(meta.at("transform"));
  m.sampler = sampler_config_from_json(meta.value("sampler", nlohmann::json::object()));
  m.data_dir = meta.value("data", std::string{});
  return m;
}

inline nlohmann::json to_json_summary(const TrainLog& log) {
  nlohmann::json j{{"epochs", log.epochs.size()}, {"best_epoch", log.best_epoch}};
  if (log.best_epoch >= 0) {
    const auto& b = log.epochs[static_cast<std::size_t>(log.best_epoch)];
    j["best_eval_loss"] = b.eval_loss;
    j["best_eval_acc"] = b.eval_acc;
  }
  return j;
}

inline TrainLog stage_train_pretext(const PipelineConfig& c, const fs::path& data_dir, const fs::path& ckpt,
                                    const StageLogger& log = {}) {
  const auto series = detail::load_data(data_dir);
  const auto spec = detail::load_transform(data_dir / "transform.json");
  const auto [train, eval] = split_times(series.n_times, c.split);
  if (c.repnet.input_channels != series.n_channels())
    throw ConfigError("repnet expects " + std::to_string(c.repnet.input_channels) + " channels, data has " +
                      std::to_string(series.n_channels()));
  PairSampler train_stream(series, spec, c.sampler, train.begin, train.end, c.sampler.seed);
  PairSampler eval_stream(series, spec, c.sampler, eval.begin, eval.end, derive_seed(c.sampler.seed, 100));
  RepresentationModel<float> model(c.repnet, c.train.seed);
  if (log) log("model parameters: " + std::to_string(model.parameter_count()));
  const auto on_epoch = [&](const EpochLog& e) {
    if (log)
      log("epoch " + std::to_string(e.epoch) + (e.curriculum ? " (curriculum)" : "") +
          " train_loss=" + std::to_string(e.train_loss) + " eval_loss=" + std::to_string(e.eval_loss) +
          " eval_acc=" + std::to_string(e.eval_acc) + " lr=" + std::to_string(e.lr));
  };
  const TrainLog tlog = train_pretext(model, train_stream, eval_stream, c.train, on_epoch);
  save_model(model, spec, c.sampler, data_dir, ckpt);
  std::ofstream csv(ckpt / "train_log.csv");
  write_csv(tlog, csv);
  write_json(ckpt / "train_summary.json", to_json_summary(tlog));
  return tlog;
}

struct Calibration {
  DistanceProfile rep, rep_sq, mse;
  ContentLossScale scale;
  double spearman = 0.0;
};

inline nlohmann::json to_json(const Calibration& cal) {
  return {{"alpha_cnt", cal.scale.alpha_cnt},
          {"numeric_alpha", cal.scale.numeric_alpha},
          {"tail_begin", cal.scale.tail_begin},
          {"tail_end", cal.scale.tail_end},
          {"spearman_rep", cal.spearman},
          {"rep_lag1", cal.rep.mean.front()},
          {"rep_lagN", cal.rep.mean.back()}};
}

inline Calibration stage_profile(const fs::path& ckpt, const fs::path& pairs_file, const fs::path& out_dir,
                                 int batch_size = 128) {
  auto loaded = load_model(ckpt);
  detail::require_file(pairs_file, "eval pairs");
  const auto pairs = load_pairs(pairs_file);
  const int n = loaded.model->num_classes();
  Calibration cal;
  cal.rep = distance_profile(*loaded.model, pairs, n, DistanceKind::representation, batch_size);
  cal.rep_sq = distance_profile(*loaded.model, pairs, n, DistanceKind::representation_squared, batch_size);
  cal.mse = mse_profile(pairs, n);
  cal.scale = fit_alpha_cnt(cal.rep_sq, cal.mse);
  cal.spearman = lag_spearman(cal.rep);
  fs::create_directories(out_dir);
  for (const auto& [name, prof] : {std::pair{"rep", &cal.rep}, {"rep_sq", &cal.rep_sq}, {"mse", &cal.mse}}) {
    std::ofstream os(out_dir / (std::string(name) + ".csv"));
    write_csv(*prof, os);
  }
  write_json(out_dir / "calibration.json", to_json(cal));
  return cal;
}

/// Eval-split high-resolution truth patches and their pooled inputs.
inline void stage_sr_truth(const PipelineConfig& c, const fs::path& data_dir, const fs::path& sr_dir) {
  const auto series = detail::load_data(data_dir);
  const auto spec = detail::load_transform(data_dir / "transform.json");
  const auto [train, eval] = split_times(series.n_times, c.split);
  SrPairSampler stream(series, spec, c.sampler, eval.begin, eval.end, derive_seed(c.sampler.seed, 200));
  std::vector<Patch<float>> hi, lo;
  for (const auto& p : stream.take(static_cast<std::size_t>(c.eval.patches))) {
    hi.push_back(p.high_res);
    lo.push_back(p.low_res);
  }
  fs::create_directories(sr_dir);
  save_series(patches_to_series(hi, series.channels), sr_dir / "truth.f32");
  save_series(patches_to_series(lo, series.channels), sr_dir / "low_res.f32");
}

struct SrRun {
  SrCurves curves;
  std::vector<Patch<float>> generated;
};

/// Train one SR generator and super-resolve the cached eval inputs.
/// `ckpt` is needed for the representation loss only.
inline SrRun stage_train_sr(const PipelineConfig& c, SRConfig sr, const fs::path& data_dir, const fs::path& ckpt,
                            const fs::path& sr_dir, std::optional<double> alpha_cnt, const StageLogger& log = {}) {
  std::unique_ptr<RepresentationModel<float>> rep;
  if (sr.loss == ContentLossKind::representation) {
    if (!fs::exists(ckpt / "model.bin"))
      throw ConfigError("representation loss needs a checkpoint, missing " + (ckpt / "model.bin").string());
    rep = std::move(load_model(ckpt).model);
    if (alpha_cnt) sr.alpha_cnt = *alpha_cnt;
  } else {
    sr.alpha_cnt = 1.0;
  }
  const auto series = detail::load_data(data_dir);
  const auto spec = detail::load_transform(data_dir / "transform.json");
  const auto [train, eval] = split_times(series.n_times, c.split);
  SrPairSampler stream(series, spec, c.sampler, train.begin, train.end, derive_seed(sr.seed, 10));
  auto models = build_sr_models<float>(sr, series.n_channels());
  const auto on_epoch = [&](const SrEpochLog& e) {
    if (log)
      log("sr[" + to_string(sr.loss) + "] epoch " + std::to_string(e.epoch) + " content=" +
          std::to_string(e.content) + " adversarial=" + std::to_string(e.adversarial) +
          " discriminator=" + std::to_string(e.discriminator));
  };
  SrRun run;
  run.curves = train_sr(*models.generator, *models.discriminator, stream, sr, rep.get(), on_epoch);

  const fs::path out = sr_dir / to_string(sr.loss);
  fs::create_directories(out);
  save_tensors(out / "generator.bin", models.generator->params(), models.generator->buffers());
  write_json(out / "generator.json", {{"version", checkpoint_version}, {"sr", to_json(sr)}});
  {
    std::ofstream os(out / "curves.csv");
    write_csv(run.curves, os);
    std::ofstream ps(out / "probe.csv");
    ps << "step,content\n" << std::setprecision(17);
    for (std::size_t i = 0; i < run.curves.probe_steps.size(); ++i)
      ps << run.curves.probe_steps[i] << ',' << run.curves.probe_content[i] << '\n';
  }
  const fs::path low = sr_dir / "low_res.f32";
  if (fs::exists(low)) {
    run.generated = super_resolve(*models.generator, series_to_patches(load_series(low)));
    save_series(patches_to_series(run.generated, series.channels), out / "generated.f32");
  }
  return run;
}

inline CompareReport stage_eval(const fs::path& truth, const std::vector<std::pair<std::string, fs::path>>& preds,
                                const fs::path& out_dir, const EvalConfig& ev,
                                const nlohmann::json& extra = nlohmann::json::object()) {
  detail::require_file(truth, "truth patches");
  std::vector<std::pair<std::string, std::vector<Patch<float>>>> sets;
  for (const auto& [name, path] : preds) {
    detail::require_file(path, "prediction patches");
    sets.emplace_back(name, series_to_patches(load_series(path)));
  }
  auto report = compare_report(series_to_patches(load_series(truth)), sets, ev.max_lag, ev.n_bins);
  write_report(report, out_dir, extra);
  return report;
}

// ---- full run ---------------------------------------------------------------

struct PipelineResult {
  TrainLog train_log;
  Calibration calibration;
  SrCurves sr_mse, sr_rep;
  CompareReport report;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-data", "fit-transform", "sample",   "train-pretext",
                                              "profile",  "train-sr",      "eval"};
  return names;
}

/// Run every stage in order under cfg.run_dir. A failing stage is rethrown as
/// StageError; artifacts of finished stages stay on disk. With cfg.resume set,
/// stages whose completion marker exists are skipped and later stages read
/// their artifacts back from disk.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const StageLogger& log = {}) {
  validate(cfg);
  const RunLayout L{cfg.run_dir};
  fs::create_directories(L.root / "stages");
  write_json(L.root / "config.json", to_json(cfg));

  PipelineResult r;
  const auto run = [&](const std::string& stage, const std::function<void()>& body) {
    if (cfg.resume && fs::exists(L.stage_marker(stage))) {
      if (log) log("[" + stage + "] skipped (already complete)");
      return;
    }
    if (log) log("[" + stage + "] start");
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
    std::ofstream(L.stage_marker(stage)) << "ok\n";
    if (log) log("[" + stage + "] done");
  };

  run("gen-data", [&] { stage_gen_data(cfg, L.data_dir()); });
  run("fit-transform", [&] { stage_fit_transform(cfg, L.data_dir()); });
  run("sample", [&] { stage_sample(cfg, L.data_dir(), L.eval_pairs(), cfg.profile.pairs); });
  run("train-pretext", [&] { r.train_log = stage_train_pretext(cfg, L.data_dir(), L.ckpt(), log); });
  run("profile", [&] { r.calibration = stage_profile(L.ckpt(), L.eval_pairs(), L.profile_dir(), cfg.profile.batch_size); });
  run("train-sr", [&] {
    stage_sr_truth(cfg, L.data_dir(), L.sr_dir());
    const double alpha = read_json(L.calibration()).at("alpha_cnt").get<double>();
    SRConfig mse = cfg.sr, rep = cfg.sr;
    mse.loss = ContentLossKind::mse;
    rep.loss = ContentLossKind::representation;
    r.sr_mse = stage_train_sr(cfg, mse, L.data_dir(), L.ckpt(), L.sr_dir(), std::nullopt, log).curves;
    r.sr_rep = stage_train_sr(cfg, rep, L.data_dir(), L.ckpt(), L.sr_dir(), alpha, log).curves;
  });
  run("eval", [&] {
    nlohmann::json extra;
    extra["calibration"] = read_json(L.calibration());
    extra["pretext"] = read_json(L.ckpt() / "train_summary.json");
    extra["pretext"]["parameter_count"] = read_json(L.ckpt() / "model.json").at("parameter_count");
    r.report = stage_eval(L.sr_dir() / "truth.f32",
                          {{"mse", L.sr_dir() / "mse" / "generated.f32"}, {"rep", L.sr_dir() / "rep" / "generated.f32"}},
                          L.report_dir(), cfg.eval, extra);
  });
  return r;
}

}  // namespace atmodist
