// Command-line front end: one subcommand per pipeline stage plus `run`.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <string>

#include "CLI11.hpp"

#include "atmodist/pipeline.hpp"

namespace fs = std::filesystem;
using namespace atmodist;

namespace {

void say(const std::string& msg) { std::cerr << msg << '\n'; }

PipelineConfig load_or_default(const std::string& path) {
  return path.empty() ? pipeline_config_from_json(nlohmann::json::object()) : load_pipeline_config(path);
}

int exit_code_for(const std::string& stage) {
  const auto& names = stage_names();
  const auto it = std::find(names.begin(), names.end(), stage);
  return it == names.end() ? 1 : 10 + static_cast<int>(it - names.begin());
}

template <typename F>
int as_stage(const std::string& stage, F&& body) {
  try {
    body();
    return 0;
  } catch (const StageError& e) {
    say(std::string("error: ") + e.what());
    return exit_code_for(e.stage());
  } catch (const std::exception& e) {
    say("error: stage '" + stage + "' failed: " + e.what());
    return exit_code_for(stage);
  }
}

std::pair<int, int> parse_size(const std::string& s) {
  static const std::regex re(R"((\d+)[xX](\d+))");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw ConfigError("size must look like HxW, got '" + s + "'");
  return {std::stoi(m[1]), std::stoi(m[2])};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised temporal-distance representations for gridded fields"};
  app.require_subcommand(1);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "Force single-worker mode (all stages already run single-threaded)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic two-channel field series");
  std::string gen_config, gen_size, gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<int> gen_times;
  gen->add_option("--config", gen_config, "Pipeline config JSON (uses its data section)");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--size", gen_size, "Grid size as HxW (lat x lon)");
  gen->add_option("--times", gen_times, "Number of time steps");
  gen->add_option("--out", gen_out, "Output directory")->required();

  // fit-transform
  auto* fit = app.add_subcommand("fit-transform", "Fit the per-channel normalising transform");
  std::string fit_data, fit_config;
  std::optional<double> fit_alpha;
  fit->add_option("--data", fit_data, "Data directory holding series.f32")->required();
  fit->add_option("--config", fit_config, "Pipeline config JSON (transform and split sections)");
  fit->add_option("--alpha", fit_alpha, "Compression parameter of the signed log (default 0.2)");

  // sample
  auto* smp = app.add_subcommand("sample", "Cache patch pairs from the eval split");
  std::string smp_config, smp_data, smp_out;
  std::optional<int> smp_count;
  smp->add_option("--config", smp_config, "Pipeline config JSON");
  smp->add_option("--data", smp_data, "Data directory (default: <run_dir>/data)");
  smp->add_option("--out", smp_out, "Output pair file")->required();
  smp->add_option("--count", smp_count, "Number of pairs (default: profile.pairs)");

  // train-pretext
  auto* tp = app.add_subcommand("train-pretext", "Train the temporal-distance network");
  std::string tp_config, tp_data, tp_out;
  tp->add_option("--config", tp_config, "Pipeline config JSON");
  tp->add_option("--data", tp_data, "Data directory with series.f32 and transform.json")->required();
  tp->add_option("--out", tp_out, "Checkpoint directory")->required();

  // profile
  auto* prof = app.add_subcommand("profile", "Distance-vs-lag profile on eval pairs");
  std::string prof_ckpt, prof_metric = "rep", prof_out, prof_pairs, prof_config, prof_calib;
  prof->add_option("--ckpt", prof_ckpt, "Checkpoint directory")->required();
  prof->add_option("--metric", prof_metric, "rep, rep-sq or mse")->check(CLI::IsMember({"rep", "rep-sq", "mse"}));
  prof->add_option("--out", prof_out, "Profile CSV (lag,mean,std,n)")->required();
  prof->add_option("--pairs", prof_pairs, "Cached pair file (default: sample from the checkpoint's data)");
  prof->add_option("--config", prof_config, "Pipeline config JSON used when sampling pairs");
  prof->add_option("--calibration", prof_calib, "Also fit the content-loss scale and write it here (JSON)");

  // train-sr
  auto* tsr = app.add_subcommand("train-sr", "Train a super-resolution GAN");
  std::string tsr_config, tsr_data, tsr_loss = "mse", tsr_ckpt, tsr_out, tsr_calib;
  std::optional<double> tsr_alpha;
  tsr->add_option("--config", tsr_config, "Pipeline config JSON");
  tsr->add_option("--data", tsr_data, "Data directory")->required();
  tsr->add_option("--loss", tsr_loss, "Content loss")->check(CLI::IsMember({"mse", "rep"}));
  tsr->add_option("--ckpt", tsr_ckpt, "Representation checkpoint (rep loss)");
  tsr->add_option("--out", tsr_out, "Output directory")->required();
  tsr->add_option("--alpha-cnt", tsr_alpha, "Content-loss scale (overrides --calibration)");
  tsr->add_option("--calibration", tsr_calib, "calibration.json written by `profile --calibration`");

  // eval
  auto* ev = app.add_subcommand("eval", "Spectrum and variogram comparison report");
  std::string ev_truth, ev_pred, ev_pred2, ev_out, ev_config;
  ev->add_option("--truth", ev_truth, "Ground-truth patches")->required();
  ev->add_option("--pred", ev_pred, "Prediction patches")->required();
  ev->add_option("--pred2", ev_pred2, "Second prediction set");
  ev->add_option("--out", ev_out, "Report directory")->required();
  ev->add_option("--config", ev_config, "Pipeline config JSON (eval section)");

  // run
  auto* run = app.add_subcommand("run", "Run the full pipeline");
  std::string run_config, run_dir;
  bool run_resume = false;
  run->add_option("--config", run_config, "Pipeline config JSON")->required();
  run->add_option("--run-dir", run_dir, "Override the run directory");
  run->add_flag("--resume", run_resume, "Skip stages that already completed");

  CLI11_PARSE(app, argc, argv);
  (void)deterministic;

  try {
    if (*gen)
      return as_stage("gen-data", [&] {
        auto cfg = load_or_default(gen_config);
        if (gen_seed) cfg.data.seed = *gen_seed;
        if (!gen_size.empty()) std::tie(cfg.data.n_lat, cfg.data.n_lon) = parse_size(gen_size);
        if (gen_times) cfg.data.n_times = *gen_times;
        stage_gen_data(cfg, gen_out);
        say("wrote " + (fs::path(gen_out) / "series.f32").string());
      });
    if (*fit)
      return as_stage("fit-transform", [&] {
        auto cfg = load_or_default(fit_config);
        if (fit_alpha) cfg.transform_alpha = *fit_alpha;
        stage_fit_transform(cfg, fit_data);
        say("wrote " + (fs::path(fit_data) / "transform.json").string());
      });
    if (*smp)
      return as_stage("sample", [&] {
        const auto cfg = load_or_default(smp_config);
        validate(cfg);
        const fs::path data = smp_data.empty() ? RunLayout{cfg.run_dir}.data_dir() : fs::path(smp_data);
        const auto pairs = stage_sample(cfg, data, smp_out, smp_count.value_or(cfg.profile.pairs));
        say("wrote " + std::to_string(pairs.size()) + " pairs to " + smp_out);
      });
    if (*tp)
      return as_stage("train-pretext", [&] {
        const auto cfg = load_or_default(tp_config);
        validate(cfg);
        const auto log = stage_train_pretext(cfg, tp_data, tp_out, say);
        say("best epoch " + std::to_string(log.best_epoch) + ", eval loss " + std::to_string(log.best_eval_loss));
      });
    if (*prof)
      return as_stage("profile", [&] {
        const auto cfg = load_or_default(prof_config);
        std::vector<PatchPairSample> pairs;
        if (prof_pairs.empty()) {
          const auto meta = read_json(fs::path(prof_ckpt) / "model.json");
          const fs::path tmp = fs::path(prof_ckpt) / "profile_pairs.f32";
          pairs = stage_sample(cfg, meta.at("data").get<std::string>(), tmp, cfg.profile.pairs);
          prof_pairs = tmp.string();
        }
        auto loaded = load_model(prof_ckpt);
        if (pairs.empty()) pairs = load_pairs(prof_pairs);
        const int n = loaded.model->num_classes();
        const auto p = distance_profile(*loaded.model, pairs, n, distance_kind_from_string(prof_metric),
                                        cfg.profile.batch_size);
        std::ofstream os(prof_out);
        write_csv(p, os);
        if (!prof_calib.empty()) {
          // Writes all three profiles next to the calibration file.
          const fs::path dir = fs::absolute(prof_calib).parent_path();
          const auto cal = stage_profile(prof_ckpt, prof_pairs, dir, cfg.profile.batch_size);
          write_json(prof_calib, to_json(cal));
        }
        say("wrote " + prof_out);
      });
    if (*tsr)
      return as_stage("train-sr", [&] {
        const auto cfg = load_or_default(tsr_config);
        validate(cfg);
        SRConfig sr = cfg.sr;
        sr.loss = content_loss_from_string(tsr_loss);
        std::optional<double> alpha = tsr_alpha;
        if (!alpha && !tsr_calib.empty()) alpha = read_json(tsr_calib).at("alpha_cnt").get<double>();
        if (sr.loss == ContentLossKind::representation && tsr_ckpt.empty())
          throw ConfigError("--loss rep requires --ckpt");
        if (!fs::exists(fs::path(tsr_out) / "low_res.f32")) stage_sr_truth(cfg, tsr_data, tsr_out);
        const auto r = stage_train_sr(cfg, sr, tsr_data, tsr_ckpt, tsr_out, alpha, say);
        say("wrote " + std::to_string(r.generated.size()) + " generated patches under " + tsr_out);
      });
    if (*ev)
      return as_stage("eval", [&] {
        const auto cfg = load_or_default(ev_config);
        std::vector<std::pair<std::string, fs::path>> preds{{"pred", ev_pred}};
        if (!ev_pred2.empty()) preds.emplace_back("pred2", ev_pred2);
        const auto r = stage_eval(ev_truth, preds, ev_out, cfg.eval);
        for (const auto& p : r.predictions)
          say(p.name + ": log-spectrum gap " + std::to_string(p.log_spectrum_gap) + ", variogram gap " +
              std::to_string(p.variogram_gap));
      });
    if (*run)
      return as_stage("run", [&] {
        auto cfg = load_pipeline_config(run_config);
        if (!run_dir.empty()) cfg.run_dir = run_dir;
        cfg.resume = run_resume;
        run_pipeline(cfg, say);
        say("summary: " + (RunLayout{cfg.run_dir}.report_dir() / "summary.json").string());
      });
  } catch (const std::exception& e) {
    say(std::string("error: ") + e.what());
    return 1;
  }
  return 0;
}
