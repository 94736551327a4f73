// cfm: conformal failure masks for super-resolution reconstructions.
// Pipeline: synth -> degrade -> sr -> errmap/train -> predict -> calibrate ->
// mask, with eval / trials / curve / ablate for the evaluation protocol and
// demo for the whole thing end to end.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "cfm/conformal.hpp"
#include "cfm/errnet.hpp"
#include "cfm/errormaps.hpp"
#include "cfm/errors.hpp"
#include "cfm/eval.hpp"
#include "cfm/ioutil.hpp"
#include "cfm/raster.hpp"
#include "cfm/rng.hpp"
#include "cfm/synth.hpp"

#include "cli_common.hpp"

namespace fs = std::filesystem;
using cfmtool::OptionRegistry;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

void log_config(const std::string& cmd, const json& resolved) {
  std::cerr << "[cfm " << cmd << "] config " << resolved.dump() << "\n";
}

cfm::Image load_image_any(const fs::path& path) {
  if (path.extension() == ".emap")
    return cfm::image_from_emap(cfm::read_emap(path));
  return cfm::read_image(path);
}

cfm::FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "identity") return cfm::FeatureMode::identity;
  if (s == "handcrafted") return cfm::FeatureMode::handcrafted;
  throw std::invalid_argument("unknown feature mode '" + s + "'");
}

cfm::ScoreSource make_score_source(const std::string& mode,
                                   const std::string& params_path,
                                   const std::string& scores_dir,
                                   const std::string& features) {
  if (mode == "oracle") return cfm::ScoreSource::oracle();
  if (mode == "net") {
    if (params_path.empty())
      throw std::invalid_argument("--score-mode net needs --params");
    return cfm::ScoreSource::net(cfm::errnet::load_params(params_path),
                                 parse_feature_mode(features));
  }
  if (mode == "external") {
    if (scores_dir.empty())
      throw std::invalid_argument("--score-mode external needs --scores-dir");
    return cfm::ScoreSource::external(scores_dir);
  }
  throw std::invalid_argument("unknown score mode '" + mode + "'");
}

cfm::TrialConfig::SplitUnit parse_split_unit(const std::string& s) {
  if (s == "video") return cfm::TrialConfig::SplitUnit::video;
  if (s == "image") return cfm::TrialConfig::SplitUnit::image;
  throw std::invalid_argument("unknown split unit '" + s + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  cfm::atomic_write(path, [&](std::ostream& os) { os << text << "\n"; });
}

void write_loss_csv(const fs::path& path, const std::vector<double>& losses) {
  cfm::atomic_write(path, [&](std::ostream& os) {
    os << "# schema: cfm.trainloss.v1\n";
    os << "epoch,mean_loss\n";
    for (std::size_t e = 0; e < losses.size(); ++e)
      os << e << ',' << cfm::format_double(losses[e]) << '\n';
  });
}

// ---- subcommand implementations ----

struct SynthArgs {
  std::string config, out_dir;
  std::uint64_t seed = 0;
  int n_videos = 10, frames = 5, height = 128, width = 128;
  int ellipses = 6, speculars = 4, translation = 3, train_videos = 0;
  double vessel_density = 0.5, texture = 0.04;
};

void run_synth(const SynthArgs& a) {
  cfm::SceneConfig cfg;
  cfg.seed = a.seed;
  cfg.height = a.height;
  cfg.width = a.width;
  cfg.n_ellipses = a.ellipses;
  cfg.vessel_density = a.vessel_density;
  cfg.specular_count = a.speculars;
  cfg.texture_amplitude = a.texture;
  cfg.frames_per_video = a.frames;
  cfg.translation_px = a.translation;
  cfm::DatasetManifest m = cfm::synth_hr(cfg, a.n_videos, a.out_dir);
  if (a.train_videos > 0) cfm::assign_train_split(m, a.train_videos);
  cfm::write_manifest(m, fs::path(a.out_dir) / "manifest.jsonl");
  std::cerr << "[cfm synth] wrote " << a.n_videos << " videos x " << a.frames
            << " frames to " << a.out_dir << "\n";
}

struct DegradeArgs {
  std::string config, manifest, in, out;
  std::uint64_t seed = 0;
  int scale = 4;
  double noise_sigma = 0.0;
};

void run_degrade(const DegradeArgs& a) {
  if (!a.in.empty()) {
    const cfm::Image hr = load_image_any(a.in);
    const cfm::Image lr = cfm::degrade(hr, {a.scale}, a.noise_sigma, a.seed);
    cfm::write_image(lr, a.out);
    return;
  }
  cfm::DatasetManifest m = cfm::read_manifest(a.manifest);
  cfm::degrade_dataset(m, {a.scale}, a.noise_sigma, a.seed);
  cfm::write_manifest(m, a.manifest);
}

struct SrArgs {
  std::string config, manifest, in, out, mode = "sharpen";
  int scale = 4;
};

void run_sr(const SrArgs& a) {
  cfm::SrMode mode;
  if (a.mode == "plain") mode = cfm::SrMode::plain;
  else if (a.mode == "sharpen") mode = cfm::SrMode::sharpen;
  else throw std::invalid_argument("unknown sr mode '" + a.mode + "'");
  if (!a.in.empty()) {
    const cfm::Image lr = load_image_any(a.in);
    cfm::write_image(cfm::sr_standin(lr, {a.scale}, mode), a.out);
    return;
  }
  cfm::DatasetManifest m = cfm::read_manifest(a.manifest);
  cfm::sr_dataset(m, mode);
  cfm::write_manifest(m, a.manifest);
}

struct ErrmapArgs {
  std::string config, pred, ref, se_out, psnr_out, mask_out;
  double tau_fail = 22.0, cap_db = cfm::kPsnrCapDb;
  int window = 1;
};

void run_errmap(const ErrmapArgs& a) {
  if (a.se_out.empty() && a.psnr_out.empty() && a.mask_out.empty())
    throw std::invalid_argument(
        "errmap: need at least one of --se-out/--psnr-out/--mask-out");
  const cfm::Image pred = load_image_any(a.pred);
  const cfm::Image ref = load_image_any(a.ref);
  if (!a.se_out.empty())
    cfm::write_emap(cfm::squared_error_map(pred, ref), a.se_out);
  if (!a.psnr_out.empty() || !a.mask_out.empty()) {
    const cfm::ScalarMap psnr = cfm::psnr_map(pred, ref, a.cap_db, a.window);
    if (!a.psnr_out.empty()) cfm::write_emap(psnr, a.psnr_out);
    if (!a.mask_out.empty())
      cfm::write_emap(cfm::failure_mask(psnr, {a.tau_fail}), a.mask_out);
  }
}

struct TrainArgs {
  std::string config, manifest, out, features = "handcrafted", loss_out;
  std::uint64_t seed = 0;
  int epochs = 30, blocks = 2, width = 64, batch_size = 1, threads = 2;
  int train_videos = 0;
  double lr = 1e-3;
  bool bn_before_relu = false;
};

void run_train(const TrainArgs& a) {
  cfm::DatasetManifest m = cfm::read_manifest(a.manifest);
  if (a.train_videos > 0) cfm::assign_train_split(m, a.train_videos);
  cfm::errnet::TrainSettings s;
  s.n_blocks = a.blocks;
  s.width = a.width;
  s.feature_mode = parse_feature_mode(a.features);
  s.config.epochs = a.epochs;
  s.config.batch_size = a.batch_size;
  s.config.base_lr = a.lr;
  s.config.seed = a.seed;
  s.threads = a.threads;
  s.flags = a.bn_before_relu ? cfm::errnet::kFlagBnBeforeRelu : 0u;
  const cfm::errnet::TrainResult r = cfm::errnet::train(m, s);
  cfm::errnet::save_params(r.params, a.out);
  if (!a.loss_out.empty()) write_loss_csv(a.loss_out, r.epoch_loss);
  std::cerr << "[cfm train] epochs " << r.epoch_loss.size() << ", first "
            << cfm::format_double(r.epoch_loss.front(), 6) << ", last "
            << cfm::format_double(r.epoch_loss.back(), 6) << ", params "
            << cfm::errnet::param_count(r.params) << "\n";
}

struct PredictArgs {
  std::string config, params, manifest, lr, out, out_dir;
  std::string features = "handcrafted";
  int threads = 2;
};

void run_predict(const PredictArgs& a) {
  cfm::errnet::ErrNetParams params = cfm::errnet::load_params(a.params);
  const cfm::FeatureMode fm = parse_feature_mode(a.features);
  if (!a.lr.empty()) {
    const cfm::Image lr = load_image_any(a.lr);
    const cfm::ScalarMap scores = cfm::errnet::predict_scores(
        params, cfm::extract_features(lr, fm), a.threads);
    cfm::write_emap(scores, a.out);
    return;
  }
  const cfm::DatasetManifest m = cfm::read_manifest(a.manifest);
  const fs::path out_dir = a.out_dir;
  fs::create_directories(out_dir);
  for (const cfm::VideoRecord& v : m.videos)
    for (std::size_t f = 0; f < v.frames.size(); ++f) {
      const cfm::FrameRecord& fr = v.frames[f];
      if (fr.lr.empty())
        throw cfm::format_error("predict: frame lacks lr (degrade first)");
      const cfm::Image lr = cfm::read_image(m.resolve(fr.lr));
      cfm::FeatureMap feat;
      if (fr.feat) {
        const cfm::EmapTensor t = cfm::read_emap(m.resolve(*fr.feat));
        feat.height = t.height;
        feat.width = t.width;
        feat.channels = t.channels;
        feat.data = t.data;
      } else {
        feat = cfm::extract_features(lr, fm);
      }
      char name[64];
      std::snprintf(name, sizeof(name), "%s_f%02zu.emap", v.video_id.c_str(),
                    f);
      cfm::write_emap(cfm::errnet::predict_scores(params, feat, a.threads),
                      out_dir / name);
    }
}

struct CalibrateArgs {
  std::string config, scores, masks, psnr, out;
  double alpha = 0.1, tau_fail = 22.0;
};

void run_calibrate(const CalibrateArgs& a) {
  if (a.masks.empty() == a.psnr.empty())
    throw std::invalid_argument(
        "calibrate: need exactly one of --masks or --psnr");
  const auto score_paths = cfm::read_path_list(a.scores);
  const auto label_paths =
      cfm::read_path_list(a.masks.empty() ? a.psnr : a.masks);
  if (score_paths.size() != label_paths.size())
    throw cfm::format_error("calibrate: list lengths differ");
  if (score_paths.empty())
    throw cfm::format_error("calibrate: empty score list");

  cfm::CalibrationSet cal;
  cal.tau_fail = {a.tau_fail};
  for (std::size_t i = 0; i < score_paths.size(); ++i) {
    cfm::CalibrationItem item;
    item.scores = cfm::scalar_map_from_emap(cfm::read_emap(score_paths[i]),
                                            cfm::MapUnit::squared_intensity);
    if (!a.masks.empty()) {
      item.oracle = cfm::mask_from_emap(cfm::read_emap(label_paths[i]));
    } else {
      const cfm::ScalarMap psnr = cfm::scalar_map_from_emap(
          cfm::read_emap(label_paths[i]), cfm::MapUnit::decibels);
      item.oracle = cfm::failure_mask(psnr, cal.tau_fail);
    }
    if (item.oracle.height != item.scores.height ||
        item.oracle.width != item.scores.width)
      throw cfm::format_error("calibrate: score/mask dims differ at item " +
                              std::to_string(i));
    cal.items.push_back(std::move(item));
  }
  const cfm::CalibrationResult result = cfm::calibrate(cal, a.alpha);
  write_text(a.out, result.to_json());
  std::cerr << "[cfm calibrate] " << result.to_json() << "\n";
}

struct MaskArgs {
  std::string config, scores, result, out;
  double tau_tilde = 0.0;
  bool tau_given = false;
};

void run_mask(const MaskArgs& a) {
  const cfm::ScalarMap scores = cfm::scalar_map_from_emap(
      cfm::read_emap(a.scores), cfm::MapUnit::squared_intensity);
  cfm::BinaryMask mask;
  if (a.tau_given) {
    mask = cfm::apply_mask(scores, a.tau_tilde);
  } else {
    if (a.result.empty())
      throw std::invalid_argument("mask: need --result or --tau-tilde");
    const auto bytes = cfm::read_file_bytes(a.result);
    const cfm::CalibrationResult r = cfm::CalibrationResult::from_json_string(
        std::string(bytes.begin(), bytes.end()));
    mask = cfm::apply_mask(scores, r);
  }
  cfm::write_emap(mask, a.out);
}

struct EvalArgs {
  std::string config, manifest, score_mode = "oracle", params, scores_dir;
  std::string features = "handcrafted", out;
  double tau_fail = 22.0;
  int threads = 2;
  bool per_image = false;
};

void run_eval(const EvalArgs& a) {
  const cfm::DatasetManifest m = cfm::read_manifest(a.manifest);
  const cfm::ScoreSource source =
      make_score_source(a.score_mode, a.params, a.scores_dir, a.features);
  const cfm::ScoreMetrics metrics =
      cfm::score_metrics(m, source, a.tau_fail, a.threads, a.per_image);
  json j;
  j["auroc"] = metrics.auroc;
  j["fpr95"] = metrics.fpr95;
  j["n_pos"] = metrics.n_pos;
  j["n_neg"] = metrics.n_neg;
  j["tau_fail_db"] = a.tau_fail;
  j["pooled"] = !a.per_image;
  if (a.out.empty())
    std::cout << j.dump(2) << "\n";
  else
    write_text(a.out, j.dump(2));
}

struct TrialsArgs {
  std::string config, manifest, score_mode = "oracle", params, scores_dir;
  std::string features = "handcrafted", split_unit = "video", out_dir;
  std::uint64_t seed = 0;
  int n_trials = 100, threads = 2;
  double cal_fraction = 0.7;
  std::vector<double> alphas = {0.10, 0.05};
  std::vector<double> tau_fails = {22.0, 24.0, 26.0};
};

void run_trials_cmd(const TrialsArgs& a) {
  const cfm::DatasetManifest m = cfm::read_manifest(a.manifest);
  const cfm::ScoreSource source =
      make_score_source(a.score_mode, a.params, a.scores_dir, a.features);
  cfm::TrialConfig cfg;
  cfg.n_trials = a.n_trials;
  cfg.cal_fraction = a.cal_fraction;
  cfg.split_unit = parse_split_unit(a.split_unit);
  cfg.seed = a.seed;
  cfg.alphas = a.alphas;
  cfg.tau_fails_db = a.tau_fails;
  cfg.threads = a.threads;
  const cfm::TrialReport report = cfm::run_trials(m, source, cfg);
  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  report.write_json(dir / "trials.json");
  report.write_csv(dir / "trials.csv");
  for (const cfm::TrialCell& cell : report.cells)
    std::cerr << "[cfm trials] tau_fail=" << cell.tau_fail_db
              << " alpha=" << cell.alpha
              << " mean_fnr=" << cfm::format_double(cell.mean_fnr, 6)
              << " mean_mask_pct=" << cfm::format_double(cell.mean_mask_pct, 6)
              << " degenerate=" << cell.n_degenerate << "\n";
}

struct CurveArgs {
  std::string config, manifest, score_mode = "oracle", params, scores_dir;
  std::string features = "handcrafted", split_unit = "video", out;
  std::uint64_t seed = 0;
  int n_trials = 100, threads = 2;
  double cal_fraction = 0.7, tau_fail = 22.0;
  std::vector<double> alphas = {0.001, 0.005, 0.01, 0.025, 0.05, 0.10};
  std::vector<double> baseline_levels = {13, 14, 15, 16, 17, 18, 19,
                                         20, 21, 22, 23, 24, 25, 26};
};

void run_curve(const CurveArgs& a) {
  const cfm::DatasetManifest m = cfm::read_manifest(a.manifest);
  const cfm::ScoreSource source =
      make_score_source(a.score_mode, a.params, a.scores_dir, a.features);
  cfm::TrialConfig cfg;
  cfg.n_trials = a.n_trials;
  cfg.cal_fraction = a.cal_fraction;
  cfg.split_unit = parse_split_unit(a.split_unit);
  cfg.seed = a.seed;
  cfg.threads = a.threads;
  const cfm::CurveReport report = cfm::risk_coverage_curve(
      m, source, a.tau_fail, a.alphas, a.baseline_levels, cfg);
  report.write_csv(a.out);
}

struct AblateArgs {
  std::string config, manifest, axis = "width", features = "handcrafted", out;
  std::uint64_t seed = 0;
  int epochs = 30, blocks = 2, width = 64, threads = 2;
  double lr = 1e-3, tau_fail = 22.0;
  std::vector<int> values;
};

void run_ablate(const AblateArgs& a) {
  if (a.values.empty()) throw std::invalid_argument("ablate: --values empty");
  const cfm::DatasetManifest m = cfm::read_manifest(a.manifest);
  cfm::errnet::TrainSettings base;
  base.n_blocks = a.blocks;
  base.width = a.width;
  base.feature_mode = parse_feature_mode(a.features);
  base.config.epochs = a.epochs;
  base.config.base_lr = a.lr;
  base.config.seed = a.seed;
  base.threads = a.threads;
  cfm::AblationAxis axis;
  if (a.axis == "n_blocks") axis = cfm::AblationAxis::n_blocks;
  else if (a.axis == "width") axis = cfm::AblationAxis::width;
  else if (a.axis == "n_train_videos") axis = cfm::AblationAxis::n_train_videos;
  else throw std::invalid_argument("unknown axis '" + a.axis + "'");
  const cfm::AblationReport report =
      cfm::ablation_sweep(m, axis, a.values, base, a.tau_fail);
  report.write_csv(a.out);
}

struct DemoArgs {
  std::string config, out_dir;
  std::uint64_t seed = 0;
  int hr_size = 128, n_videos = 10, frames = 5, train_videos = 4, scale = 4;
  int epochs = 30, blocks = 2, width = 64, n_trials = 100, threads = 2;
  double noise_sigma = 0.01;
};

void run_demo(const DemoArgs& a) {
  const fs::path out = a.out_dir;
  fs::create_directories(out);

  std::cerr << "[cfm demo] synthesizing dataset\n";
  cfm::SceneConfig cfg;
  cfg.seed = a.seed;
  cfg.height = a.hr_size;
  cfg.width = a.hr_size;
  cfg.frames_per_video = a.frames;
  cfm::DatasetManifest m = cfm::make_dataset(cfg, a.n_videos, out / "dataset",
                                             {a.scale}, a.noise_sigma);
  cfm::assign_train_split(m, a.train_videos);
  cfm::write_manifest(m, out / "dataset" / "manifest.jsonl");

  std::cerr << "[cfm demo] training error network\n";
  cfm::errnet::TrainSettings ts;
  ts.n_blocks = a.blocks;
  ts.width = a.width;
  ts.feature_mode = cfm::FeatureMode::handcrafted;
  ts.config.epochs = a.epochs;
  ts.config.seed = cfm::derive_seed(a.seed, 1);
  ts.threads = a.threads;
  const cfm::errnet::TrainResult tr = cfm::errnet::train(m, ts);
  cfm::errnet::save_params(tr.params, out / "errnet.enet");
  write_loss_csv(out / "train_loss.csv", tr.epoch_loss);

  cfm::TrialConfig tc;
  tc.n_trials = a.n_trials;
  tc.seed = cfm::derive_seed(a.seed, 2);
  tc.threads = a.threads;

  std::cerr << "[cfm demo] trials (net scores)\n";
  const cfm::ScoreSource net_source =
      cfm::ScoreSource::net(tr.params, cfm::FeatureMode::handcrafted);
  const cfm::TrialReport net_report = cfm::run_trials(m, net_source, tc);
  net_report.write_json(out / "trials_net.json");
  net_report.write_csv(out / "trials_net.csv");

  std::cerr << "[cfm demo] trials (oracle scores)\n";
  const cfm::TrialReport oracle_report =
      cfm::run_trials(m, cfm::ScoreSource::oracle(), tc);
  oracle_report.write_json(out / "trials_oracle.json");
  oracle_report.write_csv(out / "trials_oracle.csv");

  std::cerr << "[cfm demo] risk-coverage curve\n";
  cfm::TrialConfig cc = tc;
  cc.seed = cfm::derive_seed(a.seed, 3);
  const cfm::CurveReport curve = cfm::risk_coverage_curve(
      m, net_source, 22.0, {0.001, 0.005, 0.01, 0.025, 0.05, 0.10},
      {13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26}, cc);
  curve.write_csv(out / "curve_net.csv");

  std::cerr << "[cfm demo] score metrics\n";
  const cfm::ScoreMetrics metrics =
      cfm::score_metrics(m, net_source, 22.0, a.threads);
  json mj;
  mj["auroc"] = metrics.auroc;
  mj["fpr95"] = metrics.fpr95;
  mj["n_pos"] = metrics.n_pos;
  mj["n_neg"] = metrics.n_neg;
  mj["tau_fail_db"] = 22.0;
  write_text(out / "metrics.json", mj.dump(2));
  std::cerr << "[cfm demo] done: auroc=" << cfm::format_double(metrics.auroc, 6)
            << " fpr95=" << cfm::format_double(metrics.fpr95, 6) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conformal failure masks for super-resolution"};
  app.require_subcommand(1);

  SynthArgs sy;
  CLI::App* synth = app.add_subcommand("synth", "generate HR video frames");
  OptionRegistry synth_reg(synth);
  synth_reg.add_string("config", sy.config, "JSON config file");
  synth_reg.add_u64("seed", sy.seed, "master seed (required)");
  synth_reg.add_string("out-dir", sy.out_dir, "output directory (required)");
  synth_reg.add_int("n-videos", sy.n_videos, "number of videos");
  synth_reg.add_int("frames", sy.frames, "frames per video");
  synth_reg.add_int("height", sy.height, "HR height");
  synth_reg.add_int("width", sy.width, "HR width");
  synth_reg.add_int("ellipses", sy.ellipses, "tissue bump count");
  synth_reg.add_double("vessel-density", sy.vessel_density,
                       "vessel stroke budget fraction");
  synth_reg.add_int("speculars", sy.speculars, "specular highlight count");
  synth_reg.add_double("texture", sy.texture, "fine texture amplitude");
  synth_reg.add_int("translation", sy.translation, "px drift per frame");
  synth_reg.add_int("train-videos", sy.train_videos,
                    "tag the first K videos as the train split");

  DegradeArgs dg;
  CLI::App* degrade = app.add_subcommand("degrade", "HR -> LR degradation");
  OptionRegistry degrade_reg(degrade);
  degrade_reg.add_string("config", dg.config, "JSON config file");
  degrade_reg.add_string("manifest", dg.manifest, "dataset manifest to update");
  degrade_reg.add_string("in", dg.in, "single HR image");
  degrade_reg.add_string("out", dg.out, "single LR output path");
  degrade_reg.add_u64("seed", dg.seed, "noise seed (required)");
  degrade_reg.add_int("scale", dg.scale, "downsampling factor");
  degrade_reg.add_double("noise-sigma", dg.noise_sigma, "gaussian noise std");

  SrArgs sr;
  CLI::App* srcmd = app.add_subcommand("sr", "stand-in SR reconstruction");
  OptionRegistry sr_reg(srcmd);
  sr_reg.add_string("config", sr.config, "JSON config file");
  sr_reg.add_string("manifest", sr.manifest, "dataset manifest to update");
  sr_reg.add_string("in", sr.in, "single LR image");
  sr_reg.add_string("out", sr.out, "single SR output path");
  sr_reg.add_string("mode", sr.mode, "plain | sharpen");
  sr_reg.add_int("scale", sr.scale, "upsampling factor (single-image mode)");

  ErrmapArgs em;
  CLI::App* errmap = app.add_subcommand("errmap", "error maps and oracle mask");
  OptionRegistry errmap_reg(errmap);
  errmap_reg.add_string("config", em.config, "JSON config file");
  errmap_reg.add_string("pred", em.pred, "reconstruction (ppm/pgm/emap)");
  errmap_reg.add_string("ref", em.ref, "reference HR image");
  errmap_reg.add_string("se-out", em.se_out, "squared-error EMAP out");
  errmap_reg.add_string("psnr-out", em.psnr_out, "PSNR EMAP out");
  errmap_reg.add_string("mask-out", em.mask_out, "oracle failure mask out");
  errmap_reg.add_double("tau-fail", em.tau_fail, "failure level (dB)");
  errmap_reg.add_double("cap-db", em.cap_db, "PSNR cap (dB)");
  errmap_reg.add_int("window", em.window, "odd box window (1 = pointwise)");

  TrainArgs tr;
  CLI::App* train = app.add_subcommand("train", "train the error network");
  OptionRegistry train_reg(train);
  train_reg.add_string("config", tr.config, "JSON config file");
  train_reg.add_string("manifest", tr.manifest, "dataset manifest");
  train_reg.add_string("out", tr.out, "params output (.enet)");
  train_reg.add_u64("seed", tr.seed, "train seed (required)");
  train_reg.add_int("epochs", tr.epochs, "epochs");
  train_reg.add_int("blocks", tr.blocks, "conv blocks");
  train_reg.add_int("width", tr.width, "features per block");
  train_reg.add_int("batch-size", tr.batch_size, "videos per step");
  train_reg.add_double("lr", tr.lr, "base learning rate");
  train_reg.add_string("features", tr.features, "identity | handcrafted");
  train_reg.add_string("loss-out", tr.loss_out, "epoch loss CSV out");
  train_reg.add_int("threads", tr.threads, "worker threads");
  train_reg.add_int("train-videos", tr.train_videos,
                    "tag the first K videos as train before training");
  train_reg.add_flag("bn-before-relu", tr.bn_before_relu,
                     "use conv->BN->ReLU block order");

  PredictArgs pr;
  CLI::App* predict = app.add_subcommand("predict", "predicted error maps");
  OptionRegistry predict_reg(predict);
  predict_reg.add_string("config", pr.config, "JSON config file");
  predict_reg.add_string("params", pr.params, "trained .enet params");
  predict_reg.add_string("manifest", pr.manifest, "score every frame");
  predict_reg.add_string("lr", pr.lr, "single LR image");
  predict_reg.add_string("out", pr.out, "single score EMAP out");
  predict_reg.add_string("out-dir", pr.out_dir, "per-frame score directory");
  predict_reg.add_string("features", pr.features, "identity | handcrafted");
  predict_reg.add_int("threads", pr.threads, "worker threads");

  CalibrateArgs ca;
  CLI::App* calibrate =
      app.add_subcommand("calibrate", "conformal threshold selection");
  OptionRegistry cal_reg(calibrate);
  cal_reg.add_string("config", ca.config, "JSON config file");
  cal_reg.add_string("scores", ca.scores, "emap-list of predicted error maps");
  cal_reg.add_string("masks", ca.masks, "emap-list of oracle 0/1 masks");
  cal_reg.add_string("psnr", ca.psnr, "emap-list of PSNR maps (dB)");
  cal_reg.add_double("alpha", ca.alpha, "FNR miscoverage level");
  cal_reg.add_double("tau-fail", ca.tau_fail, "failure level (dB)");
  cal_reg.add_string("out", ca.out, "calibration result JSON out");

  MaskArgs mk;
  CLI::App* mask = app.add_subcommand("mask", "apply the operative threshold");
  OptionRegistry mask_reg(mask);
  mask_reg.add_string("config", mk.config, "JSON config file");
  mask_reg.add_string("scores", mk.scores, "score EMAP");
  mask_reg.add_string("result", mk.result, "calibration result JSON");
  CLI::Option* tau_opt =
      mask_reg.add_double("tau-tilde", mk.tau_tilde, "literal threshold");
  mask_reg.add_string("out", mk.out, "mask EMAP out");

  EvalArgs ev;
  CLI::App* evalcmd = app.add_subcommand("eval", "AUROC / FPR95 of scores");
  OptionRegistry eval_reg(evalcmd);
  eval_reg.add_string("config", ev.config, "JSON config file");
  eval_reg.add_string("manifest", ev.manifest, "dataset manifest");
  eval_reg.add_string("score-mode", ev.score_mode, "oracle | net | external");
  eval_reg.add_string("params", ev.params, ".enet for net mode");
  eval_reg.add_string("scores-dir", ev.scores_dir, "EMAPs for external mode");
  eval_reg.add_string("features", ev.features, "identity | handcrafted");
  eval_reg.add_double("tau-fail", ev.tau_fail, "failure level (dB)");
  eval_reg.add_int("threads", ev.threads, "worker threads");
  eval_reg.add_flag("per-image", ev.per_image, "mean of per-frame metrics");
  eval_reg.add_string("out", ev.out, "metrics JSON out (default stdout)");

  TrialsArgs ta;
  CLI::App* trials = app.add_subcommand("trials", "repeated random splits");
  OptionRegistry trials_reg(trials);
  trials_reg.add_string("config", ta.config, "JSON config file");
  trials_reg.add_string("manifest", ta.manifest, "dataset manifest");
  trials_reg.add_string("score-mode", ta.score_mode, "oracle | net | external");
  trials_reg.add_string("params", ta.params, ".enet for net mode");
  trials_reg.add_string("scores-dir", ta.scores_dir, "EMAPs for external mode");
  trials_reg.add_string("features", ta.features, "identity | handcrafted");
  trials_reg.add_string("split-unit", ta.split_unit, "video | image");
  trials_reg.add_u64("seed", ta.seed, "trial seed (required)");
  trials_reg.add_int("n-trials", ta.n_trials, "number of random splits");
  trials_reg.add_double("cal-fraction", ta.cal_fraction,
                        "calibration fraction");
  trials_reg.add_double_list("alphas", ta.alphas, "alpha list");
  trials_reg.add_double_list("tau-fails", ta.tau_fails, "failure levels (dB)");
  trials_reg.add_int("threads", ta.threads, "worker threads");
  trials_reg.add_string("out-dir", ta.out_dir, "report directory (required)");

  CurveArgs cu;
  CLI::App* curve = app.add_subcommand("curve", "risk-coverage curve CSV");
  OptionRegistry curve_reg(curve);
  curve_reg.add_string("config", cu.config, "JSON config file");
  curve_reg.add_string("manifest", cu.manifest, "dataset manifest");
  curve_reg.add_string("score-mode", cu.score_mode, "oracle | net | external");
  curve_reg.add_string("params", cu.params, ".enet for net mode");
  curve_reg.add_string("scores-dir", cu.scores_dir, "EMAPs for external mode");
  curve_reg.add_string("features", cu.features, "identity | handcrafted");
  curve_reg.add_string("split-unit", cu.split_unit, "video | image");
  curve_reg.add_u64("seed", cu.seed, "trial seed (required)");
  curve_reg.add_int("n-trials", cu.n_trials, "number of random splits");
  curve_reg.add_double("cal-fraction", cu.cal_fraction,
                       "calibration fraction");
  curve_reg.add_double("tau-fail", cu.tau_fail, "target failure level (dB)");
  curve_reg.add_double_list("alphas", cu.alphas, "cfm alpha sweep");
  curve_reg.add_double_list("baseline-levels", cu.baseline_levels,
                            "alpha->0 baseline surrogate levels (dB)");
  curve_reg.add_int("threads", cu.threads, "worker threads");
  curve_reg.add_string("out", cu.out, "curve CSV out (required)");

  AblateArgs ab;
  CLI::App* ablate = app.add_subcommand("ablate", "architecture/data sweeps");
  OptionRegistry ablate_reg(ablate);
  ablate_reg.add_string("config", ab.config, "JSON config file");
  ablate_reg.add_string("manifest", ab.manifest, "dataset manifest");
  ablate_reg.add_string("axis", ab.axis, "n_blocks | width | n_train_videos");
  ablate_reg.add_int_list("values", ab.values, "axis values");
  ablate_reg.add_u64("seed", ab.seed, "train seed (required)");
  ablate_reg.add_int("epochs", ab.epochs, "epochs per run");
  ablate_reg.add_int("blocks", ab.blocks, "base conv blocks");
  ablate_reg.add_int("width", ab.width, "base features per block");
  ablate_reg.add_double("lr", ab.lr, "base learning rate");
  ablate_reg.add_string("features", ab.features, "identity | handcrafted");
  ablate_reg.add_double("tau-fail", ab.tau_fail, "failure level (dB)");
  ablate_reg.add_int("threads", ab.threads, "worker threads");
  ablate_reg.add_string("out", ab.out, "ablation CSV out (required)");

  DemoArgs de;
  CLI::App* demo =
      app.add_subcommand("demo", "full pipeline on synthetic data");
  OptionRegistry demo_reg(demo);
  demo_reg.add_string("config", de.config, "JSON config file");
  demo_reg.add_u64("seed", de.seed, "master seed (required)");
  demo_reg.add_string("out-dir", de.out_dir, "report directory (required)");
  demo_reg.add_int("hr-size", de.hr_size, "HR frame size");
  demo_reg.add_int("n-videos", de.n_videos, "videos");
  demo_reg.add_int("frames", de.frames, "frames per video");
  demo_reg.add_int("train-videos", de.train_videos, "train-split videos");
  demo_reg.add_int("scale", de.scale, "SR factor");
  demo_reg.add_double("noise-sigma", de.noise_sigma, "LR noise std");
  demo_reg.add_int("epochs", de.epochs, "training epochs");
  demo_reg.add_int("blocks", de.blocks, "conv blocks");
  demo_reg.add_int("width", de.width, "features per block");
  demo_reg.add_int("n-trials", de.n_trials, "random splits");
  demo_reg.add_int("threads", de.threads, "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  struct Dispatch {
    CLI::App* sub;
    OptionRegistry* reg;
    std::string* config_path;
    std::vector<std::string> required;
    std::function<void()> run;
  };
  const std::vector<Dispatch> table = {
      {synth, &synth_reg, &sy.config, {"seed", "out-dir"},
       [&] { run_synth(sy); }},
      {degrade, &degrade_reg, &dg.config, {"seed"},
       [&] {
         if (dg.manifest.empty() && (dg.in.empty() || dg.out.empty()))
           throw std::invalid_argument(
               "degrade: need --manifest or --in/--out");
         run_degrade(dg);
       }},
      {srcmd, &sr_reg, &sr.config, {},
       [&] {
         if (sr.manifest.empty() && (sr.in.empty() || sr.out.empty()))
           throw std::invalid_argument("sr: need --manifest or --in/--out");
         run_sr(sr);
       }},
      {errmap, &errmap_reg, &em.config, {"pred", "ref"},
       [&] { run_errmap(em); }},
      {train, &train_reg, &tr.config, {"seed", "manifest", "out"},
       [&] { run_train(tr); }},
      {predict, &predict_reg, &pr.config, {"params"},
       [&] {
         if (pr.manifest.empty() && pr.lr.empty())
           throw std::invalid_argument("predict: need --manifest or --lr");
         if (!pr.manifest.empty() && pr.out_dir.empty())
           throw std::invalid_argument(
               "predict: manifest mode needs --out-dir");
         if (!pr.lr.empty() && pr.out.empty())
           throw std::invalid_argument("predict: single mode needs --out");
         run_predict(pr);
       }},
      {calibrate, &cal_reg, &ca.config, {"scores", "alpha", "tau-fail", "out"},
       [&] { run_calibrate(ca); }},
      {mask, &mask_reg, &mk.config, {"scores", "out"},
       [&] {
         mk.tau_given = tau_opt->count() > 0;
         run_mask(mk);
       }},
      {evalcmd, &eval_reg, &ev.config, {"manifest"}, [&] { run_eval(ev); }},
      {trials, &trials_reg, &ta.config, {"seed", "manifest", "out-dir"},
       [&] { run_trials_cmd(ta); }},
      {curve, &curve_reg, &cu.config, {"seed", "manifest", "out"},
       [&] { run_curve(cu); }},
      {ablate, &ablate_reg, &ab.config, {"seed", "manifest", "values", "out"},
       [&] { run_ablate(ab); }},
      {demo, &demo_reg, &de.config, {"seed", "out-dir"},
       [&] { run_demo(de); }},
  };

  try {
    for (const Dispatch& d : table) {
      if (!d.sub->parsed()) continue;
      json config = json::object();
      if (!d.config_path->empty())
        config = cfmtool::load_config_file(*d.config_path);
      d.reg->apply_config(config);
      d.reg->require(d.required, config);
      log_config(d.sub->get_name(), d.reg->resolved());
      d.run();
      return kExitOk;
    }
    throw std::invalid_argument("no subcommand given");
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const cfm::numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const cfm::format_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const cfm::io_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
