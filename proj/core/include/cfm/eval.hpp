#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cfm/conformal.hpp"
#include "cfm/errnet.hpp"
#include "cfm/errormaps.hpp"
#include "cfm/synth.hpp"

namespace cfm {

// ---- ranking metrics (positives = failure pixels) ----

// Mann-Whitney AUROC with tie correction: P(s_pos > s_neg) + 0.5 P(tie).
// Throws format_error when only one class is present.
double auroc(const std::vector<float>& scores,
             const std::vector<std::uint8_t>& labels);

// Histogram fast path (default 2^16 bins); within 1e-3 of exact AUROC.
double auroc_hist(const std::vector<float>& scores,
                  const std::vector<std::uint8_t>& labels, int bins = 65536);

// FPR at the largest threshold t (mask = score >= t) with TPR >= tpr_min.
// No interpolation.
double fpr_at_tpr(const std::vector<float>& scores,
                  const std::vector<std::uint8_t>& labels,
                  double tpr_min = 0.95);

inline double fpr95(const std::vector<float>& scores,
                    const std::vector<std::uint8_t>& labels) {
  return fpr_at_tpr(scores, labels, 0.95);
}

// Percent of pixels flagged.
double mask_size_percent(const BinaryMask& mask);

// ---- score sources ----

struct ScoreSource {
  enum class Kind : std::uint8_t { oracle, net, external };
  Kind kind = Kind::oracle;
  errnet::ErrNetParams params;              // kind == net
  FeatureMode feature_mode = FeatureMode::handcrafted;
  std::filesystem::path external_dir;       // kind == external:
                                            // <dir>/<video_id>_f<NN>.emap

  static ScoreSource oracle() { return {}; }
  static ScoreSource net(errnet::ErrNetParams p, FeatureMode fm);
  static ScoreSource external(std::filesystem::path dir);
};

// ---- repeated random-split protocol ----

struct TrialConfig {
  int n_trials = 100;
  double cal_fraction = 0.7;
  enum class SplitUnit : std::uint8_t { video, image } split_unit =
      SplitUnit::video;
  std::uint64_t seed = 0;
  std::vector<double> alphas = {0.10, 0.05};
  std::vector<double> tau_fails_db = {22.0, 24.0, 26.0};
  int threads = 1;
};

struct TrialRow {
  int trial = 0;
  bool degenerate = false;       // no test positives at this tau_fail
  bool unconstrained = false;
  double tau_tilde = 0.0;
  std::size_t n_cal_pos = 0;
  std::size_t n_test_pos = 0;
  double fnr = 0.0;              // valid when !degenerate
  double mask_pct = 0.0;
  std::optional<double> accepted_psnr_db;  // nullopt: nothing accepted
  double overall_psnr_db = 0.0;
};

struct TrialCell {
  double alpha = 0.0;
  double tau_fail_db = 0.0;
  std::vector<TrialRow> rows;
  int n_valid = 0;
  int n_degenerate = 0;
  double mean_fnr = 0.0, std_fnr = 0.0;
  double mean_mask_pct = 0.0, std_mask_pct = 0.0;
  double mean_accepted_psnr_db = 0.0;
  double mean_overall_psnr_db = 0.0;
};

struct TrialReport {
  TrialConfig config;
  std::vector<TrialCell> cells;

  std::string to_json() const;
  void write_json(const std::filesystem::path& path) const;
  // Per-trial rows; schema cfm.trials.v1.
  void write_csv(const std::filesystem::path& path) const;
};

// Per trial: seeded split of the eval units (videos with split != "train")
// into cal/test, calibration per (alpha, tau_fail), then test FNR, mask size
// and accepted-region PSNR. Deterministic given the config; trial t draws
// from a seed derived from (seed, t), so trials parallelize without changing
// any number.
TrialReport run_trials(const DatasetManifest& manifest,
                       const ScoreSource& source, const TrialConfig& cfg);

// ---- risk-coverage curve ----

struct CurveRow {
  std::string method;   // "cfm" or "baseline"
  double parameter;     // alpha for cfm; surrogate failure level (dB) for
                        // the alpha->0 baseline family
  double mean_fnr = 0.0;
  double mean_mask_pct = 0.0;
};

struct CurveReport {
  double tau_fail_db = 22.0;
  std::vector<CurveRow> rows;
  void write_csv(const std::filesystem::path& path) const;  // cfm.curve.v1
};

// FNR at the target failure level vs mean mask size. The cfm family sweeps
// alpha; the baseline family runs alpha = 0 at surrogate failure levels.
// All rows share the same per-trial splits, so the monotone ordering is
// paired.
CurveReport risk_coverage_curve(const DatasetManifest& manifest,
                                const ScoreSource& source, double tau_fail_db,
                                const std::vector<double>& alphas,
                                const std::vector<double>& baseline_levels_db,
                                const TrialConfig& cfg);

// ---- score-quality metrics and ablations ----

struct ScoreMetrics {
  double auroc = 0.0;
  double fpr95 = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

// Pooled over every frame of the eval videos; per_image_mean averages the
// per-frame metric over frames holding both classes instead.
ScoreMetrics score_metrics(const DatasetManifest& manifest,
                           const ScoreSource& source, double tau_fail_db,
                           int threads = 1, bool per_image_mean = false);

enum class AblationAxis : std::uint8_t { n_blocks, width, n_train_videos };

struct AblationRow {
  int value = 0;
  double auroc = 0.0;
  double fpr95 = 0.0;
};

struct AblationReport {
  AblationAxis axis;
  double tau_fail_db = 22.0;
  std::vector<AblationRow> rows;
  void write_csv(const std::filesystem::path& path) const;  // cfm.ablation.v1
};

// Trains one network per axis value (fixed seed) and reports AUROC / FPR95
// against the oracle failure labels on the eval videos.
AblationReport ablation_sweep(const DatasetManifest& manifest,
                              AblationAxis axis, const std::vector<int>& values,
                              const errnet::TrainSettings& base,
                              double tau_fail_db);

}  // namespace cfm
