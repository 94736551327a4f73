#include "cfm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include <json.hpp>

#include "cfm/errors.hpp"
#include "cfm/ioutil.hpp"
#include "cfm/parallel.hpp"
#include "cfm/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cfm {

// ---- ranking metrics ----

namespace {

void count_classes(const std::vector<std::uint8_t>& labels, std::size_t& pos,
                   std::size_t& neg) {
  pos = neg = 0;
  for (const std::uint8_t l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw format_error("metric: both classes must be present");
}

}  // namespace

double auroc(const std::vector<float>& scores,
             const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size())
    throw format_error("auroc: length mismatch");
  std::size_t pos = 0, neg = 0;
  count_classes(labels, pos, neg);

  std::vector<std::pair<float, std::uint8_t>> v(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    v[i] = {scores[i], labels[i]};
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  double u = 0.0;
  double neg_below = 0.0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    std::size_t p_g = 0, n_g = 0;
    while (j < v.size() && v[j].first == v[i].first) {
      (v[j].second ? p_g : n_g)++;
      ++j;
    }
    u += static_cast<double>(p_g) * neg_below +
         0.5 * static_cast<double>(p_g) * static_cast<double>(n_g);
    neg_below += static_cast<double>(n_g);
    i = j;
  }
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double auroc_hist(const std::vector<float>& scores,
                  const std::vector<std::uint8_t>& labels, int bins) {
  if (scores.size() != labels.size())
    throw format_error("auroc_hist: length mismatch");
  if (bins < 2) throw format_error("auroc_hist: need >= 2 bins");
  std::size_t pos = 0, neg = 0;
  count_classes(labels, pos, neg);

  float lo = scores[0], hi = scores[0];
  for (const float s : scores) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  if (lo == hi) return 0.5;

  std::vector<double> pos_count(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> neg_count(static_cast<std::size_t>(bins), 0.0);
  const double scale = bins / (static_cast<double>(hi) - lo);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    int b = static_cast<int>((static_cast<double>(scores[k]) - lo) * scale);
    b = std::clamp(b, 0, bins - 1);
    (labels[k] ? pos_count[b] : neg_count[b]) += 1.0;
  }
  double u = 0.0, neg_below = 0.0;
  for (int b = 0; b < bins; ++b) {
    u += pos_count[b] * neg_below + 0.5 * pos_count[b] * neg_count[b];
    neg_below += neg_count[b];
  }
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double fpr_at_tpr(const std::vector<float>& scores,
                  const std::vector<std::uint8_t>& labels, double tpr_min) {
  if (scores.size() != labels.size())
    throw format_error("fpr_at_tpr: length mismatch");
  std::size_t pos = 0, neg = 0;
  count_classes(labels, pos, neg);

  std::vector<std::pair<float, std::uint8_t>> v(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    v[i] = {scores[i], labels[i]};
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  // Thresholds are the distinct score values, visited in decreasing order;
  // the first one reaching the target TPR is the largest such threshold.
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) {
      (v[j].second ? tp : fp)++;
      ++j;
    }
    if (static_cast<double>(tp) / static_cast<double>(pos) >= tpr_min)
      return static_cast<double>(fp) / static_cast<double>(neg);
    i = j;
  }
  return 1.0;
}

double mask_size_percent(const BinaryMask& mask) {
  if (mask.size() == 0) throw format_error("mask_size: empty mask");
  return 100.0 * static_cast<double>(mask.count_ones()) /
         static_cast<double>(mask.size());
}

// ---- score sources ----

ScoreSource ScoreSource::net(errnet::ErrNetParams p, FeatureMode fm) {
  ScoreSource s;
  s.kind = Kind::net;
  s.params = std::move(p);
  s.feature_mode = fm;
  return s;
}

ScoreSource ScoreSource::external(fs::path dir) {
  ScoreSource s;
  s.kind = Kind::external;
  s.external_dir = std::move(dir);
  return s;
}

// ---- shared frame preparation ----

namespace {

double db_from_mean_se(double mean_se, double cap_db = kPsnrCapDb) {
  if (mean_se <= 0.0) return cap_db;
  return std::min(10.0 * std::log10(1.0 / mean_se), cap_db);
}

// Per-frame pre-aggregation so each trial evaluates thresholds with binary
// searches instead of pixel loops.
struct FrameData {
  int unit = 0;  // split unit index
  std::size_t n_pixels = 0;
  std::vector<float> sorted_scores;        // ascending
  std::vector<double> se_prefix;           // SE prefix sums in score order
  std::vector<std::vector<float>> pos_scores;  // per level, ascending
};

struct PreparedData {
  std::vector<FrameData> frames;
  int n_units = 0;
};

ScalarMap frame_scores(const ScoreSource& source, const DatasetManifest& m,
                       const VideoRecord& video, std::size_t frame_idx,
                       const Image& hr, const ScalarMap& se) {
  switch (source.kind) {
    case ScoreSource::Kind::oracle: {
      return se;
    }
    case ScoreSource::Kind::net: {
      const FrameRecord& fr = video.frames[frame_idx];
      if (fr.lr.empty())
        throw format_error("trials: net scores need lr frames");
      const Image lr = read_image(m.resolve(fr.lr));
      FeatureMap feat;
      if (fr.feat) {
        const EmapTensor t = read_emap(m.resolve(*fr.feat));
        feat.height = t.height;
        feat.width = t.width;
        feat.channels = t.channels;
        feat.data = t.data;
      } else {
        feat = extract_features(lr, source.feature_mode);
      }
      errnet::ErrNetParams params = source.params;  // eval never mutates
      return errnet::predict_scores(params, feat, 1);
    }
    case ScoreSource::Kind::external: {
      char name[64];
      std::snprintf(name, sizeof(name), "%s_f%02zu.emap",
                    video.video_id.c_str(), frame_idx);
      const EmapTensor t = read_emap(source.external_dir / name);
      return scalar_map_from_emap(t, MapUnit::squared_intensity);
    }
  }
  throw format_error("trials: bad score source");
}

PreparedData prepare_frames(const DatasetManifest& manifest,
                            const ScoreSource& source,
                            const std::vector<double>& levels_db,
                            TrialConfig::SplitUnit split_unit, int threads) {
  struct Job {
    const VideoRecord* video;
    std::size_t frame_idx;
    int unit;
  };
  std::vector<Job> jobs;
  int unit = 0;
  for (const VideoRecord& video : manifest.videos) {
    if (video.split == "train") continue;
    bool any = false;
    for (std::size_t f = 0; f < video.frames.size(); ++f) {
      const int u = split_unit == TrialConfig::SplitUnit::video
                        ? unit
                        : static_cast<int>(jobs.size());
      jobs.push_back({&video, f, u});
      any = true;
    }
    if (any && split_unit == TrialConfig::SplitUnit::video) ++unit;
  }
  if (jobs.empty()) throw format_error("trials: no eval videos in manifest");

  PreparedData out;
  out.frames.resize(jobs.size());
  out.n_units = split_unit == TrialConfig::SplitUnit::video
                    ? unit
                    : static_cast<int>(jobs.size());

  parallel_for(jobs.size(), threads, [&](std::size_t ji) {
    const Job& job = jobs[ji];
    const FrameRecord& fr = job.video->frames[job.frame_idx];
    if (!fr.sr)
      throw format_error("trials: frame lacks sr reconstruction");
    const Image hr = read_image(manifest.resolve(fr.hr));
    const Image sr = read_image(manifest.resolve(*fr.sr));
    const ScalarMap se = squared_error_map(sr, hr);
    const ScalarMap psnr = psnr_map(sr, hr);
    const ScalarMap scores =
        frame_scores(source, manifest, *job.video, job.frame_idx, hr, se);
    if (scores.height != hr.height || scores.width != hr.width)
      throw format_error("trials: score map dims do not match HR frame");

    FrameData& fd = out.frames[ji];
    fd.unit = job.unit;
    fd.n_pixels = se.size();

    // Sort pixels by score once; SE prefix sums give accepted-region PSNR
    // for any threshold by binary search.
    std::vector<int> order(se.size());
    for (std::size_t i = 0; i < order.size(); ++i)
      order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (scores.data[a] != scores.data[b])
        return scores.data[a] < scores.data[b];
      return a < b;
    });
    fd.sorted_scores.resize(order.size());
    fd.se_prefix.resize(order.size() + 1);
    fd.se_prefix[0] = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      fd.sorted_scores[i] = scores.data[order[i]];
      fd.se_prefix[i + 1] =
          fd.se_prefix[i] + static_cast<double>(se.data[order[i]]);
    }

    fd.pos_scores.resize(levels_db.size());
    for (std::size_t li = 0; li < levels_db.size(); ++li) {
      const BinaryMask oracle = failure_mask(psnr, {levels_db[li]});
      std::vector<float>& ps = fd.pos_scores[li];
      for (std::size_t p = 0; p < oracle.size(); ++p)
        if (oracle.data[p]) ps.push_back(scores.data[p]);
      std::sort(ps.begin(), ps.end());
    }
  });
  return out;
}

std::size_t count_below(const std::vector<float>& sorted_asc, double pivot) {
  return static_cast<std::size_t>(
      std::lower_bound(sorted_asc.begin(), sorted_asc.end(), pivot,
                       [](float a, double b) {
                         return static_cast<double>(a) < b;
                       }) -
      sorted_asc.begin());
}

// Evaluation of one (calibration level, alpha) on one cal/test split.
TrialRow evaluate_split(const PreparedData& data,
                        const std::vector<bool>& is_cal, int trial,
                        std::size_t cal_level, std::size_t eval_level,
                        double alpha) {
  // Pool calibration positive scores.
  std::vector<double> cal_scores;
  for (const FrameData& fd : data.frames) {
    if (!is_cal[fd.unit]) continue;
    for (const float s : fd.pos_scores[cal_level]) cal_scores.push_back(s);
  }
  const CalibrationResult result =
      calibrate_scores(std::move(cal_scores), alpha, 0.0);

  TrialRow row;
  row.trial = trial;
  row.unconstrained = result.unconstrained;
  row.tau_tilde = result.unconstrained ? 0.0 : result.tau_tilde;
  row.n_cal_pos = result.n_positives;

  const double tau = result.unconstrained
                         ? std::numeric_limits<double>::infinity()
                         : result.tau_tilde;

  std::size_t fn = 0, pos = 0;
  double mask_pct_sum = 0.0;
  double acc_psnr_sum = 0.0, overall_psnr_sum = 0.0;
  std::size_t n_frames = 0, n_frames_accepted = 0;
  for (const FrameData& fd : data.frames) {
    if (is_cal[fd.unit]) continue;
    ++n_frames;
    const std::vector<float>& ps = fd.pos_scores[eval_level];
    pos += ps.size();
    fn += count_below(ps, tau);

    const std::size_t accepted = count_below(fd.sorted_scores, tau);
    mask_pct_sum += 100.0 *
                    static_cast<double>(fd.n_pixels - accepted) /
                    static_cast<double>(fd.n_pixels);
    overall_psnr_sum +=
        db_from_mean_se(fd.se_prefix[fd.n_pixels] / fd.n_pixels);
    if (accepted > 0) {
      acc_psnr_sum += db_from_mean_se(fd.se_prefix[accepted] / accepted);
      ++n_frames_accepted;
    }
  }
  row.n_test_pos = pos;
  row.degenerate = pos == 0;
  row.fnr = pos == 0 ? 0.0
                     : static_cast<double>(fn) / static_cast<double>(pos);
  row.mask_pct = mask_pct_sum / static_cast<double>(n_frames);
  row.overall_psnr_db = overall_psnr_sum / static_cast<double>(n_frames);
  if (n_frames_accepted > 0)
    row.accepted_psnr_db = acc_psnr_sum / static_cast<double>(n_frames_accepted);
  return row;
}

std::vector<bool> draw_split(int n_units, double cal_fraction,
                             std::uint64_t seed, std::uint64_t trial) {
  std::vector<int> order(static_cast<std::size_t>(n_units));
  for (int i = 0; i < n_units; ++i) order[i] = i;
  Rng rng(derive_seed(seed, trial));
  rng.shuffle(order);
  int n_cal = static_cast<int>(std::lround(cal_fraction * n_units));
  n_cal = std::clamp(n_cal, 1, n_units - 1);
  std::vector<bool> is_cal(static_cast<std::size_t>(n_units), false);
  for (int i = 0; i < n_cal; ++i) is_cal[order[i]] = true;
  return is_cal;
}

void finalize_cell(TrialCell& cell) {
  double fnr_sum = 0.0, fnr_sq = 0.0;
  double mask_sum = 0.0, mask_sq = 0.0;
  double acc_sum = 0.0, overall_sum = 0.0;
  int n_acc = 0;
  for (const TrialRow& r : cell.rows) {
    if (r.degenerate) {
      ++cell.n_degenerate;
    } else {
      ++cell.n_valid;
      fnr_sum += r.fnr;
      fnr_sq += r.fnr * r.fnr;
    }
    mask_sum += r.mask_pct;
    mask_sq += r.mask_pct * r.mask_pct;
    overall_sum += r.overall_psnr_db;
    if (r.accepted_psnr_db) {
      acc_sum += *r.accepted_psnr_db;
      ++n_acc;
    }
  }
  const int all = static_cast<int>(cell.rows.size());
  if (cell.n_valid > 0) {
    cell.mean_fnr = fnr_sum / cell.n_valid;
    cell.std_fnr =
        std::sqrt(std::max(fnr_sq / cell.n_valid - cell.mean_fnr * cell.mean_fnr,
                           0.0));
  }
  if (all > 0) {
    cell.mean_mask_pct = mask_sum / all;
    cell.std_mask_pct = std::sqrt(
        std::max(mask_sq / all - cell.mean_mask_pct * cell.mean_mask_pct, 0.0));
    cell.mean_overall_psnr_db = overall_sum / all;
  }
  if (n_acc > 0) cell.mean_accepted_psnr_db = acc_sum / n_acc;
}

}  // namespace

TrialReport run_trials(const DatasetManifest& manifest,
                       const ScoreSource& source, const TrialConfig& cfg) {
  if (cfg.n_trials < 1) throw format_error("trials: n_trials must be >= 1");
  if (!(cfg.cal_fraction > 0.0 && cfg.cal_fraction < 1.0))
    throw format_error("trials: cal_fraction must be in (0,1)");

  const PreparedData data = prepare_frames(manifest, source, cfg.tau_fails_db,
                                           cfg.split_unit, cfg.threads);
  if (data.n_units < 2)
    throw format_error("trials: need at least 2 split units");

  TrialReport report;
  report.config = cfg;
  for (const double tau_fail : cfg.tau_fails_db)
    for (const double alpha : cfg.alphas) {
      TrialCell cell;
      cell.alpha = alpha;
      cell.tau_fail_db = tau_fail;
      cell.rows.resize(static_cast<std::size_t>(cfg.n_trials));
      report.cells.push_back(std::move(cell));
    }

  parallel_for(static_cast<std::size_t>(cfg.n_trials), cfg.threads,
               [&](std::size_t t) {
    const std::vector<bool> is_cal =
        draw_split(data.n_units, cfg.cal_fraction, cfg.seed, t);
    std::size_t cell_idx = 0;
    for (std::size_t li = 0; li < cfg.tau_fails_db.size(); ++li)
      for (const double alpha : cfg.alphas) {
        report.cells[cell_idx].rows[t] = evaluate_split(
            data, is_cal, static_cast<int>(t), li, li, alpha);
        ++cell_idx;
      }
  });

  for (TrialCell& cell : report.cells) finalize_cell(cell);
  return report;
}

// ---- report serialization ----

namespace {

json row_to_json(const TrialRow& r) {
  json j;
  j["trial"] = r.trial;
  j["degenerate"] = r.degenerate;
  if (r.unconstrained)
    j["tau_tilde"] = "unconstrained";
  else
    j["tau_tilde"] = r.tau_tilde;
  j["n_cal_pos"] = r.n_cal_pos;
  j["n_test_pos"] = r.n_test_pos;
  if (!r.degenerate) j["fnr"] = r.fnr;
  j["mask_pct"] = r.mask_pct;
  if (r.accepted_psnr_db) j["accepted_psnr_db"] = *r.accepted_psnr_db;
  j["overall_psnr_db"] = r.overall_psnr_db;
  return j;
}

}  // namespace

std::string TrialReport::to_json() const {
  json j;
  j["schema"] = "cfm.trials.v1";
  json cfg_j;
  cfg_j["n_trials"] = config.n_trials;
  cfg_j["cal_fraction"] = config.cal_fraction;
  cfg_j["split_unit"] =
      config.split_unit == TrialConfig::SplitUnit::video ? "video" : "image";
  cfg_j["seed"] = config.seed;
  cfg_j["alphas"] = config.alphas;
  cfg_j["tau_fails_db"] = config.tau_fails_db;
  j["config"] = cfg_j;

  json cells_j = json::array();
  for (const TrialCell& cell : cells) {
    json c;
    c["alpha"] = cell.alpha;
    c["tau_fail_db"] = cell.tau_fail_db;
    c["n_valid"] = cell.n_valid;
    c["n_degenerate"] = cell.n_degenerate;
    c["mean_fnr"] = cell.mean_fnr;
    c["std_fnr"] = cell.std_fnr;
    c["mean_mask_pct"] = cell.mean_mask_pct;
    c["std_mask_pct"] = cell.std_mask_pct;
    c["mean_accepted_psnr_db"] = cell.mean_accepted_psnr_db;
    c["mean_overall_psnr_db"] = cell.mean_overall_psnr_db;
    json rows_j = json::array();
    for (const TrialRow& r : cell.rows) rows_j.push_back(row_to_json(r));
    c["trials"] = rows_j;
    cells_j.push_back(c);
  }
  j["cells"] = cells_j;
  return j.dump(2);
}

void TrialReport::write_json(const fs::path& path) const {
  const std::string text = to_json();
  atomic_write(path, [&](std::ostream& os) { os << text << "\n"; });
}

void TrialReport::write_csv(const fs::path& path) const {
  atomic_write(path, [&](std::ostream& os) {
    os << "# schema: cfm.trials.v1\n";
    os << "trial,alpha,tau_fail_db,status,tau_tilde,n_cal_pos,n_test_pos,"
          "fnr,mask_pct,accepted_psnr_db,overall_psnr_db\n";
    for (const TrialCell& cell : cells)
      for (const TrialRow& r : cell.rows) {
        os << r.trial << ',' << format_double(cell.alpha) << ','
           << format_double(cell.tau_fail_db) << ','
           << (r.degenerate ? "degenerate" : "ok") << ','
           << (r.unconstrained ? "unconstrained" : format_double(r.tau_tilde))
           << ',' << r.n_cal_pos << ',' << r.n_test_pos << ','
           << (r.degenerate ? "" : format_double(r.fnr)) << ','
           << format_double(r.mask_pct) << ','
           << (r.accepted_psnr_db ? format_double(*r.accepted_psnr_db) : "")
           << ',' << format_double(r.overall_psnr_db) << '\n';
      }
  });
}

// ---- risk-coverage curve ----

CurveReport risk_coverage_curve(const DatasetManifest& manifest,
                                const ScoreSource& source, double tau_fail_db,
                                const std::vector<double>& alphas,
                                const std::vector<double>& baseline_levels_db,
                                const TrialConfig& cfg) {
  // Level 0 is the target; baseline surrogates follow.
  std::vector<double> levels = {tau_fail_db};
  for (const double l : baseline_levels_db) levels.push_back(l);

  const PreparedData data = prepare_frames(manifest, source, levels,
                                           cfg.split_unit, cfg.threads);
  if (data.n_units < 2)
    throw format_error("curve: need at least 2 split units");

  struct RowSpec {
    std::string method;
    double parameter;
    std::size_t cal_level;
    double alpha;
  };
  std::vector<RowSpec> specs;
  for (const double a : alphas) specs.push_back({"cfm", a, 0, a});
  for (std::size_t li = 0; li < baseline_levels_db.size(); ++li)
    specs.push_back({"baseline", baseline_levels_db[li], li + 1, 0.0});

  std::vector<std::vector<TrialRow>> rows(
      specs.size(), std::vector<TrialRow>(cfg.n_trials));
  parallel_for(static_cast<std::size_t>(cfg.n_trials), cfg.threads,
               [&](std::size_t t) {
    // One split per trial, shared by every row so comparisons are paired.
    const std::vector<bool> is_cal =
        draw_split(data.n_units, cfg.cal_fraction, cfg.seed, t);
    for (std::size_t si = 0; si < specs.size(); ++si)
      rows[si][t] = evaluate_split(data, is_cal, static_cast<int>(t),
                                   specs[si].cal_level, 0, specs[si].alpha);
  });

  CurveReport report;
  report.tau_fail_db = tau_fail_db;
  for (std::size_t si = 0; si < specs.size(); ++si) {
    CurveRow row;
    row.method = specs[si].method;
    row.parameter = specs[si].parameter;
    double fnr_sum = 0.0, mask_sum = 0.0;
    int n_valid = 0;
    for (const TrialRow& r : rows[si]) {
      mask_sum += r.mask_pct;
      if (!r.degenerate) {
        fnr_sum += r.fnr;
        ++n_valid;
      }
    }
    row.mean_fnr = n_valid > 0 ? fnr_sum / n_valid : 0.0;
    row.mean_mask_pct = mask_sum / cfg.n_trials;
    report.rows.push_back(row);
  }
  return report;
}

void CurveReport::write_csv(const fs::path& path) const {
  atomic_write(path, [&](std::ostream& os) {
    os << "# schema: cfm.curve.v1 tau_fail_db=" << format_double(tau_fail_db)
       << "\n";
    os << "method,parameter,mean_fnr,mean_mask_pct\n";
    for (const CurveRow& r : rows)
      os << r.method << ',' << format_double(r.parameter) << ','
         << format_double(r.mean_fnr) << ',' << format_double(r.mean_mask_pct)
         << '\n';
  });
}

// ---- score metrics and ablations ----

ScoreMetrics score_metrics(const DatasetManifest& manifest,
                           const ScoreSource& source, double tau_fail_db,
                           int threads, bool per_image_mean) {
  struct Job {
    const VideoRecord* video;
    std::size_t frame_idx;
  };
  std::vector<Job> jobs;
  for (const VideoRecord& video : manifest.videos) {
    if (video.split == "train") continue;
    for (std::size_t f = 0; f < video.frames.size(); ++f)
      jobs.push_back({&video, f});
  }
  if (jobs.empty()) throw format_error("score_metrics: no eval frames");

  std::vector<std::vector<float>> frame_scores_v(jobs.size());
  std::vector<std::vector<std::uint8_t>> frame_labels_v(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t ji) {
    const Job& job = jobs[ji];
    const FrameRecord& fr = job.video->frames[job.frame_idx];
    if (!fr.sr) throw format_error("score_metrics: frame lacks sr");
    const Image hr = read_image(manifest.resolve(fr.hr));
    const Image sr = read_image(manifest.resolve(*fr.sr));
    const ScalarMap se = squared_error_map(sr, hr);
    const ScalarMap psnr = psnr_map(sr, hr);
    const BinaryMask oracle = failure_mask(psnr, {tau_fail_db});
    const ScalarMap scores =
        frame_scores(source, manifest, *job.video, job.frame_idx, hr, se);
    if (scores.size() != oracle.size())
      throw format_error("score_metrics: score map dims mismatch");
    frame_scores_v[ji] = scores.data;
    frame_labels_v[ji].assign(oracle.data.begin(), oracle.data.end());
  });

  ScoreMetrics out;
  if (per_image_mean) {
    double auroc_sum = 0.0, fpr_sum = 0.0;
    int n = 0;
    for (std::size_t ji = 0; ji < jobs.size(); ++ji) {
      std::size_t pos = 0;
      for (const std::uint8_t l : frame_labels_v[ji]) pos += l;
      if (pos == 0 || pos == frame_labels_v[ji].size()) continue;
      auroc_sum += auroc(frame_scores_v[ji], frame_labels_v[ji]);
      fpr_sum += fpr_at_tpr(frame_scores_v[ji], frame_labels_v[ji]);
      out.n_pos += pos;
      out.n_neg += frame_labels_v[ji].size() - pos;
      ++n;
    }
    if (n == 0)
      throw format_error("score_metrics: no frame holds both classes");
    out.auroc = auroc_sum / n;
    out.fpr95 = fpr_sum / n;
    return out;
  }

  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t ji = 0; ji < jobs.size(); ++ji) {
    scores.insert(scores.end(), frame_scores_v[ji].begin(),
                  frame_scores_v[ji].end());
    labels.insert(labels.end(), frame_labels_v[ji].begin(),
                  frame_labels_v[ji].end());
  }
  for (const std::uint8_t l : labels) (l ? out.n_pos : out.n_neg)++;
  out.auroc = auroc(scores, labels);
  out.fpr95 = fpr_at_tpr(scores, labels);
  return out;
}

AblationReport ablation_sweep(const DatasetManifest& manifest,
                              AblationAxis axis, const std::vector<int>& values,
                              const errnet::TrainSettings& base,
                              double tau_fail_db) {
  if (values.empty()) throw format_error("ablation: no values");
  AblationReport report;
  report.axis = axis;
  report.tau_fail_db = tau_fail_db;
  for (const int value : values) {
    errnet::TrainSettings s = base;
    switch (axis) {
      case AblationAxis::n_blocks:
        if (value < 1) throw format_error("ablation: n_blocks must be >= 1");
        s.n_blocks = value;
        break;
      case AblationAxis::width:
        if (value < 1) throw format_error("ablation: width must be >= 1");
        s.width = value;
        break;
      case AblationAxis::n_train_videos:
        if (value < 1) throw format_error("ablation: need >= 1 train video");
        s.max_train_videos = value;
        break;
    }
    errnet::TrainResult tr = errnet::train(manifest, s);
    const ScoreMetrics m = score_metrics(
        manifest,
        ScoreSource::net(std::move(tr.params), s.feature_mode), tau_fail_db,
        s.threads);
    report.rows.push_back({value, m.auroc, m.fpr95});
  }
  return report;
}

void AblationReport::write_csv(const fs::path& path) const {
  const char* axis_name = axis == AblationAxis::n_blocks ? "n_blocks"
                          : axis == AblationAxis::width  ? "width"
                                                         : "n_train_videos";
  atomic_write(path, [&](std::ostream& os) {
    os << "# schema: cfm.ablation.v1 tau_fail_db="
       << format_double(tau_fail_db) << "\n";
    os << "axis,value,auroc,fpr95\n";
    for (const AblationRow& r : rows)
      os << axis_name << ',' << r.value << ',' << format_double(r.auroc) << ','
         << format_double(r.fpr95) << '\n';
  });
}

}  // namespace cfm
