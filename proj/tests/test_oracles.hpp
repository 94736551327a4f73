// Independent reference implementations used only by tests. Each one takes a
// deliberately different algorithmic route from the library code it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace oracles {

// Keys cubic convolution (a = -0.5) evaluated directly from the piecewise
// polynomial, independent of the tap-plan machinery.
inline double keys(double t) {
  const double x = std::abs(t);
  if (x <= 1.0) return 1.5 * x * x * x - 2.5 * x * x + 1.0;
  if (x < 2.0) return -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0;
  return 0.0;
}

// 1-D bicubic resample of `src` to n_dst samples with clamped indices and
// pixel-center alignment, summing the kernel over the 4 neighbours.
inline std::vector<double> resample_1d(const std::vector<double>& src,
                                       int n_dst) {
  const int n_src = static_cast<int>(src.size());
  std::vector<double> out(n_dst);
  for (int d = 0; d < n_dst; ++d) {
    const double sx = (d + 0.5) * n_src / n_dst - 0.5;
    const int i0 = static_cast<int>(std::floor(sx));
    double acc = 0.0;
    for (int k = -1; k <= 2; ++k) {
      const int idx = std::clamp(i0 + k, 0, n_src - 1);
      acc += keys(sx - (i0 + k)) * src[idx];
    }
    out[d] = acc;
  }
  return out;
}

// Brute-force conformal threshold: sweep every candidate threshold in
// {-inf, s(1), ..., s(N), +inf}, count false negatives (score < tau) by
// direct enumeration, test the literal risk inequality, and take the sup.
// Returns +inf when every candidate is admissible above the largest score.
inline double calibrate_bruteforce(std::vector<double> scores, double alpha) {
  const std::size_t n = scores.size();
  if (n == 0) return std::numeric_limits<double>::infinity();
  std::sort(scores.begin(), scores.end());

  const auto admissible = [&](double tau) {
    std::size_t fn = 0;
    for (const double s : scores)
      if (s < tau) ++fn;
    const double nn = static_cast<double>(n);
    const double lhs =
        (nn / (nn + 1.0)) * (static_cast<double>(fn) / nn) - 1.0 / (nn + 1.0);
    return lhs <= alpha;
  };

  if (admissible(std::numeric_limits<double>::infinity()))
    return std::numeric_limits<double>::infinity();
  double best = -std::numeric_limits<double>::infinity();
  for (const double s : scores)
    if (admissible(s)) best = std::max(best, s);
  return best;
}

// AUROC by exhaustive pair counting (ties worth 1/2).
inline double auroc_bruteforce(const std::vector<float>& scores,
                               const std::vector<unsigned char>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// FPR at 95% TPR by sweeping every distinct score as a threshold and keeping
// the largest admissible one.
inline double fpr95_bruteforce(const std::vector<float>& scores,
                               const std::vector<unsigned char>& labels,
                               double tpr_min = 0.95) {
  std::size_t pos = 0, neg = 0;
  for (const unsigned char l : labels) (l ? pos : neg)++;
  std::vector<float> thresholds = scores;
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());

  double best_t = -std::numeric_limits<double>::infinity();
  double best_fpr = 1.0;
  bool found = false;
  for (const float t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= t) (labels[i] ? tp : fp)++;
    if (static_cast<double>(tp) / static_cast<double>(pos) >= tpr_min &&
        (!found || t > best_t)) {
      found = true;
      best_t = t;
      best_fpr = static_cast<double>(fp) / static_cast<double>(neg);
    }
  }
  return best_fpr;
}

}  // namespace oracles
