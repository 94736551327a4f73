#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cfm/errormaps.hpp"
#include "cfm/raster.hpp"

namespace cfm {

// One calibration item: predicted error scores paired with the oracle
// failure mask at the set's failure level.
struct CalibrationItem {
  ScalarMap scores;    // predicted error map, used ordinally
  BinaryMask oracle;   // 1 = true failure pixel
};

struct CalibrationSet {
  std::vector<CalibrationItem> items;
  FailureLevel tau_fail;
};

// Output of the threshold selection. When unconstrained is set the empty
// mask already satisfies the risk bound and tau_tilde holds +infinity; the
// sentinel never reaches serialized output as a float (it is written as the
// status string "unconstrained").
struct CalibrationResult {
  double tau_tilde = 0.0;
  bool unconstrained = false;
  std::size_t n_positives = 0;
  double alpha = 0.0;
  double tau_fail_db = 0.0;
  std::string warning;  // empty when clean

  std::string to_json() const;
  static CalibrationResult from_json_string(const std::string& text);
};

// Pooled false-negative rate: (1/N) * #{oracle=1 and predicted=0} over all
// images and pixels; N = total oracle positives. N = 0 -> nullopt.
std::optional<double> fnr(const std::vector<BinaryMask>& oracle,
                          const std::vector<BinaryMask>& predicted);

// Predicted failure mask: 1 iff score >= tau (ties flag). tau = +inf gives
// the empty mask, tau = -inf the full one.
BinaryMask apply_mask(const ScalarMap& scores, double tau);
BinaryMask apply_mask(const ScalarMap& scores, const CalibrationResult& r);

// Conformal risk-control condition on the calibration false-negative count
// c at sample size n: (n/(n+1)) * (c/n) - 1/(n+1) <= alpha. Exposed so the
// implementation and the brute-force oracle evaluate the identical
// expression.
bool fn_count_admissible(std::size_t fn_count, std::size_t n, double alpha);

// Threshold selection on the pooled positive-pixel scores, by order
// statistic: with s(1) <= ... <= s(N) the sorted positive scores and K the
// largest admissible false-negative count, tau_tilde = s(K+1), or +inf when
// every count up to N is admissible. No grid search; exact.
CalibrationResult calibrate_scores(std::vector<double> positive_scores,
                                   double alpha, double tau_fail_db);

// Collects scores at oracle-positive pixels across the set, then selects the
// operative threshold guaranteeing pooled FNR <= alpha on exchangeable data.
CalibrationResult calibrate(const CalibrationSet& cal, double alpha);

// The compared per-image max-error construction as the alpha -> 0 special
// case of the same machinery.
CalibrationResult baseline_alpha_zero(const CalibrationSet& cal);

struct GuaranteeReport {
  std::optional<double> fnr_test;  // nullopt when the test set has no positives
  std::size_t n_test_positives = 0;
  bool satisfied = false;          // fnr_test <= alpha (false when undefined)
};

// Evaluates the selected threshold on held-out data. Single-split violations
// are expected occasionally; the guarantee is on the mean over calibration
// draws.
GuaranteeReport guarantee_check(const CalibrationResult& result,
                                const CalibrationSet& test);

}  // namespace cfm
