#include "cfm/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "cfm/errors.hpp"

using nlohmann::json;

namespace cfm {

std::string CalibrationResult::to_json() const {
  json j;
  j["tau_fail_db"] = tau_fail_db;
  j["alpha"] = alpha;
  j["n_positives"] = n_positives;
  if (unconstrained)
    j["tau_tilde"] = "unconstrained";
  else
    j["tau_tilde"] = tau_tilde;
  if (!warning.empty()) j["warning"] = warning;
  return j.dump();
}

CalibrationResult CalibrationResult::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw format_error(std::string("calibration result: ") + e.what());
  }
  CalibrationResult r;
  try {
    r.tau_fail_db = j.at("tau_fail_db").get<double>();
    r.alpha = j.at("alpha").get<double>();
    r.n_positives = j.at("n_positives").get<std::size_t>();
    const json& tt = j.at("tau_tilde");
    if (tt.is_string()) {
      if (tt.get<std::string>() != "unconstrained")
        throw format_error("calibration result: bad tau_tilde status");
      r.unconstrained = true;
      r.tau_tilde = std::numeric_limits<double>::infinity();
    } else {
      r.tau_tilde = tt.get<double>();
    }
    if (j.contains("warning")) r.warning = j["warning"].get<std::string>();
  } catch (const json::exception& e) {
    throw format_error(std::string("calibration result: ") + e.what());
  }
  return r;
}

std::optional<double> fnr(const std::vector<BinaryMask>& oracle,
                          const std::vector<BinaryMask>& predicted) {
  if (oracle.size() != predicted.size())
    throw format_error("fnr: list length mismatch");
  std::size_t n_pos = 0, n_fn = 0;
  for (std::size_t i = 0; i < oracle.size(); ++i) {
    const BinaryMask& m = oracle[i];
    const BinaryMask& mh = predicted[i];
    if (m.height != mh.height || m.width != mh.width)
      throw format_error("fnr: mask shape mismatch");
    for (std::size_t p = 0; p < m.size(); ++p) {
      if (!m.data[p]) continue;
      ++n_pos;
      if (!mh.data[p]) ++n_fn;
    }
  }
  if (n_pos == 0) return std::nullopt;
  return static_cast<double>(n_fn) / static_cast<double>(n_pos);
}

BinaryMask apply_mask(const ScalarMap& scores, double tau) {
  BinaryMask mask(scores.height, scores.width);
  for (std::size_t p = 0; p < scores.size(); ++p)
    mask.data[p] = static_cast<double>(scores.data[p]) >= tau ? 1 : 0;
  return mask;
}

BinaryMask apply_mask(const ScalarMap& scores, const CalibrationResult& r) {
  if (r.unconstrained) return BinaryMask(scores.height, scores.width, 0);
  return apply_mask(scores, r.tau_tilde);
}

bool fn_count_admissible(std::size_t fn_count, std::size_t n, double alpha) {
  const double nn = static_cast<double>(n);
  const double lhs = (nn / (nn + 1.0)) * (static_cast<double>(fn_count) / nn) -
                     1.0 / (nn + 1.0);
  return lhs <= alpha;
}

CalibrationResult calibrate_scores(std::vector<double> positive_scores,
                                   double alpha, double tau_fail_db) {
  if (alpha < 0.0 || alpha > 1.0)
    throw format_error("calibrate: alpha outside [0,1]");
  CalibrationResult r;
  r.alpha = alpha;
  r.tau_fail_db = tau_fail_db;
  r.n_positives = positive_scores.size();

  const std::size_t n = positive_scores.size();
  if (n == 0) {
    // The risk bound is vacuous: the Eq.-style left side is -1/(N+1).
    r.unconstrained = true;
    r.tau_tilde = std::numeric_limits<double>::infinity();
    r.warning = "no positive pixels in calibration set";
    return r;
  }

  // A false negative at threshold tau is a positive pixel with score
  // strictly below tau, so the FN count is monotone in tau and the sup is
  // reached at an order statistic. Start from the closed form
  // K = floor(alpha*(N+1)+1) and settle ties with the literal inequality so
  // floating-point rounding can never flip the answer by one.
  const double nn = static_cast<double>(n);
  std::size_t k = 0;
  {
    const double k0 = std::floor(alpha * (nn + 1.0) + 1.0);
    k = k0 <= 0.0 ? 0
                  : std::min(n, static_cast<std::size_t>(k0));
    while (k > 0 && !fn_count_admissible(k, n, alpha)) --k;
    while (k < n && fn_count_admissible(k + 1, n, alpha)) ++k;
  }

  if (k >= n) {
    // Every FN count is admissible; any threshold works, so the sup is +inf
    // and the empty mask is permitted.
    r.unconstrained = true;
    r.tau_tilde = std::numeric_limits<double>::infinity();
    return r;
  }

  // tau_tilde = s(K+1), 1-indexed. Ties at s(K+1) are safe: scores equal to
  // the threshold are detections, not false negatives.
  std::nth_element(positive_scores.begin(), positive_scores.begin() + k,
                   positive_scores.end());
  r.tau_tilde = positive_scores[k];
  return r;
}

CalibrationResult calibrate(const CalibrationSet& cal, double alpha) {
  std::vector<double> scores;
  for (const CalibrationItem& item : cal.items) {
    if (item.scores.height != item.oracle.height ||
        item.scores.width != item.oracle.width)
      throw format_error("calibrate: score/mask shape mismatch");
    for (std::size_t p = 0; p < item.oracle.size(); ++p)
      if (item.oracle.data[p]) scores.push_back(item.scores.data[p]);
  }
  return calibrate_scores(std::move(scores), alpha, cal.tau_fail.tau_fail_db);
}

CalibrationResult baseline_alpha_zero(const CalibrationSet& cal) {
  return calibrate(cal, 0.0);
}

GuaranteeReport guarantee_check(const CalibrationResult& result,
                                const CalibrationSet& test) {
  GuaranteeReport rep;
  std::vector<BinaryMask> oracle, predicted;
  oracle.reserve(test.items.size());
  predicted.reserve(test.items.size());
  for (const CalibrationItem& item : test.items) {
    oracle.push_back(item.oracle);
    predicted.push_back(apply_mask(item.scores, result));
    rep.n_test_positives += item.oracle.count_ones();
  }
  rep.fnr_test = fnr(oracle, predicted);
  rep.satisfied = rep.fnr_test.has_value() && *rep.fnr_test <= result.alpha;
  return rep;
}

}  // namespace cfm
