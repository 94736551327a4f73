#include <doctest.h>

#include <cmath>
#include <limits>

#include "cfm/conformal.hpp"
#include "cfm/errors.hpp"
#include "cfm/rng.hpp"
#include "test_oracles.hpp"

using namespace cfm;

namespace {

ScalarMap map_of(std::vector<float> vals, int h, int w) {
  ScalarMap m(h, w, MapUnit::squared_intensity);
  m.data = std::move(vals);
  return m;
}

BinaryMask mask_of(std::vector<std::uint8_t> vals, int h, int w) {
  BinaryMask m(h, w);
  m.data = std::move(vals);
  return m;
}

}  // namespace

TEST_CASE("fnr hand examples") {
  const BinaryMask oracle = mask_of({1, 1, 0, 1}, 1, 4);
  CHECK(*fnr({oracle}, {oracle}) == 0.0);
  CHECK(*fnr({oracle}, {mask_of({0, 0, 0, 0}, 1, 4)}) == 1.0);
  CHECK(*fnr({oracle}, {mask_of({1, 0, 0, 0}, 1, 4)}) ==
        doctest::Approx(2.0 / 3.0));
  // N = 0 -> undefined
  CHECK(!fnr({mask_of({0, 0, 0, 0}, 1, 4)}, {oracle}).has_value());
}

TEST_CASE("apply_mask uses non-strict >=") {
  const ScalarMap scores = map_of({0.1f, 0.5f, 0.5f, 0.9f}, 1, 4);
  const BinaryMask m = apply_mask(scores, 0.5);
  CHECK(m.data == std::vector<std::uint8_t>{0, 1, 1, 1});
  CHECK(apply_mask(scores, -std::numeric_limits<double>::infinity())
            .count_ones() == 4);
  CHECK(apply_mask(scores, std::numeric_limits<double>::infinity())
            .count_ones() == 0);
}

TEST_CASE("calibrate_scores: spec examples") {
  std::vector<double> scores = {1, 2, 3, 4, 5, 6, 7, 8, 9};

  // alpha = 0.1, N = 9 -> K = 2 -> tau = s(3) = 3.
  CalibrationResult r = calibrate_scores(scores, 0.1, 22.0);
  CHECK(!r.unconstrained);
  CHECK(r.tau_tilde == 3.0);
  CHECK(r.n_positives == 9);

  // alpha = 1 -> unconstrained, empty mask permitted.
  r = calibrate_scores(scores, 1.0, 22.0);
  CHECK(r.unconstrained);
  const ScalarMap any = map_of({0.5f, 100.0f}, 1, 2);
  CHECK(apply_mask(any, r).count_ones() == 0);

  // alpha = 0 -> K = 1 -> tau = s(2): at most one calibration FN.
  r = calibrate_scores(scores, 0.0, 22.0);
  CHECK(r.tau_tilde == 2.0);
  std::size_t below_s2 = 0, below_s3 = 0;
  for (const double s : scores) {
    if (s < 2.0) ++below_s2;
    if (s < 3.0) ++below_s3;
  }
  CHECK(below_s2 == 1);
  CHECK(below_s3 == 2);
}

TEST_CASE("calibrate_scores: N = 0 gives unconstrained with warning") {
  const CalibrationResult r = calibrate_scores({}, 0.05, 22.0);
  CHECK(r.unconstrained);
  CHECK(!r.warning.empty());
  CHECK(r.n_positives == 0);
}

TEST_CASE("calibrate_scores: alpha outside [0,1] rejected") {
  CHECK_THROWS_AS(calibrate_scores({1.0}, -0.1, 22.0), format_error);
  CHECK_THROWS_AS(calibrate_scores({1.0}, 1.5, 22.0), format_error);
}

TEST_CASE("calibrate equals brute-force sup on random instances") {
  Rng rng(2024);
  const std::vector<double> alphas = {0.0, 0.01, 0.05, 0.1,
                                      0.3, 0.5,  0.77, 1.0};
  for (int iter = 0; iter < 500; ++iter) {
    const std::size_t n = 1 + rng.bounded(500);
    std::vector<double> scores(n);
    const int dist = static_cast<int>(rng.bounded(3));
    for (double& s : scores) {
      if (dist == 0) s = rng.uniform();
      else if (dist == 1) s = rng.gaussian();
      else s = rng.bounded(12);  // heavy ties
    }
    const double alpha = alphas[rng.bounded(alphas.size())];
    const CalibrationResult r = calibrate_scores(scores, alpha, 22.0);
    const double expected = oracles::calibrate_bruteforce(scores, alpha);
    if (std::isinf(expected)) {
      CHECK(r.unconstrained);
    } else {
      REQUIRE(!r.unconstrained);
      CHECK(r.tau_tilde == expected);  // exact equality
    }
  }
}

TEST_CASE("calibrate pools positive pixels across images") {
  CalibrationSet cal;
  cal.tau_fail = {22.0};
  cal.items.push_back({map_of({1, 2, 3, 4}, 2, 2), mask_of({1, 0, 1, 1}, 2, 2)});
  cal.items.push_back({map_of({5, 6, 7, 8}, 2, 2), mask_of({1, 1, 1, 1}, 2, 2)});
  // positives: {1,3,4,5,6,7,8} -> N=7; alpha=0 -> K=1 -> s(2)=3.
  const CalibrationResult r = calibrate(cal, 0.0);
  CHECK(r.n_positives == 7);
  CHECK(r.tau_tilde == 3.0);
  CHECK(r.tau_fail_db == 22.0);
}

TEST_CASE("baseline_alpha_zero equals calibrate at alpha 0 and is widest") {
  Rng rng(31);
  CalibrationSet cal;
  cal.tau_fail = {22.0};
  for (int i = 0; i < 6; ++i) {
    ScalarMap s(8, 8, MapUnit::squared_intensity);
    BinaryMask m(8, 8);
    for (std::size_t p = 0; p < s.size(); ++p) {
      s.data[p] = static_cast<float>(rng.uniform());
      m.data[p] = rng.uniform() < 0.4 ? 1 : 0;
    }
    cal.items.push_back({std::move(s), std::move(m)});
  }
  const CalibrationResult base = baseline_alpha_zero(cal);
  const CalibrationResult mid = calibrate(cal, 0.05);
  CHECK(base.alpha == 0.0);
  CHECK(base.tau_tilde == calibrate(cal, 0.0).tau_tilde);

  // Baseline mask is a superset of the alpha=0.05 mask on any scores.
  ScalarMap probe(16, 16, MapUnit::squared_intensity);
  Rng rng2(32);
  for (float& v : probe.data) v = static_cast<float>(rng2.uniform());
  const BinaryMask mb = apply_mask(probe, base);
  const BinaryMask mm = apply_mask(probe, mid);
  CHECK(mb.count_ones() >= mm.count_ones());

  // At most one calibration false negative for the baseline.
  std::size_t fn = 0;
  for (const auto& item : cal.items)
    for (std::size_t p = 0; p < item.scores.size(); ++p)
      if (item.oracle.data[p] &&
          static_cast<double>(item.scores.data[p]) < base.tau_tilde)
        ++fn;
  CHECK(fn <= 1);
}

TEST_CASE("guarantee_check sentinel thresholds") {
  CalibrationSet test;
  test.tau_fail = {22.0};
  Rng rng(41);
  for (int i = 0; i < 4; ++i) {
    ScalarMap s(4, 4, MapUnit::squared_intensity);
    BinaryMask m(4, 4);
    for (std::size_t p = 0; p < s.size(); ++p) {
      s.data[p] = static_cast<float>(rng.uniform());
      m.data[p] = rng.uniform() < 0.5 ? 1 : 0;
    }
    test.items.push_back({std::move(s), std::move(m)});
  }
  CalibrationResult reject_all;
  reject_all.tau_tilde = -std::numeric_limits<double>::infinity();
  reject_all.alpha = 0.0;
  const GuaranteeReport r0 = guarantee_check(reject_all, test);
  CHECK(*r0.fnr_test == 0.0);
  CHECK(r0.satisfied);

  CalibrationResult accept_all;
  accept_all.unconstrained = true;
  accept_all.tau_tilde = std::numeric_limits<double>::infinity();
  accept_all.alpha = 0.5;
  const GuaranteeReport r1 = guarantee_check(accept_all, test);
  CHECK(*r1.fnr_test == 1.0);
  CHECK(!r1.satisfied);
}

TEST_CASE("coverage: mean test FNR stays near alpha on exchangeable draws") {
  // Oracle-quality scores; image-level exchangeable splits; quick version of
  // the acceptance-scale Monte Carlo.
  Rng meta(51);
  const double alpha = 0.1;
  const int trials = 60;
  double fnr_sum = 0.0;
  int counted = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(1000, t));
    std::vector<CalibrationItem> pool;
    for (int i = 0; i < 24; ++i) {
      ScalarMap s(8, 8, MapUnit::squared_intensity);
      BinaryMask m(8, 8);
      for (std::size_t p = 0; p < s.size(); ++p) {
        const double e = rng.uniform();
        s.data[p] = static_cast<float>(e);
        m.data[p] = e > 0.7 ? 1 : 0;  // scores rank failures perfectly
      }
      pool.push_back({std::move(s), std::move(m)});
    }
    std::vector<int> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    CalibrationSet cal, test;
    cal.tau_fail = test.tau_fail = {22.0};
    for (std::size_t i = 0; i < order.size(); ++i)
      (i < 16 ? cal : test).items.push_back(pool[order[i]]);
    const CalibrationResult r = calibrate(cal, alpha);
    const GuaranteeReport g = guarantee_check(r, test);
    if (g.fnr_test) {
      fnr_sum += *g.fnr_test;
      ++counted;
    }
  }
  REQUIRE(counted > 0);
  const double mean_fnr = fnr_sum / counted;
  CHECK(mean_fnr <= alpha + 0.05);
}

TEST_CASE("calibration result JSON round-trip, sentinel as status string") {
  CalibrationResult r;
  r.tau_tilde = 0.125;
  r.alpha = 0.05;
  r.tau_fail_db = 24.0;
  r.n_positives = 77;
  const CalibrationResult back =
      CalibrationResult::from_json_string(r.to_json());
  CHECK(back.tau_tilde == 0.125);
  CHECK(back.alpha == 0.05);
  CHECK(back.n_positives == 77);
  CHECK(!back.unconstrained);

  CalibrationResult u;
  u.unconstrained = true;
  u.tau_tilde = std::numeric_limits<double>::infinity();
  u.warning = "no positive pixels in calibration set";
  const std::string text = u.to_json();
  CHECK(text.find("unconstrained") != std::string::npos);
  CHECK(text.find("inf") == std::string::npos);
  const CalibrationResult uback = CalibrationResult::from_json_string(text);
  CHECK(uback.unconstrained);
  CHECK(!uback.warning.empty());
}

TEST_CASE("N and oracle masks nest across failure levels") {
  Rng rng(61);
  // Shared scores; two failure levels produce nested oracle masks.
  ScalarMap psnr(16, 16, MapUnit::decibels);
  for (float& v : psnr.data)
    v = static_cast<float>(rng.uniform(10.0, 40.0));
  const BinaryMask lo = failure_mask(psnr, {20.0});
  const BinaryMask hi = failure_mask(psnr, {26.0});
  for (std::size_t i = 0; i < lo.size(); ++i)
    if (lo.data[i]) CHECK(hi.data[i] == 1);
  CHECK(hi.count_ones() >= lo.count_ones());
}
