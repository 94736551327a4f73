#include <doctest.h>

#include <cmath>

#include "cfm/errormaps.hpp"
#include "cfm/errors.hpp"
#include "cfm/rng.hpp"

using namespace cfm;

namespace {

Image image1(float v) {
  Image img(1, 1, 1, v);
  return img;
}

Image random_image(Rng& rng, int h, int w, int c) {
  Image img(h, w, c);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

TEST_CASE("squared_error_map basics") {
  Rng rng(3);
  const Image a = random_image(rng, 4, 5, 3);
  const ScalarMap zero = squared_error_map(a, a);
  for (const float v : zero.data) CHECK(v == 0.0f);

  const ScalarMap one = squared_error_map(image1(0.5f), image1(0.0f));
  CHECK(one.data[0] == doctest::Approx(0.25).epsilon(1e-7));

  Image p(1, 1, 3), r(1, 1, 3);
  p.data = {0.1f, 0.2f, 0.2f};
  r.data = {0.0f, 0.0f, 0.0f};
  const ScalarMap m = squared_error_map(p, r);
  CHECK(m.data[0] == doctest::Approx(0.03).epsilon(1e-6));

  Image wrong(2, 1, 3);
  CHECK_THROWS_AS(squared_error_map(p, wrong), format_error);
}

TEST_CASE("psnr_map values and cap") {
  const ScalarMap capped = psnr_map(image1(0.5f), image1(0.5f));
  CHECK(capped.data[0] == doctest::Approx(99.0));
  CHECK(capped.unit == MapUnit::decibels);

  // se = 0.01 -> 20 dB
  const ScalarMap twenty = psnr_map(image1(0.6f), image1(0.5f));
  CHECK(twenty.data[0] == doctest::Approx(20.0).epsilon(1e-4));

  // se = 1 -> 0 dB
  const ScalarMap zero_db = psnr_map(image1(1.0f), image1(0.0f));
  CHECK(zero_db.data[0] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("failure_mask thresholds with non-strict <=") {
  ScalarMap psnr(1, 3, MapUnit::decibels);
  psnr.data = {20.0f, 22.0f, 24.0f};
  const BinaryMask m = failure_mask(psnr, {22.0});
  CHECK(m.data[0] == 1);
  CHECK(m.data[1] == 1);  // ties are failures
  CHECK(m.data[2] == 0);

  Rng rng(5);
  const Image a = random_image(rng, 8, 8, 1);
  const Image b = random_image(rng, 8, 8, 1);
  const ScalarMap p = psnr_map(a, b);
  CHECK(failure_mask(p, {0.0}).count_ones() == 0);  // capped map, all > 0 dB
  CHECK(failure_mask(p, {kPsnrCapDb}).count_ones() == p.size());
}

TEST_CASE("failure_mask equals SE thresholding (monotone transform)") {
  Rng rng(7);
  const Image pred = random_image(rng, 16, 16, 3);
  const Image ref = random_image(rng, 16, 16, 3);
  const ScalarMap se = squared_error_map(pred, ref);
  const ScalarMap psnr = psnr_map(pred, ref);
  for (const double tau : {18.0, 22.0, 26.0, 40.0}) {
    const BinaryMask from_psnr = failure_mask(psnr, {tau});
    const double se_cut = std::pow(10.0, -tau / 10.0);
    for (std::size_t i = 0; i < se.size(); ++i) {
      const bool fail_by_se = se.data[i] >= se_cut;
      // Random data never lands exactly on the boundary, so the two routes
      // must agree.
      CHECK(static_cast<bool>(from_psnr.data[i]) == fail_by_se);
    }
  }
}

TEST_CASE("failure_mask is monotone (nested) in tau_fail") {
  Rng rng(9);
  const Image pred = random_image(rng, 12, 12, 3);
  const Image ref = random_image(rng, 12, 12, 3);
  const ScalarMap psnr = psnr_map(pred, ref);
  const BinaryMask lo = failure_mask(psnr, {20.0});
  const BinaryMask hi = failure_mask(psnr, {26.0});
  for (std::size_t i = 0; i < lo.size(); ++i)
    if (lo.data[i]) CHECK(hi.data[i] == 1);
  CHECK(hi.count_ones() >= lo.count_ones());
}

TEST_CASE("psnr_region basics") {
  // All accepted, pred == ref -> cap.
  Image a(2, 2, 1, 0.3f);
  BinaryMask none(2, 2, 0);
  CHECK(*psnr_region(a, a, none) == doctest::Approx(99.0));

  // Half-corrupted image: accepting only the clean half restores the cap.
  Image ref(2, 2, 1, 0.5f);
  Image pred = ref;
  pred.at(0, 0, 0) = 0.9f;
  pred.at(0, 1, 0) = 0.1f;
  BinaryMask reject_top(2, 2, 0);
  reject_top.at(0, 0) = 1;
  reject_top.at(0, 1) = 1;
  CHECK(*psnr_region(pred, ref, reject_top) == doctest::Approx(99.0));
  CHECK(*psnr_region(pred, ref, none) < 99.0);

  // Uniform se = 0.01 with everything accepted -> 20 dB.
  Image off(2, 2, 1, 0.6f);
  CHECK(*psnr_region(off, ref, none) == doctest::Approx(20.0).epsilon(1e-4));

  // Empty accepted region -> explicit undefined.
  BinaryMask all(2, 2, 1);
  CHECK(!psnr_region(pred, ref, all).has_value());
}

TEST_CASE("rejecting oracle-worst pixels can only raise region PSNR") {
  Rng rng(11);
  const Image pred = random_image(rng, 16, 16, 3);
  const Image ref = random_image(rng, 16, 16, 3);
  const ScalarMap psnr = psnr_map(pred, ref);
  const BinaryMask oracle = failure_mask(psnr, {6.0});
  REQUIRE(oracle.count_ones() > 0);
  REQUIRE(oracle.count_ones() < oracle.size());
  const BinaryMask none(16, 16, 0);
  CHECK(*psnr_region(pred, ref, oracle) >= *psnr_region(pred, ref, none));
}

TEST_CASE("psnr_map box-window variant") {
  Rng rng(13);
  const Image pred = random_image(rng, 8, 8, 1);
  const Image ref = random_image(rng, 8, 8, 1);
  const ScalarMap pointwise = psnr_map(pred, ref, kPsnrCapDb, 1);
  const ScalarMap windowed = psnr_map(pred, ref, kPsnrCapDb, 3);
  CHECK(pointwise.size() == windowed.size());
  // Center pixel of a 3x3 window: dB of the box-mean SE.
  const ScalarMap se = squared_error_map(pred, ref);
  double acc = 0.0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) acc += se.at(4 + dy, 4 + dx);
  const double expected = 10.0 * std::log10(9.0 / acc);
  CHECK(windowed.at(4, 4) == doctest::Approx(expected).epsilon(1e-4));
  CHECK_THROWS_AS(psnr_map(pred, ref, kPsnrCapDb, 2), format_error);
}

TEST_CASE("mask EMAP round-trip as 0/1 floats") {
  Rng rng(15);
  BinaryMask m(6, 7);
  for (auto& v : m.data) v = rng.uniform() < 0.3 ? 1 : 0;
  const auto dir = std::filesystem::temp_directory_path() / "cfm_mask_rt";
  std::filesystem::create_directories(dir);
  write_emap(m, dir / "m.emap");
  const BinaryMask back = mask_from_emap(read_emap(dir / "m.emap"));
  CHECK(back.data == m.data);
}
