#include "cfm/errormaps.hpp"

#include <algorithm>
#include <cmath>

#include "cfm/errors.hpp"

namespace cfm {

std::size_t BinaryMask::count_ones() const {
  std::size_t n = 0;
  for (const std::uint8_t v : data) n += v;
  return n;
}

namespace {

void require_same_shape(const Image& pred, const Image& ref, const char* ctx) {
  if (!pred.same_shape(ref))
    throw format_error(std::string(ctx) + ": shape mismatch");
  if (pred.height <= 0 || pred.width <= 0)
    throw format_error(std::string(ctx) + ": empty image");
}

double pixel_se(const Image& pred, const Image& ref, std::size_t pix) {
  const std::size_t base = pix * pred.channels;
  double acc = 0.0;
  for (int c = 0; c < pred.channels; ++c) {
    const double d = static_cast<double>(pred.data[base + c]) -
                     static_cast<double>(ref.data[base + c]);
    acc += d * d;
  }
  return acc / pred.channels;
}

}  // namespace

ScalarMap squared_error_map(const Image& pred, const Image& ref) {
  require_same_shape(pred, ref, "squared_error_map");
  ScalarMap se(pred.height, pred.width, MapUnit::squared_intensity);
  for (std::size_t p = 0; p < se.size(); ++p)
    se.data[p] = static_cast<float>(pixel_se(pred, ref, p));
  return se;
}

ScalarMap psnr_map(const Image& pred, const Image& ref, double cap_db,
                   int window) {
  require_same_shape(pred, ref, "psnr_map");
  if (window < 1 || window % 2 == 0)
    throw format_error("psnr_map: window must be odd and >= 1");

  ScalarMap se = squared_error_map(pred, ref);
  if (window > 1) {
    // Clamped box mean of SE; sensitivity-check variant, off by default.
    const int r = window / 2;
    ScalarMap smoothed(se.height, se.width, MapUnit::squared_intensity);
    for (int y = 0; y < se.height; ++y)
      for (int x = 0; x < se.width; ++x) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const int yy = std::clamp(y + dy, 0, se.height - 1);
            const int xx = std::clamp(x + dx, 0, se.width - 1);
            acc += se.at(yy, xx);
          }
        smoothed.at(y, x) = static_cast<float>(acc / (window * window));
      }
    se = std::move(smoothed);
  }

  ScalarMap out(se.height, se.width, MapUnit::decibels);
  for (std::size_t p = 0; p < se.size(); ++p) {
    const double v = se.data[p];
    double db = cap_db;
    if (v > 0.0) db = std::min(10.0 * std::log10(1.0 / v), cap_db);
    out.data[p] = static_cast<float>(db);
  }
  return out;
}

BinaryMask failure_mask(const ScalarMap& psnr, FailureLevel level) {
  if (psnr.unit != MapUnit::decibels)
    throw format_error("failure_mask: map is not in dB");
  BinaryMask mask(psnr.height, psnr.width);
  const float tau = static_cast<float>(level.tau_fail_db);
  for (std::size_t p = 0; p < psnr.size(); ++p)
    mask.data[p] = psnr.data[p] <= tau ? 1 : 0;
  return mask;
}

std::optional<double> psnr_region(const Image& pred, const Image& ref,
                                  const BinaryMask& rejected, double cap_db) {
  require_same_shape(pred, ref, "psnr_region");
  if (rejected.height != pred.height || rejected.width != pred.width)
    throw format_error("psnr_region: mask shape mismatch");

  double se_sum = 0.0;
  std::size_t accepted = 0;
  for (std::size_t p = 0; p < rejected.size(); ++p) {
    if (rejected.data[p]) continue;
    se_sum += pixel_se(pred, ref, p);
    ++accepted;
  }
  if (accepted == 0) return std::nullopt;
  const double mean_se = se_sum / accepted;
  if (mean_se <= 0.0) return cap_db;
  return std::min(10.0 * std::log10(1.0 / mean_se), cap_db);
}

void write_emap(const BinaryMask& mask, const std::filesystem::path& path) {
  EmapTensor t;
  t.height = mask.height;
  t.width = mask.width;
  t.channels = 1;
  t.data.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    t.data[i] = mask.data[i] ? 1.0f : 0.0f;
  write_emap(t, path);
}

BinaryMask mask_from_emap(const EmapTensor& t) {
  if (t.channels != 1)
    throw format_error("mask_from_emap: expected 1 channel");
  BinaryMask mask(t.height, t.width);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const float v = t.data[i];
    if (v != 0.0f && v != 1.0f)
      throw format_error("mask_from_emap: value not in {0,1}");
    mask.data[i] = v == 1.0f ? 1 : 0;
  }
  return mask;
}

}  // namespace cfm
