#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "cfm/raster.hpp"

namespace cfm {

// PSNR cutoff in dB below which a pixel counts as a reconstruction failure.
struct FailureLevel {
  double tau_fail_db = 22.0;
};

// H x W indicator raster; 1 marks a (predicted or oracle) failure pixel.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t at(int y, int x) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t size() const { return data.size(); }
  std::size_t count_ones() const;
};

inline constexpr double kPsnrCapDb = 99.0;

// Per-pixel channel-mean squared difference, (1/C) sum_c (pred-ref)^2.
ScalarMap squared_error_map(const Image& pred, const Image& ref);

// Per-pixel PSNR 10*log10(1/se) from channel-mean SE; se = 0 (or values
// above cap_db) saturate at cap_db. window > 1 (odd) averages SE over a
// clamped box window before the log; window = 1 is the pointwise default.
ScalarMap psnr_map(const Image& pred, const Image& ref,
                   double cap_db = kPsnrCapDb, int window = 1);

// Oracle mask: 1 iff PSNR <= tau_fail (non-strict).
BinaryMask failure_mask(const ScalarMap& psnr, FailureLevel level);

// PSNR over the pixels the predicted mask accepts (rejected = 0), pooled
// across channels: 10*log10(1 / mean SE). Empty accepted region -> nullopt.
std::optional<double> psnr_region(const Image& pred, const Image& ref,
                                  const BinaryMask& rejected,
                                  double cap_db = kPsnrCapDb);

// Masks serialize through EMAP as 0.0/1.0 float32.
void write_emap(const BinaryMask& mask, const std::filesystem::path& path);
BinaryMask mask_from_emap(const EmapTensor& t);

}  // namespace cfm
