#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cfm {

// Dense float raster in [0,1], row-major, channel-fastest:
// data[(y*width + x)*channels + c]. Holds LR inputs, HR references and
// reconstructions alike.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 (gray) or 3 (rgb)
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height) * width;
  }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

enum class MapUnit : std::uint8_t {
  squared_intensity,  // per-pixel squared error (and predicted scores)
  decibels,           // per-pixel PSNR
};

// Single-channel H x W float map; the unit tag says whether values are
// squared intensities or dB.
struct ScalarMap {
  int height = 0;
  int width = 0;
  MapUnit unit = MapUnit::squared_intensity;
  std::vector<float> data;

  ScalarMap() = default;
  ScalarMap(int h, int w, MapUnit u, float fill = 0.0f)
      : height(h), width(w), unit(u),
        data(static_cast<std::size_t>(h) * w, fill) {}

  float& at(int y, int x) {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  float at(int y, int x) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t size() const { return data.size(); }
};

// Integer upscaling factor; HR dims are exactly s x LR dims.
struct ScaleFactor {
  int s = 1;
};

// Raw payload of the EMAP container: H x W x C float32, row-major,
// channel-fastest. No range restriction beyond finiteness.
struct EmapTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;
};

// ---- PPM (P6) / PGM (P5), binary, maxval 255 ----

// Values decode as byte/255. Throws format_error on malformed header,
// maxval != 255, truncated or trailing payload; io_error if unreadable.
Image read_image(const std::filesystem::path& path);

// Quantizes with round(x*255); writes P5 for 1 channel, P6 for 3.
void write_image(const Image& img, const std::filesystem::path& path);

// ---- EMAP tensor container ----
// Little-endian layout: magic "EMAP", version u8=1, dtype u8=0 (float32),
// reserved u16=0, H u32, W u32, C u32, then H*W*C float32 payload.

EmapTensor read_emap(const std::filesystem::path& path);
void write_emap(const EmapTensor& t, const std::filesystem::path& path);
void write_emap(const ScalarMap& m, const std::filesystem::path& path);
void write_emap(const Image& img, const std::filesystem::path& path);

// Conversions from the generic container. scalar_map_from_emap requires C=1;
// image_from_emap clamps to [0,1] (external float reconstructions may
// slightly overshoot).
ScalarMap scalar_map_from_emap(const EmapTensor& t, MapUnit unit);
Image image_from_emap(const EmapTensor& t);

// ---- Bicubic resampling (Keys kernel, a = -0.5) ----

// Keys cubic convolution weight at distance |t|.
double keys_weight(double t);

// Per-output-index sample positions and weights for one axis, pixel-center
// aligned: src = (dst + 0.5) * src_n / dst_n - 0.5, sample indices clamped
// to [0, src_n-1]. Weights sum to 1 for every tap.
struct BicubicTap {
  std::array<int, 4> index;
  std::array<double, 4> weight;
};
std::vector<BicubicTap> bicubic_axis_taps(int src_n, int dst_n);

// Separable bicubic resample, output clamped to [0,1].
Image resize_bicubic(const Image& img, int target_h, int target_w);

// LR simulation: bicubic downsample by s, then i.i.d. Gaussian noise
// N(0, sigma^2) from the seeded generator, then clamp to [0,1]. HR dims must
// be divisible by s. Pure function of (hr, s, sigma, seed).
Image degrade(const Image& hr, ScaleFactor s, double noise_sigma,
              std::uint64_t seed);

enum class SrMode : std::uint8_t {
  plain,    // bicubic upsample only
  sharpen,  // bicubic upsample + 3x3 unsharp mask (amount 0.5)
};

// Stand-in reconstruction for a pretrained SR network. sharpen introduces
// over/undershoot near edges so error maps have learnable structure.
Image sr_standin(const Image& lr, ScaleFactor s, SrMode mode);

}  // namespace cfm
