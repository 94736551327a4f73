#include "cfm/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>

#include "cfm/errors.hpp"
#include "cfm/ioutil.hpp"
#include "cfm/rng.hpp"

namespace fs = std::filesystem;

namespace cfm {

namespace {

// Skips whitespace and '#' comments between PNM header tokens.
int next_header_int(std::istream& is, const std::string& what) {
  for (;;) {
    const int ch = is.peek();
    if (ch == EOF) throw format_error("pnm: truncated header before " + what);
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
      continue;
    }
    if (std::isspace(ch)) {
      is.get();
      continue;
    }
    break;
  }
  long value = 0;
  bool any = false;
  while (std::isdigit(is.peek())) {
    value = value * 10 + (is.get() - '0');
    any = true;
    if (value > std::numeric_limits<int>::max())
      throw format_error("pnm: header value overflow in " + what);
  }
  if (!any) throw format_error("pnm: malformed " + what);
  return static_cast<int>(value);
}

void validate_image(const Image& img, const char* ctx) {
  if (img.height <= 0 || img.width <= 0 ||
      (img.channels != 1 && img.channels != 3))
    throw format_error(std::string(ctx) + ": invalid dims");
  if (img.data.size() != img.pixel_count() * img.channels)
    throw format_error(std::string(ctx) + ": data length mismatch");
}

void put_u32le(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v & 0xFF),
      static_cast<unsigned char>((v >> 8) & 0xFF),
      static_cast<unsigned char>((v >> 16) & 0xFF),
      static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

Image read_image(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path.string());

  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (!is || m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw format_error("pnm: bad magic in " + path.string());
  const int channels = (m1 == '6') ? 3 : 1;

  const int width = next_header_int(is, "width");
  const int height = next_header_int(is, "height");
  const int maxval = next_header_int(is, "maxval");
  if (width <= 0 || height <= 0)
    throw format_error("pnm: non-positive dims in " + path.string());
  if (maxval != 255)
    throw format_error("pnm: unsupported maxval " + std::to_string(maxval));

  const int sep = is.get();
  if (sep == EOF || !std::isspace(sep))
    throw format_error("pnm: missing separator after maxval");

  const std::size_t n =
      static_cast<std::size_t>(width) * height * channels;
  std::vector<unsigned char> raw(n);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw format_error("pnm: truncated payload in " + path.string());
  if (is.get() != EOF)
    throw format_error("pnm: trailing data in " + path.string());

  Image img(height, width, channels);
  for (std::size_t i = 0; i < n; ++i)
    img.data[i] = static_cast<float>(raw[i]) / 255.0f;
  return img;
}

void write_image(const Image& img, const fs::path& path) {
  validate_image(img, "write_image");
  atomic_write(path, [&](std::ostream& os) {
    os << (img.channels == 3 ? "P6" : "P5") << "\n"
       << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      const float v = img.data[i];
      if (!std::isfinite(v))
        throw numeric_error("write_image: non-finite sample");
      const long q = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f);
      raw[i] = static_cast<unsigned char>(q);
    }
    os.write(reinterpret_cast<const char*>(raw.data()),
             static_cast<std::streamsize>(raw.size()));
  });
}

EmapTensor read_emap(const fs::path& path) {
  const std::vector<unsigned char> bytes = read_file_bytes(path);
  if (bytes.size() < 20) throw format_error("emap: file too small");
  if (std::memcmp(bytes.data(), "EMAP", 4) != 0)
    throw format_error("emap: bad magic in " + path.string());
  const unsigned version = bytes[4];
  const unsigned dtype = bytes[5];
  const unsigned reserved = bytes[6] | (bytes[7] << 8);
  if (version != 1)
    throw format_error("emap: unsupported version " + std::to_string(version));
  if (dtype != 0)
    throw format_error("emap: unsupported dtype " + std::to_string(dtype));
  if (reserved != 0) throw format_error("emap: nonzero reserved field");

  EmapTensor t;
  t.height = static_cast<int>(get_u32le(&bytes[8]));
  t.width = static_cast<int>(get_u32le(&bytes[12]));
  t.channels = static_cast<int>(get_u32le(&bytes[16]));
  if (t.height <= 0 || t.width <= 0 || t.channels <= 0)
    throw format_error("emap: non-positive dims in " + path.string());

  const std::size_t n = static_cast<std::size_t>(t.height) * t.width *
                        t.channels;
  if (bytes.size() != 20 + n * 4)
    throw format_error("emap: header/payload size mismatch in " +
                       path.string());
  t.data.resize(n);
  std::memcpy(t.data.data(), bytes.data() + 20, n * 4);
  for (const float v : t.data)
    if (!std::isfinite(v))
      throw format_error("emap: non-finite payload in " + path.string());
  return t;
}

void write_emap(const EmapTensor& t, const fs::path& path) {
  const std::size_t n =
      static_cast<std::size_t>(t.height) * t.width * t.channels;
  if (t.height <= 0 || t.width <= 0 || t.channels <= 0 || t.data.size() != n)
    throw format_error("emap: invalid tensor shape");
  for (const float v : t.data)
    if (!std::isfinite(v)) throw numeric_error("emap: non-finite payload");
  atomic_write(path, [&](std::ostream& os) {
    os.write("EMAP", 4);
    os.put(1);  // version
    os.put(0);  // dtype float32
    os.put(0);
    os.put(0);  // reserved
    put_u32le(os, static_cast<std::uint32_t>(t.height));
    put_u32le(os, static_cast<std::uint32_t>(t.width));
    put_u32le(os, static_cast<std::uint32_t>(t.channels));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * 4));
  });
}

void write_emap(const ScalarMap& m, const fs::path& path) {
  EmapTensor t;
  t.height = m.height;
  t.width = m.width;
  t.channels = 1;
  t.data = m.data;
  write_emap(t, path);
}

void write_emap(const Image& img, const fs::path& path) {
  EmapTensor t;
  t.height = img.height;
  t.width = img.width;
  t.channels = img.channels;
  t.data = img.data;
  write_emap(t, path);
}

ScalarMap scalar_map_from_emap(const EmapTensor& t, MapUnit unit) {
  if (t.channels != 1)
    throw format_error("emap: expected 1 channel, got " +
                       std::to_string(t.channels));
  ScalarMap m(t.height, t.width, unit);
  m.data = t.data;
  return m;
}

Image image_from_emap(const EmapTensor& t) {
  if (t.channels != 1 && t.channels != 3)
    throw format_error("emap: image needs 1 or 3 channels");
  Image img(t.height, t.width, t.channels);
  for (std::size_t i = 0; i < t.data.size(); ++i)
    img.data[i] = std::clamp(t.data[i], 0.0f, 1.0f);
  return img;
}

double keys_weight(double t) {
  const double x = std::abs(t);
  if (x <= 1.0) return (1.5 * x - 2.5) * x * x + 1.0;
  if (x < 2.0) return ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0;
  return 0.0;
}

std::vector<BicubicTap> bicubic_axis_taps(int src_n, int dst_n) {
  std::vector<BicubicTap> taps(static_cast<std::size_t>(dst_n));
  const double scale = static_cast<double>(src_n) / static_cast<double>(dst_n);
  for (int d = 0; d < dst_n; ++d) {
    const double sx = (d + 0.5) * scale - 0.5;
    const double base = std::floor(sx);
    const double t = sx - base;
    const int i0 = static_cast<int>(base);
    BicubicTap& tap = taps[d];
    tap.weight = {keys_weight(1.0 + t), keys_weight(t), keys_weight(1.0 - t),
                  keys_weight(2.0 - t)};
    for (int k = 0; k < 4; ++k)
      tap.index[k] = std::clamp(i0 - 1 + k, 0, src_n - 1);
  }
  return taps;
}

namespace {

// Separable resample of one interleaved raster; no output clamp here so the
// same pass serves feature upsampling.
std::vector<double> resample_planes(const float* src, int src_h, int src_w,
                                    int channels, int dst_h, int dst_w) {
  const std::vector<BicubicTap> col_taps = bicubic_axis_taps(src_w, dst_w);
  const std::vector<BicubicTap> row_taps = bicubic_axis_taps(src_h, dst_h);

  // Horizontal pass: src_h x dst_w.
  std::vector<double> mid(static_cast<std::size_t>(src_h) * dst_w * channels);
  for (int y = 0; y < src_h; ++y) {
    const float* row = src + static_cast<std::size_t>(y) * src_w * channels;
    double* out = mid.data() + static_cast<std::size_t>(y) * dst_w * channels;
    for (int x = 0; x < dst_w; ++x) {
      const BicubicTap& tap = col_taps[x];
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k)
          acc += tap.weight[k] * row[tap.index[k] * channels + c];
        out[x * channels + c] = acc;
      }
    }
  }

  // Vertical pass: dst_h x dst_w.
  std::vector<double> out(static_cast<std::size_t>(dst_h) * dst_w * channels);
  for (int y = 0; y < dst_h; ++y) {
    const BicubicTap& tap = row_taps[y];
    double* dst = out.data() + static_cast<std::size_t>(y) * dst_w * channels;
    for (int x = 0; x < dst_w; ++x)
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k)
          acc += tap.weight[k] *
                 mid[(static_cast<std::size_t>(tap.index[k]) * dst_w + x) *
                         channels + c];
        dst[x * channels + c] = acc;
      }
  }
  return out;
}

}  // namespace

Image resize_bicubic(const Image& img, int target_h, int target_w) {
  validate_image(img, "resize_bicubic");
  if (target_h < 1 || target_w < 1)
    throw format_error("resize_bicubic: target dims must be >= 1");
  const std::vector<double> vals = resample_planes(
      img.data.data(), img.height, img.width, img.channels, target_h,
      target_w);
  Image out(target_h, target_w, img.channels);
  for (std::size_t i = 0; i < vals.size(); ++i)
    out.data[i] = static_cast<float>(std::clamp(vals[i], 0.0, 1.0));
  return out;
}

Image degrade(const Image& hr, ScaleFactor s, double noise_sigma,
              std::uint64_t seed) {
  validate_image(hr, "degrade");
  if (s.s <= 1) throw format_error("degrade: scale must be > 1");
  if (hr.height % s.s != 0 || hr.width % s.s != 0)
    throw format_error("degrade: HR dims not divisible by scale");
  Image lr = resize_bicubic(hr, hr.height / s.s, hr.width / s.s);
  if (noise_sigma > 0.0) {
    Rng rng(seed);
    for (float& v : lr.data) {
      const double noisy = v + noise_sigma * rng.gaussian();
      v = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
    }
  }
  return lr;
}

namespace {

// 3x3 binomial blur with replicated edges, per channel.
Image blur3(const Image& img) {
  static const double kKernel[3] = {0.25, 0.5, 0.25};
  Image mid(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int k = -1; k <= 1; ++k) {
          const int xx = std::clamp(x + k, 0, img.width - 1);
          acc += kKernel[k + 1] * img.at(y, xx, c);
        }
        mid.at(y, x, c) = static_cast<float>(acc);
      }
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int k = -1; k <= 1; ++k) {
          const int yy = std::clamp(y + k, 0, img.height - 1);
          acc += kKernel[k + 1] * mid.at(yy, x, c);
        }
        out.at(y, x, c) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace

Image sr_standin(const Image& lr, ScaleFactor s, SrMode mode) {
  validate_image(lr, "sr_standin");
  if (s.s <= 1) throw format_error("sr_standin: scale must be > 1");
  Image up = resize_bicubic(lr, lr.height * s.s, lr.width * s.s);
  if (mode == SrMode::plain) return up;

  const Image blurred = blur3(up);
  Image out(up.height, up.width, up.channels);
  for (std::size_t i = 0; i < up.data.size(); ++i) {
    const double v =
        up.data[i] + 0.5 * (up.data[i] - static_cast<double>(blurred.data[i]));
    out.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

}  // namespace cfm
