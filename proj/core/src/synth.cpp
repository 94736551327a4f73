#include "cfm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cfm/errors.hpp"
#include "cfm/ioutil.hpp"
#include "cfm/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cfm {

namespace {

struct Ellipse {
  double cx, cy, ax, ay, angle, delta;
};

struct Stroke {
  double x0, y0, x1, y1, x2, y2;  // quadratic Bezier control points
  double width_px;
  double darkness;
};

struct Specular {
  double cx, cy, radius_px;
};

struct Lattice {
  std::vector<float> values;  // periodic in x
  int nx = 0, ny = 0;
  double amplitude = 0.0;
};

// Product of integer-frequency sinusoids with random phases: smooth tissue
// undulation whose histogram over the full frame is exactly phase-invariant,
// so it adds scene variety without any per-seed histogram drift.
struct Wave {
  int kx = 1, ky = 1;
  double phase_x = 0.0, phase_y = 0.0;
  double amplitude = 0.0;
};

// All scene parameters drawn in one fixed order so the frame is a pure
// function of (seed, frame_index). Amplitudes are fixed and only geometry is
// randomized; variety comes from many small structures, so the pixel
// histogram stays stationary across seeds (the exchangeability premise the
// trial protocol relies on).
struct SceneParams {
  double base[3];
  double vignette_amp;
  std::vector<Ellipse> ellipses;
  std::vector<Stroke> strokes;
  std::vector<Specular> speculars;
  std::vector<Wave> waves;  // low-frequency tissue modulation
  Lattice fine;             // fine texture
};

Lattice draw_lattice(Rng& rng, int width, int height, int cell_px,
                     double amplitude) {
  Lattice l;
  l.nx = std::max(4, width / cell_px);
  l.ny = std::max(4, height / cell_px) + 1;
  l.amplitude = amplitude;
  l.values.resize(static_cast<std::size_t>(l.nx) * l.ny);
  for (float& v : l.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return l;
}

double sample_lattice(const Lattice& l, double fx01, double fy01) {
  const double fx = fx01 * l.nx;
  const double fy = fy01 * (l.ny - 1);
  const int ix = static_cast<int>(std::floor(fx));
  const int iy = std::min(static_cast<int>(std::floor(fy)), l.ny - 2);
  const double tx = fx - ix, ty = fy - iy;
  const int x0 = ix % l.nx, x1 = (ix + 1) % l.nx;
  const double n00 = l.values[iy * l.nx + x0];
  const double n01 = l.values[iy * l.nx + x1];
  const double n10 = l.values[(iy + 1) * l.nx + x0];
  const double n11 = l.values[(iy + 1) * l.nx + x1];
  return (n00 * (1 - tx) + n01 * tx) * (1 - ty) +
         (n10 * (1 - tx) + n11 * tx) * ty;
}

SceneParams draw_params(const SceneConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0xC0FFEEull));
  SceneParams p;
  p.base[0] = 0.62;
  p.base[1] = 0.34;
  p.base[2] = 0.27;
  p.vignette_amp = 0.13;

  static const int kWaveFreqs[3][2] = {{1, 2}, {2, 1}, {3, 3}};
  p.waves.resize(3);
  for (std::size_t i = 0; i < p.waves.size(); ++i) {
    Wave& w = p.waves[i];
    w.kx = kWaveFreqs[i][0];
    w.ky = kWaveFreqs[i][1];
    w.phase_x = rng.uniform(0.0, 6.283185307179586);
    w.phase_y = rng.uniform(0.0, 6.283185307179586);
    w.amplitude = 0.035;
  }
  p.fine = draw_lattice(rng, cfg.width, cfg.height, 8, cfg.texture_amplitude);

  p.ellipses.resize(static_cast<std::size_t>(std::max(cfg.n_ellipses, 0)));
  for (std::size_t i = 0; i < p.ellipses.size(); ++i) {
    Ellipse& e = p.ellipses[i];
    e.cx = rng.uniform(0.05, 0.95);
    e.cy = rng.uniform(0.05, 0.95);
    e.ax = rng.uniform(0.05, 0.09);
    e.ay = rng.uniform(0.05, 0.09);
    e.angle = rng.uniform(0.0, 3.141592653589793);
    e.delta = i % 2 == 0 ? 0.06 : -0.06;  // balanced bright/dark bumps
  }

  // Many short vessel segments rather than a few long curves: total coverage
  // then concentrates across seeds.
  const int max_strokes = std::max(8, cfg.width / 4);
  const int n_strokes = static_cast<int>(
      std::lround(std::clamp(cfg.vessel_density, 0.0, 1.0) * max_strokes));
  p.strokes.resize(static_cast<std::size_t>(n_strokes));
  const double px = cfg.width / 128.0;
  for (Stroke& s : p.strokes) {
    s.x0 = rng.uniform(0.05, 0.95);
    s.y0 = rng.uniform(0.05, 0.95);
    const double angle = rng.uniform(0.0, 6.283185307179586);
    const double len = rng.uniform(0.16, 0.24);
    s.x2 = s.x0 + len * std::cos(angle);
    s.y2 = s.y0 + len * std::sin(angle);
    // Perpendicular bow for a gentle curve.
    const double bow = rng.uniform(-0.06, 0.06);
    s.x1 = 0.5 * (s.x0 + s.x2) - bow * std::sin(angle);
    s.y1 = 0.5 * (s.y0 + s.y2) + bow * std::cos(angle);
    s.width_px = rng.uniform(1.6, 2.4) * px;
    s.darkness = 0.55;
  }

  p.speculars.resize(static_cast<std::size_t>(std::max(cfg.specular_count, 0)));
  for (Specular& sp : p.speculars) {
    sp.cx = rng.uniform(0.10, 0.90);
    sp.cy = rng.uniform(0.10, 0.90);
    sp.radius_px = rng.uniform(0.035, 0.050) * std::min(cfg.width, cfg.height);
  }
  return p;
}

double smoothstep01(double s) {
  s = std::clamp(s, 0.0, 1.0);
  return s * s * (3.0 - 2.0 * s);
}

// Renders the translating content (everything except speculars) at frame 0.
Image render_content(const SceneConfig& cfg, const SceneParams& p) {
  const int H = cfg.height, W = cfg.width;
  Image img(H, W, 3);

  // Base tone + vignette + low/high-frequency value noise + ellipse bumps.
  for (int y = 0; y < H; ++y) {
    const double v = (y + 0.5) / H - 0.5;
    const double fy01 = (y + 0.5) / H;
    for (int x = 0; x < W; ++x) {
      const double u = (x + 0.5) / W - 0.5;
      const double fx01 = (x + 0.5) / W;
      double lum = 1.0 - p.vignette_amp * 4.0 * (u * u + v * v);
      for (const Wave& wv : p.waves)
        lum += wv.amplitude *
               std::sin(6.283185307179586 * wv.kx * fx01 + wv.phase_x) *
               std::sin(6.283185307179586 * wv.ky * fy01 + wv.phase_y);
      lum += p.fine.amplitude * sample_lattice(p.fine, fx01, fy01);

      for (const Ellipse& e : p.ellipses) {
        const double dx = fx01 - e.cx;
        const double dy = fy01 - e.cy;
        const double c = std::cos(e.angle), s = std::sin(e.angle);
        const double rx = (dx * c + dy * s) / e.ax;
        const double ry = (-dx * s + dy * c) / e.ay;
        const double d2 = rx * rx + ry * ry;
        if (d2 < 4.0) lum += e.delta * std::exp(-1.5 * d2);
      }

      for (int c2 = 0; c2 < 3; ++c2)
        img.at(y, x, c2) = static_cast<float>(p.base[c2] * lum);
    }
  }

  // Vessel strokes: accumulate a coverage buffer, then darken multiplicatively
  // (red channel less than green/blue, so vessels read as dark red).
  if (!p.strokes.empty()) {
    std::vector<float> cover(static_cast<std::size_t>(H) * W, 0.0f);
    const int steps = 3 * std::max(H, W);
    for (const Stroke& s : p.strokes) {
      for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        const double omt = 1.0 - t;
        const double bx =
            omt * omt * s.x0 + 2 * omt * t * s.x1 + t * t * s.x2;
        const double by =
            omt * omt * s.y0 + 2 * omt * t * s.y1 + t * t * s.y2;
        const double cx = bx * W, cy = by * H;
        const double r = s.width_px;
        const int ylo = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
        const int yhi = std::min(H - 1, static_cast<int>(std::ceil(cy + r + 1)));
        const int xlo = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
        const int xhi = std::min(W - 1, static_cast<int>(std::ceil(cx + r + 1)));
        for (int yy = ylo; yy <= yhi; ++yy)
          for (int xx = xlo; xx <= xhi; ++xx) {
            const double d = std::hypot(xx + 0.5 - cx, yy + 0.5 - cy);
            const double a = s.darkness * smoothstep01(1.0 - d / r);
            float& cell = cover[static_cast<std::size_t>(yy) * W + xx];
            cell = std::max(cell, static_cast<float>(a));
          }
      }
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double a = cover[static_cast<std::size_t>(y) * W + x];
        if (a <= 0.0) continue;
        img.at(y, x, 0) *= static_cast<float>(1.0 - 0.55 * a);
        img.at(y, x, 1) *= static_cast<float>(1.0 - 0.80 * a);
        img.at(y, x, 2) *= static_cast<float>(1.0 - 0.75 * a);
      }
  }
  return img;
}

}  // namespace

Image generate_scene(const SceneConfig& cfg, int frame_index) {
  if (cfg.height < 32 || cfg.width < 32)
    throw format_error("generate_scene: dims must be >= 32");
  if (frame_index < 0) throw format_error("generate_scene: negative frame");

  const SceneParams params = draw_params(cfg);
  const Image content = render_content(cfg, params);

  const int H = cfg.height, W = cfg.width;
  const int shift =
      static_cast<int>((static_cast<long long>(frame_index) *
                        cfg.translation_px) % W + W) % W;
  Image img(H, W, 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int xs = (x + shift) % W;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = content.at(y, xs, c);
    }

  // Saturated specular discs with a soft rim, fixed in image coordinates.
  for (const Specular& sp : params.speculars) {
    const double cx = sp.cx * W, cy = sp.cy * H, r = sp.radius_px;
    const int ylo = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
    const int yhi = std::min(H - 1, static_cast<int>(std::ceil(cy + r + 1)));
    const int xlo = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
    const int xhi = std::min(W - 1, static_cast<int>(std::ceil(cx + r + 1)));
    for (int y = ylo; y <= yhi; ++y)
      for (int x = xlo; x <= xhi; ++x) {
        const double u = std::hypot(x + 0.5 - cx, y + 0.5 - cy) / r;
        if (u >= 1.0) continue;
        const double a = u <= 0.55 ? 1.0 : smoothstep01((1.0 - u) / 0.45);
        for (int c = 0; c < 3; ++c) {
          const double v = img.at(y, x, c);
          img.at(y, x, c) = static_cast<float>(v + a * (1.0 - v));
        }
      }
  }

  for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

namespace {

json frame_to_json(const FrameRecord& f) {
  json j;
  j["hr"] = f.hr;
  j["lr"] = f.lr;
  if (f.sr) j["sr"] = *f.sr;
  if (f.feat) j["feat"] = *f.feat;
  return j;
}

FrameRecord frame_from_json(const json& j) {
  FrameRecord f;
  for (const auto& [key, value] : j.items()) {
    if (key == "hr") f.hr = value.get<std::string>();
    else if (key == "lr") f.lr = value.get<std::string>();
    else if (key == "sr") f.sr = value.get<std::string>();
    else if (key == "feat") f.feat = value.get<std::string>();
    else throw format_error("manifest: unknown frame key '" + key + "'");
  }
  if (f.hr.empty()) throw format_error("manifest: frame missing hr path");
  return f;
}

}  // namespace

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  atomic_write(path, [&](std::ostream& os) {
    for (const VideoRecord& v : m.videos) {
      json j;
      j["video_id"] = v.video_id;
      j["split"] = v.split;
      json frames = json::array();
      for (const FrameRecord& f : v.frames) frames.push_back(frame_to_json(f));
      j["frames"] = frames;
      os << j.dump() << "\n";
    }
  });
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw io_error("cannot open manifest: " + path.string());
  DatasetManifest m;
  m.base_dir = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw format_error("manifest line " + std::to_string(lineno) + ": " +
                         e.what());
    }
    VideoRecord v;
    for (const auto& [key, value] : j.items()) {
      if (key == "video_id") v.video_id = value.get<std::string>();
      else if (key == "split") v.split = value.get<std::string>();
      else if (key == "frames") {
        for (const json& fj : value) v.frames.push_back(frame_from_json(fj));
      } else {
        throw format_error("manifest: unknown video key '" + key + "'");
      }
    }
    if (v.video_id.empty())
      throw format_error("manifest line " + std::to_string(lineno) +
                         ": missing video_id");
    if (v.split != "train" && v.split != "cal" && v.split != "test" &&
        v.split != "none")
      throw format_error("manifest: bad split tag '" + v.split + "'");
    for (const VideoRecord& prev : m.videos)
      if (prev.video_id == v.video_id)
        throw format_error("manifest: duplicate video_id '" + v.video_id + "'");
    m.videos.push_back(std::move(v));
  }
  return m;
}

namespace {

std::string frame_name(int video, int frame, const char* kind) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "v%03d_f%02d_%s.ppm", video, frame, kind);
  return std::string(buf);
}

// Matches the PPM quantization so in-memory pipelines equal file-based ones.
void quantize_inplace(Image& img) {
  for (float& v : img.data)
    v = static_cast<float>(
        std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0);
}

}  // namespace

DatasetManifest synth_hr(const SceneConfig& cfg, int n_videos,
                         const fs::path& out_dir) {
  if (n_videos < 1) throw format_error("synth_hr: need at least one video");
  fs::create_directories(out_dir);
  DatasetManifest m;
  m.base_dir = out_dir;
  for (int v = 0; v < n_videos; ++v) {
    SceneConfig vid_cfg = cfg;
    vid_cfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(v));
    VideoRecord rec;
    char id[16];
    std::snprintf(id, sizeof(id), "v%03d", v);
    rec.video_id = id;
    for (int f = 0; f < cfg.frames_per_video; ++f) {
      Image hr = generate_scene(vid_cfg, f);
      quantize_inplace(hr);
      FrameRecord fr;
      fr.hr = frame_name(v, f, "hr");
      write_image(hr, out_dir / fr.hr);
      rec.frames.push_back(std::move(fr));
    }
    m.videos.push_back(std::move(rec));
  }
  return m;
}

void degrade_dataset(DatasetManifest& m, ScaleFactor s, double noise_sigma,
                     std::uint64_t seed) {
  for (std::size_t v = 0; v < m.videos.size(); ++v) {
    const std::uint64_t video_seed = derive_seed(seed, v);
    for (std::size_t f = 0; f < m.videos[v].frames.size(); ++f) {
      FrameRecord& fr = m.videos[v].frames[f];
      const Image hr = read_image(m.resolve(fr.hr));
      Image lr = degrade(hr, s, noise_sigma, derive_seed(video_seed, f));
      quantize_inplace(lr);
      fr.lr = frame_name(static_cast<int>(v), static_cast<int>(f), "lr");
      write_image(lr, m.base_dir / fr.lr);
    }
  }
}

void sr_dataset(DatasetManifest& m, SrMode mode) {
  for (std::size_t v = 0; v < m.videos.size(); ++v) {
    for (std::size_t f = 0; f < m.videos[v].frames.size(); ++f) {
      FrameRecord& fr = m.videos[v].frames[f];
      if (fr.lr.empty())
        throw format_error("sr_dataset: frame has no lr path (degrade first)");
      const Image hr = read_image(m.resolve(fr.hr));
      const Image lr = read_image(m.resolve(fr.lr));
      if (hr.height % lr.height != 0 || hr.width % lr.width != 0 ||
          hr.height / lr.height != hr.width / lr.width)
        throw format_error("sr_dataset: hr/lr dims not an integer scale");
      const ScaleFactor s{hr.height / lr.height};
      Image sr = sr_standin(lr, s, mode);
      quantize_inplace(sr);
      fr.sr = frame_name(static_cast<int>(v), static_cast<int>(f), "sr");
      write_image(sr, m.base_dir / *fr.sr);
    }
  }
}

void assign_train_split(DatasetManifest& m, int n_train) {
  if (n_train < 0 || static_cast<std::size_t>(n_train) > m.videos.size())
    throw format_error("assign_train_split: bad train count");
  for (std::size_t v = 0; v < m.videos.size(); ++v)
    m.videos[v].split = v < static_cast<std::size_t>(n_train) ? "train" : "none";
}

DatasetManifest make_dataset(const SceneConfig& cfg, int n_videos,
                             const fs::path& out_dir, ScaleFactor s,
                             double noise_sigma) {
  DatasetManifest m = synth_hr(cfg, n_videos, out_dir);
  degrade_dataset(m, s, noise_sigma, derive_seed(cfg.seed, 0xDE57ull));
  sr_dataset(m, SrMode::sharpen);
  write_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

}  // namespace cfm
