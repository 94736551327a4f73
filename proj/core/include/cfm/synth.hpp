#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cfm/raster.hpp"

namespace cfm {

// Procedural endoscopy-like scene: smooth tissue gradients, vessel curves,
// specular highlights, fine texture. Every frame is a pure function of
// (seed, frame_index).
struct SceneConfig {
  std::uint64_t seed = 0;
  int height = 128;
  int width = 128;
  int n_ellipses = 6;
  double vessel_density = 0.5;   // fraction of the max stroke budget
  int specular_count = 4;
  double texture_amplitude = 0.04;
  int frames_per_video = 5;
  int translation_px = 3;        // per-frame horizontal drift, wraps around
};

struct FrameRecord {
  std::string hr;
  std::string lr;                 // empty until degradation ran
  std::optional<std::string> sr;
  std::optional<std::string> feat;
};

struct VideoRecord {
  std::string video_id;
  std::string split = "none";  // train | cal | test | none
  std::vector<FrameRecord> frames;
};

// Frame paths are stored relative to the manifest file; base_dir is filled
// on load and used to resolve them.
struct DatasetManifest {
  std::vector<VideoRecord> videos;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& rel) const {
    return base_dir / rel;
  }
};

// Frame t is frame 0's tissue/vessel/texture content translated by
// t*translation_px with horizontal wrap-around; specular highlights stay
// fixed in image coordinates.
Image generate_scene(const SceneConfig& cfg, int frame_index);

// JSON lines, one video per line:
// {"video_id": str, "split": str, "frames": [{"hr", "lr", "sr"?, "feat"?}]}
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

// HR frames only (quantized to PPM); one video per master-seed-derived child
// seed so distinct videos are i.i.d.
DatasetManifest synth_hr(const SceneConfig& cfg, int n_videos,
                         const std::filesystem::path& out_dir);

// Fills lr paths by degrading every HR frame (raster::degrade).
void degrade_dataset(DatasetManifest& m, ScaleFactor s, double noise_sigma,
                     std::uint64_t seed);

// Fills sr paths with the bicubic stand-in reconstruction.
void sr_dataset(DatasetManifest& m, SrMode mode);

// Tags the first n_train videos "train" and the rest "none".
void assign_train_split(DatasetManifest& m, int n_train);

// Full pipeline: HR + LR + SR + manifest, written under out_dir. Split tags
// are left unassigned.
DatasetManifest make_dataset(const SceneConfig& cfg, int n_videos,
                             const std::filesystem::path& out_dir,
                             ScaleFactor s, double noise_sigma);

}  // namespace cfm
