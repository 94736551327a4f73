#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cfm/raster.hpp"
#include "cfm/synth.hpp"

namespace cfm {

// LR-domain feature stack fed to the error network (F = channels).
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;  // row-major, channel-fastest

  FeatureMap() = default;
  FeatureMap(int h, int w, int c)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, 0.0f) {}
};

enum class FeatureMode : std::uint8_t {
  identity,     // the image channels themselves (F = C)
  handcrafted,  // image + luma gradients + 3x3 luma variance (F = C + 3)
};

// Image channels, plus for handcrafted mode: horizontal and vertical
// central-difference gradients of Rec.601 luma and the 3x3 local variance of
// luma (replicate-padded windows).
FeatureMap extract_features(const Image& lr, FeatureMode mode);

namespace errnet {

// Activation tensor with a batch dimension; activations and gradients are
// kept in double so finite-difference gradient checks are meaningful.
// Layout: (((i*h + y)*w + x)*c + ch).
struct Tensor {
  int n = 1, h = 0, w = 0, c = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int n_, int h_, int w_, int c_, double fill = 0.0)
      : n(n_), h(h_), w(w_), c(c_),
        v(static_cast<std::size_t>(n_) * h_ * w_ * c_, fill) {}

  std::size_t idx(int i, int y, int x, int ch) const {
    return ((static_cast<std::size_t>(i) * h + y) * w + x) * c + ch;
  }
  double& at(int i, int y, int x, int ch) { return v[idx(i, y, x, ch)]; }
  double at(int i, int y, int x, int ch) const { return v[idx(i, y, x, ch)]; }
  std::size_t size() const { return v.size(); }
};

Tensor tensor_from_features(const FeatureMap& f);
ScalarMap scalar_map_from_tensor(const Tensor& t, int sample, MapUnit unit);

constexpr std::uint32_t kFlagBnBeforeRelu = 1u;  // block = conv -> BN -> ReLU

// Weights and batch-norm state of the error network. Stored float32; the
// serialized layout (magic "ENET") is: version u8=1, header u32s
// {n_blocks, width, in_channels, scale, flags}, then float32 tensors in
// declaration order: epsilon[1], per block {conv_w [width][3][3][c_in],
// conv_b, gamma, beta, run_mean, run_var}, head_w [width], head_b [1].
struct ErrNetParams {
  int n_blocks = 2;
  int width = 64;
  int in_channels = 0;
  int scale = 4;
  std::uint32_t flags = 0;
  float epsilon = 1e-5f;

  struct Block {
    std::vector<float> conv_w;
    std::vector<float> conv_b;
    std::vector<float> gamma, beta, run_mean, run_var;
  };
  std::vector<Block> blocks;
  std::vector<float> head_w;
  std::vector<float> head_b;  // 1 element

  int block_in_channels(int b) const { return b == 0 ? in_channels : width; }
};

// He-uniform conv init, gamma=1, beta=0, running stats (0, 1).
ErrNetParams make_errnet(int n_blocks, int width, int in_channels, int scale,
                         std::uint64_t seed, std::uint32_t flags = 0);

std::size_t param_count(const ErrNetParams& p);

// ---- primitive ops (exposed for composition tests) ----

// Per-channel separable bicubic upsample by an integer factor; no clamping.
Tensor upsample_bicubic(const Tensor& in, int scale);
// Exact adjoint of upsample_bicubic: <Up(u), g> == <u, UpAdj(g)>.
Tensor upsample_bicubic_adjoint(const Tensor& grad, int src_h, int src_w,
                                int scale);

Tensor conv3x3_forward(const Tensor& in, const std::vector<float>& w,
                       const std::vector<float>& b, int out_channels,
                       int threads);
void conv3x3_backward(const Tensor& in, const Tensor& dout,
                      const std::vector<float>& w, std::vector<double>& dw,
                      std::vector<double>& db, Tensor& din, int threads);

Tensor relu(const Tensor& z);

// Train-mode batch norm over (batch * H * W) per channel, biased variance.
// Outputs the normalized-scaled tensor and the batch stats.
Tensor bn_train_forward(const Tensor& a, const std::vector<float>& gamma,
                        const std::vector<float>& beta, double eps,
                        std::vector<double>& mean, std::vector<double>& var);
Tensor bn_eval_forward(const Tensor& a, const std::vector<float>& gamma,
                       const std::vector<float>& beta,
                       const std::vector<float>& run_mean,
                       const std::vector<float>& run_var, double eps);
void bn_train_backward(const Tensor& a, const Tensor& dy,
                       const std::vector<float>& gamma,
                       const std::vector<double>& mean,
                       const std::vector<double>& var, double eps,
                       std::vector<double>& dgamma, std::vector<double>& dbeta,
                       Tensor& da);

// ---- network-level API ----

enum class Mode : std::uint8_t { train, eval };

struct ForwardCache {
  Tensor x0;                       // upsampled features
  std::vector<Tensor> z;           // conv pre-activations per block
  std::vector<std::vector<double>> mean, var;  // batch stats per block
};

// Bicubic upsample of the features to HR, then n_blocks convolutional
// blocks, then the 1x1 linear head. Train mode uses batch statistics and
// updates running stats (momentum 0.1); eval mode uses running stats.
// Output is unbounded - scores are used ordinally downstream.
Tensor forward(ErrNetParams& params, const Tensor& feats, Mode mode,
               int threads = 1, ForwardCache* cache = nullptr);

// Convenience: eval-mode scores for one image.
ScalarMap predict_scores(ErrNetParams& params, const FeatureMap& feat,
                         int threads = 1);

// Mean over batch and pixels of (target - pred)^2.
double loss(const Tensor& pred, const Tensor& target);

// Gradients in the same shapes as the parameters.
struct ErrNetGrads {
  struct Block {
    std::vector<double> conv_w, conv_b, gamma, beta;
  };
  std::vector<Block> blocks;
  std::vector<double> head_w, head_b;
};

// Full analytic backward through head, batch norm (train formula), ReLU,
// convs and the fixed bicubic upsample. Returns the train-mode loss.
double backward(ErrNetParams& params, const Tensor& feats,
                const Tensor& target, ErrNetGrads& grads, int threads = 1,
                Tensor* dfeats = nullptr);

struct AdamState {
  long step = 0;
  std::vector<std::vector<double>> m, v;  // aligned with parameter tensors
};
AdamState make_adam_state(const ErrNetParams& p);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 1;      // videos (frame groups) per step
  double base_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

// One optimizer step on a frame-group batch; aborts with numeric_error on a
// non-finite loss or gradient. Returns the step loss.
double backward_step(ErrNetParams& params, const Tensor& feats,
                     const Tensor& target, AdamState& state, double lr,
                     const TrainConfig& cfg, int threads = 1);

struct TrainSettings {
  int n_blocks = 2;
  int width = 64;
  FeatureMode feature_mode = FeatureMode::handcrafted;
  TrainConfig config;
  int threads = 1;
  std::uint32_t flags = 0;
  int max_train_videos = 0;  // 0 = use all train-split videos
};

struct TrainResult {
  ErrNetParams params;
  std::vector<double> epoch_loss;  // mean step loss per epoch
};

// Trains on the manifest's train-split videos: targets are the SE maps of
// SR vs HR; one video (frame group) per step; seeded shuffle per epoch;
// cosine lr decay to zero over all steps.
TrainResult train(const DatasetManifest& manifest, const TrainSettings& s);

void save_params(const ErrNetParams& p, const std::filesystem::path& path);
ErrNetParams load_params(const std::filesystem::path& path);

}  // namespace errnet
}  // namespace cfm
