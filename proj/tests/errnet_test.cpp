#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "cfm/errnet.hpp"
#include "cfm/errormaps.hpp"
#include "cfm/errors.hpp"
#include "cfm/ioutil.hpp"
#include "cfm/rng.hpp"
#include "cfm/synth.hpp"

using namespace cfm;
using namespace cfm::errnet;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(Rng& rng, int n, int h, int w, int c, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(n, h, w, c);
  for (double& v : t.v) v = rng.uniform(lo, hi);
  return t;
}

// Enumerates every parameter array of the net in declaration order.
template <typename Fn>
void for_each_param_array(ErrNetParams& p, Fn&& fn) {
  for (auto& b : p.blocks) {
    fn(b.conv_w);
    fn(b.conv_b);
    fn(b.gamma);
    fn(b.beta);
  }
  fn(p.head_w);
  fn(p.head_b);
}

// Central finite差 difference dL/dtheta for one stored float parameter,
// honouring the rounding of theta +/- h to float32.
double fd_gradient(const ErrNetParams& params, const Tensor& feats,
                   const Tensor& target, int array_idx, std::size_t elem,
                   double h) {
  auto eval_loss = [&](float value) {
    ErrNetParams p = params;
    int ai = 0;
    for_each_param_array(p, [&](std::vector<float>& arr) {
      if (ai == array_idx) arr[elem] = value;
      ++ai;
    });
    const Tensor out = forward(p, feats, Mode::train, 1);
    return loss(out, target);
  };
  float base = 0.0f;
  {
    ErrNetParams p = params;
    int ai = 0;
    for_each_param_array(p, [&](std::vector<float>& arr) {
      if (ai == array_idx) base = arr[elem];
      ++ai;
    });
  }
  const float hi = static_cast<float>(static_cast<double>(base) + h);
  const float lo = static_cast<float>(static_cast<double>(base) - h);
  return (eval_loss(hi) - eval_loss(lo)) /
         (static_cast<double>(hi) - static_cast<double>(lo));
}

}  // namespace

TEST_CASE("extract_features identity keeps the image channels") {
  Rng rng(3);
  Image lr(5, 6, 3);
  for (float& v : lr.data) v = static_cast<float>(rng.uniform());
  const FeatureMap f = extract_features(lr, FeatureMode::identity);
  CHECK(f.channels == 3);
  CHECK(f.data == lr.data);
}

TEST_CASE("extract_features handcrafted: constants have zero aux channels") {
  Image lr(6, 6, 3, 0.4f);
  const FeatureMap f = extract_features(lr, FeatureMode::handcrafted);
  CHECK(f.channels == 6);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * 6 + x) * 6;
      CHECK(f.data[base + 3] == 0.0f);  // gx
      CHECK(f.data[base + 4] == 0.0f);  // gy
      CHECK(f.data[base + 5] == doctest::Approx(0.0).epsilon(1e-9));
    }
}

TEST_CASE("extract_features handcrafted: step edge fires the x gradient") {
  // Vertical step: columns 0..3 dark, 4..7 bright.
  Image lr(4, 8, 1, 0.0f);
  for (int y = 0; y < 4; ++y)
    for (int x = 4; x < 8; ++x) lr.at(y, x, 0) = 1.0f;
  const FeatureMap f = extract_features(lr, FeatureMode::handcrafted);
  const int F = 4;
  auto gx = [&](int y, int x) {
    return f.data[(static_cast<std::size_t>(y) * 8 + x) * F + 1];
  };
  auto gy = [&](int y, int x) {
    return f.data[(static_cast<std::size_t>(y) * 8 + x) * F + 2];
  };
  for (int y = 0; y < 4; ++y) {
    CHECK(gx(y, 3) == doctest::Approx(0.5));  // (L(4)-L(2))/2
    CHECK(gx(y, 4) == doctest::Approx(0.5));  // (L(5)-L(3))/2
    CHECK(gx(y, 1) == 0.0f);
    CHECK(gx(y, 6) == 0.0f);
    for (int x = 0; x < 8; ++x) CHECK(gy(y, x) == 0.0f);
  }
}

TEST_CASE("forward: all-zero weights give all-zero output") {
  ErrNetParams p = make_errnet(2, 4, 3, 2, 99);
  for (auto& b : p.blocks) {
    std::fill(b.conv_w.begin(), b.conv_w.end(), 0.0f);
    std::fill(b.conv_b.begin(), b.conv_b.end(), 0.0f);
  }
  std::fill(p.head_w.begin(), p.head_w.end(), 0.0f);
  p.head_b[0] = 0.0f;

  Rng rng(5);
  const Tensor feats = random_tensor(rng, 1, 6, 6, 3);
  for (const Mode mode : {Mode::train, Mode::eval}) {
    ErrNetParams copy = p;
    const Tensor out = forward(copy, feats, mode);
    CHECK(out.h == 12);
    CHECK(out.w == 12);
    CHECK(out.c == 1);
    for (const double v : out.v) CHECK(v == 0.0);
  }
}

TEST_CASE("forward: hand-composed identity block matches primitives") {
  // One block, width 1, identity-passing 3x3 kernel, eps = 0, eval-mode
  // running stats (0, 1): output = head_w * relu(upsample(x)) + head_b.
  ErrNetParams p = make_errnet(1, 1, 1, 2, 0);
  p.epsilon = 0.0f;
  std::fill(p.blocks[0].conv_w.begin(), p.blocks[0].conv_w.end(), 0.0f);
  p.blocks[0].conv_w[4] = 1.0f;  // center tap of the 3x3 kernel
  p.blocks[0].conv_b[0] = 0.0f;
  p.blocks[0].gamma[0] = 1.0f;
  p.blocks[0].beta[0] = 0.0f;
  p.blocks[0].run_mean[0] = 0.0f;
  p.blocks[0].run_var[0] = 1.0f;
  p.head_w[0] = 2.5f;
  p.head_b[0] = 0.25f;

  Rng rng(7);
  const Tensor feats = random_tensor(rng, 1, 5, 7, 1, -0.8, 0.8);
  const Tensor out = forward(p, feats, Mode::eval);

  const Tensor up = upsample_bicubic(feats, 2);
  REQUIRE(out.size() == up.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double expected = 2.5 * std::max(up.v[i], 0.0) + 0.25;
    CHECK(out.v[i] == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("forward eval mode is deterministic and pure") {
  ErrNetParams p = make_errnet(2, 6, 4, 2, 11);
  const ErrNetParams before = p;
  Rng rng(13);
  const Tensor feats = random_tensor(rng, 1, 8, 8, 4);
  const Tensor a = forward(p, feats, Mode::eval);
  const Tensor b = forward(p, feats, Mode::eval);
  CHECK(a.v == b.v);
  CHECK(p.blocks[0].run_mean == before.blocks[0].run_mean);
  CHECK(p.blocks[0].run_var == before.blocks[0].run_var);
}

TEST_CASE("loss: hand arithmetic") {
  Tensor a(1, 1, 2, 1);
  Tensor b(1, 1, 2, 1);
  a.v = {0.0, 0.3};
  b.v = {0.2, 0.3};
  CHECK(loss(a, a) == 0.0);
  CHECK(loss(a, b) == doctest::Approx(0.02));

  Tensor c = a;
  for (double& v : c.v) v += 0.1;
  CHECK(loss(c, a) == doctest::Approx(0.01));
}

TEST_CASE("batch norm train mode: normalized stats before gamma/beta") {
  Rng rng(17);
  const Tensor a = random_tensor(rng, 2, 6, 6, 3, -2.0, 5.0);
  std::vector<float> gamma(3, 1.0f), beta(3, 0.0f);
  std::vector<double> mean, var;
  const Tensor y = bn_train_forward(a, gamma, beta, 1e-5, mean, var);
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    const std::size_t count = y.size() / 3;
    for (std::size_t p = 0; p < count; ++p) m += y.v[p * 3 + c];
    m /= static_cast<double>(count);
    for (std::size_t p = 0; p < count; ++p) {
      const double d = y.v[p * 3 + c] - m;
      v += d * d;
    }
    v /= static_cast<double>(count);
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("upsample adjoint: <Up(u), v> == <u, UpAdj(v)>") {
  Rng rng(19);
  for (const int s : {2, 3, 4}) {
    const Tensor u = random_tensor(rng, 1, 5, 7, 2);
    const Tensor up = upsample_bicubic(u, s);
    const Tensor v = random_tensor(rng, 1, 5 * s, 7 * s, 2);
    const Tensor adj = upsample_bicubic_adjoint(v, 5, 7, s);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < up.size(); ++i) lhs += up.v[i] * v.v[i];
    for (std::size_t i = 0; i < u.size(); ++i) rhs += u.v[i] * adj.v[i];
    CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max({1.0, std::abs(lhs),
                                                  std::abs(rhs)}));
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  // Fixed instance whose pre-activations stay clear of the ReLU kinks at
  // h = 1e-3, so the central difference is a valid derivative estimate.
  Rng rng(4001);
  const int scale = 2;
  ErrNetParams params = make_errnet(1, 3, 2, scale, 3001);
  const Tensor feats = random_tensor(rng, 1, 6, 6, 2, 0.1, 1.0);
  Tensor target(1, 6 * scale, 6 * scale, 1);
  for (double& v : target.v) v = rng.uniform(0.0, 0.05);

  ErrNetParams work = params;
  ErrNetGrads grads;
  backward(work, feats, target, grads);

  std::vector<const std::vector<double>*> grad_arrays = {
      &grads.blocks[0].conv_w, &grads.blocks[0].conv_b,
      &grads.blocks[0].gamma, &grads.blocks[0].beta, &grads.head_w,
      &grads.head_b};

  const double h = 1e-3;
  int checked = 0;
  for (int ai = 0; ai < static_cast<int>(grad_arrays.size()); ++ai) {
    const std::vector<double>& ga = *grad_arrays[ai];
    for (std::size_t e = 0; e < ga.size(); ++e) {
      const double analytic = ga[e];
      const double fd = fd_gradient(params, feats, target, ai, e, h);
      const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-6});
      CHECK(std::abs(analytic - fd) / denom < 1e-3);
      ++checked;
    }
  }
  CHECK(checked > 60);
}

TEST_CASE("backward_step: zero lr leaves parameters unchanged") {
  Rng rng(29);
  ErrNetParams p = make_errnet(1, 4, 2, 2, 77);
  const ErrNetParams before = p;
  AdamState state = make_adam_state(p);
  const Tensor feats = random_tensor(rng, 1, 5, 5, 2);
  Tensor target(1, 10, 10, 1);
  for (double& v : target.v) v = rng.uniform(0.0, 0.1);
  backward_step(p, feats, target, state, 0.0, TrainConfig{});
  for (int b = 0; b < p.n_blocks; ++b) {
    CHECK(p.blocks[b].conv_w == before.blocks[b].conv_w);
    CHECK(p.blocks[b].gamma == before.blocks[b].gamma);
  }
  CHECK(p.head_w == before.head_w);
}

TEST_CASE("backward_step: one small step decreases the sample loss") {
  Rng rng(31);
  ErrNetParams p = make_errnet(1, 4, 2, 2, 78);
  AdamState state = make_adam_state(p);
  const Tensor feats = random_tensor(rng, 1, 6, 6, 2, 0.0, 1.0);
  Tensor target(1, 12, 12, 1);
  for (double& v : target.v) v = rng.uniform(0.0, 0.2);

  ErrNetParams probe = p;
  const double loss_before = loss(forward(probe, feats, Mode::train), target);
  backward_step(p, feats, target, state, 1e-4, TrainConfig{});
  ErrNetParams probe2 = p;
  const double loss_after = loss(forward(probe2, feats, Mode::train), target);
  CHECK(loss_after < loss_before);
}

TEST_CASE("both block op orders train and differ") {
  // In train mode the batch statistics are computed on different tensors
  // (relu(z) vs z), so the two op orders give different outputs.
  Rng rng(6002);
  const Tensor feats = random_tensor(rng, 1, 5, 5, 2, 0.1, 1.0);
  ErrNetParams a = make_errnet(1, 3, 2, 2, 5002, 0);
  ErrNetParams b = make_errnet(1, 3, 2, 2, 5002, kFlagBnBeforeRelu);
  const Tensor oa = forward(a, feats, Mode::train);
  const Tensor ob = forward(b, feats, Mode::train);
  CHECK(oa.v != ob.v);

  // Full gradcheck through the alternative order (same kink-clear-instance
  // approach as the default-order test).
  Tensor target(1, 10, 10, 1);
  for (double& v : target.v) v = rng.uniform(0.0, 0.05);
  ErrNetParams work = b;
  ErrNetGrads grads;
  backward(work, feats, target, grads);
  std::vector<const std::vector<double>*> grad_arrays = {
      &grads.blocks[0].conv_w, &grads.blocks[0].conv_b,
      &grads.blocks[0].gamma, &grads.blocks[0].beta, &grads.head_w,
      &grads.head_b};
  for (int ai = 0; ai < static_cast<int>(grad_arrays.size()); ++ai) {
    const std::vector<double>& ga = *grad_arrays[ai];
    for (std::size_t e = 0; e < ga.size(); ++e) {
      const double fd = fd_gradient(b, feats, target, ai, e, 1e-3);
      const double denom = std::max({std::abs(ga[e]), std::abs(fd), 1e-6});
      CHECK(std::abs(ga[e] - fd) / denom < 1e-3);
    }
  }
}

TEST_CASE("save/load round-trip preserves forward outputs exactly") {
  const fs::path dir = fs::temp_directory_path() / "cfm_enet_rt";
  fs::create_directories(dir);
  ErrNetParams p = make_errnet(2, 5, 4, 3, 91);
  // Touch running stats so they are not the init values.
  Rng rng(41);
  const Tensor feats = random_tensor(rng, 1, 4, 4, 4);
  forward(p, feats, Mode::train);

  const fs::path path = dir / "net.enet";
  save_params(p, path);
  ErrNetParams q = load_params(path);
  CHECK(q.n_blocks == p.n_blocks);
  CHECK(q.width == p.width);
  CHECK(q.in_channels == p.in_channels);
  CHECK(q.scale == p.scale);
  CHECK(q.blocks[1].run_var == p.blocks[1].run_var);

  const Tensor a = forward(p, feats, Mode::eval);
  const Tensor b = forward(q, feats, Mode::eval);
  CHECK(a.v == b.v);

  // Corrupted magic.
  auto bytes = read_file_bytes(path);
  bytes[0] = 'X';
  const fs::path bad = dir / "bad.enet";
  {
    std::ofstream os(bad, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_params(bad), format_error);

  // Version mismatch.
  bytes = read_file_bytes(path);
  bytes[4] = 9;
  {
    std::ofstream os(bad, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_params(bad), format_error);

  // Header/payload length mismatch.
  bytes = read_file_bytes(path);
  bytes.resize(bytes.size() - 8);
  {
    std::ofstream os(bad, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_params(bad), format_error);
}

TEST_CASE("train: loss decreases and reruns are bit-identical") {
  const fs::path dir = fs::temp_directory_path() / "cfm_train_smoke";
  fs::remove_all(dir);
  SceneConfig cfg;
  cfg.seed = 404;
  cfg.height = 64;
  cfg.width = 64;
  cfg.frames_per_video = 2;
  cfg.specular_count = 2;
  cfg.vessel_density = 0.5;
  DatasetManifest m = make_dataset(cfg, 3, dir, ScaleFactor{4}, 0.01);
  assign_train_split(m, 2);

  TrainSettings s;
  s.n_blocks = 1;
  s.width = 8;
  s.feature_mode = FeatureMode::handcrafted;
  s.config.epochs = 6;
  s.config.seed = 99;
  s.threads = 2;

  const TrainResult r1 = train(m, s);
  REQUIRE(r1.epoch_loss.size() == 6);
  CHECK(r1.epoch_loss.back() < r1.epoch_loss.front());

  const TrainResult r2 = train(m, s);
  const fs::path p1 = dir / "p1.enet", p2 = dir / "p2.enet";
  save_params(r1.params, p1);
  save_params(r2.params, p2);
  CHECK(read_file_bytes(p1) == read_file_bytes(p2));

  // Thread-count invariance of the trained weights.
  TrainSettings s1 = s;
  s1.threads = 1;
  const TrainResult r3 = train(m, s1);
  save_params(r3.params, dir / "p3.enet");
  CHECK(read_file_bytes(p1) == read_file_bytes(dir / "p3.enet"));

  CHECK_THROWS_AS(
      [&] {
        DatasetManifest empty = m;
        for (auto& v : empty.videos) v.split = "none";
        TrainSettings s2 = s;
        train(empty, s2);
      }(),
      format_error);
}
