#include "cfm/errnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "cfm/errormaps.hpp"
#include "cfm/errors.hpp"
#include "cfm/ioutil.hpp"
#include "cfm/parallel.hpp"
#include "cfm/rng.hpp"

namespace fs = std::filesystem;

namespace cfm {

namespace {

// Rec.601 luma; for 1-channel images the channel itself.
double luma_at(const Image& img, int y, int x) {
  if (img.channels == 1) return img.at(y, x, 0);
  return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
         0.114 * img.at(y, x, 2);
}

}  // namespace

FeatureMap extract_features(const Image& lr, FeatureMode mode) {
  const int H = lr.height, W = lr.width, C = lr.channels;
  if (mode == FeatureMode::identity) {
    FeatureMap f(H, W, C);
    f.data = lr.data;
    return f;
  }

  FeatureMap f(H, W, C + 3);
  std::vector<double> luma(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      luma[static_cast<std::size_t>(y) * W + x] = luma_at(lr, y, x);

  auto L = [&](int y, int x) {
    y = std::clamp(y, 0, H - 1);
    x = std::clamp(x, 0, W - 1);
    return luma[static_cast<std::size_t>(y) * W + x];
  };

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t base =
          (static_cast<std::size_t>(y) * W + x) * (C + 3);
      for (int c = 0; c < C; ++c) f.data[base + c] = lr.at(y, x, c);
      f.data[base + C] = static_cast<float>((L(y, x + 1) - L(y, x - 1)) / 2.0);
      f.data[base + C + 1] =
          static_cast<float>((L(y + 1, x) - L(y - 1, x)) / 2.0);
      double sum = 0.0, sum2 = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const double v = L(y + dy, x + dx);
          sum += v;
          sum2 += v * v;
        }
      const double mean = sum / 9.0;
      f.data[base + C + 2] = static_cast<float>(std::max(sum2 / 9.0 - mean * mean, 0.0));
    }
  return f;
}

namespace errnet {

Tensor tensor_from_features(const FeatureMap& f) {
  Tensor t(1, f.height, f.width, f.channels);
  for (std::size_t i = 0; i < f.data.size(); ++i) t.v[i] = f.data[i];
  return t;
}

ScalarMap scalar_map_from_tensor(const Tensor& t, int sample, MapUnit unit) {
  if (t.c != 1) throw format_error("scalar_map_from_tensor: C != 1");
  if (sample < 0 || sample >= t.n)
    throw format_error("scalar_map_from_tensor: bad sample index");
  ScalarMap m(t.h, t.w, unit);
  const std::size_t off = static_cast<std::size_t>(sample) * t.h * t.w;
  for (std::size_t p = 0; p < m.size(); ++p)
    m.data[p] = static_cast<float>(t.v[off + p]);
  return m;
}

ErrNetParams make_errnet(int n_blocks, int width, int in_channels, int scale,
                         std::uint64_t seed, std::uint32_t flags) {
  if (n_blocks < 1 || width < 1 || in_channels < 1 || scale < 1)
    throw format_error("make_errnet: bad architecture");
  ErrNetParams p;
  p.n_blocks = n_blocks;
  p.width = width;
  p.in_channels = in_channels;
  p.scale = scale;
  p.flags = flags;
  Rng rng(derive_seed(seed, 0x1217ull));
  p.blocks.resize(static_cast<std::size_t>(n_blocks));
  for (int b = 0; b < n_blocks; ++b) {
    ErrNetParams::Block& blk = p.blocks[b];
    const int cin = p.block_in_channels(b);
    const double bound = std::sqrt(6.0 / (9.0 * cin));
    blk.conv_w.resize(static_cast<std::size_t>(width) * 9 * cin);
    for (float& w : blk.conv_w)
      w = static_cast<float>(rng.uniform(-bound, bound));
    blk.conv_b.assign(width, 0.0f);
    blk.gamma.assign(width, 1.0f);
    blk.beta.assign(width, 0.0f);
    blk.run_mean.assign(width, 0.0f);
    blk.run_var.assign(width, 1.0f);
  }
  const double head_bound = std::sqrt(6.0 / width);
  p.head_w.resize(width);
  for (float& w : p.head_w)
    w = static_cast<float>(rng.uniform(-head_bound, head_bound));
  p.head_b.assign(1, 0.0f);
  return p;
}

std::size_t param_count(const ErrNetParams& p) {
  std::size_t n = 0;
  for (const auto& b : p.blocks)
    n += b.conv_w.size() + b.conv_b.size() + b.gamma.size() + b.beta.size();
  return n + p.head_w.size() + p.head_b.size();
}

// ---- bicubic upsample and adjoint ----

namespace {

// Horizontal then vertical gather using the shared Keys-kernel taps.
Tensor resample_cols(const Tensor& in, const std::vector<BicubicTap>& taps,
                     int dst_w) {
  Tensor out(in.n, in.h, dst_w, in.c);
  for (int i = 0; i < in.n; ++i)
    for (int y = 0; y < in.h; ++y)
      for (int x = 0; x < dst_w; ++x) {
        const BicubicTap& t = taps[x];
        for (int ch = 0; ch < in.c; ++ch) {
          double acc = 0.0;
          for (int k = 0; k < 4; ++k)
            acc += t.weight[k] * in.at(i, y, t.index[k], ch);
          out.at(i, y, x, ch) = acc;
        }
      }
  return out;
}

Tensor resample_rows(const Tensor& in, const std::vector<BicubicTap>& taps,
                     int dst_h) {
  Tensor out(in.n, dst_h, in.w, in.c);
  for (int i = 0; i < in.n; ++i)
    for (int y = 0; y < dst_h; ++y) {
      const BicubicTap& t = taps[y];
      for (int x = 0; x < in.w; ++x)
        for (int ch = 0; ch < in.c; ++ch) {
          double acc = 0.0;
          for (int k = 0; k < 4; ++k)
            acc += t.weight[k] * in.at(i, t.index[k], x, ch);
          out.at(i, y, x, ch) = acc;
        }
    }
  return out;
}

// Reverse plan: for each source index, the (dst, weight) pairs touching it,
// in ascending dst order so adjoint gathers are deterministic.
std::vector<std::vector<std::pair<int, double>>> reverse_taps(
    const std::vector<BicubicTap>& taps, int src_n) {
  std::vector<std::vector<std::pair<int, double>>> rev(
      static_cast<std::size_t>(src_n));
  for (int d = 0; d < static_cast<int>(taps.size()); ++d)
    for (int k = 0; k < 4; ++k)
      rev[taps[d].index[k]].emplace_back(d, taps[d].weight[k]);
  return rev;
}

Tensor adjoint_cols(const Tensor& grad,
                    const std::vector<std::vector<std::pair<int, double>>>& rev,
                    int src_w) {
  Tensor out(grad.n, grad.h, src_w, grad.c);
  for (int i = 0; i < grad.n; ++i)
    for (int y = 0; y < grad.h; ++y)
      for (int x = 0; x < src_w; ++x)
        for (int ch = 0; ch < grad.c; ++ch) {
          double acc = 0.0;
          for (const auto& [d, w] : rev[x]) acc += w * grad.at(i, y, d, ch);
          out.at(i, y, x, ch) = acc;
        }
  return out;
}

Tensor adjoint_rows(const Tensor& grad,
                    const std::vector<std::vector<std::pair<int, double>>>& rev,
                    int src_h) {
  Tensor out(grad.n, src_h, grad.w, grad.c);
  for (int i = 0; i < grad.n; ++i)
    for (int y = 0; y < src_h; ++y)
      for (int x = 0; x < grad.w; ++x)
        for (int ch = 0; ch < grad.c; ++ch) {
          double acc = 0.0;
          for (const auto& [d, w] : rev[y]) acc += w * grad.at(i, d, x, ch);
          out.at(i, y, x, ch) = acc;
        }
  return out;
}

}  // namespace

Tensor upsample_bicubic(const Tensor& in, int scale) {
  if (scale < 1) throw format_error("upsample_bicubic: bad scale");
  if (scale == 1) return in;
  const auto col_taps = bicubic_axis_taps(in.w, in.w * scale);
  const auto row_taps = bicubic_axis_taps(in.h, in.h * scale);
  return resample_rows(resample_cols(in, col_taps, in.w * scale), row_taps,
                       in.h * scale);
}

Tensor upsample_bicubic_adjoint(const Tensor& grad, int src_h, int src_w,
                                int scale) {
  if (grad.h != src_h * scale || grad.w != src_w * scale)
    throw format_error("upsample_bicubic_adjoint: shape mismatch");
  if (scale == 1) return grad;
  const auto col_rev = reverse_taps(bicubic_axis_taps(src_w, grad.w), src_w);
  const auto row_rev = reverse_taps(bicubic_axis_taps(src_h, grad.h), src_h);
  return adjoint_cols(adjoint_rows(grad, row_rev, src_h), col_rev, src_w);
}

// ---- conv / relu / batch norm ----

Tensor conv3x3_forward(const Tensor& in, const std::vector<float>& w,
                       const std::vector<float>& b, int out_channels,
                       int threads) {
  const int cin = in.c;
  if (w.size() != static_cast<std::size_t>(out_channels) * 9 * cin ||
      b.size() != static_cast<std::size_t>(out_channels))
    throw format_error("conv3x3: weight shape mismatch");
  Tensor out(in.n, in.h, in.w, out_channels);
  parallel_for(static_cast<std::size_t>(in.n) * in.h, threads,
               [&](std::size_t row) {
    const int i = static_cast<int>(row / in.h);
    const int y = static_cast<int>(row % in.h);
    for (int x = 0; x < in.w; ++x)
      for (int o = 0; o < out_channels; ++o) {
        double acc = b[o];
        const float* wo = w.data() + static_cast<std::size_t>(o) * 9 * cin;
        for (int ky = 0; ky < 3; ++ky) {
          const int yy = y + ky - 1;
          if (yy < 0 || yy >= in.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int xx = x + kx - 1;
            if (xx < 0 || xx >= in.w) continue;
            const double* src = &in.v[in.idx(i, yy, xx, 0)];
            const float* wk = wo + (ky * 3 + kx) * cin;
            for (int ci = 0; ci < cin; ++ci) acc += wk[ci] * src[ci];
          }
        }
        out.at(i, y, x, o) = acc;
      }
  });
  return out;
}

void conv3x3_backward(const Tensor& in, const Tensor& dout,
                      const std::vector<float>& w, std::vector<double>& dw,
                      std::vector<double>& db, Tensor& din, int threads) {
  const int cin = in.c;
  const int cout = dout.c;
  dw.assign(static_cast<std::size_t>(cout) * 9 * cin, 0.0);
  db.assign(static_cast<std::size_t>(cout), 0.0);
  din = Tensor(in.n, in.h, in.w, cin);

  // dW and db: one output channel per work item, serial over pixels inside.
  parallel_for(static_cast<std::size_t>(cout), threads, [&](std::size_t oo) {
    const int o = static_cast<int>(oo);
    double* dwo = dw.data() + static_cast<std::size_t>(o) * 9 * cin;
    double acc_b = 0.0;
    for (int i = 0; i < in.n; ++i)
      for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) {
          const double d = dout.at(i, y, x, o);
          acc_b += d;
          for (int ky = 0; ky < 3; ++ky) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= in.h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int xx = x + kx - 1;
              if (xx < 0 || xx >= in.w) continue;
              const double* src = &in.v[in.idx(i, yy, xx, 0)];
              double* dst = dwo + (ky * 3 + kx) * cin;
              for (int ci = 0; ci < cin; ++ci) dst[ci] += d * src[ci];
            }
          }
        }
    db[o] = acc_b;
  });

  // din: gather formulation, parallel over rows.
  parallel_for(static_cast<std::size_t>(in.n) * in.h, threads,
               [&](std::size_t row) {
    const int i = static_cast<int>(row / in.h);
    const int y = static_cast<int>(row % in.h);
    for (int x = 0; x < in.w; ++x) {
      double* dst = &din.v[din.idx(i, y, x, 0)];
      for (int ky = 0; ky < 3; ++ky) {
        const int yy = y - (ky - 1);
        if (yy < 0 || yy >= in.h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int xx = x - (kx - 1);
          if (xx < 0 || xx >= in.w) continue;
          const double* dsrc = &dout.v[dout.idx(i, yy, xx, 0)];
          for (int o = 0; o < cout; ++o) {
            const double d = dsrc[o];
            const float* wk =
                w.data() + (static_cast<std::size_t>(o) * 9 + ky * 3 + kx) * cin;
            for (int ci = 0; ci < cin; ++ci) dst[ci] += d * wk[ci];
          }
        }
      }
    }
  });
}

Tensor relu(const Tensor& z) {
  Tensor out = z;
  for (double& v : out.v) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor bn_train_forward(const Tensor& a, const std::vector<float>& gamma,
                        const std::vector<float>& beta, double eps,
                        std::vector<double>& mean, std::vector<double>& var) {
  const int C = a.c;
  const std::size_t count = a.size() / C;
  mean.assign(C, 0.0);
  var.assign(C, 0.0);
  for (std::size_t p = 0; p < count; ++p)
    for (int c = 0; c < C; ++c) mean[c] += a.v[p * C + c];
  for (int c = 0; c < C; ++c) mean[c] /= static_cast<double>(count);
  for (std::size_t p = 0; p < count; ++p)
    for (int c = 0; c < C; ++c) {
      const double d = a.v[p * C + c] - mean[c];
      var[c] += d * d;
    }
  for (int c = 0; c < C; ++c) var[c] /= static_cast<double>(count);

  Tensor out(a.n, a.h, a.w, C);
  std::vector<double> inv_std(C), g(C), bt(C);
  for (int c = 0; c < C; ++c) {
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    g[c] = gamma[c];
    bt[c] = beta[c];
  }
  for (std::size_t p = 0; p < count; ++p)
    for (int c = 0; c < C; ++c)
      out.v[p * C + c] = g[c] * (a.v[p * C + c] - mean[c]) * inv_std[c] + bt[c];
  return out;
}

Tensor bn_eval_forward(const Tensor& a, const std::vector<float>& gamma,
                       const std::vector<float>& beta,
                       const std::vector<float>& run_mean,
                       const std::vector<float>& run_var, double eps) {
  const int C = a.c;
  Tensor out(a.n, a.h, a.w, C);
  std::vector<double> scale(C), shift(C);
  for (int c = 0; c < C; ++c) {
    const double inv_std = 1.0 / std::sqrt(static_cast<double>(run_var[c]) + eps);
    scale[c] = gamma[c] * inv_std;
    shift[c] = beta[c] - scale[c] * run_mean[c];
  }
  const std::size_t count = a.size() / C;
  for (std::size_t p = 0; p < count; ++p)
    for (int c = 0; c < C; ++c)
      out.v[p * C + c] = scale[c] * a.v[p * C + c] + shift[c];
  return out;
}

void bn_train_backward(const Tensor& a, const Tensor& dy,
                       const std::vector<float>& gamma,
                       const std::vector<double>& mean,
                       const std::vector<double>& var, double eps,
                       std::vector<double>& dgamma, std::vector<double>& dbeta,
                       Tensor& da) {
  const int C = a.c;
  const std::size_t count = a.size() / C;
  const double n = static_cast<double>(count);
  dgamma.assign(C, 0.0);
  dbeta.assign(C, 0.0);
  da = Tensor(a.n, a.h, a.w, C);

  std::vector<double> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);

  // Accumulate sum(dxhat) and sum(dxhat * xhat) per channel.
  std::vector<double> sum_dxhat(C, 0.0), sum_dxhat_xhat(C, 0.0);
  for (std::size_t p = 0; p < count; ++p)
    for (int c = 0; c < C; ++c) {
      const double xhat = (a.v[p * C + c] - mean[c]) * inv_std[c];
      const double dyv = dy.v[p * C + c];
      dgamma[c] += dyv * xhat;
      dbeta[c] += dyv;
      const double dxhat = dyv * gamma[c];
      sum_dxhat[c] += dxhat;
      sum_dxhat_xhat[c] += dxhat * xhat;
    }
  for (std::size_t p = 0; p < count; ++p)
    for (int c = 0; c < C; ++c) {
      const double xhat = (a.v[p * C + c] - mean[c]) * inv_std[c];
      const double dxhat = dy.v[p * C + c] * gamma[c];
      da.v[p * C + c] = inv_std[c] / n *
                        (n * dxhat - sum_dxhat[c] - xhat * sum_dxhat_xhat[c]);
    }
}

// ---- network forward/backward ----

namespace {

struct BlockOut {
  Tensor y;  // block output
};

// Applies one block in the configured op order from the cached conv output.
Tensor block_from_z(const ErrNetParams& p, int b, const Tensor& z,
                    const std::vector<double>& mean,
                    const std::vector<double>& var) {
  const auto& blk = p.blocks[b];
  const double eps = p.epsilon;
  const int C = z.c;
  Tensor out(z.n, z.h, z.w, C);
  std::vector<double> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  const bool bn_first = (p.flags & kFlagBnBeforeRelu) != 0;
  const std::size_t count = z.size() / C;
  for (std::size_t pix = 0; pix < count; ++pix)
    for (int c = 0; c < C; ++c) {
      const double zv = z.v[pix * C + c];
      double v;
      if (bn_first) {
        v = blk.gamma[c] * (zv - mean[c]) * inv_std[c] + blk.beta[c];
        v = v > 0.0 ? v : 0.0;
      } else {
        const double av = zv > 0.0 ? zv : 0.0;
        v = blk.gamma[c] * (av - mean[c]) * inv_std[c] + blk.beta[c];
      }
      out.v[pix * C + c] = v;
    }
  return out;
}

Tensor head_forward(const ErrNetParams& p, const Tensor& in) {
  Tensor out(in.n, in.h, in.w, 1);
  const int C = in.c;
  const std::size_t count = in.size() / C;
  for (std::size_t pix = 0; pix < count; ++pix) {
    double acc = p.head_b[0];
    const double* src = &in.v[pix * C];
    for (int c = 0; c < C; ++c) acc += static_cast<double>(p.head_w[c]) * src[c];
    out.v[pix] = acc;
  }
  return out;
}

}  // namespace

Tensor forward(ErrNetParams& params, const Tensor& feats, Mode mode,
               int threads, ForwardCache* cache) {
  if (feats.c != params.in_channels)
    throw format_error("forward: feature channels do not match params");
  const bool bn_first = (params.flags & kFlagBnBeforeRelu) != 0;

  Tensor x = upsample_bicubic(feats, params.scale);
  if (cache) {
    cache->x0 = x;
    cache->z.clear();
    cache->mean.assign(params.n_blocks, {});
    cache->var.assign(params.n_blocks, {});
  }

  for (int b = 0; b < params.n_blocks; ++b) {
    auto& blk = params.blocks[b];
    Tensor z = conv3x3_forward(x, blk.conv_w, blk.conv_b, params.width, threads);
    std::vector<double> mean, var;
    if (mode == Mode::train) {
      const Tensor& bn_in = bn_first ? z : relu(z);
      Tensor normed = bn_train_forward(bn_in, blk.gamma, blk.beta,
                                       params.epsilon, mean, var);
      // Momentum-0.1 running stats (biased variance, matching train mode).
      for (int c = 0; c < params.width; ++c) {
        blk.run_mean[c] =
            static_cast<float>(0.9 * blk.run_mean[c] + 0.1 * mean[c]);
        blk.run_var[c] =
            static_cast<float>(0.9 * blk.run_var[c] + 0.1 * var[c]);
      }
      x = bn_first ? relu(normed) : std::move(normed);
      if (cache) {
        cache->z.push_back(std::move(z));
        cache->mean[b] = std::move(mean);
        cache->var[b] = std::move(var);
      }
    } else {
      const Tensor& bn_in = bn_first ? z : relu(z);
      Tensor normed = bn_eval_forward(bn_in, blk.gamma, blk.beta, blk.run_mean,
                                      blk.run_var, params.epsilon);
      x = bn_first ? relu(normed) : std::move(normed);
    }
  }
  return head_forward(params, x);
}

ScalarMap predict_scores(ErrNetParams& params, const FeatureMap& feat,
                         int threads) {
  const Tensor out =
      forward(params, tensor_from_features(feat), Mode::eval, threads);
  return scalar_map_from_tensor(out, 0, MapUnit::squared_intensity);
}

double loss(const Tensor& pred, const Tensor& target) {
  if (pred.size() != target.size() || pred.c != 1 || target.c != 1)
    throw format_error("loss: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = target.v[i] - pred.v[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

double backward(ErrNetParams& params, const Tensor& feats,
                const Tensor& target, ErrNetGrads& grads, int threads,
                Tensor* dfeats) {
  const bool bn_first = (params.flags & kFlagBnBeforeRelu) != 0;
  ForwardCache cache;
  const Tensor pred = forward(params, feats, Mode::train, threads, &cache);
  const double loss_value = loss(pred, target);

  grads.blocks.assign(static_cast<std::size_t>(params.n_blocks), {});
  grads.head_w.assign(params.head_w.size(), 0.0);
  grads.head_b.assign(1, 0.0);

  // dL/dpred for the mean-squared objective.
  Tensor dout(pred.n, pred.h, pred.w, 1);
  const double inv = 2.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i)
    dout.v[i] = inv * (pred.v[i] - target.v[i]);

  // Head backward; its input is the last block's output (recomputed).
  const Tensor head_in =
      params.n_blocks > 0
          ? block_from_z(params, params.n_blocks - 1,
                         cache.z[params.n_blocks - 1],
                         cache.mean[params.n_blocks - 1],
                         cache.var[params.n_blocks - 1])
          : cache.x0;
  const int C = head_in.c;
  const std::size_t count = head_in.size() / C;
  Tensor dx(head_in.n, head_in.h, head_in.w, C);
  for (std::size_t pix = 0; pix < count; ++pix) {
    const double d = dout.v[pix];
    grads.head_b[0] += d;
    const double* src = &head_in.v[pix * C];
    double* dst = &dx.v[pix * C];
    for (int c = 0; c < C; ++c) {
      grads.head_w[c] += d * src[c];
      dst[c] = d * static_cast<double>(params.head_w[c]);
    }
  }

  for (int b = params.n_blocks - 1; b >= 0; --b) {
    const auto& blk = params.blocks[b];
    const Tensor& z = cache.z[b];
    const auto& mean = cache.mean[b];
    const auto& var = cache.var[b];
    const Tensor block_in =
        b == 0 ? cache.x0
               : block_from_z(params, b - 1, cache.z[b - 1], cache.mean[b - 1],
                              cache.var[b - 1]);

    auto& gblk = grads.blocks[b];
    Tensor dz;
    if (bn_first) {
      // y = relu(bn(z)): mask dy by bn(z) > 0, then BN backward.
      Tensor bn_out(z.n, z.h, z.w, z.c);
      {
        std::vector<double> inv_std(z.c);
        for (int c = 0; c < z.c; ++c)
          inv_std[c] = 1.0 / std::sqrt(var[c] + params.epsilon);
        const std::size_t cnt = z.size() / z.c;
        for (std::size_t pix = 0; pix < cnt; ++pix)
          for (int c = 0; c < z.c; ++c)
            bn_out.v[pix * z.c + c] =
                blk.gamma[c] * (z.v[pix * z.c + c] - mean[c]) * inv_std[c] +
                blk.beta[c];
      }
      Tensor dbn = dx;
      for (std::size_t i = 0; i < dbn.size(); ++i)
        if (bn_out.v[i] <= 0.0) dbn.v[i] = 0.0;
      bn_train_backward(z, dbn, blk.gamma, mean, var, params.epsilon,
                        gblk.gamma, gblk.beta, dz);
    } else {
      // y = bn(relu(z)): BN backward on a=relu(z), then ReLU mask.
      const Tensor a = relu(z);
      Tensor da;
      bn_train_backward(a, dx, blk.gamma, mean, var, params.epsilon,
                        gblk.gamma, gblk.beta, da);
      dz = std::move(da);
      for (std::size_t i = 0; i < dz.size(); ++i)
        if (z.v[i] <= 0.0) dz.v[i] = 0.0;
    }

    Tensor din;
    conv3x3_backward(block_in, dz, blk.conv_w, gblk.conv_w, gblk.conv_b, din,
                     threads);
    dx = std::move(din);
  }

  if (dfeats)
    *dfeats = upsample_bicubic_adjoint(dx, feats.h, feats.w, params.scale);
  return loss_value;
}

AdamState make_adam_state(const ErrNetParams& p) {
  AdamState s;
  auto add = [&](std::size_t n) {
    s.m.emplace_back(n, 0.0);
    s.v.emplace_back(n, 0.0);
  };
  for (const auto& b : p.blocks) {
    add(b.conv_w.size());
    add(b.conv_b.size());
    add(b.gamma.size());
    add(b.beta.size());
  }
  add(p.head_w.size());
  add(p.head_b.size());
  return s;
}

namespace {

void adam_update(std::vector<float>& param, const std::vector<double>& grad,
                 std::vector<double>& m, std::vector<double>& v, double lr,
                 const TrainConfig& cfg, double bc1, double bc2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] = static_cast<float>(
        param[i] - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
  }
}

bool all_finite(const std::vector<double>& v) {
  for (const double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

double backward_step(ErrNetParams& params, const Tensor& feats,
                     const Tensor& target, AdamState& state, double lr,
                     const TrainConfig& cfg, int threads) {
  ErrNetGrads grads;
  const double loss_value = backward(params, feats, target, grads, threads);
  if (!std::isfinite(loss_value))
    throw numeric_error("backward_step: non-finite loss");
  for (const auto& b : grads.blocks)
    if (!all_finite(b.conv_w) || !all_finite(b.conv_b) ||
        !all_finite(b.gamma) || !all_finite(b.beta))
      throw numeric_error("backward_step: non-finite gradient");
  if (!all_finite(grads.head_w) || !all_finite(grads.head_b))
    throw numeric_error("backward_step: non-finite gradient");

  if (lr == 0.0) return loss_value;

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, state.step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, state.step);
  std::size_t slot = 0;
  for (int b = 0; b < params.n_blocks; ++b) {
    auto& blk = params.blocks[b];
    const auto& g = grads.blocks[b];
    adam_update(blk.conv_w, g.conv_w, state.m[slot], state.v[slot], lr, cfg,
                bc1, bc2);
    ++slot;
    adam_update(blk.conv_b, g.conv_b, state.m[slot], state.v[slot], lr, cfg,
                bc1, bc2);
    ++slot;
    adam_update(blk.gamma, g.gamma, state.m[slot], state.v[slot], lr, cfg, bc1,
                bc2);
    ++slot;
    adam_update(blk.beta, g.beta, state.m[slot], state.v[slot], lr, cfg, bc1,
                bc2);
    ++slot;
  }
  adam_update(params.head_w, grads.head_w, state.m[slot], state.v[slot], lr,
              cfg, bc1, bc2);
  ++slot;
  adam_update(params.head_b, grads.head_b, state.m[slot], state.v[slot], lr,
              cfg, bc1, bc2);
  return loss_value;
}

TrainResult train(const DatasetManifest& manifest, const TrainSettings& s) {
  struct VideoBatch {
    Tensor feats;
    Tensor target;
  };

  // Load every train-split frame group up front; desk scale keeps this small.
  std::vector<VideoBatch> batches;
  int scale = 0, feat_channels = 0;
  for (const VideoRecord& video : manifest.videos) {
    if (video.split != "train") continue;
    if (s.max_train_videos > 0 &&
        batches.size() >= static_cast<std::size_t>(s.max_train_videos))
      break;
    if (video.frames.empty()) continue;

    VideoBatch vb;
    for (std::size_t f = 0; f < video.frames.size(); ++f) {
      const FrameRecord& fr = video.frames[f];
      if (fr.lr.empty() || !fr.sr)
        throw format_error("train: frame lacks lr or sr (run the degrade/sr "
                           "steps first)");
      const Image hr = read_image(manifest.resolve(fr.hr));
      const Image lr = read_image(manifest.resolve(fr.lr));
      const Image sr = read_image(manifest.resolve(*fr.sr));
      FeatureMap feat;
      if (fr.feat) {
        const EmapTensor t = read_emap(manifest.resolve(*fr.feat));
        feat.height = t.height;
        feat.width = t.width;
        feat.channels = t.channels;
        feat.data = t.data;
      } else {
        feat = extract_features(lr, s.feature_mode);
      }
      const ScalarMap se = squared_error_map(sr, hr);

      if (hr.height % lr.height != 0 ||
          hr.height / lr.height != hr.width / lr.width)
        throw format_error("train: hr/lr dims not an integer scale");
      const int this_scale = hr.height / lr.height;
      if (scale == 0) scale = this_scale;
      if (feat_channels == 0) feat_channels = feat.channels;
      if (this_scale != scale || feat.channels != feat_channels)
        throw format_error("train: inconsistent scale or feature channels");

      if (f == 0) {
        vb.feats = Tensor(static_cast<int>(video.frames.size()), feat.height,
                          feat.width, feat.channels);
        vb.target = Tensor(static_cast<int>(video.frames.size()), se.height,
                           se.width, 1);
      }
      const std::size_t foff =
          static_cast<std::size_t>(f) * feat.height * feat.width *
          feat.channels;
      for (std::size_t i = 0; i < feat.data.size(); ++i)
        vb.feats.v[foff + i] = feat.data[i];
      const std::size_t toff = static_cast<std::size_t>(f) * se.size();
      for (std::size_t i = 0; i < se.size(); ++i)
        vb.target.v[toff + i] = se.data[i];
    }
    batches.push_back(std::move(vb));
  }
  if (batches.empty()) throw format_error("train: no train-split videos");

  TrainResult result;
  result.params = make_errnet(s.n_blocks, s.width, feat_channels, scale,
                              derive_seed(s.config.seed, 0x1217ull), s.flags);
  AdamState adam = make_adam_state(result.params);

  const int n_videos = static_cast<int>(batches.size());
  const long total_steps = static_cast<long>(s.config.epochs) * n_videos;
  long step = 0;
  for (int epoch = 0; epoch < s.config.epochs; ++epoch) {
    std::vector<int> order(batches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng rng(derive_seed(s.config.seed, 0xE90C00ull + epoch));
    rng.shuffle(order);

    double epoch_loss = 0.0;
    for (const int vi : order) {
      const double lr_t =
          s.config.base_lr * 0.5 *
          (1.0 + std::cos(3.141592653589793 * static_cast<double>(step) /
                          static_cast<double>(total_steps)));
      epoch_loss += backward_step(result.params, batches[vi].feats,
                                  batches[vi].target, adam, lr_t, s.config,
                                  s.threads);
      ++step;
    }
    result.epoch_loss.push_back(epoch_loss / n_videos);
  }
  return result;
}

// ---- serialization ----

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                              static_cast<unsigned char>((v >> 8) & 0xFF),
                              static_cast<unsigned char>((v >> 16) & 0xFF),
                              static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_floats(std::ostream& os, const std::vector<float>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * 4));
}

}  // namespace

void save_params(const ErrNetParams& p, const fs::path& path) {
  atomic_write(path, [&](std::ostream& os) {
    os.write("ENET", 4);
    os.put(1);
    put_u32(os, static_cast<std::uint32_t>(p.n_blocks));
    put_u32(os, static_cast<std::uint32_t>(p.width));
    put_u32(os, static_cast<std::uint32_t>(p.in_channels));
    put_u32(os, static_cast<std::uint32_t>(p.scale));
    put_u32(os, p.flags);
    put_floats(os, {p.epsilon});
    for (const auto& b : p.blocks) {
      put_floats(os, b.conv_w);
      put_floats(os, b.conv_b);
      put_floats(os, b.gamma);
      put_floats(os, b.beta);
      put_floats(os, b.run_mean);
      put_floats(os, b.run_var);
    }
    put_floats(os, p.head_w);
    put_floats(os, p.head_b);
  });
}

ErrNetParams load_params(const fs::path& path) {
  const std::vector<unsigned char> bytes = read_file_bytes(path);
  if (bytes.size() < 25) throw format_error("enet: file too small");
  if (std::memcmp(bytes.data(), "ENET", 4) != 0)
    throw format_error("enet: bad magic in " + path.string());
  if (bytes[4] != 1)
    throw format_error("enet: unsupported version " + std::to_string(bytes[4]));

  std::size_t off = 5;
  auto get_u32 = [&]() {
    const std::uint32_t v = static_cast<std::uint32_t>(bytes[off]) |
                            (static_cast<std::uint32_t>(bytes[off + 1]) << 8) |
                            (static_cast<std::uint32_t>(bytes[off + 2]) << 16) |
                            (static_cast<std::uint32_t>(bytes[off + 3]) << 24);
    off += 4;
    return v;
  };

  ErrNetParams p;
  p.n_blocks = static_cast<int>(get_u32());
  p.width = static_cast<int>(get_u32());
  p.in_channels = static_cast<int>(get_u32());
  p.scale = static_cast<int>(get_u32());
  p.flags = get_u32();
  if (p.n_blocks < 1 || p.n_blocks > 1024 || p.width < 1 || p.width > 65536 ||
      p.in_channels < 1 || p.in_channels > 65536 || p.scale < 1 ||
      p.scale > 256)
    throw format_error("enet: implausible architecture header");

  std::size_t expected = 1;  // epsilon
  for (int b = 0; b < p.n_blocks; ++b) {
    const std::size_t cin = b == 0 ? p.in_channels : p.width;
    expected += static_cast<std::size_t>(p.width) * 9 * cin +
                5 * static_cast<std::size_t>(p.width);
  }
  expected += p.width + 1;
  if (bytes.size() != off + expected * 4)
    throw format_error("enet: header/payload length mismatch in " +
                       path.string());

  auto get_floats = [&](std::size_t n) {
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes.data() + off, n * 4);
    off += n * 4;
    return v;
  };

  p.epsilon = get_floats(1)[0];
  p.blocks.resize(static_cast<std::size_t>(p.n_blocks));
  for (int b = 0; b < p.n_blocks; ++b) {
    auto& blk = p.blocks[b];
    const std::size_t cin = b == 0 ? p.in_channels : p.width;
    blk.conv_w = get_floats(static_cast<std::size_t>(p.width) * 9 * cin);
    blk.conv_b = get_floats(p.width);
    blk.gamma = get_floats(p.width);
    blk.beta = get_floats(p.width);
    blk.run_mean = get_floats(p.width);
    blk.run_var = get_floats(p.width);
  }
  p.head_w = get_floats(p.width);
  p.head_b = get_floats(1);

  for (const auto& blk : p.blocks)
    for (const float v : blk.run_var)
      if (v < 0.0f) throw format_error("enet: negative running variance");
  return p;
}

}  // namespace errnet
}  // namespace cfm
