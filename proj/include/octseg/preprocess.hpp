#pragma once

// Stripe tiling, training-set normalization, pad-to-multiple-of-16 with the
// matching crop, and stripe reassembly.

#include <span>

#include "octseg/core.hpp"
#include "octseg/tensor.hpp"

#include <json.hpp>

namespace octseg {

// ---------------------------------------------------------------------------
// NormStats
// ---------------------------------------------------------------------------

struct NormStats {
  double mean = 0.0;
  double std_dev = 1.0;
};

inline void to_json(nlohmann::json& j, const NormStats& s) {
  j = {{"mean", s.mean}, {"std", s.std_dev}};
}

inline void from_json(const nlohmann::json& j, NormStats& s) {
  j.at("mean").get_to(s.mean);
  j.at("std").get_to(s.std_dev);
}

// Global scalar statistics over every pixel of the training frames.
// Population std, floored at 1e-6.
inline NormStats fit_norm(std::span<const Frame> train_frames) {
  if (train_frames.empty()) throw UsageError("fit_norm: empty training sequence");
  double sum = 0.0, sum_sq = 0.0;
  size_t count = 0;
  for (const Frame& f : train_frames) {
    for (float v : f.pixels) {
      sum += v;
      sum_sq += static_cast<double>(v) * v;
    }
    count += f.pixel_count();
  }
  NormStats stats;
  stats.mean = sum / static_cast<double>(count);
  double var = sum_sq / static_cast<double>(count) - stats.mean * stats.mean;
  stats.std_dev = std::max(std::sqrt(std::max(var, 0.0)), 1e-6);
  return stats;
}

inline void normalize_inplace(std::vector<float>& pixels, const NormStats& stats) {
  const float mean = static_cast<float>(stats.mean);
  const float inv = static_cast<float>(1.0 / stats.std_dev);
  for (float& v : pixels) v = (v - mean) * inv;
}

// ---------------------------------------------------------------------------
// Stripe tiling
// ---------------------------------------------------------------------------

// Eight non-overlapping 512x64 vertical stripes; stripe i covers columns
// [64i, 64i+64).
inline std::vector<Stripe> tile(const Frame& frame) {
  if (frame.height_px != kFrameHeight || frame.width_px != kFrameWidth)
    throw DimensionError("tile: frame must be 512x512");
  std::vector<Stripe> stripes(kStripesPerFrame);
  for (int i = 0; i < kStripesPerFrame; ++i) {
    Stripe& s = stripes[i];
    s.pixels.resize(static_cast<size_t>(kFrameHeight) * kStripeWidth);
    s.parent_frame_id = frame.frame_id;
    s.stripe_index = i;
    const int col0 = i * kStripeWidth;
    for (int r = 0; r < kFrameHeight; ++r)
      std::copy_n(&frame.pixels[static_cast<size_t>(r) * kFrameWidth + col0], kStripeWidth,
                  &s.pixels[static_cast<size_t>(r) * kStripeWidth]);
  }
  return stripes;
}

// Same stripe geometry applied to a label map.
inline std::vector<LabelMap> tile_labels(const LabelMap& mask) {
  if (mask.height_px != kFrameHeight || mask.width_px != kFrameWidth)
    throw DimensionError("tile_labels: mask must be 512x512");
  std::vector<LabelMap> stripes(kStripesPerFrame, LabelMap(kFrameHeight, kStripeWidth));
  for (int i = 0; i < kStripesPerFrame; ++i) {
    const int col0 = i * kStripeWidth;
    for (int r = 0; r < kFrameHeight; ++r)
      std::copy_n(&mask.labels[static_cast<size_t>(r) * kFrameWidth + col0], kStripeWidth,
                  &stripes[i].labels[static_cast<size_t>(r) * kStripeWidth]);
  }
  return stripes;
}

// Inverse of tile for pixel stripes; used by roundtrip checks.
inline Frame untile(const std::vector<Stripe>& stripes) {
  if (stripes.size() != kStripesPerFrame)
    throw DimensionError("untile: need exactly 8 stripes");
  Frame frame(kFrameHeight, kFrameWidth);
  frame.frame_id = stripes[0].parent_frame_id;
  for (const Stripe& s : stripes) {
    if (s.height_px != kFrameHeight || s.width_px != kStripeWidth)
      throw DimensionError("untile: stripe has wrong dimensions");
    const int col0 = s.stripe_index * kStripeWidth;
    for (int r = 0; r < kFrameHeight; ++r)
      std::copy_n(&s.pixels[static_cast<size_t>(r) * kStripeWidth], kStripeWidth,
                  &frame.pixels[static_cast<size_t>(r) * kFrameWidth + col0]);
  }
  return frame;
}

// ---------------------------------------------------------------------------
// pad16 / crop
// ---------------------------------------------------------------------------

struct PadResult {
  std::vector<float> data;  // padded_h * padded_w
  int padded_h = 0;
  int padded_w = 0;
  int orig_h = 0;
  int orig_w = 0;
};

inline int next_multiple_of_16(int v) { return (v + 15) / 16 * 16; }

// Zero rows and columns are appended at the bottom and right so row indices
// of shallow tissue stay put.
inline PadResult pad16(const float* data, int h, int w) {
  if (h <= 0 || w <= 0) throw DimensionError("pad16: empty grid");
  PadResult out;
  out.orig_h = h;
  out.orig_w = w;
  out.padded_h = next_multiple_of_16(h);
  out.padded_w = next_multiple_of_16(w);
  out.data.assign(static_cast<size_t>(out.padded_h) * out.padded_w, 0.0f);
  for (int r = 0; r < h; ++r)
    std::copy_n(data + static_cast<size_t>(r) * w, w,
                out.data.data() + static_cast<size_t>(r) * out.padded_w);
  return out;
}

inline PadResult pad16(const std::vector<float>& data, int h, int w) {
  if (data.size() != static_cast<size_t>(h) * w)
    throw DimensionError("pad16: buffer does not match dimensions");
  return pad16(data.data(), h, w);
}

// Retains the top-left h x w window of every channel.
inline TensorF crop(const TensorF& grid, int h, int w) {
  if (h > grid.h() || w > grid.w())
    throw DimensionError("crop: requested dims exceed grid");
  if (h == grid.h() && w == grid.w()) return grid;
  TensorF out(grid.n(), grid.c(), h, w);
  for (int n = 0; n < grid.n(); ++n)
    for (int c = 0; c < grid.c(); ++c) {
      const float* src = grid.ptr(n, c);
      float* dst = out.ptr(n, c);
      for (int r = 0; r < h; ++r)
        std::copy_n(src + static_cast<size_t>(r) * grid.w(), w,
                    dst + static_cast<size_t>(r) * w);
    }
  return out;
}

inline std::vector<float> crop_plane(const std::vector<float>& data, int padded_h, int padded_w,
                                     int h, int w) {
  if (h > padded_h || w > padded_w) throw DimensionError("crop: requested dims exceed grid");
  std::vector<float> out(static_cast<size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    std::copy_n(data.data() + static_cast<size_t>(r) * padded_w, w,
                out.data() + static_cast<size_t>(r) * w);
  return out;
}

// ---------------------------------------------------------------------------
// Stripe output reassembly
// ---------------------------------------------------------------------------

// Horizontal concatenation of exactly eight C x H x 64 grids in stripe order.
// Accepts one N=1 tensor per stripe; returns an N=1, C x H x 512 tensor.
inline TensorF reassemble(const std::vector<TensorF>& stripe_outputs) {
  if (stripe_outputs.size() != kStripesPerFrame)
    throw DimensionError("reassemble: need exactly 8 stripe outputs");
  const TensorF& first = stripe_outputs[0];
  const int C = first.c(), H = first.h(), W = first.w();
  for (const TensorF& t : stripe_outputs) {
    if (t.n() != 1) throw DimensionError("reassemble: stripe outputs must have N=1");
    if (t.c() != C || t.h() != H || t.w() != W)
      throw DimensionError("reassemble: mismatched stripe output dimensions");
  }
  TensorF out(1, C, H, W * kStripesPerFrame);
  for (int i = 0; i < kStripesPerFrame; ++i) {
    const TensorF& t = stripe_outputs[i];
    for (int c = 0; c < C; ++c) {
      const float* src = t.ptr(0, c);
      float* dst = out.ptr(0, c) + static_cast<size_t>(i) * W;
      for (int r = 0; r < H; ++r)
        std::copy_n(src + static_cast<size_t>(r) * W, W, dst + static_cast<size_t>(r) * out.w());
    }
  }
  return out;
}

// Packs normalized stripes into a B x 1 x H x W batch in stripe order.
inline TensorF pack_stripes(const std::vector<Stripe>& stripes) {
  if (stripes.empty()) return TensorF(0, 1, 0, 0);
  const int H = stripes[0].height_px, W = stripes[0].width_px;
  TensorF batch(static_cast<int>(stripes.size()), 1, H, W);
  for (size_t i = 0; i < stripes.size(); ++i) {
    if (stripes[i].height_px != H || stripes[i].width_px != W)
      throw DimensionError("pack_stripes: mismatched stripe dimensions");
    std::copy(stripes[i].pixels.begin(), stripes[i].pixels.end(),
              batch.ptr(static_cast<int>(i), 0));
  }
  return batch;
}

// Splits a B x C x H x W batch back into per-stripe N=1 tensors.
inline std::vector<TensorF> unpack_batch(const TensorF& batch) {
  std::vector<TensorF> out;
  out.reserve(batch.n());
  for (int n = 0; n < batch.n(); ++n) {
    TensorF t(1, batch.c(), batch.h(), batch.w());
    std::copy_n(batch.ptr(n, 0), batch.plane() * batch.c(), t.ptr(0, 0));
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace octseg
