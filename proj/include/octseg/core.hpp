#pragma once

// Core domain types for M-mode OCT layer segmentation: frames, label maps,
// probability maps, boundary traces and the stripe geometry shared by the
// rest of the library.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace octseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Conventions
// ---------------------------------------------------------------------------
// Class ids: 0 = above-cornea, 1 = cornea band, 2 = below Descemet's membrane.
// Images are row-major, row 0 = shallowest depth. Columns are A-scans.

inline constexpr int kNumClasses = 3;
inline constexpr int kFrameHeight = 512;
inline constexpr int kFrameWidth = 512;
inline constexpr int kStripeWidth = 64;
inline constexpr int kStripesPerFrame = kFrameWidth / kStripeWidth;
inline constexpr double kDefaultPixelPitchUm = 2.61;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : IoError {
  explicit ParseError(const std::string& msg) : IoError(msg) {}
};

struct CheckpointVersionError : IoError {
  explicit CheckpointVersionError(const std::string& msg) : IoError(msg) {}
};

// Violated caller contract (programming error, not input error).
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

// splitmix64 finalizer; decorrelates (seed, stream) pairs.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  return mix64(seed ^ mix64(stream));
}

// ---------------------------------------------------------------------------
// Frame
// ---------------------------------------------------------------------------

// One M-mode image: H x W intensities in [0,1] plus acquisition metadata.
struct Frame {
  std::vector<float> pixels;  // row-major, height_px * width_px
  int height_px = 0;
  int width_px = 0;
  double pixel_pitch_um = kDefaultPixelPitchUm;
  int64_t frame_id = 0;
  double timestamp_s = 0.0;

  Frame() = default;
  Frame(int h, int w) : pixels(static_cast<size_t>(h) * w, 0.0f), height_px(h), width_px(w) {}

  float& at(int r, int c) { return pixels[static_cast<size_t>(r) * width_px + c]; }
  float at(int r, int c) const { return pixels[static_cast<size_t>(r) * width_px + c]; }
  size_t pixel_count() const { return static_cast<size_t>(height_px) * width_px; }

  void validate() const {
    if (height_px <= 0 || width_px <= 0)
      throw DimensionError("Frame: non-positive dimensions");
    if (pixels.size() != pixel_count())
      throw DimensionError("Frame: pixel buffer does not match dimensions");
    if (pixel_pitch_um <= 0.0)
      throw ConfigError("Frame: pixel_pitch_um must be positive");
    for (float v : pixels)
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
        throw ConfigError("Frame: intensity outside [0,1]");
  }
};

// ---------------------------------------------------------------------------
// LabelMap
// ---------------------------------------------------------------------------

struct LabelMap {
  std::vector<uint8_t> labels;  // row-major
  int height_px = 0;
  int width_px = 0;
  int num_classes = kNumClasses;

  LabelMap() = default;
  LabelMap(int h, int w, int c = kNumClasses)
      : labels(static_cast<size_t>(h) * w, 0), height_px(h), width_px(w), num_classes(c) {}

  uint8_t& at(int r, int c) { return labels[static_cast<size_t>(r) * width_px + c]; }
  uint8_t at(int r, int c) const { return labels[static_cast<size_t>(r) * width_px + c]; }

  void validate() const {
    if (height_px <= 0 || width_px <= 0)
      throw DimensionError("LabelMap: non-positive dimensions");
    if (labels.size() != static_cast<size_t>(height_px) * width_px)
      throw DimensionError("LabelMap: label buffer does not match dimensions");
    for (uint8_t v : labels)
      if (v >= num_classes) throw ConfigError("LabelMap: class id out of range");
  }
};

// True iff every column is monotone non-decreasing in class id top to bottom
// (0-run, then 1-run, then 2-run; runs may be empty).
inline bool validate_ordered(const LabelMap& map) {
  for (int c = 0; c < map.width_px; ++c) {
    uint8_t prev = 0;
    for (int r = 0; r < map.height_px; ++r) {
      uint8_t v = map.at(r, c);
      if (v < prev) return false;
      prev = v;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// ProbMap
// ---------------------------------------------------------------------------

// Per-pixel class probabilities, planar class-major layout (C x H x W).
struct ProbMap {
  std::vector<float> probs;
  int height_px = 0;
  int width_px = 0;
  int num_classes = kNumClasses;

  ProbMap() = default;
  ProbMap(int h, int w, int c = kNumClasses)
      : probs(static_cast<size_t>(c) * h * w, 0.0f), height_px(h), width_px(w), num_classes(c) {}

  float& at(int k, int r, int c) {
    return probs[(static_cast<size_t>(k) * height_px + r) * width_px + c];
  }
  float at(int k, int r, int c) const {
    return probs[(static_cast<size_t>(k) * height_px + r) * width_px + c];
  }

  // Per-pixel sums must be 1 within tol.
  bool normalized(float tol = 1e-5f) const {
    for (int r = 0; r < height_px; ++r)
      for (int c = 0; c < width_px; ++c) {
        float s = 0.0f;
        for (int k = 0; k < num_classes; ++k) s += at(k, r, c);
        if (std::fabs(s - 1.0f) > tol) return false;
      }
    return true;
  }
};

// ---------------------------------------------------------------------------
// BoundaryTrace
// ---------------------------------------------------------------------------

// Per-column interface rows in pixels. Sub-pixel rows are kept as reals;
// dropout columns are explicit MISSING (nullopt), never sentinel values.
struct BoundaryTrace {
  std::vector<std::optional<double>> epi_row_px;
  std::vector<std::optional<double>> dm_row_px;
  double pixel_pitch_um = kDefaultPixelPitchUm;

  BoundaryTrace() = default;
  explicit BoundaryTrace(int width, double pitch = kDefaultPixelPitchUm)
      : epi_row_px(width), dm_row_px(width), pixel_pitch_um(pitch) {}

  int width() const { return static_cast<int>(epi_row_px.size()); }

  void validate(int height_px) const {
    if (epi_row_px.size() != dm_row_px.size())
      throw DimensionError("BoundaryTrace: interface arrays differ in width");
    for (int c = 0; c < width(); ++c) {
      const auto& e = epi_row_px[c];
      const auto& d = dm_row_px[c];
      if (e && (*e < 0.0 || *e >= height_px))
        throw ConfigError("BoundaryTrace: epi row out of range");
      if (d && (*d < 0.0 || *d >= height_px))
        throw ConfigError("BoundaryTrace: dm row out of range");
      if (e && d && *e > *d)
        throw ConfigError("BoundaryTrace: epi below dm");
    }
  }

  bool operator==(const BoundaryTrace& o) const {
    return epi_row_px == o.epi_row_px && dm_row_px == o.dm_row_px &&
           pixel_pitch_um == o.pixel_pitch_um;
  }
};

// ---------------------------------------------------------------------------
// Stripe
// ---------------------------------------------------------------------------

// One of the eight non-overlapping 512x64 vertical tiles of a frame.
struct Stripe {
  std::vector<float> pixels;  // row-major, height_px * width_px
  int height_px = kFrameHeight;
  int width_px = kStripeWidth;
  int64_t parent_frame_id = 0;
  int stripe_index = 0;  // horizontal offset = stripe_index * kStripeWidth

  float& at(int r, int c) { return pixels[static_cast<size_t>(r) * width_px + c]; }
  float at(int r, int c) const { return pixels[static_cast<size_t>(r) * width_px + c]; }
};

}  // namespace octseg
