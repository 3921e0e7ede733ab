#pragma once

// Deterministic synthetic M-mode phantom generator. Produces frames with two
// smoothly drifting layer interfaces, ground-truth label maps and sub-pixel
// boundary traces, degraded by multiplicative speckle, exponential depth
// attenuation and zero-intensity vertical shadow bands. Ground truth is
// defined before degradation, so shadowed columns keep valid labels.

#include <random>

#include "octseg/core.hpp"
#include "octseg/io.hpp"

namespace octseg {

// ---------------------------------------------------------------------------
// PhantomConfig
// ---------------------------------------------------------------------------

struct PhantomConfig {
  uint64_t seed = 1234;
  int height_px = kFrameHeight;
  int width_px = kFrameWidth;
  std::pair<double, double> epi_depth_range_px = {80.0, 160.0};
  std::pair<double, double> cornea_thickness_range_px = {120.0, 220.0};
  double drift_amplitude_px = 8.0;
  double speckle_strength = 0.25;     // in [0,1]
  double attenuation_per_px = 0.002;  // per row
  double shadow_rate = 0.0;           // probability of one shadow band per frame
  std::pair<int, int> shadow_width_range_px = {24, 64};
  double layer_contrast = 1.0;        // in (0,1]

  void validate() const {
    auto ordered = [](auto p) { return p.first <= p.second; };
    if (height_px <= 0 || width_px <= 0)
      throw ConfigError("PhantomConfig: non-positive dimensions");
    if (!ordered(epi_depth_range_px) || !ordered(cornea_thickness_range_px) ||
        !ordered(shadow_width_range_px))
      throw ConfigError("PhantomConfig: range min exceeds max");
    if (epi_depth_range_px.first < 0.0 || cornea_thickness_range_px.first < 0.0)
      throw ConfigError("PhantomConfig: negative depth range");
    if (epi_depth_range_px.second + cornea_thickness_range_px.second >= height_px)
      throw ConfigError("PhantomConfig: epi_depth_max + thickness_max must stay above frame bottom");
    if (drift_amplitude_px < 0.0) throw ConfigError("PhantomConfig: negative drift amplitude");
    if (speckle_strength < 0.0 || speckle_strength > 1.0)
      throw ConfigError("PhantomConfig: speckle_strength outside [0,1]");
    if (attenuation_per_px < 0.0) throw ConfigError("PhantomConfig: negative attenuation");
    if (shadow_rate < 0.0 || shadow_rate > 1.0)
      throw ConfigError("PhantomConfig: shadow_rate outside [0,1]");
    if (shadow_width_range_px.first < 1)
      throw ConfigError("PhantomConfig: shadow width must be >= 1 px");
    if (layer_contrast <= 0.0 || layer_contrast > 1.0)
      throw ConfigError("PhantomConfig: layer_contrast outside (0,1]");
  }
};

inline void to_json(nlohmann::json& j, const PhantomConfig& c) {
  j = {{"seed", c.seed},
       {"height_px", c.height_px},
       {"width_px", c.width_px},
       {"epi_depth_range_px", c.epi_depth_range_px},
       {"cornea_thickness_range_px", c.cornea_thickness_range_px},
       {"drift_amplitude_px", c.drift_amplitude_px},
       {"speckle_strength", c.speckle_strength},
       {"attenuation_per_px", c.attenuation_per_px},
       {"shadow_rate", c.shadow_rate},
       {"shadow_width_range_px", c.shadow_width_range_px},
       {"layer_contrast", c.layer_contrast}};
}

inline void from_json(const nlohmann::json& j, PhantomConfig& c) {
  c = PhantomConfig{};
  c.seed = j.value("seed", c.seed);
  c.height_px = j.value("height_px", c.height_px);
  c.width_px = j.value("width_px", c.width_px);
  if (j.contains("epi_depth_range_px")) j.at("epi_depth_range_px").get_to(c.epi_depth_range_px);
  if (j.contains("cornea_thickness_range_px"))
    j.at("cornea_thickness_range_px").get_to(c.cornea_thickness_range_px);
  c.drift_amplitude_px = j.value("drift_amplitude_px", c.drift_amplitude_px);
  c.speckle_strength = j.value("speckle_strength", c.speckle_strength);
  c.attenuation_per_px = j.value("attenuation_per_px", c.attenuation_per_px);
  c.shadow_rate = j.value("shadow_rate", c.shadow_rate);
  if (j.contains("shadow_width_range_px"))
    j.at("shadow_width_range_px").get_to(c.shadow_width_range_px);
  c.layer_contrast = j.value("layer_contrast", c.layer_contrast);
}

// ---------------------------------------------------------------------------
// DatasetSpec
// ---------------------------------------------------------------------------

enum class Subset { InVivo, ExVivo, Hybrid };

inline std::string subset_name(Subset s) {
  switch (s) {
    case Subset::InVivo: return "in_vivo";
    case Subset::ExVivo: return "ex_vivo";
    case Subset::Hybrid: return "hybrid";
  }
  return "unknown";
}

inline Subset subset_from_name(const std::string& name) {
  if (name == "in_vivo") return Subset::InVivo;
  if (name == "ex_vivo") return Subset::ExVivo;
  if (name == "hybrid") return Subset::Hybrid;
  throw UsageError("unknown subset: " + name);
}

struct DatasetSpec {
  Subset subset = Subset::Hybrid;
  int n_train = 600;  // train portion, val is carved out of it
  int n_test = 150;
  double val_fraction = 0.20;

  static DatasetSpec for_subset(Subset s) {
    switch (s) {
      case Subset::InVivo: return {s, 400, 100, 0.20};
      case Subset::ExVivo: return {s, 200, 50, 0.20};
      case Subset::Hybrid: return {s, 600, 150, 0.20};
    }
    throw UsageError("bad subset");
  }

  int n_val() const { return static_cast<int>(std::lround(val_fraction * n_train)); }

  void validate() const {
    if (n_train <= 0 || n_test < 0) throw ConfigError("DatasetSpec: bad split sizes");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
      throw ConfigError("DatasetSpec: val_fraction must lie in [0,1)");
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"subset", subset_name(s.subset)},
       {"n_train", s.n_train},
       {"n_test", s.n_test},
       {"val_fraction", s.val_fraction}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  if (j.contains("subset")) {
    s = DatasetSpec::for_subset(subset_from_name(j.at("subset").get<std::string>()));
  } else {
    s = DatasetSpec{};
  }
  s.n_train = j.value("n_train", s.n_train);
  s.n_test = j.value("n_test", s.n_test);
  s.val_fraction = j.value("val_fraction", s.val_fraction);
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------

struct Sample {
  Frame frame;
  LabelMap labels;
  BoundaryTrace trace;
  // Degradation bookkeeping; labels and trace are unaffected by it.
  bool has_shadow = false;
  int shadow_col_begin = 0;
  int shadow_col_end = 0;  // exclusive
};

namespace detail {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// Band-limited drift curve: a few random sinusoids whose amplitudes sum to
// at most `amplitude`.
struct DriftCurve {
  static constexpr int kTerms = 4;
  double amp[kTerms], freq[kTerms], phase[kTerms];

  template <typename Rng>
  DriftCurve(double amplitude, Rng& rng) {
    std::uniform_real_distribution<double> ufreq(0.5, 3.5);
    std::uniform_real_distribution<double> uphase(0.0, kTwoPi);
    std::uniform_real_distribution<double> uw(0.2, 1.0);
    double wsum = 0.0;
    double w[kTerms];
    for (int i = 0; i < kTerms; ++i) {
      w[i] = uw(rng);
      wsum += w[i];
      freq[i] = ufreq(rng);
      phase[i] = uphase(rng);
    }
    for (int i = 0; i < kTerms; ++i) amp[i] = amplitude * w[i] / wsum;
  }

  double operator()(double x01) const {
    double v = 0.0;
    for (int i = 0; i < kTerms; ++i)
      v += amp[i] * std::sin(kTwoPi * freq[i] * x01 + phase[i]);
    return v;
  }
};

inline void class_intensities(double contrast, float out[3]) {
  out[0] = 0.10f;
  out[1] = static_cast<float>(0.10 + 0.60 * contrast);
  out[2] = static_cast<float>(0.10 + 0.25 * contrast);
}

}  // namespace detail

// Pure function of (config, index); same inputs give bit-identical samples.
inline Sample generate_sample(const PhantomConfig& config, int index) {
  config.validate();
  std::mt19937_64 rng(mix_seed(config.seed, static_cast<uint64_t>(index)));
  const int H = config.height_px, W = config.width_px;

  std::uniform_real_distribution<double> uepi(config.epi_depth_range_px.first,
                                              config.epi_depth_range_px.second);
  std::uniform_real_distribution<double> uthick(config.cornea_thickness_range_px.first,
                                                config.cornea_thickness_range_px.second);
  const double epi_base = uepi(rng);
  const double thick_base = uthick(rng);
  detail::DriftCurve epi_drift(config.drift_amplitude_px, rng);
  detail::DriftCurve thick_drift(0.4 * config.drift_amplitude_px, rng);

  Sample s;
  s.frame = Frame(H, W);
  s.frame.frame_id = index;
  s.frame.timestamp_s = index / 80.0;
  s.labels = LabelMap(H, W);
  s.trace = BoundaryTrace(W, s.frame.pixel_pitch_um);

  float layer[3];
  detail::class_intensities(config.layer_contrast, layer);

  // Geometry and labels first; degradations touch intensities only.
  std::vector<int> epi_px(W), dm_px(W);
  for (int c = 0; c < W; ++c) {
    const double x01 = static_cast<double>(c) / W;
    double epi = epi_base + epi_drift(x01);
    double thick = std::max(2.0, thick_base + thick_drift(x01));
    double dm = epi + thick;
    epi = std::clamp(epi, 0.0, static_cast<double>(H - 2));
    dm = std::clamp(dm, epi, static_cast<double>(H - 1));
    s.trace.epi_row_px[c] = epi;
    s.trace.dm_row_px[c] = dm;
    epi_px[c] = static_cast<int>(std::lround(epi));
    dm_px[c] = std::max(epi_px[c], static_cast<int>(std::lround(dm)));
    dm_px[c] = std::min(dm_px[c], H - 1);
    for (int r = 0; r < H; ++r)
      s.labels.at(r, c) = r < epi_px[c] ? 0 : (r <= dm_px[c] ? 1 : 2);
  }

  // Piecewise layer intensities.
  for (int c = 0; c < W; ++c)
    for (int r = 0; r < H; ++r) s.frame.at(r, c) = layer[s.labels.at(r, c)];

  // Multiplicative speckle.
  if (config.speckle_strength > 0.0) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double strength = config.speckle_strength;
    for (float& v : s.frame.pixels) {
      double g = std::clamp(gauss(rng), -3.0, 3.0);
      v = static_cast<float>(v * (1.0 + strength * g));
    }
  }

  // Exponential depth attenuation.
  if (config.attenuation_per_px > 0.0) {
    for (int r = 0; r < H; ++r) {
      const float att = static_cast<float>(std::exp(-config.attenuation_per_px * r));
      float* row = &s.frame.pixels[static_cast<size_t>(r) * W];
      for (int c = 0; c < W; ++c) row[c] *= att;
    }
  }

  // Zero-intensity vertical shadow band.
  if (config.shadow_rate > 0.0) {
    std::bernoulli_distribution shadow_draw(config.shadow_rate);
    if (shadow_draw(rng)) {
      std::uniform_int_distribution<int> uwidth(config.shadow_width_range_px.first,
                                                config.shadow_width_range_px.second);
      int width = std::min(uwidth(rng), W);
      std::uniform_int_distribution<int> ucol(0, W - width);
      int col0 = ucol(rng);
      s.has_shadow = true;
      s.shadow_col_begin = col0;
      s.shadow_col_end = col0 + width;
      for (int r = 0; r < H; ++r) {
        float* row = &s.frame.pixels[static_cast<size_t>(r) * W];
        std::fill(row + col0, row + col0 + width, 0.0f);
      }
    }
  }

  for (float& v : s.frame.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return s;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

// The hybrid subset is the union of in-vivo-style and ex-vivo-style samples;
// single-style subsets use only the matching config.
inline Manifest generate_dataset(const DatasetSpec& spec, const PhantomConfig& in_vivo_style,
                                 const PhantomConfig& ex_vivo_style, const fs::path& out_dir) {
  in_vivo_style.validate();
  ex_vivo_style.validate();

  fs::create_directories(out_dir / "frames");
  fs::create_directories(out_dir / "masks");
  fs::create_directories(out_dir / "traces");

  struct Planned {
    const PhantomConfig* config;
    bool is_test;
  };
  std::vector<Planned> plan;
  auto push = [&plan](const PhantomConfig& cfg, int count, bool is_test) {
    for (int i = 0; i < count; ++i) plan.push_back({&cfg, is_test});
  };
  switch (spec.subset) {
    case Subset::InVivo:
      push(in_vivo_style, spec.n_train, false);
      push(in_vivo_style, spec.n_test, true);
      break;
    case Subset::ExVivo:
      push(ex_vivo_style, spec.n_train, false);
      push(ex_vivo_style, spec.n_test, true);
      break;
    case Subset::Hybrid: {
      // 2:1 in-vivo to ex-vivo, matching the single-style split sizes.
      const DatasetSpec iv = DatasetSpec::for_subset(Subset::InVivo);
      const DatasetSpec ev = DatasetSpec::for_subset(Subset::ExVivo);
      const double iv_train_frac =
          static_cast<double>(iv.n_train) / (iv.n_train + ev.n_train);
      const double iv_test_frac = static_cast<double>(iv.n_test) / (iv.n_test + ev.n_test);
      const int iv_train = static_cast<int>(std::lround(iv_train_frac * spec.n_train));
      const int iv_test = static_cast<int>(std::lround(iv_test_frac * spec.n_test));
      push(in_vivo_style, iv_train, false);
      push(ex_vivo_style, spec.n_train - iv_train, false);
      push(in_vivo_style, iv_test, true);
      push(ex_vivo_style, spec.n_test - iv_test, true);
      break;
    }
  }

  // Val membership: seeded shuffle of the train-portion indices.
  std::vector<int> train_indices;
  for (size_t i = 0; i < plan.size(); ++i)
    if (!plan[i].is_test) train_indices.push_back(static_cast<int>(i));
  std::mt19937_64 shuffle_rng(mix_seed(in_vivo_style.seed, 0x76616c5348464cULL));
  std::shuffle(train_indices.begin(), train_indices.end(), shuffle_rng);
  const int n_val = spec.n_val();
  std::vector<bool> is_val(plan.size(), false);
  for (int i = 0; i < n_val && i < static_cast<int>(train_indices.size()); ++i)
    is_val[train_indices[i]] = true;

  Manifest manifest;
  manifest.subset = subset_name(spec.subset);
  char name[64];
  for (size_t i = 0; i < plan.size(); ++i) {
    Sample s = generate_sample(*plan[i].config, static_cast<int>(i));
    std::snprintf(name, sizeof(name), "%05zu", i);
    ManifestItem item;
    item.frame = std::string("frames/f_") + name + ".png";
    item.mask = std::string("masks/m_") + name + ".png";
    item.trace = std::string("traces/t_") + name + ".csv";
    item.split = plan[i].is_test ? "test" : (is_val[i] ? "val" : "train");
    save_frame(s.frame, out_dir / item.frame);
    save_labelmap(s.labels, out_dir / item.mask);
    save_trace(s.trace, out_dir / item.trace);
    manifest.items.push_back(std::move(item));
  }
  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace octseg
