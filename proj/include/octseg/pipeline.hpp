#pragma once

// Timed end-to-end streaming: tile -> norm -> transfer -> infer ->
// reassemble -> decode -> overlay, with per-stage wall-clock accounting, a
// release governor that caps the delivered rate, confidence gating with
// hold-last re-emission, and a benchmark mode that discards warm-up frames.
// Stages run serially; that keeps per-frame latency and the timing ledger
// exactly reproducible.

#include <chrono>
#include <memory>
#include <thread>

#include "octseg/core.hpp"
#include "octseg/io.hpp"
#include "octseg/losses.hpp"
#include "octseg/network.hpp"
#include "octseg/postprocess.hpp"
#include "octseg/preprocess.hpp"
#include "octseg/synthgen.hpp"

namespace octseg {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct PipelineConfig {
  double cap_hz = 80.0;               // governor: never release faster than this
  double confidence_threshold = 0.6;  // accept iff confidence >= threshold
  bool hold_last_on_reject = true;    // re-emit the last accepted result on reject
  int batch_stripes = 8;              // stripes per inference call
  bool mixed_precision = false;
  int smooth_window = 5;
  bool pace = true;  // false: free-running (benchmark)
  bool overlay = true;
  int warmup_frames = 20;  // benchmark mode: excluded from stats
  bool overlap = false;    // reserved; serial execution only

  Precision precision() const { return mixed_precision ? Precision::Mixed : Precision::Full; }

  void validate() const {
    if (cap_hz <= 0.0) throw ConfigError("PipelineConfig: cap_hz must be positive");
    if (confidence_threshold < 0.0 || confidence_threshold > 1.0)
      throw ConfigError("PipelineConfig: confidence_threshold must lie in [0,1]");
    if (batch_stripes < 1) throw ConfigError("PipelineConfig: batch_stripes must be positive");
    if (smooth_window < 1 || smooth_window % 2 == 0)
      throw ConfigError("PipelineConfig: smooth_window must be odd");
    if (warmup_frames < 0) throw ConfigError("PipelineConfig: negative warmup_frames");
    if (overlap)
      throw ConfigError("PipelineConfig: overlapped execution is not available; use serial");
  }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"cap_hz", c.cap_hz},
       {"confidence_threshold", c.confidence_threshold},
       {"hold_last_on_reject", c.hold_last_on_reject},
       {"batch_stripes", c.batch_stripes},
       {"mixed_precision", c.mixed_precision},
       {"smooth_window", c.smooth_window},
       {"pace", c.pace},
       {"overlay", c.overlay},
       {"warmup_frames", c.warmup_frames},
       {"overlap", c.overlap}};
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  c = PipelineConfig{};
  c.cap_hz = j.value("cap_hz", c.cap_hz);
  c.confidence_threshold = j.value("confidence_threshold", c.confidence_threshold);
  c.hold_last_on_reject = j.value("hold_last_on_reject", c.hold_last_on_reject);
  c.batch_stripes = j.value("batch_stripes", c.batch_stripes);
  c.mixed_precision = j.value("mixed_precision", c.mixed_precision);
  c.smooth_window = j.value("smooth_window", c.smooth_window);
  c.pace = j.value("pace", c.pace);
  c.overlay = j.value("overlay", c.overlay);
  c.warmup_frames = j.value("warmup_frames", c.warmup_frames);
  c.overlap = j.value("overlap", c.overlap);
}

// ---------------------------------------------------------------------------
// Engines
// ---------------------------------------------------------------------------

// Anything that maps a B x 1 x H x W stripe batch to B x 3 x H x W logits.
// Tests substitute stub engines; deployment wraps a trained network.
class InferenceEngine {
 public:
  virtual ~InferenceEngine() = default;
  virtual TensorF infer(const TensorF& batch) = 0;
  virtual std::string describe() const = 0;
};

class NetworkEngine : public InferenceEngine {
 public:
  NetworkEngine(SegNetF net, Precision precision)
      : net_(std::move(net)), precision_(precision) {}

  static NetworkEngine from_checkpoint(const fs::path& path, Precision precision) {
    return NetworkEngine(build_from_checkpoint(load_checkpoint(path)), precision);
  }

  TensorF infer(const TensorF& batch) override { return net_.forward(batch, precision_); }

  std::string describe() const override {
    return "segnet(" + std::to_string(net_.param_count()) + " params, " +
           (precision_ == Precision::Mixed ? "mixed" : "full") + ")";
  }

  SegNetF& net() { return net_; }

 private:
  SegNetF net_;
  Precision precision_;
};

// ---------------------------------------------------------------------------
// Frame sources
// ---------------------------------------------------------------------------

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::optional<Frame> next() = 0;
  // Frames the source discarded because the consumer fell behind (live mode).
  virtual int64_t dropped() const { return 0; }
};

// Replays frames from disk in a fixed order; never drops.
class ReplaySource : public FrameSource {
 public:
  explicit ReplaySource(std::vector<fs::path> paths) : paths_(std::move(paths)) {}

  static ReplaySource from_manifest(const fs::path& manifest_path, const std::string& split) {
    const Manifest m = load_manifest(manifest_path);
    const fs::path base = manifest_path.parent_path();
    std::vector<fs::path> paths;
    for (const ManifestItem& it : m.split_items(split)) paths.push_back(base / it.frame);
    if (paths.empty())
      throw UsageError("manifest has no '" + split + "' frames: " + manifest_path.string());
    return ReplaySource(std::move(paths));
  }

  static ReplaySource from_dir(const fs::path& dir) {
    std::vector<fs::path> paths;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".png")
        paths.push_back(entry.path());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw UsageError("no .png frames in " + dir.string());
    return ReplaySource(std::move(paths));
  }

  std::optional<Frame> next() override {
    if (index_ >= paths_.size()) return std::nullopt;
    return load_frame(paths_[index_++]);
  }

  size_t size() const { return paths_.size(); }

 private:
  std::vector<fs::path> paths_;
  size_t index_ = 0;
};

// Generates phantoms on the fly; stands in for a live acquisition feed. With
// rate_hz > 0, frames become due on a wall-clock timer and the newest due
// frame wins: frames the consumer was too slow to collect are skipped and
// counted, never queued. rate_hz = 0 streams back-to-back without dropping.
class SynthLiveSource : public FrameSource {
 public:
  SynthLiveSource(PhantomConfig config, int count, double rate_hz = 0.0)
      : config_(std::move(config)), count_(count), rate_hz_(rate_hz) {
    config_.validate();
    if (count <= 0) throw ConfigError("SynthLiveSource: count must be positive");
    if (rate_hz < 0.0) throw ConfigError("SynthLiveSource: negative rate");
  }

  std::optional<Frame> next() override {
    if (next_index_ >= count_) return std::nullopt;
    int index = next_index_;
    if (rate_hz_ > 0.0) {
      using clock = std::chrono::steady_clock;
      if (!start_) start_ = clock::now();
      const double elapsed = std::chrono::duration<double>(clock::now() - *start_).count();
      // Frame i goes live at (i+1)/rate; the newest live frame wins.
      const int newest = std::min(static_cast<int>(elapsed * rate_hz_) - 1, count_ - 1);
      if (newest > index) {
        dropped_ += newest - index;
        index = newest;
      } else if (newest < index) {
        std::this_thread::sleep_until(
            *start_ + std::chrono::duration_cast<clock::duration>(
                          std::chrono::duration<double>((index + 1) / rate_hz_)));
      }
    }
    next_index_ = index + 1;
    Sample s = generate_sample(config_, index);
    if (rate_hz_ > 0.0) s.frame.timestamp_s = index / rate_hz_;
    return std::move(s.frame);
  }

  int64_t dropped() const override { return dropped_; }

 private:
  PhantomConfig config_;
  int count_ = 0;
  double rate_hz_ = 0.0;
  int next_index_ = 0;
  int64_t dropped_ = 0;
  std::optional<std::chrono::steady_clock::time_point> start_;
};

// ---------------------------------------------------------------------------
// Overlay rendering
// ---------------------------------------------------------------------------

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;  // interleaved RGB

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), data(3 * static_cast<size_t>(h) * w, 0) {}
};

// Grayscale base, cornea band tinted at alpha 0.35, 1-pixel interface lines
// in pure colors (epithelium green, membrane red).
inline RgbImage render_overlay(const Frame& frame, const LabelMap& labels,
                               const BoundaryTrace& trace) {
  if (labels.height_px != frame.height_px || labels.width_px != frame.width_px)
    throw DimensionError("render_overlay: frame/labels shape mismatch");
  if (trace.width() != frame.width_px)
    throw DimensionError("render_overlay: trace width mismatch");
  constexpr double kAlpha = 0.35;
  constexpr uint8_t kBand[3] = {64, 160, 255};
  RgbImage img(frame.height_px, frame.width_px);
  for (int r = 0; r < frame.height_px; ++r)
    for (int c = 0; c < frame.width_px; ++c) {
      const double v = std::clamp(static_cast<double>(frame.at(r, c)), 0.0, 1.0) * 255.0;
      uint8_t* px = &img.data[3 * (static_cast<size_t>(r) * frame.width_px + c)];
      if (labels.at(r, c) == 1) {
        for (int k = 0; k < 3; ++k)
          px[k] = static_cast<uint8_t>(std::lround((1.0 - kAlpha) * v + kAlpha * kBand[k]));
      } else {
        px[0] = px[1] = px[2] = static_cast<uint8_t>(std::lround(v));
      }
    }
  for (int c = 0; c < trace.width(); ++c) {
    if (trace.epi_row_px[c]) {
      const int r = static_cast<int>(std::lround(*trace.epi_row_px[c]));
      if (r >= 0 && r < frame.height_px) {
        uint8_t* px = &img.data[3 * (static_cast<size_t>(r) * frame.width_px + c)];
        px[0] = 0; px[1] = 255; px[2] = 0;
      }
    }
    if (trace.dm_row_px[c]) {
      const int r = static_cast<int>(std::lround(*trace.dm_row_px[c]));
      if (r >= 0 && r < frame.height_px) {
        uint8_t* px = &img.data[3 * (static_cast<size_t>(r) * frame.width_px + c)];
        px[0] = 255; px[1] = 0; px[2] = 0;
      }
    }
  }
  return img;
}

inline void save_overlay(const RgbImage& img, const fs::path& path) {
  write_png_rgb8(path, img.height, img.width, img.data.data());
}

// ---------------------------------------------------------------------------
// Per-frame processing
// ---------------------------------------------------------------------------

inline constexpr int kNumStages = 7;
inline constexpr const char* kStageNames[kNumStages] = {
    "tile", "norm", "transfer", "infer", "reassemble", "decode", "overlay"};

struct FrameResult {
  LabelMap labels;
  ProbMap probs;
  BoundaryTrace trace;
  double confidence = 0.0;
  std::shared_ptr<const RgbImage> overlay;  // null unless requested
  std::array<double, kNumStages> stage_ms{};
  double e2e_ms = 0.0;
  bool failed = false;
  std::string error;
};

// Runs all stages on one frame, recording per-stage wall time. The transfer
// stage packs stripes into the batch tensor -- measured even though host and
// device memory are one and the same here. An engine that throws (or returns
// a wrong-shaped batch) marks the frame failed instead of aborting the
// stream; input dimension errors still propagate.
inline FrameResult process_frame(const Frame& frame, InferenceEngine& engine,
                                 const NormStats& stats, const PipelineConfig& cfg) {
  using clock = std::chrono::steady_clock;
  const auto ms = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };
  FrameResult out;
  const auto t0 = clock::now();

  std::vector<Stripe> stripes = tile(frame);
  const auto t1 = clock::now();

  for (Stripe& s : stripes) normalize_inplace(s.pixels, stats);
  const auto t2 = clock::now();

  const int H = stripes[0].height_px, W = stripes[0].width_px;
  const int n = static_cast<int>(stripes.size());
  const PadResult probe = pad16(stripes[0].pixels, H, W);
  TensorF batch(n, 1, probe.padded_h, probe.padded_w);
  for (int i = 0; i < n; ++i) {
    const PadResult padded = pad16(stripes[i].pixels, H, W);
    std::copy(padded.data.begin(), padded.data.end(), batch.ptr(i, 0));
  }
  const auto t3 = clock::now();

  TensorF logits_padded(n, kNumClasses, batch.h(), batch.w());
  try {
    for (int start = 0; start < n; start += cfg.batch_stripes) {
      const int m = std::min(cfg.batch_stripes, n - start);
      TensorF part;
      if (m == n) {
        part = engine.infer(batch);
      } else {
        TensorF sub(m, 1, batch.h(), batch.w());
        std::copy_n(batch.ptr(start, 0), sub.data.size(), sub.data.begin());
        part = engine.infer(sub);
      }
      if (part.n() != m || part.c() != kNumClasses || part.h() != batch.h() ||
          part.w() != batch.w())
        throw ContractError("engine returned a wrong-shaped batch");
      std::copy(part.data.begin(), part.data.end(), logits_padded.ptr(start, 0));
    }
  } catch (const std::exception& e) {
    out.failed = true;
    out.error = e.what();
    out.labels = LabelMap(frame.height_px, frame.width_px);
    out.probs = ProbMap(frame.height_px, frame.width_px);
    out.trace = BoundaryTrace(frame.width_px, frame.pixel_pitch_um);
    const auto tfail = clock::now();
    out.stage_ms = {ms(t0, t1), ms(t1, t2), ms(t2, t3), ms(t3, tfail), 0.0, 0.0, 0.0};
    out.e2e_ms = ms(t0, tfail);
    return out;
  }
  TensorF logits = crop(logits_padded, H, W);
  const auto t4 = clock::now();

  TensorF frame_probs = softmax_channels(reassemble(unpack_batch(logits)));
  out.probs = ProbMap(frame.height_px, frame.width_px);
  std::copy(frame_probs.data.begin(), frame_probs.data.end(), out.probs.probs.begin());
  const auto t5 = clock::now();

  DecodeResult dec = decode_ordered(out.probs);
  out.labels = std::move(dec.labels);
  const BoundaryTrace raw = extract_trace(out.labels, frame.pixel_pitch_um);
  out.trace = smooth_trace(raw, cfg.smooth_window);
  out.confidence = trace_confidence(out.labels, out.probs, out.trace);
  const auto t6 = clock::now();

  if (cfg.overlay)
    out.overlay = std::make_shared<RgbImage>(render_overlay(frame, out.labels, out.trace));
  const auto t7 = clock::now();

  out.stage_ms = {ms(t0, t1), ms(t1, t2), ms(t2, t3), ms(t3, t4),
                  ms(t4, t5), ms(t5, t6), ms(t6, t7)};
  out.e2e_ms = ms(t0, t7);
  return out;
}

enum class Gate { Accept, Reject };

inline bool gate_accept(double confidence, double threshold) {
  return confidence >= threshold;  // boundary inclusive
}

inline Gate gate(double confidence, const PipelineConfig& cfg) {
  return gate_accept(confidence, cfg.confidence_threshold) ? Gate::Accept : Gate::Reject;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct StageTiming {
  double mean_ms = 0.0;
  double p95_ms = 0.0;
};

struct PipelineReport {
  // Deterministic content.
  int64_t frames_in = 0;
  int64_t frames_accepted = 0;
  int64_t frames_rejected = 0;  // gate rejections (excludes failures)
  int64_t frames_failed = 0;
  int64_t held_emissions = 0;
  int64_t source_dropped = 0;  // live-mode frames skipped at the source
  double confidence_mean = 0.0;
  PipelineConfig config;
  std::string engine;

  // Wall-clock measurements (excluded from determinism comparisons).
  std::array<StageTiming, kNumStages> stages{};
  double e2e_mean_ms = 0.0;
  double e2e_p95_ms = 0.0;
  double end_to_end_hz = 0.0;       // delivered rate over the timed frames
  double effective_update_hz = 0.0; // accepted/total x delivered rate
  int64_t timed_frames = 0;
  std::string hardware;
};

inline std::string hardware_descriptor() {
  std::string cpu = "unknown-cpu";
  std::ifstream info("/proc/cpuinfo");
  std::string line;
  while (std::getline(info, line)) {
    if (line.rfind("model name", 0) == 0) {
      const size_t colon = line.find(':');
      if (colon != std::string::npos) {
        cpu = line.substr(colon + 1);
        const size_t start = cpu.find_first_not_of(' ');
        if (start != std::string::npos) cpu = cpu.substr(start);
      }
      break;
    }
  }
  return cpu + " / " + std::to_string(std::thread::hardware_concurrency()) + " hw threads / " +
         __VERSION__;
}

inline void to_json(nlohmann::json& j, const PipelineReport& r) {
  nlohmann::json timing;
  for (int i = 0; i < kNumStages; ++i)
    timing[std::string(kStageNames[i]) + "_ms"] = {{"mean", r.stages[i].mean_ms},
                                                   {"p95", r.stages[i].p95_ms}};
  timing["e2e_mean_ms"] = r.e2e_mean_ms;
  timing["e2e_p95_ms"] = r.e2e_p95_ms;
  timing["end_to_end_hz"] = r.end_to_end_hz;
  timing["effective_update_hz"] = r.effective_update_hz;
  timing["timed_frames"] = r.timed_frames;
  timing["hardware"] = r.hardware;
  j = {{"frames_in", r.frames_in},
       {"frames_accepted", r.frames_accepted},
       {"frames_rejected", r.frames_rejected},
       {"frames_failed", r.frames_failed},
       {"held_emissions", r.held_emissions},
       {"source_dropped", r.source_dropped},
       {"confidence_mean", r.confidence_mean},
       {"config", r.config},
       {"engine", r.engine},
       {"timing", timing}};
}

inline void from_json(const nlohmann::json& j, PipelineReport& r) {
  r.frames_in = j.at("frames_in").get<int64_t>();
  r.frames_accepted = j.at("frames_accepted").get<int64_t>();
  r.frames_rejected = j.at("frames_rejected").get<int64_t>();
  r.frames_failed = j.at("frames_failed").get<int64_t>();
  r.held_emissions = j.at("held_emissions").get<int64_t>();
  r.source_dropped = j.at("source_dropped").get<int64_t>();
  r.confidence_mean = j.at("confidence_mean").get<double>();
  j.at("config").get_to(r.config);
  r.engine = j.at("engine").get<std::string>();
  const auto& t = j.at("timing");
  for (int i = 0; i < kNumStages; ++i) {
    const auto& s = t.at(std::string(kStageNames[i]) + "_ms");
    r.stages[i].mean_ms = s.at("mean").get<double>();
    r.stages[i].p95_ms = s.at("p95").get<double>();
  }
  r.e2e_mean_ms = t.at("e2e_mean_ms").get<double>();
  r.e2e_p95_ms = t.at("e2e_p95_ms").get<double>();
  r.end_to_end_hz = t.at("end_to_end_hz").get<double>();
  r.effective_update_hz = t.at("effective_update_hz").get<double>();
  r.timed_frames = t.at("timed_frames").get<int64_t>();
  r.hardware = t.at("hardware").get<std::string>();
}

// ---------------------------------------------------------------------------
// Streaming
// ---------------------------------------------------------------------------

// What the stream emits per frame: the gated trace (fresh when accepted, a
// bit-identical copy of the last accepted one when held), the overlay under
// the same policy, plus the fresh confidence that drove the decision.
struct StreamOutput {
  int64_t index = 0;
  int64_t frame_id = 0;
  BoundaryTrace trace;
  std::shared_ptr<const RgbImage> overlay;  // null when overlays are off
  double confidence = 0.0;
  bool accepted = false;
  bool held = false;
  bool failed = false;
};

using StreamSink = std::function<void(const StreamOutput&)>;

namespace detail {

inline double percentile95(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const size_t idx =
      static_cast<size_t>(std::ceil(0.95 * static_cast<double>(values.size()))) - 1;
  return values[std::min(idx, values.size() - 1)];
}

inline std::string trace_log_row(const StreamOutput& out) {
  double epi_sum = 0.0, dm_sum = 0.0;
  int present = 0;
  for (int c = 0; c < out.trace.width(); ++c)
    if (out.trace.epi_row_px[c]) {
      epi_sum += *out.trace.epi_row_px[c];
      dm_sum += *out.trace.dm_row_px[c];
      ++present;
    }
  const double coverage =
      out.trace.width() ? static_cast<double>(present) / out.trace.width() : 0.0;
  char buf[256];
  if (present > 0) {
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.17g,%d,%d,%d,%.17g,%.17g,%.17g",
                  static_cast<long long>(out.index), static_cast<long long>(out.frame_id),
                  out.confidence, out.accepted ? 1 : 0, out.held ? 1 : 0, out.failed ? 1 : 0,
                  epi_sum / present, dm_sum / present, coverage);
  } else {
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.17g,%d,%d,%d,,,%.17g",
                  static_cast<long long>(out.index), static_cast<long long>(out.frame_id),
                  out.confidence, out.accepted ? 1 : 0, out.held ? 1 : 0, out.failed ? 1 : 0,
                  coverage);
  }
  return buf;
}

}  // namespace detail

inline constexpr char kTraceLogHeader[] =
    "frame,frame_id,confidence,accepted,held,failed,epi_mean_px,dm_mean_px,coverage";

// Drains the source through the pipeline. When pacing is on, consecutive
// outputs are released at least 1/cap_hz apart (slower is allowed if compute
// cannot keep up; replay never drops frames). Rejected and failed frames
// re-emit the last accepted trace unchanged when hold_last_on_reject is set;
// before any acceptance, or with holding off, the emitted trace is
// all-missing. When `out_dir` is set, writes trace_log.csv, report.json and
// (if overlays are on) the first accepted overlay as overlay_first.png.
inline PipelineReport run_stream(FrameSource& source, InferenceEngine& engine,
                                 const NormStats& stats, const PipelineConfig& cfg,
                                 const fs::path& out_dir = {}, const StreamSink& sink = {},
                                 int exclude_first = 0) {
  cfg.validate();
  using clock = std::chrono::steady_clock;

  std::ofstream trace_log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    trace_log.open(out_dir / "trace_log.csv");
    if (!trace_log) throw IoError("cannot open trace_log.csv in " + out_dir.string());
    trace_log << kTraceLogHeader << "\n";
  }

  PipelineReport report;
  report.config = cfg;
  report.engine = engine.describe();
  report.hardware = hardware_descriptor();

  std::array<std::vector<double>, kNumStages> stage_samples;
  std::vector<double> e2e_samples;
  double conf_sum = 0.0;

  std::optional<BoundaryTrace> last_trace;
  std::shared_ptr<const RgbImage> last_overlay;
  bool overlay_written = false;
  const auto release_period =
      std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / cfg.cap_hz));
  std::optional<clock::time_point> first_release;
  std::optional<clock::time_point> prev_release;
  clock::time_point last_release;

  int64_t index = 0;
  while (true) {
    std::optional<Frame> frame = source.next();
    if (!frame) break;

    FrameResult res = process_frame(*frame, engine, stats, cfg);
    const bool accepted = !res.failed && gate_accept(res.confidence, cfg.confidence_threshold);

    StreamOutput out;
    out.index = index;
    out.frame_id = frame->frame_id;
    out.confidence = res.confidence;
    out.accepted = accepted;
    out.failed = res.failed;
    if (accepted) {
      out.trace = res.trace;
      out.overlay = res.overlay;
      last_trace = res.trace;
      last_overlay = res.overlay;
    } else if (cfg.hold_last_on_reject && last_trace) {
      out.trace = *last_trace;  // bit-identical re-emission
      out.overlay = last_overlay;
      out.held = true;
      ++report.held_emissions;
    } else {
      out.trace = BoundaryTrace(frame->width_px, frame->pixel_pitch_um);
    }

    if (cfg.pace && prev_release) std::this_thread::sleep_until(*prev_release + release_period);
    last_release = clock::now();
    prev_release = last_release;

    if (index >= exclude_first) {
      if (!first_release) first_release = last_release;
      if (!res.failed) {
        for (int s = 0; s < kNumStages; ++s) stage_samples[s].push_back(res.stage_ms[s]);
        e2e_samples.push_back(res.e2e_ms);
      }
      ++report.timed_frames;
    }
    conf_sum += res.confidence;
    ++report.frames_in;
    if (accepted) ++report.frames_accepted;
    else if (res.failed) ++report.frames_failed;
    else ++report.frames_rejected;

    if (trace_log.is_open()) trace_log << detail::trace_log_row(out) << "\n";
    if (!out_dir.empty() && cfg.overlay && accepted && !overlay_written && res.overlay) {
      save_overlay(*res.overlay, out_dir / "overlay_first.png");
      overlay_written = true;
    }
    if (sink) sink(out);
    ++index;
  }

  if (report.frames_in == 0) throw UsageError("run_stream: source produced no frames");
  report.source_dropped = source.dropped();
  report.confidence_mean = conf_sum / static_cast<double>(report.frames_in);
  for (int s = 0; s < kNumStages; ++s) {
    const auto& v = stage_samples[s];
    if (!v.empty()) {
      double sum = 0.0;
      for (double x : v) sum += x;
      report.stages[s].mean_ms = sum / static_cast<double>(v.size());
      report.stages[s].p95_ms = detail::percentile95(v);
    }
  }
  if (!e2e_samples.empty()) {
    double sum = 0.0;
    for (double x : e2e_samples) sum += x;
    report.e2e_mean_ms = sum / static_cast<double>(e2e_samples.size());
    report.e2e_p95_ms = detail::percentile95(e2e_samples);
  }
  if (report.timed_frames >= 2 && first_release) {
    const double span_s =
        std::chrono::duration<double>(last_release - *first_release).count();
    if (span_s > 0.0)
      report.end_to_end_hz = static_cast<double>(report.timed_frames - 1) / span_s;
  }
  report.effective_update_hz = report.end_to_end_hz *
                               static_cast<double>(report.frames_accepted) /
                               static_cast<double>(report.frames_in);

  if (!out_dir.empty())
    write_json_file(out_dir / "report.json", nlohmann::json(report));
  return report;
}

// Free-running throughput measurement; the first `cfg.warmup_frames` frames
// (at least 20) are processed but excluded from every statistic.
inline PipelineReport bench(FrameSource& source, InferenceEngine& engine, const NormStats& stats,
                            PipelineConfig cfg, const fs::path& out_dir = {}) {
  cfg.pace = false;
  const int warmup = std::max(cfg.warmup_frames, 20);
  return run_stream(source, engine, stats, cfg, out_dir, {}, warmup);
}

}  // namespace octseg
