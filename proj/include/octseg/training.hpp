#pragma once

// Stripe-level supervised training: AdamW with decoupled weight decay,
// seeded shuffling and augmentation (mild brightness/contrast jitter plus
// horizontal flips; no rotations -- A-scans have a fixed depth axis),
// per-epoch full-frame validation with two-criterion model selection, and a
// CSV history log.

#include <functional>
#include <random>
#include <span>

#include "octseg/core.hpp"
#include "octseg/io.hpp"
#include "octseg/losses.hpp"
#include "octseg/metrics.hpp"
#include "octseg/network.hpp"
#include "octseg/postprocess.hpp"
#include "octseg/preprocess.hpp"

namespace octseg {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 60;
  int batch_size_stripes = 8;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  uint64_t seed = 42;
  double jitter_brightness = 0.1;
  double jitter_contrast = 0.1;
  double hflip_prob = 0.5;
  bool mixed_precision = false;
  // "composite" trains the full objective; "bce" trains the per-channel
  // binary cross-entropy baseline used in ablations.
  std::string objective = "composite";
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double divergence_threshold = 1e4;
  int smooth_window = 5;

  Precision precision() const { return mixed_precision ? Precision::Mixed : Precision::Full; }

  void validate() const {
    if (epochs <= 0) throw ConfigError("TrainConfig: epochs must be positive");
    if (batch_size_stripes <= 0)
      throw ConfigError("TrainConfig: batch_size_stripes must be positive");
    if (learning_rate <= 0.0) throw ConfigError("TrainConfig: learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("TrainConfig: negative weight_decay");
    if (jitter_brightness < 0.0 || jitter_brightness > 1.0)
      throw ConfigError("TrainConfig: jitter_brightness must lie in [0,1]");
    if (jitter_contrast < 0.0 || jitter_contrast > 1.0)
      throw ConfigError("TrainConfig: jitter_contrast must lie in [0,1]");
    if (hflip_prob < 0.0 || hflip_prob > 1.0)
      throw ConfigError("TrainConfig: hflip_prob must lie in [0,1]");
    if (objective != "composite" && objective != "bce")
      throw ConfigError("TrainConfig: objective must be 'composite' or 'bce'");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("TrainConfig: betas must lie in [0,1)");
    if (adam_eps <= 0.0) throw ConfigError("TrainConfig: adam_eps must be positive");
    if (divergence_threshold <= 0.0)
      throw ConfigError("TrainConfig: divergence_threshold must be positive");
    if (smooth_window < 1 || smooth_window % 2 == 0)
      throw ConfigError("TrainConfig: smooth_window must be odd");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size_stripes", c.batch_size_stripes},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"jitter_brightness", c.jitter_brightness},
       {"jitter_contrast", c.jitter_contrast},
       {"hflip_prob", c.hflip_prob},
       {"mixed_precision", c.mixed_precision},
       {"objective", c.objective},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"divergence_threshold", c.divergence_threshold},
       {"smooth_window", c.smooth_window}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size_stripes = j.value("batch_size_stripes", c.batch_size_stripes);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.jitter_brightness = j.value("jitter_brightness", c.jitter_brightness);
  c.jitter_contrast = j.value("jitter_contrast", c.jitter_contrast);
  c.hflip_prob = j.value("hflip_prob", c.hflip_prob);
  c.mixed_precision = j.value("mixed_precision", c.mixed_precision);
  c.objective = j.value("objective", c.objective);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.divergence_threshold = j.value("divergence_threshold", c.divergence_threshold);
  c.smooth_window = j.value("smooth_window", c.smooth_window);
}

// ---------------------------------------------------------------------------
// Dataset access
// ---------------------------------------------------------------------------

struct DatasetBundle {
  std::vector<Frame> frames;
  std::vector<LabelMap> masks;
  std::vector<BoundaryTrace> traces;

  size_t size() const { return frames.size(); }
};

inline DatasetBundle load_split(const fs::path& manifest_path, const std::string& split) {
  const Manifest manifest = load_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  DatasetBundle out;
  for (const ManifestItem& item : manifest.split_items(split)) {
    out.frames.push_back(load_frame(base / item.frame));
    out.masks.push_back(load_labelmap(base / item.mask));
    out.traces.push_back(load_trace(base / item.trace, out.frames.back().pixel_pitch_um));
  }
  if (out.frames.empty())
    throw UsageError("manifest " + manifest_path.string() + " has no '" + split + "' items");
  return out;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

// Decoupled weight decay; biases and normalization affine parameters are
// exempt from decay, as usual.
class AdamW {
 public:
  AdamW(std::vector<ParamTensor<float>*> params, const TrainConfig& cfg)
      : params_(std::move(params)),
        lr_(cfg.learning_rate),
        wd_(cfg.weight_decay),
        beta1_(cfg.beta1),
        beta2_(cfg.beta2),
        eps_(cfg.adam_eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    decay_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->size(), 0.0f);
      v_[i].assign(params_[i]->size(), 0.0f);
      const std::string& n = params_[i]->name;
      decay_[i] = !(ends_with(n, ".bias") || ends_with(n, ".gamma") || ends_with(n, ".beta"));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      ParamTensor<float>& p = *params_[i];
      float* m = m_[i].data();
      float* v = v_[i].data();
      const bool wd = decay_[i];
      for (size_t k = 0; k < p.size(); ++k) {
        const double g = p.grad[k];
        m[k] = static_cast<float>(beta1_ * m[k] + (1.0 - beta1_) * g);
        v[k] = static_cast<float>(beta2_ * v[k] + (1.0 - beta2_) * g * g);
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        double upd = mhat / (std::sqrt(vhat) + eps_);
        if (wd) upd += wd_ * p.value[k];
        p.value[k] = static_cast<float>(p.value[k] - lr_ * upd);
      }
    }
  }

  int64_t steps() const { return t_; }

 private:
  static bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

  std::vector<ParamTensor<float>*> params_;
  std::vector<std::vector<float>> m_, v_;
  std::vector<bool> decay_;
  double lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

// Brightness/contrast jitter on intensities only, then an optional
// horizontal flip of BOTH image and labels. No rotations or vertical flips:
// the depth axis is anatomically oriented. Draw order is fixed so the RNG
// stream is reproducible.
inline void augment_stripe(std::vector<float>& pixels, LabelMap& labels, int h, int w,
                           std::mt19937_64& rng, const TrainConfig& cfg) {
  std::uniform_real_distribution<double> ub(-cfg.jitter_brightness, cfg.jitter_brightness);
  std::uniform_real_distribution<double> uc(-cfg.jitter_contrast, cfg.jitter_contrast);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const float brightness = static_cast<float>(ub(rng));
  const float contrast = static_cast<float>(1.0 + uc(rng));
  const bool flip = u01(rng) < cfg.hflip_prob;
  // Neutral draws must be a bit-exact no-op, so the map is skipped entirely.
  if (brightness != 0.0f || contrast != 1.0f)
    for (float& v : pixels)
      v = std::clamp(0.5f + (v - 0.5f) * contrast + brightness, 0.0f, 1.0f);
  if (flip) {
    for (int r = 0; r < h; ++r) {
      float* row = pixels.data() + static_cast<size_t>(r) * w;
      std::reverse(row, row + w);
      uint8_t* lrow = labels.labels.data() + static_cast<size_t>(r) * w;
      std::reverse(lrow, lrow + w);
    }
  }
}

// ---------------------------------------------------------------------------
// Full-frame inference
// ---------------------------------------------------------------------------

struct FrameInference {
  ProbMap probs;        // full frame, post-softmax
  LabelMap labels;      // order-constrained decoding
  BoundaryTrace trace;  // median-smoothed interfaces
  double confidence = 0.0;
};

// Tile -> normalize -> pad -> batched forward -> crop -> reassemble ->
// softmax -> ordered decode -> trace -> smooth. One call per frame.
inline FrameInference infer_frame(SegNetF& net, const Frame& frame, const NormStats& stats,
                                  Precision prec = Precision::Full, int smooth_window = 5) {
  std::vector<Stripe> stripes = tile(frame);
  const int H = stripes[0].height_px, W = stripes[0].width_px;
  const PadResult probe = pad16(stripes[0].pixels, H, W);
  TensorF batch(static_cast<int>(stripes.size()), 1, probe.padded_h, probe.padded_w);
  for (size_t i = 0; i < stripes.size(); ++i) {
    normalize_inplace(stripes[i].pixels, stats);
    const PadResult padded = pad16(stripes[i].pixels, H, W);
    std::copy(padded.data.begin(), padded.data.end(), batch.ptr(static_cast<int>(i), 0));
  }
  TensorF logits = crop(net.forward(batch, prec), H, W);
  TensorF frame_logits = reassemble(unpack_batch(logits));
  TensorF probs_t = softmax_channels(frame_logits);

  FrameInference out;
  out.probs = ProbMap(frame.height_px, frame.width_px);
  std::copy(probs_t.data.begin(), probs_t.data.end(), out.probs.probs.begin());
  DecodeResult dec = decode_ordered(out.probs);
  out.labels = std::move(dec.labels);
  BoundaryTrace raw = extract_trace(out.labels, frame.pixel_pitch_um);
  out.trace = smooth_trace(raw, smooth_window);
  out.confidence = trace_confidence(out.labels, out.probs, out.trace);
  return out;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct ValScores {
  double mae_px = 0.0;  // pooled epi+dm; truth columns the model misses cost H/4
  double macro_dice = 0.0;
};

inline ValScores validate_model(SegNetF& net, const DatasetBundle& ds, const NormStats& stats,
                                Precision prec = Precision::Full, int smooth_window = 5) {
  if (ds.size() == 0) throw UsageError("validate_model: empty dataset");
  ClassCounts counts;
  double abs_sum = 0.0;
  int64_t cols = 0;
  for (size_t i = 0; i < ds.size(); ++i) {
    const FrameInference inf = infer_frame(net, ds.frames[i], stats, prec, smooth_window);
    counts.add(inf.labels, ds.masks[i]);
    const BoundaryTrace& truth = ds.traces[i];
    const double miss_penalty = ds.frames[i].height_px / 4.0;
    for (int c = 0; c < truth.width(); ++c) {
      if (truth.epi_row_px[c]) {
        abs_sum += inf.trace.epi_row_px[c]
                       ? std::abs(*inf.trace.epi_row_px[c] - *truth.epi_row_px[c])
                       : miss_penalty;
        ++cols;
      }
      if (truth.dm_row_px[c]) {
        abs_sum += inf.trace.dm_row_px[c]
                       ? std::abs(*inf.trace.dm_row_px[c] - *truth.dm_row_px[c])
                       : miss_penalty;
        ++cols;
      }
    }
  }
  ValScores out;
  out.mae_px = cols ? abs_sum / static_cast<double>(cols) : 0.0;
  out.macro_dice = seg_scores(counts).macro_dice;
  return out;
}

// ---------------------------------------------------------------------------
// Model selection
// ---------------------------------------------------------------------------

struct SelectionRecord {
  int epoch = 0;
  double val_boundary_mae_px = 0.0;
  double val_macro_dice = 0.0;
  std::string checkpoint;  // path of the candidate weights, may be empty

  // Total order: lower MAE first, then higher Dice, then earlier epoch.
  bool operator<(const SelectionRecord& o) const {
    if (val_boundary_mae_px != o.val_boundary_mae_px)
      return val_boundary_mae_px < o.val_boundary_mae_px;
    if (val_macro_dice != o.val_macro_dice) return val_macro_dice > o.val_macro_dice;
    return epoch < o.epoch;
  }
};

inline void to_json(nlohmann::json& j, const SelectionRecord& r) {
  j = {{"epoch", r.epoch},
       {"val_boundary_mae_px", r.val_boundary_mae_px},
       {"val_macro_dice", r.val_macro_dice},
       {"checkpoint", r.checkpoint}};
}

inline void from_json(const nlohmann::json& j, SelectionRecord& r) {
  r.epoch = j.at("epoch").get<int>();
  r.val_boundary_mae_px = j.at("val_boundary_mae_px").get<double>();
  r.val_macro_dice = j.at("val_macro_dice").get<double>();
  r.checkpoint = j.value("checkpoint", std::string());
}

inline SelectionRecord select_best(const std::vector<SelectionRecord>& records) {
  if (records.empty()) throw UsageError("select_best: no records");
  return *std::min_element(records.begin(), records.end());
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double loss_total = 0.0;
  double loss_ce = 0.0;
  double loss_dice = 0.0;
  double loss_topo = 0.0;
  double val_mae_px = 0.0;
  double val_dice = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::vector<SelectionRecord> records;
  SelectionRecord best;
  NormStats norm_stats;
};

inline constexpr char kHistoryHeader[] = "epoch,loss_ce,loss_dice,loss_topo,val_mae_px,val_dice";

// Trains `net` in place (caller seeds the initial parameters), restores the
// weights of the selected epoch before returning. Normalization statistics
// are fit on the training frames and returned for checkpointing.
inline TrainResult train(SegNetF& net, const DatasetBundle& train_set,
                         const DatasetBundle& val_set, const TrainConfig& cfg,
                         const LossWeights& weights, const fs::path& history_csv_path = {},
                         const std::function<void(const EpochStats&)>& on_epoch = {}) {
  cfg.validate();
  weights.validate();
  if (train_set.size() == 0) throw UsageError("train: empty training set");
  if (val_set.size() == 0) throw UsageError("train: empty validation set");

  TrainResult result;
  result.norm_stats = fit_norm(std::span<const Frame>(train_set.frames));
  const Precision prec = cfg.precision();

  // Pre-tile labels once; pixel stripes are cut per batch (they get mutated
  // by augmentation and normalization).
  std::vector<std::vector<LabelMap>> label_stripes;
  label_stripes.reserve(train_set.size());
  for (const LabelMap& m : train_set.masks) label_stripes.push_back(tile_labels(m));

  std::vector<std::pair<int, int>> order;  // (frame, stripe)
  for (int f = 0; f < static_cast<int>(train_set.size()); ++f)
    for (int s = 0; s < kStripesPerFrame; ++s) order.emplace_back(f, s);

  AdamW opt(net.params(), cfg);

  std::ofstream history;
  if (!history_csv_path.empty()) {
    history.open(history_csv_path);
    if (!history) throw IoError("cannot open " + history_csv_path.string() + " for writing");
    history << kHistoryHeader << "\n";
  }

  std::vector<float> best_params;
  const int H = kFrameHeight, W = kStripeWidth;
  const size_t bstride = static_cast<size_t>(cfg.batch_size_stripes);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x45504f43ULL + static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double sum_total = 0.0, sum_ce = 0.0, sum_dice = 0.0, sum_topo = 0.0;
    size_t seen = 0;
    for (size_t start = 0; start < order.size(); start += bstride) {
      const size_t bsz = std::min(bstride, order.size() - start);
      TensorF batch(static_cast<int>(bsz), 1, H, W);
      LabelBatch targets(static_cast<int>(bsz), 1, H, W);
      for (size_t b = 0; b < bsz; ++b) {
        const auto [f, s] = order[start + b];
        const Frame& frame = train_set.frames[f];
        std::vector<float> pixels(static_cast<size_t>(H) * W);
        const int col0 = s * kStripeWidth;
        for (int r = 0; r < H; ++r)
          std::copy_n(&frame.pixels[static_cast<size_t>(r) * frame.width_px + col0], W,
                      &pixels[static_cast<size_t>(r) * W]);
        LabelMap labels = label_stripes[f][s];
        augment_stripe(pixels, labels, H, W, rng, cfg);
        normalize_inplace(pixels, result.norm_stats);
        std::copy(pixels.begin(), pixels.end(), batch.ptr(static_cast<int>(b), 0));
        std::copy(labels.labels.begin(), labels.labels.end(),
                  targets.ptr(static_cast<int>(b), 0));
      }

      net.zero_grad();
      TensorF logits = net.forward(batch, prec);
      TensorF dlogits;
      LossBreakdown lb;
      if (cfg.objective == "bce") {
        TensorF probs = softmax_channels(logits);
        TensorF dprobs;
        const float bce = loss_bce(probs, targets, &dprobs);
        dlogits = softmax_backward(probs, dprobs);
        lb.total = lb.ce = bce;
      } else {
        lb = loss_total(logits, targets, weights, epoch, &dlogits);
      }
      if (!std::isfinite(lb.total) || lb.total > cfg.divergence_threshold)
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                              " (loss = " + std::to_string(lb.total) + ")");
      net.backward(dlogits);
      opt.step();

      sum_total += lb.total * static_cast<double>(bsz);
      sum_ce += lb.ce * static_cast<double>(bsz);
      sum_dice += lb.dice * static_cast<double>(bsz);
      sum_topo += lb.topo * static_cast<double>(bsz);
      seen += bsz;
    }

    EpochStats es;
    es.epoch = epoch;
    es.loss_total = sum_total / static_cast<double>(seen);
    es.loss_ce = sum_ce / static_cast<double>(seen);
    es.loss_dice = sum_dice / static_cast<double>(seen);
    es.loss_topo = sum_topo / static_cast<double>(seen);

    const ValScores val =
        validate_model(net, val_set, result.norm_stats, prec, cfg.smooth_window);
    es.val_mae_px = val.mae_px;
    es.val_dice = val.macro_dice;
    result.history.push_back(es);
    result.records.push_back(SelectionRecord{epoch, val.mae_px, val.macro_dice, ""});

    if (history.is_open()) {
      char row[256];
      std::snprintf(row, sizeof(row), "%d,%.17g,%.17g,%.17g,%.17g,%.17g", es.epoch, es.loss_ce,
                    es.loss_dice, es.loss_topo, es.val_mae_px, es.val_dice);
      history << row << "\n";
      history.flush();
    }

    if (best_params.empty() || result.records.back() < result.best) {
      result.best = result.records.back();
      best_params.clear();
      for (const ParamTensor<float>* p : net.params())
        best_params.insert(best_params.end(), p->value.begin(), p->value.end());
    }
    if (on_epoch) on_epoch(es);
  }

  // Restore the selected weights.
  size_t off = 0;
  for (ParamTensor<float>* p : net.params()) {
    std::copy_n(best_params.begin() + off, p->size(), p->value.begin());
    off += p->size();
  }
  return result;
}

}  // namespace octseg
