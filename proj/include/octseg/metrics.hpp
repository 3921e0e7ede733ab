#pragma once

// Evaluation: per-class and macro Dice/IoU, boundary mean absolute error in
// pixels and micrometres with coverage, SSIM (11x11 Gaussian window, valid
// mode) and PSNR on two-channel soft maps of the non-background classes,
// plus an aggregator that averages per-frame scores (unweighted) into one
// report and a per-frame CSV for distribution analysis.

#include <array>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "octseg/core.hpp"

namespace octseg {

// ---------------------------------------------------------------------------
// Dice / IoU
// ---------------------------------------------------------------------------

struct ClassCounts {
  // Per class: intersection, predicted pixels, truth pixels.
  std::array<int64_t, kNumClasses> inter{};
  std::array<int64_t, kNumClasses> pred{};
  std::array<int64_t, kNumClasses> truth{};

  void add(const LabelMap& pred_map, const LabelMap& truth_map) {
    if (pred_map.height_px != truth_map.height_px || pred_map.width_px != truth_map.width_px)
      throw DimensionError("ClassCounts: label map shape mismatch");
    for (size_t i = 0; i < pred_map.labels.size(); ++i) {
      const uint8_t p = pred_map.labels[i], t = truth_map.labels[i];
      if (p >= kNumClasses || t >= kNumClasses)
        throw ConfigError("ClassCounts: class id out of range");
      ++pred[p];
      ++truth[t];
      if (p == t) ++inter[p];
    }
  }
};

struct SegScores {
  std::array<double, kNumClasses> dice{};
  std::array<double, kNumClasses> iou{};
  double macro_dice = 0.0;
  double macro_iou = 0.0;
};

// A class absent from both prediction and truth scores a perfect 1.0; the
// macro means are unweighted over all classes.
inline SegScores seg_scores(const ClassCounts& c) {
  SegScores s;
  for (int k = 0; k < kNumClasses; ++k) {
    const int64_t denom = c.pred[k] + c.truth[k];
    if (denom == 0) {
      s.dice[k] = 1.0;
      s.iou[k] = 1.0;
    } else {
      s.dice[k] = 2.0 * static_cast<double>(c.inter[k]) / static_cast<double>(denom);
      s.iou[k] = static_cast<double>(c.inter[k]) / static_cast<double>(denom - c.inter[k]);
    }
    s.macro_dice += s.dice[k];
    s.macro_iou += s.iou[k];
  }
  s.macro_dice /= kNumClasses;
  s.macro_iou /= kNumClasses;
  return s;
}

inline SegScores dice_iou(const LabelMap& pred, const LabelMap& truth) {
  ClassCounts c;
  c.add(pred, truth);
  return seg_scores(c);
}

// ---------------------------------------------------------------------------
// Boundary MAE
// ---------------------------------------------------------------------------

struct BoundaryErrorAccum {
  double abs_sum_epi = 0.0;
  double abs_sum_dm = 0.0;
  int64_t eval_epi = 0, eval_dm = 0;    // columns scored (both traces present)
  int64_t truth_epi = 0, truth_dm = 0;  // columns the truth marks present
  double pixel_pitch_um = kDefaultPixelPitchUm;

  void add(const BoundaryTrace& pred, const BoundaryTrace& truth) {
    if (pred.width() != truth.width())
      throw DimensionError("BoundaryErrorAccum: trace width mismatch");
    pixel_pitch_um = truth.pixel_pitch_um;
    for (int c = 0; c < truth.width(); ++c) {
      if (truth.epi_row_px[c]) {
        ++truth_epi;
        if (pred.epi_row_px[c]) {
          abs_sum_epi += std::abs(*pred.epi_row_px[c] - *truth.epi_row_px[c]);
          ++eval_epi;
        }
      }
      if (truth.dm_row_px[c]) {
        ++truth_dm;
        if (pred.dm_row_px[c]) {
          abs_sum_dm += std::abs(*pred.dm_row_px[c] - *truth.dm_row_px[c]);
          ++eval_dm;
        }
      }
    }
  }
};

// Columns the prediction leaves MISSING are excluded from the error means
// and surfaced through the coverage fractions instead; an interface with no
// covered column has an undefined (absent) MAE. Micrometre values are the
// pixel values scaled by the pitch, a single multiplication.
struct BoundaryMae {
  std::optional<double> epi_mae_px, dm_mae_px;
  std::optional<double> epi_mae_um, dm_mae_um;
  std::optional<double> mean_mae_px, mean_mae_um;  // pooled over both interfaces
  double coverage = 1.0;                           // evaluated / truth-present columns
  double coverage_epi = 1.0, coverage_dm = 1.0;
  int64_t evaluated_cols = 0;
};

inline BoundaryMae boundary_mae(const BoundaryErrorAccum& a) {
  BoundaryMae m;
  if (a.eval_epi) {
    m.epi_mae_px = a.abs_sum_epi / static_cast<double>(a.eval_epi);
    m.epi_mae_um = *m.epi_mae_px * a.pixel_pitch_um;
  }
  if (a.eval_dm) {
    m.dm_mae_px = a.abs_sum_dm / static_cast<double>(a.eval_dm);
    m.dm_mae_um = *m.dm_mae_px * a.pixel_pitch_um;
  }
  const int64_t total = a.eval_epi + a.eval_dm;
  if (total) {
    m.mean_mae_px = (a.abs_sum_epi + a.abs_sum_dm) / static_cast<double>(total);
    m.mean_mae_um = *m.mean_mae_px * a.pixel_pitch_um;
  }
  m.coverage_epi =
      a.truth_epi ? static_cast<double>(a.eval_epi) / static_cast<double>(a.truth_epi) : 1.0;
  m.coverage_dm =
      a.truth_dm ? static_cast<double>(a.eval_dm) / static_cast<double>(a.truth_dm) : 1.0;
  const int64_t truth_total = a.truth_epi + a.truth_dm;
  m.coverage = truth_total ? static_cast<double>(total) / static_cast<double>(truth_total) : 1.0;
  m.evaluated_cols = total;
  return m;
}

inline BoundaryMae boundary_mae(const BoundaryTrace& pred, const BoundaryTrace& truth) {
  BoundaryErrorAccum a;
  a.add(pred, truth);
  return boundary_mae(a);
}

// ---------------------------------------------------------------------------
// Soft maps (SSIM / PSNR domain)
// ---------------------------------------------------------------------------

// Two planes: probability mass (or one-hot indicator) of the cornea band and
// of the region below the membrane. Background is excluded so structural
// scores track the anatomy, not empty space.
struct SoftMap {
  std::vector<double> data;  // 2 x H x W planar
  int height_px = 0;
  int width_px = 0;

  SoftMap() = default;
  SoftMap(int h, int w) : data(2 * static_cast<size_t>(h) * w, 0.0), height_px(h), width_px(w) {}

  double& at(int ch, int r, int c) {
    return data[(static_cast<size_t>(ch) * height_px + r) * width_px + c];
  }
  double at(int ch, int r, int c) const {
    return data[(static_cast<size_t>(ch) * height_px + r) * width_px + c];
  }
};

inline SoftMap soft_from_probs(const ProbMap& pm) {
  if (pm.num_classes != kNumClasses)
    throw DimensionError("soft_from_probs: expects 3-class probability maps");
  SoftMap out(pm.height_px, pm.width_px);
  for (int r = 0; r < pm.height_px; ++r)
    for (int c = 0; c < pm.width_px; ++c) {
      out.at(0, r, c) = pm.at(1, r, c);
      out.at(1, r, c) = pm.at(2, r, c);
    }
  return out;
}

inline SoftMap soft_from_labels(const LabelMap& lm) {
  SoftMap out(lm.height_px, lm.width_px);
  for (int r = 0; r < lm.height_px; ++r)
    for (int c = 0; c < lm.width_px; ++c) {
      out.at(0, r, c) = lm.at(r, c) == 1 ? 1.0 : 0.0;
      out.at(1, r, c) = lm.at(r, c) == 2 ? 1.0 : 0.0;
    }
  return out;
}

namespace detail {

inline const std::array<double, 11>& ssim_kernel() {
  static const std::array<double, 11> g = [] {
    std::array<double, 11> k{};
    double sum = 0.0;
    for (int i = 0; i < 11; ++i) {
      const double d = i - 5;
      k[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
  }();
  return g;
}

// Separable 11x11 Gaussian, valid mode: output is (H-10) x (W-10).
inline std::vector<double> gauss_valid(const std::vector<double>& img, int H, int W) {
  const auto& g = ssim_kernel();
  const int Wv = W - 10, Hv = H - 10;
  std::vector<double> tmp(static_cast<size_t>(H) * Wv);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < Wv; ++c) {
      double acc = 0.0;
      for (int i = 0; i < 11; ++i) acc += g[i] * img[static_cast<size_t>(r) * W + c + i];
      tmp[static_cast<size_t>(r) * Wv + c] = acc;
    }
  std::vector<double> out(static_cast<size_t>(Hv) * Wv);
  for (int r = 0; r < Hv; ++r)
    for (int c = 0; c < Wv; ++c) {
      double acc = 0.0;
      for (int i = 0; i < 11; ++i) acc += g[i] * tmp[static_cast<size_t>(r + i) * Wv + c];
      out[static_cast<size_t>(r) * Wv + c] = acc;
    }
  return out;
}

}  // namespace detail

// Mean SSIM over both channels, 11x11 Gaussian window (sigma 1.5), valid
// mode, K1 = 0.01, K2 = 0.03, dynamic range 1.
inline double ssim(const SoftMap& a, const SoftMap& b) {
  if (a.height_px != b.height_px || a.width_px != b.width_px)
    throw DimensionError("ssim: shape mismatch");
  const int H = a.height_px, W = a.width_px;
  if (H < 11 || W < 11) throw UsageError("ssim: image smaller than the 11x11 window");
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  const size_t plane = static_cast<size_t>(H) * W;
  double total = 0.0;
  size_t count = 0;
  std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  for (int ch = 0; ch < 2; ++ch) {
    for (size_t i = 0; i < plane; ++i) {
      x[i] = a.data[ch * plane + i];
      y[i] = b.data[ch * plane + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::gauss_valid(x, H, W);
    const auto my = detail::gauss_valid(y, H, W);
    const auto mxx = detail::gauss_valid(xx, H, W);
    const auto myy = detail::gauss_valid(yy, H, W);
    const auto mxy = detail::gauss_valid(xy, H, W);
    for (size_t i = 0; i < mx.size(); ++i) {
      const double vx = mxx[i] - mx[i] * mx[i];
      const double vy = myy[i] - my[i] * my[i];
      const double cxy = mxy[i] - mx[i] * my[i];
      const double num = (2.0 * mx[i] * my[i] + kC1) * (2.0 * cxy + kC2);
      const double den = (mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// 10 * log10(1 / MSE) with MSE over all pixels of both channels; identical
// maps give +infinity.
inline double psnr_from_mse(double mse) {
  if (mse < 0.0) throw UsageError("psnr: negative MSE");
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

inline double mse(const SoftMap& a, const SoftMap& b) {
  if (a.height_px != b.height_px || a.width_px != b.width_px)
    throw DimensionError("mse: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

inline double psnr(const SoftMap& a, const SoftMap& b) { return psnr_from_mse(mse(a, b)); }

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

// Every field is the unweighted mean of the per-frame values; the MAE means
// skip frames whose interface had no covered column and stay absent if no
// frame contributed. Micrometre MAEs are the aggregated pixel values scaled
// by the pitch once.
struct EvalReport {
  double macro_dice = 0.0;
  double macro_iou = 0.0;
  std::array<double, kNumClasses> dice{};
  std::array<double, kNumClasses> iou{};
  std::optional<double> epi_mae_px, epi_mae_um;
  std::optional<double> dm_mae_px, dm_mae_um;
  double coverage_epi = 1.0, coverage_dm = 1.0;
  double ssim = 0.0;
  double psnr_db = 0.0;
  double throughput_hz = 0.0;  // 0 when not measured
  int64_t n_frames = 0;
};

// One frame's scores, kept for the per-frame CSV.
struct FrameScore {
  int64_t frame = 0;
  double macro_dice = 0.0, macro_iou = 0.0;
  std::optional<double> epi_mae_px, dm_mae_px;
  double coverage_epi = 1.0, coverage_dm = 1.0;
  double ssim = 0.0, psnr_db = 0.0;
};

inline constexpr char kFrameCsvHeader[] =
    "frame,macro_dice,macro_iou,epi_mae_px,dm_mae_px,coverage_epi,coverage_dm,ssim,psnr_db";

class Evaluator {
 public:
  void add(const LabelMap& pred_labels, const LabelMap& truth_labels, const ProbMap& pred_probs,
           const BoundaryTrace& pred_trace, const BoundaryTrace& truth_trace) {
    FrameScore fs;
    fs.frame = static_cast<int64_t>(scores_.size());
    const SegScores seg = dice_iou(pred_labels, truth_labels);
    fs.macro_dice = seg.macro_dice;
    fs.macro_iou = seg.macro_iou;
    for (int k = 0; k < kNumClasses; ++k) {
      dice_sum_[k] += seg.dice[k];
      iou_sum_[k] += seg.iou[k];
    }
    const BoundaryMae mae = boundary_mae(pred_trace, truth_trace);
    pitch_um_ = truth_trace.pixel_pitch_um;
    fs.epi_mae_px = mae.epi_mae_px;
    fs.dm_mae_px = mae.dm_mae_px;
    fs.coverage_epi = mae.coverage_epi;
    fs.coverage_dm = mae.coverage_dm;
    const SoftMap sp = soft_from_probs(pred_probs);
    const SoftMap st = soft_from_labels(truth_labels);
    fs.ssim = ssim(sp, st);
    fs.psnr_db = psnr(sp, st);
    scores_.push_back(fs);
  }

  EvalReport finalize(double throughput_hz = 0.0) const {
    if (scores_.empty()) throw UsageError("Evaluator: no frames added");
    EvalReport r;
    const double n = static_cast<double>(scores_.size());
    double epi_sum = 0.0, dm_sum = 0.0;
    int64_t epi_n = 0, dm_n = 0;
    for (const FrameScore& fs : scores_) {
      r.macro_dice += fs.macro_dice / n;
      r.macro_iou += fs.macro_iou / n;
      r.coverage_epi += fs.coverage_epi / n;
      r.coverage_dm += fs.coverage_dm / n;
      r.ssim += fs.ssim / n;
      r.psnr_db += fs.psnr_db / n;
      if (fs.epi_mae_px) {
        epi_sum += *fs.epi_mae_px;
        ++epi_n;
      }
      if (fs.dm_mae_px) {
        dm_sum += *fs.dm_mae_px;
        ++dm_n;
      }
    }
    for (int k = 0; k < kNumClasses; ++k) {
      r.dice[k] = dice_sum_[k] / n;
      r.iou[k] = iou_sum_[k] / n;
    }
    if (epi_n) {
      r.epi_mae_px = epi_sum / static_cast<double>(epi_n);
      r.epi_mae_um = *r.epi_mae_px * pitch_um_;
    }
    if (dm_n) {
      r.dm_mae_px = dm_sum / static_cast<double>(dm_n);
      r.dm_mae_um = *r.dm_mae_px * pitch_um_;
    }
    r.throughput_hz = throughput_hz;
    r.n_frames = static_cast<int64_t>(scores_.size());
    return r;
  }

  const std::vector<FrameScore>& frame_scores() const { return scores_; }
  int64_t frames() const { return static_cast<int64_t>(scores_.size()); }

 private:
  std::vector<FrameScore> scores_;
  std::array<double, kNumClasses> dice_sum_{};
  std::array<double, kNumClasses> iou_sum_{};
  double pitch_um_ = kDefaultPixelPitchUm;
};

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json json_real(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline nlohmann::json json_real(const std::optional<double>& v) {
  if (!v) return nullptr;
  return json_real(*v);
}

inline double real_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw ParseError("bad numeric field: " + s);
  }
  return j.get<double>();
}

inline std::optional<double> opt_real_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return real_from_json(j);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"macro_dice", r.macro_dice},
       {"macro_iou", r.macro_iou},
       {"dice", r.dice},
       {"iou", r.iou},
       {"epi_mae_px", detail::json_real(r.epi_mae_px)},
       {"epi_mae_um", detail::json_real(r.epi_mae_um)},
       {"dm_mae_px", detail::json_real(r.dm_mae_px)},
       {"dm_mae_um", detail::json_real(r.dm_mae_um)},
       {"coverage_epi", r.coverage_epi},
       {"coverage_dm", r.coverage_dm},
       {"ssim", r.ssim},
       {"psnr_db", detail::json_real(r.psnr_db)},
       {"throughput_hz", r.throughput_hz},
       {"n_frames", r.n_frames}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.macro_dice = j.at("macro_dice").get<double>();
  r.macro_iou = j.at("macro_iou").get<double>();
  j.at("dice").get_to(r.dice);
  j.at("iou").get_to(r.iou);
  r.epi_mae_px = detail::opt_real_from_json(j.at("epi_mae_px"));
  r.epi_mae_um = detail::opt_real_from_json(j.at("epi_mae_um"));
  r.dm_mae_px = detail::opt_real_from_json(j.at("dm_mae_px"));
  r.dm_mae_um = detail::opt_real_from_json(j.at("dm_mae_um"));
  r.coverage_epi = j.at("coverage_epi").get<double>();
  r.coverage_dm = j.at("coverage_dm").get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.psnr_db = detail::real_from_json(j.at("psnr_db"));
  r.throughput_hz = j.at("throughput_hz").get<double>();
  r.n_frames = j.at("n_frames").get<int64_t>();
}

namespace detail {

inline std::string fmt_real(double v, int prec) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

inline std::string csv_real(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string csv_real(const std::optional<double>& v) {
  return v ? csv_real(*v) : std::string();
}

}  // namespace detail

// Fixed row order: SSIM, PSNR, IoU, Dice, Hz.
inline std::string render_report_table(const EvalReport& r) {
  std::ostringstream os;
  os << "metric        value\n";
  os << "SSIM          " << detail::fmt_real(r.ssim, 4) << "\n";
  os << "PSNR [dB]     " << detail::fmt_real(r.psnr_db, 2) << "\n";
  os << "IoU (macro)   " << detail::fmt_real(r.macro_iou, 4) << "\n";
  os << "Dice (macro)  " << detail::fmt_real(r.macro_dice, 4) << "\n";
  os << "Hz            " << detail::fmt_real(r.throughput_hz, 1) << "\n";
  return os.str();
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "ssim,psnr_db,macro_iou,macro_dice,hz,epi_mae_px,epi_mae_um,dm_mae_px,dm_mae_um,"
        "coverage_epi,coverage_dm,n_frames\n";
  os << detail::csv_real(r.ssim) << ',' << detail::csv_real(r.psnr_db) << ','
     << detail::csv_real(r.macro_iou) << ',' << detail::csv_real(r.macro_dice) << ','
     << detail::csv_real(r.throughput_hz) << ',' << detail::csv_real(r.epi_mae_px) << ','
     << detail::csv_real(r.epi_mae_um) << ',' << detail::csv_real(r.dm_mae_px) << ','
     << detail::csv_real(r.dm_mae_um) << ',' << detail::csv_real(r.coverage_epi) << ','
     << detail::csv_real(r.coverage_dm) << ',' << r.n_frames << "\n";
  return os.str();
}

inline std::string frame_scores_csv(const std::vector<FrameScore>& scores) {
  std::ostringstream os;
  os << kFrameCsvHeader << "\n";
  for (const FrameScore& fs : scores) {
    os << fs.frame << ',' << detail::csv_real(fs.macro_dice) << ','
       << detail::csv_real(fs.macro_iou) << ',' << detail::csv_real(fs.epi_mae_px) << ','
       << detail::csv_real(fs.dm_mae_px) << ',' << detail::csv_real(fs.coverage_epi) << ','
       << detail::csv_real(fs.coverage_dm) << ',' << detail::csv_real(fs.ssim) << ','
       << detail::csv_real(fs.psnr_db) << "\n";
  }
  return os.str();
}

}  // namespace octseg
