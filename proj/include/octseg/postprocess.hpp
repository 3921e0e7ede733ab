#pragma once

// From per-pixel probabilities to anatomy: per-column constrained decoding
// (class ids must run 0 -> 1 -> 2 with depth), interface trace extraction,
// a decoding-confidence score and median smoothing of traces.

#include <algorithm>
#include <limits>

#include "octseg/core.hpp"

namespace octseg {

// ---------------------------------------------------------------------------
// Ordered decoding
// ---------------------------------------------------------------------------

struct DecodeResult {
  LabelMap labels;
  // Per column: chosen run boundaries (a, b) with 0 <= a <= b <= H meaning
  // rows [0,a) -> class 0, [a,b) -> class 1, [b,H) -> class 2, and the
  // summed negative log-likelihood of that labeling.
  std::vector<int> epi_cut;
  std::vector<int> dm_cut;
  std::vector<double> column_cost;
};

// Exact per-column MAP labeling under the layer-order constraint, O(H log H)
// per column via prefix sums. Probabilities are clamped to 1e-12 before the
// log so hard zeros stay finite. Candidate pairs are ranked by the shared
// selection value f(a) + g(b), with f(a) = s0[a]-s1[a] and g(b) =
// s1[b]-s2[b]; ties break lexicographically by (value, a, b), smallest
// first, so a column with no evidence collapses to (0, 0), i.e. all class 2.
// Float addition is monotone but not injective: distinct f values can land
// on the same total after adding g(b). An exhaustive enumeration would then
// prefer the smaller a, so the scan keeps the staircase of strict prefix
// minima of f and, per b, binary-searches the first staircase entry whose
// total collapses onto the minimum. Reported costs are recomputed by direct
// summation in row order.
inline DecodeResult decode_ordered(const ProbMap& pm) {
  if (pm.num_classes != kNumClasses)
    throw DimensionError("decode_ordered: expects 3-class probability maps");
  const int H = pm.height_px, W = pm.width_px;
  if (H <= 0 || W <= 0) throw DimensionError("decode_ordered: empty probability map");

  DecodeResult out;
  out.labels = LabelMap(H, W);
  out.epi_cut.resize(W);
  out.dm_cut.resize(W);
  out.column_cost.resize(W);

  std::vector<double> c0(H), c1(H), c2(H);
  std::vector<double> s0(H + 1), s1(H + 1), s2(H + 1);
  std::vector<double> stair_f(H + 1);
  std::vector<int> stair_a(H + 1);
  for (int col = 0; col < W; ++col) {
    for (int r = 0; r < H; ++r) {
      c0[r] = -std::log(std::max(static_cast<double>(pm.at(0, r, col)), 1e-12));
      c1[r] = -std::log(std::max(static_cast<double>(pm.at(1, r, col)), 1e-12));
      c2[r] = -std::log(std::max(static_cast<double>(pm.at(2, r, col)), 1e-12));
    }
    s0[0] = s1[0] = s2[0] = 0.0;
    for (int r = 0; r < H; ++r) {
      s0[r + 1] = s0[r] + c0[r];
      s1[r + 1] = s1[r] + c1[r];
      s2[r + 1] = s2[r] + c2[r];
    }

    int best_a = 0, best_b = 0;
    double best_total = std::numeric_limits<double>::infinity();
    int n_stair = 0;
    for (int b = 0; b <= H; ++b) {
      const double fb = s0[b] - s1[b];
      if (n_stair == 0 || fb < stair_f[n_stair - 1]) {
        stair_f[n_stair] = fb;
        stair_a[n_stair] = b;
        ++n_stair;
      }
      const double gb = s1[b] - s2[b];
      const double total = stair_f[n_stair - 1] + gb;
      // First staircase entry reaching the minimal total; f decreases
      // strictly along the staircase, so the totals are non-increasing.
      int lo = 0, hi = n_stair - 1;
      while (lo < hi) {
        const int mid = (lo + hi) / 2;
        if (stair_f[mid] + gb == total)
          hi = mid;
        else
          lo = mid + 1;
      }
      const int a = stair_a[lo];
      if (total < best_total || (total == best_total && a < best_a)) {
        best_total = total;
        best_a = a;
        best_b = b;
      }
    }

    // Canonical cost: direct row-order summation of the chosen labeling.
    double cost = 0.0;
    for (int r = 0; r < H; ++r)
      cost += (r < best_a) ? c0[r] : (r < best_b ? c1[r] : c2[r]);

    out.epi_cut[col] = best_a;
    out.dm_cut[col] = best_b;
    out.column_cost[col] = cost;
    for (int r = 0; r < H; ++r)
      out.labels.at(r, col) = (r < best_a) ? 0 : (r < best_b ? 1 : 2);
  }
  return out;
}

// Raw per-pixel argmax with no ordering constraint (first class wins ties).
inline LabelMap argmax_labels(const ProbMap& pm) {
  LabelMap out(pm.height_px, pm.width_px, pm.num_classes);
  for (int r = 0; r < pm.height_px; ++r)
    for (int c = 0; c < pm.width_px; ++c) {
      int best = 0;
      float bv = pm.at(0, r, c);
      for (int k = 1; k < pm.num_classes; ++k)
        if (pm.at(k, r, c) > bv) {
          bv = pm.at(k, r, c);
          best = k;
        }
      out.at(r, c) = static_cast<uint8_t>(best);
    }
  return out;
}

// Columns whose labels are not monotone non-decreasing with depth.
inline int count_ordering_violations(const LabelMap& labels) {
  int bad = 0;
  for (int c = 0; c < labels.width_px; ++c) {
    uint8_t prev = 0;
    for (int r = 0; r < labels.height_px; ++r) {
      const uint8_t v = labels.at(r, c);
      if (v < prev) {
        ++bad;
        break;
      }
      prev = v;
    }
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Trace extraction
// ---------------------------------------------------------------------------

// Per column: epithelium = first class-1 row, membrane = last class-1 row;
// columns with no cornea pixels are MISSING. Requires ordered labels.
inline BoundaryTrace extract_trace(const LabelMap& labels,
                                   double pixel_pitch_um = kDefaultPixelPitchUm) {
  if (!validate_ordered(labels))
    throw ContractError("extract_trace: label map violates layer ordering");
  BoundaryTrace trace(labels.width_px, pixel_pitch_um);
  for (int c = 0; c < labels.width_px; ++c) {
    int first = -1, last = -1;
    for (int r = 0; r < labels.height_px; ++r) {
      if (labels.at(r, c) == 1) {
        if (first < 0) first = r;
        last = r;
      }
    }
    if (first >= 0) {
      trace.epi_row_px[c] = static_cast<double>(first);
      trace.dm_row_px[c] = static_cast<double>(last);
    }
  }
  return trace;
}

// Mean probability of the decoded label over pixels within `band_px` rows of
// either interface, present columns only. No interfaces anywhere -> 0.
inline double trace_confidence(const LabelMap& labels, const ProbMap& probs,
                               const BoundaryTrace& trace, int band_px = 8) {
  if (labels.height_px != probs.height_px || labels.width_px != probs.width_px)
    throw DimensionError("trace_confidence: labels/probs shape mismatch");
  if (trace.width() != labels.width_px)
    throw DimensionError("trace_confidence: trace width mismatch");
  double sum = 0.0;
  size_t count = 0;
  const int H = labels.height_px;
  for (int c = 0; c < labels.width_px; ++c) {
    if (!trace.epi_row_px[c]) continue;
    const int epi = static_cast<int>(std::lround(*trace.epi_row_px[c]));
    const int dm = static_cast<int>(std::lround(*trace.dm_row_px[c]));
    for (int r = std::max(0, epi - band_px); r <= std::min(H - 1, epi + band_px); ++r) {
      sum += probs.at(labels.at(r, c), r, c);
      ++count;
    }
    // Avoid double counting where the two bands overlap.
    const int dm_lo = std::max({0, dm - band_px, epi + band_px + 1});
    for (int r = dm_lo; r <= std::min(H - 1, dm + band_px); ++r) {
      sum += probs.at(labels.at(r, c), r, c);
      ++count;
    }
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Trace smoothing
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::optional<double>> median_filter_present(
    const std::vector<std::optional<double>>& rows, int window) {
  const int W = static_cast<int>(rows.size());
  const int half = window / 2;
  std::vector<std::optional<double>> out(W);
  std::vector<double> buf;
  for (int c = 0; c < W; ++c) {
    if (!rows[c]) continue;  // missing stays missing
    buf.clear();
    for (int k = std::max(0, c - half); k <= std::min(W - 1, c + half); ++k)
      if (rows[k]) buf.push_back(*rows[k]);
    std::sort(buf.begin(), buf.end());
    out[c] = buf[(buf.size() - 1) / 2];  // lower median: stays in the sample set
  }
  return out;
}

}  // namespace detail

// Per-interface median filter over present columns. Window must be odd.
inline BoundaryTrace smooth_trace(const BoundaryTrace& trace, int window = 5) {
  if (window < 1 || window % 2 == 0)
    throw UsageError("smooth_trace: window must be odd and positive");
  BoundaryTrace out(trace.width(), trace.pixel_pitch_um);
  out.epi_row_px = detail::median_filter_present(trace.epi_row_px, window);
  out.dm_row_px = detail::median_filter_present(trace.dm_row_px, window);
  return out;
}

}  // namespace octseg
