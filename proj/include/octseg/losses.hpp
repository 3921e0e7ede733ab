#pragma once

// Training objective: cross-entropy + soft Dice + a depth-axis smoothness
// penalty that discourages probability flicker along A-scans wherever the
// target labels say the column is inside one layer. All three terms come
// with analytic gradients with respect to the logits; everything is
// templated on the scalar type so finite-difference checks can run in
// double.

#include <json.hpp>

#include "octseg/core.hpp"
#include "octseg/tensor.hpp"

namespace octseg {

// ---------------------------------------------------------------------------
// Label batches
// ---------------------------------------------------------------------------

// Targets travel as N x 1 x H x W uint8 tensors next to logits batches.
using LabelBatch = Tensor<uint8_t>;

inline LabelBatch pack_labels(const std::vector<const LabelMap*>& maps) {
  if (maps.empty()) throw UsageError("pack_labels: empty batch");
  const int H = maps[0]->height_px, W = maps[0]->width_px;
  LabelBatch out(static_cast<int>(maps.size()), 1, H, W);
  for (size_t n = 0; n < maps.size(); ++n) {
    const LabelMap& m = *maps[n];
    if (m.height_px != H || m.width_px != W)
      throw DimensionError("pack_labels: inconsistent label dimensions");
    std::copy(m.labels.begin(), m.labels.end(), out.ptr(static_cast<int>(n), 0));
  }
  return out;
}

namespace detail {

template <typename T>
inline void check_loss_shapes(const Tensor<T>& scores, const LabelBatch& targets) {
  if (scores.n() != targets.n() || scores.h() != targets.h() || scores.w() != targets.w() ||
      targets.c() != 1)
    throw DimensionError("loss: scores/targets shape mismatch");
  if (scores.n() == 0 || scores.size() == 0) throw UsageError("loss: empty batch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Channel-axis softmax, numerically stable.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const int N = logits.n(), C = logits.c(), H = logits.h(), W = logits.w();
  const size_t hw = logits.plane();
  Tensor<T> probs(N, C, H, W);
  for (int n = 0; n < N; ++n) {
    const T* in = logits.ptr(n, 0);
    T* out = probs.ptr(n, 0);
    for (size_t p = 0; p < hw; ++p) {
      T zmax = in[p];
      for (int k = 1; k < C; ++k) zmax = std::max(zmax, in[k * hw + p]);
      T denom = T(0);
      for (int k = 0; k < C; ++k) {
        const T e = std::exp(in[k * hw + p] - zmax);
        out[k * hw + p] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (int k = 0; k < C; ++k) out[k * hw + p] *= inv;
    }
  }
  return probs;
}

// Chain a gradient in probability space back through the softmax:
// dz_k = p_k * (g_k - sum_j g_j p_j), per pixel.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs) {
  const int N = probs.n(), C = probs.c();
  const size_t hw = probs.plane();
  Tensor<T> dz(probs.shape[0], probs.shape[1], probs.shape[2], probs.shape[3]);
  for (int n = 0; n < N; ++n) {
    const T* p = probs.ptr(n, 0);
    const T* g = dprobs.ptr(n, 0);
    T* out = dz.ptr(n, 0);
    for (size_t i = 0; i < hw; ++i) {
      T dot = T(0);
      for (int k = 0; k < C; ++k) dot += g[k * hw + i] * p[k * hw + i];
      for (int k = 0; k < C; ++k) out[k * hw + i] = p[k * hw + i] * (g[k * hw + i] - dot);
    }
  }
  return dz;
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

// Mean per-pixel negative log-likelihood, computed from logits via
// log-sum-exp. Optional gradient (softmax - onehot) / num_pixels.
template <typename T>
T loss_ce(const Tensor<T>& logits, const LabelBatch& targets, Tensor<T>* dlogits = nullptr) {
  detail::check_loss_shapes(logits, targets);
  const int N = logits.n(), C = logits.c();
  const size_t hw = logits.plane();
  const T norm = T(1) / (static_cast<T>(N) * static_cast<T>(hw));
  if (dlogits) *dlogits = Tensor<T>(logits.shape[0], logits.shape[1], logits.shape[2], logits.shape[3]);
  T total = T(0);
  for (int n = 0; n < N; ++n) {
    const T* z = logits.ptr(n, 0);
    const uint8_t* t = targets.ptr(n, 0);
    T* dz = dlogits ? dlogits->ptr(n, 0) : nullptr;
    for (size_t p = 0; p < hw; ++p) {
      if (t[p] >= C) throw ConfigError("loss_ce: target class out of range");
      T zmax = z[p];
      for (int k = 1; k < C; ++k) zmax = std::max(zmax, z[k * hw + p]);
      T denom = T(0);
      for (int k = 0; k < C; ++k) denom += std::exp(z[k * hw + p] - zmax);
      const T lse = zmax + std::log(denom);
      total += lse - z[static_cast<size_t>(t[p]) * hw + p];
      if (dz) {
        for (int k = 0; k < C; ++k) {
          T soft = std::exp(z[k * hw + p] - zmax) / denom;
          if (k == t[p]) soft -= T(1);
          dz[k * hw + p] = soft * norm;
        }
      }
    }
  }
  return total * norm;
}

// ---------------------------------------------------------------------------
// Soft Dice
// ---------------------------------------------------------------------------

// 1 - mean over classes of (2*intersection + eps) / (|p| + |t| + eps), with
// sums taken globally across the batch per class. Gradient goes to `dprobs`
// in probability space when requested.
template <typename T>
T loss_dice(const Tensor<T>& probs, const LabelBatch& targets, Tensor<T>* dprobs = nullptr,
            T eps = static_cast<T>(1e-5)) {
  detail::check_loss_shapes(probs, targets);
  const int N = probs.n(), C = probs.c();
  const size_t hw = probs.plane();
  std::vector<T> inter(C, T(0)), psum(C, T(0)), tsum(C, T(0));
  for (int n = 0; n < N; ++n) {
    const T* p = probs.ptr(n, 0);
    const uint8_t* t = targets.ptr(n, 0);
    for (int k = 0; k < C; ++k) {
      const T* pk = p + static_cast<size_t>(k) * hw;
      T in_k = T(0), ps_k = T(0), ts_k = T(0);
      for (size_t i = 0; i < hw; ++i) {
        ps_k += pk[i];
        if (t[i] == k) {
          in_k += pk[i];
          ts_k += T(1);
        }
      }
      inter[k] += in_k;
      psum[k] += ps_k;
      tsum[k] += ts_k;
    }
  }
  T mean_dice = T(0);
  std::vector<T> num(C), den(C);
  for (int k = 0; k < C; ++k) {
    num[k] = T(2) * inter[k] + eps;
    den[k] = psum[k] + tsum[k] + eps;
    mean_dice += num[k] / den[k];
  }
  mean_dice /= static_cast<T>(C);

  if (dprobs) {
    *dprobs = Tensor<T>(probs.shape[0], probs.shape[1], probs.shape[2], probs.shape[3]);
    // d(loss)/dp_k(i) = -(1/C) * (2*[t_i==k]*den_k - num_k) / den_k^2
    const T invC = T(1) / static_cast<T>(C);
    for (int n = 0; n < N; ++n) {
      const uint8_t* t = targets.ptr(n, 0);
      T* g = dprobs->ptr(n, 0);
      for (int k = 0; k < C; ++k) {
        const T d2 = den[k] * den[k];
        T* gk = g + static_cast<size_t>(k) * hw;
        const T g_miss = invC * num[k] / d2;          // t != k
        const T g_hit = g_miss - invC * T(2) / den[k];  // t == k
        for (size_t i = 0; i < hw; ++i) gk[i] = (t[i] == k) ? g_hit : g_miss;
      }
    }
  }
  return T(1) - mean_dice;
}

// ---------------------------------------------------------------------------
// Depth-axis topology term
// ---------------------------------------------------------------------------

// For every vertically adjacent same-column pixel pair (i, i+1) whose target
// labels are EQUAL, penalize sum_k |p_i,k - t_i,k| * |p_i,k - p_i+1,k| and
// average over such pairs. Inside a layer the target is locally constant, so
// any probability flicker along depth is pure noise; across true interfaces
// (labels differ) the term is silent.
template <typename T>
T loss_topo(const Tensor<T>& probs, const LabelBatch& targets, Tensor<T>* dprobs = nullptr) {
  detail::check_loss_shapes(probs, targets);
  const int N = probs.n(), C = probs.c(), H = probs.h(), W = probs.w();
  const size_t hw = probs.plane();
  if (dprobs) {
    *dprobs = Tensor<T>(probs.shape[0], probs.shape[1], probs.shape[2], probs.shape[3]);
  }

  // Count qualifying pairs first so the gradient can be scaled in one pass.
  size_t pairs = 0;
  for (int n = 0; n < N; ++n) {
    const uint8_t* t = targets.ptr(n, 0);
    for (int r = 0; r + 1 < H; ++r)
      for (int c = 0; c < W; ++c)
        if (t[static_cast<size_t>(r) * W + c] == t[static_cast<size_t>(r + 1) * W + c]) ++pairs;
  }
  if (pairs == 0) return T(0);
  const T scale = T(1) / static_cast<T>(pairs);

  auto sign = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };

  T total = T(0);
  for (int n = 0; n < N; ++n) {
    const T* p = probs.ptr(n, 0);
    const uint8_t* t = targets.ptr(n, 0);
    T* g = dprobs ? dprobs->ptr(n, 0) : nullptr;
    for (int r = 0; r + 1 < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const size_t i = static_cast<size_t>(r) * W + c;
        const size_t j = i + W;
        if (t[i] != t[j]) continue;
        for (int k = 0; k < C; ++k) {
          const size_t ik = static_cast<size_t>(k) * hw + i;
          const size_t jk = static_cast<size_t>(k) * hw + j;
          const T tk = (t[i] == k) ? T(1) : T(0);
          const T a = p[ik] - tk;
          const T b = p[ik] - p[jk];
          total += std::abs(a) * std::abs(b);
          if (g) {
            g[ik] += scale * (sign(a) * std::abs(b) + std::abs(a) * sign(b));
            g[jk] += scale * (-std::abs(a) * sign(b));
          }
        }
      }
    }
  }
  return total * scale;
}

// ---------------------------------------------------------------------------
// Per-channel binary cross-entropy (ablation baseline)
// ---------------------------------------------------------------------------

// Treats each class channel as an independent binary problem against its
// one-hot target, averaged over pixels and channels. Only used to train the
// no-regularizer baseline for ablations; the shipped objective is loss_total.
template <typename T>
T loss_bce(const Tensor<T>& probs, const LabelBatch& targets, Tensor<T>* dprobs = nullptr) {
  detail::check_loss_shapes(probs, targets);
  const int N = probs.n(), C = probs.c();
  const size_t hw = probs.plane();
  const T eps = static_cast<T>(1e-7);
  const T norm = T(1) / (static_cast<T>(N) * static_cast<T>(C) * static_cast<T>(hw));
  if (dprobs) *dprobs = Tensor<T>(probs.shape[0], probs.shape[1], probs.shape[2], probs.shape[3]);
  T total = T(0);
  for (int n = 0; n < N; ++n) {
    const T* p = probs.ptr(n, 0);
    const uint8_t* t = targets.ptr(n, 0);
    T* g = dprobs ? dprobs->ptr(n, 0) : nullptr;
    for (int k = 0; k < C; ++k) {
      const T* pk = p + static_cast<size_t>(k) * hw;
      T* gk = g ? g + static_cast<size_t>(k) * hw : nullptr;
      for (size_t i = 0; i < hw; ++i) {
        const T tk = (t[i] == k) ? T(1) : T(0);
        const T pc = std::clamp(pk[i], eps, T(1) - eps);
        total -= tk * std::log(pc) + (T(1) - tk) * std::log(T(1) - pc);
        if (gk) gk[i] = norm * (pc - tk) / (pc * (T(1) - pc));
      }
    }
  }
  return total * norm;
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

struct LossWeights {
  double lambda_ce = 1.0;
  double lambda_dice = 1.0;
  double lambda_topo_max = 0.5;
  int topo_warmup_epochs = 20;

  // Linear warm-up: lambda_max * min(1, epoch / warmup); a warm-up of zero
  // epochs means the full weight applies from the start.
  double lambda_topo(int epoch) const {
    if (epoch < 0) throw UsageError("lambda_topo: negative epoch");
    if (topo_warmup_epochs <= 0) return lambda_topo_max;
    const double ramp = static_cast<double>(epoch) / topo_warmup_epochs;
    return lambda_topo_max * std::min(1.0, ramp);
  }

  void validate() const {
    if (lambda_ce < 0.0 || lambda_dice < 0.0 || lambda_topo_max < 0.0)
      throw ConfigError("LossWeights: negative weight");
    if (topo_warmup_epochs < 0) throw ConfigError("LossWeights: negative warm-up");
  }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda_ce", w.lambda_ce},
       {"lambda_dice", w.lambda_dice},
       {"lambda_topo_max", w.lambda_topo_max},
       {"topo_warmup_epochs", w.topo_warmup_epochs}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  w = LossWeights{};
  w.lambda_ce = j.value("lambda_ce", w.lambda_ce);
  w.lambda_dice = j.value("lambda_dice", w.lambda_dice);
  w.lambda_topo_max = j.value("lambda_topo_max", w.lambda_topo_max);
  w.topo_warmup_epochs = j.value("topo_warmup_epochs", w.topo_warmup_epochs);
}

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double dice = 0.0;
  double topo = 0.0;
  double lambda_topo = 0.0;  // effective weight at this epoch
};

// Full objective and its gradient with respect to the logits.
template <typename T>
LossBreakdown loss_total(const Tensor<T>& logits, const LabelBatch& targets,
                         const LossWeights& weights, int epoch, Tensor<T>* dlogits = nullptr) {
  weights.validate();
  const T l_ce = static_cast<T>(weights.lambda_ce);
  const T l_dice = static_cast<T>(weights.lambda_dice);
  const T l_topo = static_cast<T>(weights.lambda_topo(epoch));

  Tensor<T> dce;
  LossBreakdown out;
  out.lambda_topo = static_cast<double>(l_topo);
  out.ce = static_cast<double>(loss_ce(logits, targets, dlogits ? &dce : nullptr));

  Tensor<T> probs = softmax_channels(logits);
  Tensor<T> ddice, dtopo;
  out.dice = static_cast<double>(loss_dice(probs, targets, dlogits ? &ddice : nullptr));
  out.topo = static_cast<double>(loss_topo(probs, targets, dlogits ? &dtopo : nullptr));
  out.total = weights.lambda_ce * out.ce + weights.lambda_dice * out.dice +
              static_cast<double>(l_topo) * out.topo;

  if (dlogits) {
    // Probability-space terms share one softmax chain rule application.
    Tensor<T> dprob(probs.shape[0], probs.shape[1], probs.shape[2], probs.shape[3]);
    for (size_t i = 0; i < dprob.data.size(); ++i)
      dprob.data[i] = l_dice * ddice.data[i] + l_topo * dtopo.data[i];
    Tensor<T> dz = softmax_backward(probs, dprob);
    *dlogits = Tensor<T>(logits.shape[0], logits.shape[1], logits.shape[2], logits.shape[3]);
    for (size_t i = 0; i < dlogits->data.size(); ++i)
      dlogits->data[i] = l_ce * dce.data[i] + dz.data[i];
  }
  return out;
}

}  // namespace octseg
