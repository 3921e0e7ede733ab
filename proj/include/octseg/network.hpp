#pragma once

// Lightweight UNeXt-style encoder-decoder: three conv stages, two tokenized
// MLP stages, four 2x downsamplings (total factor 16, matching the pad16
// contract), additive skips and a 1x1 classification head. Layers carry
// hand-written backward passes; the whole stack is templated on the scalar
// type so gradient checks can run in double.
//
// The mixed-precision path rounds convolution inputs and weights to IEEE
// binary16 before each GEMM while accumulating in float, mirroring AMP
// semantics on hardware without dedicated half-precision units.

#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

#include "octseg/core.hpp"
#include "octseg/preprocess.hpp"
#include "octseg/tensor.hpp"

namespace octseg {

// ---------------------------------------------------------------------------
// NetworkConfig
// ---------------------------------------------------------------------------

struct NetworkConfig {
  int in_channels = 1;
  int num_classes = kNumClasses;
  std::vector<int> stage_widths = {8, 16, 32, 64, 128};
  int downsample_stages = 4;
  int token_mlp_stages = 2;

  static NetworkConfig tiny() { return NetworkConfig{}; }
  static NetworkConfig full() {
    NetworkConfig cfg;
    cfg.stage_widths = {16, 32, 128, 160, 256};
    return cfg;
  }

  void validate() const {
    if (in_channels <= 0 || num_classes <= 0)
      throw ConfigError("NetworkConfig: non-positive channel counts");
    if (stage_widths.size() != 5) throw ConfigError("NetworkConfig: need 5 stage widths");
    for (int w : stage_widths)
      if (w <= 0) throw ConfigError("NetworkConfig: stage widths must be positive");
    if ((1 << downsample_stages) != 16)
      throw ConfigError("NetworkConfig: downsample_stages must give a total factor of 16");
    if (token_mlp_stages != 2)
      throw ConfigError("NetworkConfig: this architecture uses exactly 2 token-MLP stages");
  }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"in_channels", c.in_channels},
       {"num_classes", c.num_classes},
       {"stage_widths", c.stage_widths},
       {"downsample_stages", c.downsample_stages},
       {"token_mlp_stages", c.token_mlp_stages}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c = NetworkConfig{};
  if (j.contains("preset")) {
    std::string preset = j.at("preset").get<std::string>();
    if (preset == "tiny") c = NetworkConfig::tiny();
    else if (preset == "full") c = NetworkConfig::full();
    else throw ConfigError("unknown network preset: " + preset);
  }
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  if (j.contains("stage_widths")) j.at("stage_widths").get_to(c.stage_widths);
  c.downsample_stages = j.value("downsample_stages", c.downsample_stages);
  c.token_mlp_stages = j.value("token_mlp_stages", c.token_mlp_stages);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;

  void resize(std::string n, std::vector<int> s) {
    name = std::move(n);
    shape = std::move(s);
    size_t total = 1;
    for (int d : shape) total *= static_cast<size_t>(d);
    value.assign(total, T(0));
    grad.assign(total, T(0));
  }
  size_t size() const { return value.size(); }
};

namespace detail {

template <typename T>
inline void maybe_round_half(std::vector<T>& buf, Precision prec) {
  if (prec == Precision::Mixed) round_to_half_inplace(buf.data(), buf.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

// Stride-1 convolution, kernel 1 or 3 (pad 0 / 1). im2col + GEMM.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, bool use_bias = true)
      : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), has_bias_(use_bias) {
    if (kernel != 1 && kernel != 3) throw ConfigError("Conv2d: kernel must be 1 or 3");
    weight_.resize(name + ".weight", {out_ch, in_ch, kernel, kernel});
    if (use_bias) bias_.resize(name + ".bias", {out_ch});
  }

  ParamTensor<T>& weight() { return weight_; }
  ParamTensor<T>& bias() { return bias_; }

  template <typename Rng>
  void init(Rng& rng) {
    const double fan_in = static_cast<double>(in_ch_) * k_ * k_;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (T& v : weight_.value) v = static_cast<T>(dist(rng));
    std::fill(bias_.value.begin(), bias_.value.end(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x, Precision prec) {
    input_ = x;
    const int N = x.n(), H = x.h(), W = x.w();
    const size_t hw = x.plane();
    Tensor<T> y(N, out_ch_, H, W);
    std::vector<T> wq;
    const T* wptr = weight_.value.data();
    if (prec == Precision::Mixed) {
      wq = weight_.value;
      detail::maybe_round_half(wq, prec);
      wptr = wq.data();
    }
    const int rows = in_ch_ * k_ * k_;
    ConstMapRM<T> wmap(wptr, out_ch_, rows);
    for (int n = 0; n < N; ++n) {
      const T* src = x.ptr(n, 0);
      if (k_ == 1) {
        if (prec == Precision::Mixed) {
          xq_.assign(src, src + static_cast<size_t>(in_ch_) * hw);
          detail::maybe_round_half(xq_, prec);
          src = xq_.data();
        }
        ConstMapRM<T> xmap(src, in_ch_, static_cast<Eigen::Index>(hw));
        MapRM<T> ymap(y.ptr(n, 0), out_ch_, static_cast<Eigen::Index>(hw));
        ymap.noalias() = wmap * xmap;
      } else {
        im2col(src, H, W, col_);
        if (prec == Precision::Mixed) detail::maybe_round_half(col_, prec);
        ConstMapRM<T> colmap(col_.data(), rows, static_cast<Eigen::Index>(hw));
        MapRM<T> ymap(y.ptr(n, 0), out_ch_, static_cast<Eigen::Index>(hw));
        ymap.noalias() = wmap * colmap;
      }
      if (has_bias_) {
        for (int c = 0; c < out_ch_; ++c) {
          T* dst = y.ptr(n, c);
          const T b = bias_.value[c];
          for (size_t i = 0; i < hw; ++i) dst[i] += b;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    const int N = x.n(), H = x.h(), W = x.w();
    const size_t hw = x.plane();
    const int rows = in_ch_ * k_ * k_;
    Tensor<T> dx(N, in_ch_, H, W);
    MapRM<T> dwmap(weight_.grad.data(), out_ch_, rows);
    ConstMapRM<T> wmap(weight_.value.data(), out_ch_, rows);
    for (int n = 0; n < N; ++n) {
      ConstMapRM<T> dymap(dy.ptr(n, 0), out_ch_, static_cast<Eigen::Index>(hw));
      if (has_bias_) {
        for (int c = 0; c < out_ch_; ++c) {
          const T* g = dy.ptr(n, c);
          T acc = T(0);
          for (size_t i = 0; i < hw; ++i) acc += g[i];
          bias_.grad[c] += acc;
        }
      }
      if (k_ == 1) {
        ConstMapRM<T> xmap(x.ptr(n, 0), in_ch_, static_cast<Eigen::Index>(hw));
        dwmap.noalias() += dymap * xmap.transpose();
        MapRM<T> dxmap(dx.ptr(n, 0), in_ch_, static_cast<Eigen::Index>(hw));
        dxmap.noalias() = wmap.transpose() * dymap;
      } else {
        im2col(x.ptr(n, 0), H, W, col_);
        ConstMapRM<T> colmap(col_.data(), rows, static_cast<Eigen::Index>(hw));
        dwmap.noalias() += dymap * colmap.transpose();
        dcol_.assign(static_cast<size_t>(rows) * hw, T(0));
        MapRM<T> dcolmap(dcol_.data(), rows, static_cast<Eigen::Index>(hw));
        dcolmap.noalias() = wmap.transpose() * dymap;
        col2im(dcol_, H, W, dx.ptr(n, 0));
      }
    }
    return dx;
  }

  int64_t param_count() const {
    return static_cast<int64_t>(weight_.size()) + static_cast<int64_t>(bias_.size());
  }

 private:
  void im2col(const T* x, int H, int W, std::vector<T>& col) const {
    const size_t hw = static_cast<size_t>(H) * W;
    col.assign(static_cast<size_t>(in_ch_) * 9 * hw, T(0));
    for (int ci = 0; ci < in_ch_; ++ci) {
      const T* plane = x + static_cast<size_t>(ci) * hw;
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          T* dst = col.data() + (static_cast<size_t>(ci) * 9 + a * 3 + b) * hw;
          const int dr = a - 1, dc = b - 1;
          const int r_lo = std::max(0, -dr), r_hi = std::min(H, H - dr);
          const int c_lo = std::max(0, -dc), c_hi = std::min(W, W - dc);
          for (int r = r_lo; r < r_hi; ++r)
            std::copy_n(plane + static_cast<size_t>(r + dr) * W + (c_lo + dc), c_hi - c_lo,
                        dst + static_cast<size_t>(r) * W + c_lo);
        }
      }
    }
  }

  void col2im(const std::vector<T>& dcol, int H, int W, T* dx) const {
    const size_t hw = static_cast<size_t>(H) * W;
    for (int ci = 0; ci < in_ch_; ++ci) {
      T* plane = dx + static_cast<size_t>(ci) * hw;
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          const T* src = dcol.data() + (static_cast<size_t>(ci) * 9 + a * 3 + b) * hw;
          const int dr = a - 1, dc = b - 1;
          const int r_lo = std::max(0, -dr), r_hi = std::min(H, H - dr);
          const int c_lo = std::max(0, -dc), c_hi = std::min(W, W - dc);
          for (int r = r_lo; r < r_hi; ++r) {
            T* prow = plane + static_cast<size_t>(r + dr) * W + (c_lo + dc);
            const T* srow = src + static_cast<size_t>(r) * W + c_lo;
            for (int c = 0; c < c_hi - c_lo; ++c) prow[c] += srow[c];
          }
        }
      }
    }
  }

  int in_ch_ = 0, out_ch_ = 0, k_ = 1;
  bool has_bias_ = true;
  ParamTensor<T> weight_, bias_;
  Tensor<T> input_;
  std::vector<T> col_, dcol_, xq_;
};

// 3x3 depthwise convolution, pad 1.
template <typename T>
class DepthwiseConv3x3 {
 public:
  DepthwiseConv3x3() = default;
  DepthwiseConv3x3(const std::string& name, int channels) : ch_(channels) {
    weight_.resize(name + ".weight", {channels, 3, 3});
    bias_.resize(name + ".bias", {channels});
  }

  ParamTensor<T>& weight() { return weight_; }
  ParamTensor<T>& bias() { return bias_; }

  template <typename Rng>
  void init(Rng& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / 9.0));
    for (T& v : weight_.value) v = static_cast<T>(dist(rng));
    std::fill(bias_.value.begin(), bias_.value.end(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x, Precision prec) {
    input_ = x;
    const int N = x.n(), H = x.h(), W = x.w();
    Tensor<T> y(N, ch_, H, W);
    std::vector<T> wq;
    const T* weights = weight_.value.data();
    if (prec == Precision::Mixed) {
      wq = weight_.value;
      detail::maybe_round_half(wq, prec);
      weights = wq.data();
    }
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < ch_; ++c) {
        const T* in = x.ptr(n, c);
        std::vector<T> inq;
        if (prec == Precision::Mixed) {
          inq.assign(in, in + x.plane());
          detail::maybe_round_half(inq, prec);
          in = inq.data();
        }
        const T* w = weights + static_cast<size_t>(c) * 9;
        T* out = y.ptr(n, c);
        const T b = bias_.value[c];
        for (int r = 0; r < H; ++r) {
          for (int col = 0; col < W; ++col) {
            T acc = b;
            for (int a = 0; a < 3; ++a) {
              const int rr = r + a - 1;
              if (rr < 0 || rr >= H) continue;
              const T* row = in + static_cast<size_t>(rr) * W;
              for (int bb = 0; bb < 3; ++bb) {
                const int cc = col + bb - 1;
                if (cc < 0 || cc >= W) continue;
                acc += w[a * 3 + bb] * row[cc];
              }
            }
            out[static_cast<size_t>(r) * W + col] = acc;
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    const int N = x.n(), H = x.h(), W = x.w();
    Tensor<T> dx(N, ch_, H, W);
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < ch_; ++c) {
        const T* in = x.ptr(n, c);
        const T* g = dy.ptr(n, c);
        const T* w = weight_.value.data() + static_cast<size_t>(c) * 9;
        T* dw = weight_.grad.data() + static_cast<size_t>(c) * 9;
        T* dxp = dx.ptr(n, c);
        T db = T(0);
        for (int r = 0; r < H; ++r) {
          for (int col = 0; col < W; ++col) {
            const T gv = g[static_cast<size_t>(r) * W + col];
            db += gv;
            for (int a = 0; a < 3; ++a) {
              const int rr = r + a - 1;
              if (rr < 0 || rr >= H) continue;
              for (int bb = 0; bb < 3; ++bb) {
                const int cc = col + bb - 1;
                if (cc < 0 || cc >= W) continue;
                const size_t idx = static_cast<size_t>(rr) * W + cc;
                dw[a * 3 + bb] += gv * in[idx];
                dxp[idx] += gv * w[a * 3 + bb];
              }
            }
          }
        }
        bias_.grad[c] += db;
      }
    }
    return dx;
  }

  int64_t param_count() const {
    return static_cast<int64_t>(weight_.size()) + static_cast<int64_t>(bias_.size());
  }

 private:
  int ch_ = 0;
  ParamTensor<T> weight_, bias_;
  Tensor<T> input_;
};

// Group normalization with affine parameters. Group count is the largest
// divisor of C not exceeding 8, so behavior does not depend on batch size.
template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(const std::string& name, int channels) : ch_(channels) {
    groups_ = 1;
    for (int g = std::min(8, channels); g >= 1; --g)
      if (channels % g == 0) {
        groups_ = g;
        break;
      }
    gamma_.resize(name + ".gamma", {channels});
    beta_.resize(name + ".beta", {channels});
    std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
  }

  ParamTensor<T>& gamma() { return gamma_; }
  ParamTensor<T>& beta() { return beta_; }

  Tensor<T> forward(const Tensor<T>& x, Precision) {
    const int N = x.n(), H = x.h(), W = x.w();
    const int cg = ch_ / groups_;
    const size_t hw = x.plane();
    const size_t gsize = static_cast<size_t>(cg) * hw;
    xhat_ = Tensor<T>(N, ch_, H, W);
    invstd_.assign(static_cast<size_t>(N) * groups_, T(0));
    Tensor<T> y(N, ch_, H, W);
    for (int n = 0; n < N; ++n) {
      for (int g = 0; g < groups_; ++g) {
        const T* in = x.ptr(n, g * cg);
        T mean = T(0);
        for (size_t i = 0; i < gsize; ++i) mean += in[i];
        mean /= static_cast<T>(gsize);
        T var = T(0);
        for (size_t i = 0; i < gsize; ++i) {
          const T d = in[i] - mean;
          var += d * d;
        }
        var /= static_cast<T>(gsize);
        const T inv = T(1) / std::sqrt(var + T(1e-5));
        invstd_[static_cast<size_t>(n) * groups_ + g] = inv;
        T* xh = xhat_.ptr(n, g * cg);
        for (size_t i = 0; i < gsize; ++i) xh[i] = (in[i] - mean) * inv;
        for (int c = 0; c < cg; ++c) {
          const int ch = g * cg + c;
          const T* xhp = xhat_.ptr(n, ch);
          T* out = y.ptr(n, ch);
          const T ga = gamma_.value[ch], be = beta_.value[ch];
          for (size_t i = 0; i < hw; ++i) out[i] = ga * xhp[i] + be;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int N = dy.n(), H = dy.h(), W = dy.w();
    const int cg = ch_ / groups_;
    const size_t hw = dy.plane();
    const size_t gsize = static_cast<size_t>(cg) * hw;
    Tensor<T> dx(N, ch_, H, W);
    for (int n = 0; n < N; ++n) {
      for (int g = 0; g < groups_; ++g) {
        // dgamma/dbeta plus the two group-wide reductions for dx.
        T sum_gxh = T(0), sum_g = T(0);
        for (int c = 0; c < cg; ++c) {
          const int ch = g * cg + c;
          const T* xh = xhat_.ptr(n, ch);
          const T* gp = dy.ptr(n, ch);
          const T ga = gamma_.value[ch];
          T dgam = T(0), dbet = T(0);
          for (size_t i = 0; i < hw; ++i) {
            dgam += gp[i] * xh[i];
            dbet += gp[i];
            sum_gxh += ga * gp[i] * xh[i];
            sum_g += ga * gp[i];
          }
          gamma_.grad[ch] += dgam;
          beta_.grad[ch] += dbet;
        }
        const T inv = invstd_[static_cast<size_t>(n) * groups_ + g];
        const T m = static_cast<T>(gsize);
        for (int c = 0; c < cg; ++c) {
          const int ch = g * cg + c;
          const T* xh = xhat_.ptr(n, ch);
          const T* gp = dy.ptr(n, ch);
          T* dxp = dx.ptr(n, ch);
          const T ga = gamma_.value[ch];
          for (size_t i = 0; i < hw; ++i)
            dxp[i] = inv * (ga * gp[i] - sum_g / m - xh[i] * sum_gxh / m);
        }
      }
    }
    return dx;
  }

  int64_t param_count() const {
    return static_cast<int64_t>(gamma_.size()) + static_cast<int64_t>(beta_.size());
  }

 private:
  int ch_ = 0, groups_ = 1;
  ParamTensor<T> gamma_, beta_;
  Tensor<T> xhat_;
  std::vector<T> invstd_;
};

// Per-position layer norm across channels (token-MLP blocks).
template <typename T>
class LayerNormChannel {
 public:
  LayerNormChannel() = default;
  LayerNormChannel(const std::string& name, int channels) : ch_(channels) {
    gamma_.resize(name + ".gamma", {channels});
    beta_.resize(name + ".beta", {channels});
    std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
  }

  ParamTensor<T>& gamma() { return gamma_; }
  ParamTensor<T>& beta() { return beta_; }

  Tensor<T> forward(const Tensor<T>& x, Precision) {
    const int N = x.n(), H = x.h(), W = x.w();
    const size_t hw = x.plane();
    xhat_ = Tensor<T>(N, ch_, H, W);
    invstd_.assign(static_cast<size_t>(N) * hw, T(0));
    Tensor<T> y(N, ch_, H, W);
    const T invc = T(1) / static_cast<T>(ch_);
    for (int n = 0; n < N; ++n) {
      const T* base = x.ptr(n, 0);
      T* xhb = xhat_.ptr(n, 0);
      T* yb = y.ptr(n, 0);
      for (size_t p = 0; p < hw; ++p) {
        T mean = T(0);
        for (int c = 0; c < ch_; ++c) mean += base[c * hw + p];
        mean *= invc;
        T var = T(0);
        for (int c = 0; c < ch_; ++c) {
          const T d = base[c * hw + p] - mean;
          var += d * d;
        }
        var *= invc;
        const T inv = T(1) / std::sqrt(var + T(1e-5));
        invstd_[static_cast<size_t>(n) * hw + p] = inv;
        for (int c = 0; c < ch_; ++c) {
          const T xh = (base[c * hw + p] - mean) * inv;
          xhb[c * hw + p] = xh;
          yb[c * hw + p] = gamma_.value[c] * xh + beta_.value[c];
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int N = dy.n(), H = dy.h(), W = dy.w();
    const size_t hw = dy.plane();
    Tensor<T> dx(N, ch_, H, W);
    const T invc = T(1) / static_cast<T>(ch_);
    for (int n = 0; n < N; ++n) {
      const T* gb = dy.ptr(n, 0);
      const T* xhb = xhat_.ptr(n, 0);
      T* dxb = dx.ptr(n, 0);
      for (size_t p = 0; p < hw; ++p) {
        T mean_gy = T(0), mean_gyxh = T(0);
        for (int c = 0; c < ch_; ++c) {
          const T gyc = gb[c * hw + p] * gamma_.value[c];
          mean_gy += gyc;
          mean_gyxh += gyc * xhb[c * hw + p];
        }
        mean_gy *= invc;
        mean_gyxh *= invc;
        const T inv = invstd_[static_cast<size_t>(n) * hw + p];
        for (int c = 0; c < ch_; ++c) {
          const T gyc = gb[c * hw + p] * gamma_.value[c];
          dxb[c * hw + p] = inv * (gyc - mean_gy - xhb[c * hw + p] * mean_gyxh);
          gamma_.grad[c] += gb[c * hw + p] * xhb[c * hw + p];
          beta_.grad[c] += gb[c * hw + p];
        }
      }
    }
    return dx;
  }

  int64_t param_count() const {
    return static_cast<int64_t>(gamma_.size()) + static_cast<int64_t>(beta_.size());
  }

 private:
  int ch_ = 0;
  ParamTensor<T> gamma_, beta_;
  Tensor<T> xhat_;
  std::vector<T> invstd_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x, Precision) {
    out_ = x;
    for (T& v : out_.data) v = std::max(v, T(0));
    return out_;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx = dy;
    for (size_t i = 0; i < dx.data.size(); ++i)
      if (out_.data[i] <= T(0)) dx.data[i] = T(0);
    return dx;
  }

 private:
  Tensor<T> out_;
};

template <typename T>
class Gelu {
 public:
  Tensor<T> forward(const Tensor<T>& x, Precision) {
    input_ = x;
    Tensor<T> y = x;
    for (T& v : y.data) v = v * phi_cdf(v);
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx = dy;
    for (size_t i = 0; i < dx.data.size(); ++i) {
      const T x = input_.data[i];
      dx.data[i] *= phi_cdf(x) + x * phi_pdf(x);
    }
    return dx;
  }

 private:
  static T phi_cdf(T x) { return T(0.5) * std::erfc(-x * T(0.7071067811865476)); }
  static T phi_pdf(T x) { return T(0.3989422804014327) * std::exp(T(-0.5) * x * x); }
  Tensor<T> input_;
};

template <typename T>
class MaxPool2x2 {
 public:
  Tensor<T> forward(const Tensor<T>& x, Precision) {
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    if (H % 2 || W % 2) throw DimensionError("MaxPool2x2: odd input dims");
    in_h_ = H;
    in_w_ = W;
    Tensor<T> y(N, C, H / 2, W / 2);
    argmax_.assign(y.size(), 0);
    size_t o = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* in = x.ptr(n, c);
        for (int r = 0; r < H; r += 2)
          for (int col = 0; col < W; col += 2) {
            const T v00 = in[static_cast<size_t>(r) * W + col];
            const T v01 = in[static_cast<size_t>(r) * W + col + 1];
            const T v10 = in[static_cast<size_t>(r + 1) * W + col];
            const T v11 = in[static_cast<size_t>(r + 1) * W + col + 1];
            T best = v00;
            uint8_t arg = 0;
            if (v01 > best) { best = v01; arg = 1; }
            if (v10 > best) { best = v10; arg = 2; }
            if (v11 > best) { best = v11; arg = 3; }
            y.data[o] = best;
            argmax_[o] = arg;
            ++o;
          }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int N = dy.n(), C = dy.c(), H = in_h_, W = in_w_;
    Tensor<T> dx(N, C, H, W);
    size_t o = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T* out = dx.ptr(n, c);
        for (int r = 0; r < H; r += 2)
          for (int col = 0; col < W; col += 2) {
            const uint8_t arg = argmax_[o];
            const int rr = r + (arg >> 1), cc = col + (arg & 1);
            out[static_cast<size_t>(rr) * W + cc] += dy.data[o];
            ++o;
          }
      }
    return dx;
  }

 private:
  int in_h_ = 0, in_w_ = 0;
  std::vector<uint8_t> argmax_;
};

template <typename T>
class UpsampleNearest2x {
 public:
  Tensor<T> forward(const Tensor<T>& x, Precision) {
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    Tensor<T> y(N, C, H * 2, W * 2);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* in = x.ptr(n, c);
        T* out = y.ptr(n, c);
        for (int r = 0; r < H; ++r)
          for (int col = 0; col < W; ++col) {
            const T v = in[static_cast<size_t>(r) * W + col];
            const size_t base = static_cast<size_t>(2 * r) * (2 * W) + 2 * col;
            out[base] = v;
            out[base + 1] = v;
            out[base + 2 * W] = v;
            out[base + 2 * W + 1] = v;
          }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int N = dy.n(), C = dy.c(), H = dy.h() / 2, W = dy.w() / 2;
    Tensor<T> dx(N, C, H, W);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* g = dy.ptr(n, c);
        T* out = dx.ptr(n, c);
        for (int r = 0; r < H; ++r)
          for (int col = 0; col < W; ++col) {
            const size_t base = static_cast<size_t>(2 * r) * (2 * W) + 2 * col;
            out[static_cast<size_t>(r) * W + col] =
                g[base] + g[base + 1] + g[base + 2 * W] + g[base + 2 * W + 1];
          }
      }
    return dx;
  }
};

// Conv3x3 + GroupNorm + ReLU.
template <typename T>
struct ConvBlock {
  Conv2d<T> conv;
  GroupNorm<T> norm;
  ReLU<T> relu;

  ConvBlock() = default;
  // No conv bias: the following norm cancels per-channel shifts, so a bias
  // here would be dead weight.
  ConvBlock(const std::string& name, int in_ch, int out_ch)
      : conv(name + ".conv", in_ch, out_ch, 3, false), norm(name + ".norm", out_ch) {}

  Tensor<T> forward(const Tensor<T>& x, Precision prec) {
    return relu.forward(norm.forward(conv.forward(x, prec), prec), prec);
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    return conv.backward(norm.backward(relu.backward(dy)));
  }
  template <typename Rng>
  void init(Rng& rng) {
    conv.init(rng);
  }
  void collect(std::vector<ParamTensor<T>*>& out) {
    out.push_back(&conv.weight());
    out.push_back(&norm.gamma());
    out.push_back(&norm.beta());
  }
  int64_t param_count() const { return conv.param_count() + norm.param_count(); }
};

// Residual tokenized MLP block:
//   x + fc2(gelu(dwconv(gelu(fc1(layernorm(x))))))
// fc1 expands channels 2x, the depthwise conv mixes tokens spatially.
template <typename T>
struct TokenMlpBlock {
  LayerNormChannel<T> ln;
  Conv2d<T> fc1;
  Gelu<T> act1;
  DepthwiseConv3x3<T> dw;
  Gelu<T> act2;
  Conv2d<T> fc2;

  TokenMlpBlock() = default;
  TokenMlpBlock(const std::string& name, int channels)
      : ln(name + ".ln", channels),
        fc1(name + ".fc1", channels, channels * 2, 1),
        dw(name + ".dw", channels * 2),
        fc2(name + ".fc2", channels * 2, channels, 1) {}

  Tensor<T> forward(const Tensor<T>& x, Precision prec) {
    Tensor<T> h = ln.forward(x, prec);
    h = fc1.forward(h, prec);
    h = act1.forward(h, prec);
    h = dw.forward(h, prec);
    h = act2.forward(h, prec);
    h = fc2.forward(h, prec);
    for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += x.data[i];
    return h;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> g = fc2.backward(dy);
    g = act2.backward(g);
    g = dw.backward(g);
    g = act1.backward(g);
    g = fc1.backward(g);
    g = ln.backward(g);
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += dy.data[i];
    return g;
  }

  template <typename Rng>
  void init(Rng& rng) {
    fc1.init(rng);
    dw.init(rng);
    fc2.init(rng);
  }
  void collect(std::vector<ParamTensor<T>*>& out) {
    out.push_back(&ln.gamma());
    out.push_back(&ln.beta());
    out.push_back(&fc1.weight());
    out.push_back(&fc1.bias());
    out.push_back(&dw.weight());
    out.push_back(&dw.bias());
    out.push_back(&fc2.weight());
    out.push_back(&fc2.bias());
  }
  int64_t param_count() const {
    return ln.param_count() + fc1.param_count() + dw.param_count() + fc2.param_count();
  }
};

// ---------------------------------------------------------------------------
// SegNet
// ---------------------------------------------------------------------------

template <typename T>
class SegNet {
 public:
  explicit SegNet(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& w = cfg_.stage_widths;
    enc0_ = ConvBlock<T>("enc0", cfg_.in_channels, w[0]);
    enc1_ = ConvBlock<T>("enc1", w[0], w[1]);
    enc2_ = ConvBlock<T>("enc2", w[1], w[2]);
    e3in_ = Conv2d<T>("enc3.proj", w[2], w[3], 1);
    tok3_ = TokenMlpBlock<T>("enc3.tok", w[3]);
    e4in_ = Conv2d<T>("enc4.proj", w[3], w[4], 1);
    tok4_ = TokenMlpBlock<T>("enc4.tok", w[4]);
    d3r_ = Conv2d<T>("dec3.proj", w[4], w[3], 1);
    tokd3_ = TokenMlpBlock<T>("dec3.tok", w[3]);
    d2r_ = Conv2d<T>("dec2.proj", w[3], w[2], 1);
    d2b_ = ConvBlock<T>("dec2.block", w[2], w[2]);
    d1r_ = Conv2d<T>("dec1.proj", w[2], w[1], 1);
    d1b_ = ConvBlock<T>("dec1.block", w[1], w[1]);
    d0r_ = Conv2d<T>("dec0.proj", w[1], w[0], 1);
    d0b_ = ConvBlock<T>("dec0.block", w[0], w[0]);
    head_ = Conv2d<T>("head", w[0], cfg_.num_classes, 1);

    enc0_.collect(params_);
    enc1_.collect(params_);
    enc2_.collect(params_);
    params_.push_back(&e3in_.weight());
    params_.push_back(&e3in_.bias());
    tok3_.collect(params_);
    params_.push_back(&e4in_.weight());
    params_.push_back(&e4in_.bias());
    tok4_.collect(params_);
    params_.push_back(&d3r_.weight());
    params_.push_back(&d3r_.bias());
    tokd3_.collect(params_);
    params_.push_back(&d2r_.weight());
    params_.push_back(&d2r_.bias());
    d2b_.collect(params_);
    params_.push_back(&d1r_.weight());
    params_.push_back(&d1r_.bias());
    d1b_.collect(params_);
    params_.push_back(&d0r_.weight());
    params_.push_back(&d0r_.bias());
    d0b_.collect(params_);
    params_.push_back(&head_.weight());
    params_.push_back(&head_.bias());
  }

  void init_params(uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 0x494e4954ULL));
    enc0_.init(rng);
    enc1_.init(rng);
    enc2_.init(rng);
    e3in_.init(rng);
    tok3_.init(rng);
    e4in_.init(rng);
    tok4_.init(rng);
    d3r_.init(rng);
    tokd3_.init(rng);
    d2r_.init(rng);
    d2b_.init(rng);
    d1r_.init(rng);
    d1b_.init(rng);
    d0r_.init(rng);
    d0b_.init(rng);
    head_.init(rng);
  }

  // x: B x in_channels x H' x W' with H', W' multiples of 16.
  Tensor<T> forward(const Tensor<T>& x, Precision prec = Precision::Full) {
    if (x.c() != cfg_.in_channels) throw DimensionError("forward: wrong channel count");
    if (x.n() == 0) return Tensor<T>(0, cfg_.num_classes, x.h(), x.w());
    if (x.h() % 16 || x.w() % 16 || x.h() == 0 || x.w() == 0)
      throw DimensionError("forward: spatial dims must be non-zero multiples of 16 (pad16 first)");
    Tensor<T> a0 = enc0_.forward(x, prec);
    Tensor<T> a1 = enc1_.forward(pool0_.forward(a0, prec), prec);
    Tensor<T> a2 = enc2_.forward(pool1_.forward(a1, prec), prec);
    Tensor<T> t3 = tok3_.forward(e3in_.forward(pool2_.forward(a2, prec), prec), prec);
    Tensor<T> t4 = tok4_.forward(e4in_.forward(pool3_.forward(t3, prec), prec), prec);

    Tensor<T> g = d3r_.forward(up3_.forward(t4, prec), prec);
    add_inplace(g, t3);
    g = tokd3_.forward(g, prec);
    g = d2r_.forward(up2_.forward(g, prec), prec);
    add_inplace(g, a2);
    g = d2b_.forward(g, prec);
    g = d1r_.forward(up1_.forward(g, prec), prec);
    add_inplace(g, a1);
    g = d1b_.forward(g, prec);
    g = d0r_.forward(up0_.forward(g, prec), prec);
    add_inplace(g, a0);
    g = d0b_.forward(g, prec);
    return head_.forward(g, prec);
  }

  // Accumulates parameter gradients; returns the input gradient.
  Tensor<T> backward(const Tensor<T>& dlogits) {
    Tensor<T> g = head_.backward(dlogits);
    g = d0b_.backward(g);
    Tensor<T> da0 = g;
    g = up0_.backward(d0r_.backward(g));
    g = d1b_.backward(g);
    Tensor<T> da1 = g;
    g = up1_.backward(d1r_.backward(g));
    g = d2b_.backward(g);
    Tensor<T> da2 = g;
    g = up2_.backward(d2r_.backward(g));
    g = tokd3_.backward(g);
    Tensor<T> dt3 = g;
    g = up3_.backward(d3r_.backward(g));

    g = pool3_.backward(e4in_.backward(tok4_.backward(g)));
    add_inplace(g, dt3);
    g = pool2_.backward(e3in_.backward(tok3_.backward(g)));
    add_inplace(g, da2);
    g = pool1_.backward(enc2_.backward(g));
    add_inplace(g, da1);
    g = pool0_.backward(enc1_.backward(g));
    add_inplace(g, da0);
    return enc0_.backward(g);
  }

  void zero_grad() {
    for (ParamTensor<T>* p : params_) std::fill(p->grad.begin(), p->grad.end(), T(0));
  }

  std::vector<ParamTensor<T>*>& params() { return params_; }
  const std::vector<ParamTensor<T>*>& params() const { return params_; }

  int64_t param_count() const {
    int64_t total = 0;
    for (const ParamTensor<T>* p : params_) total += static_cast<int64_t>(p->size());
    return total;
  }

  const NetworkConfig& config() const { return cfg_; }

 private:
  static void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw DimensionError("skip connection shape mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
  }

  NetworkConfig cfg_;
  ConvBlock<T> enc0_, enc1_, enc2_;
  Conv2d<T> e3in_, e4in_;
  TokenMlpBlock<T> tok3_, tok4_;
  MaxPool2x2<T> pool0_, pool1_, pool2_, pool3_;
  UpsampleNearest2x<T> up0_, up1_, up2_, up3_;
  Conv2d<T> d3r_, d2r_, d1r_, d0r_;
  TokenMlpBlock<T> tokd3_;
  ConvBlock<T> d2b_, d1b_, d0b_;
  Conv2d<T> head_;
  std::vector<ParamTensor<T>*> params_;
};

using SegNetF = SegNet<float>;

inline int64_t count_params(const NetworkConfig& cfg) { return SegNetF(cfg).param_count(); }

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Single-file archive: magic, format version, JSON header (network config,
// normalization stats, tensor table), then raw little-endian float32 data.

inline constexpr char kCheckpointMagic[8] = {'O', 'S', 'E', 'G', 'N', 'E', 'T', '\0'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const fs::path& path, const SegNetF& net, const NormStats& stats) {
  nlohmann::json header;
  header["config"] = net.config();
  header["norm_stats"] = stats;
  nlohmann::json tensors = nlohmann::json::array();
  for (const ParamTensor<float>* p : net.params())
    tensors.push_back({{"name", p->name}, {"shape", p->shape}});
  header["tensors"] = tensors;
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic, 8);
  uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const ParamTensor<float>* p : net.params())
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  if (!out) throw IoError("write failed for " + path.string());
}

struct Checkpoint {
  NetworkConfig config;
  NormStats norm_stats;
  std::vector<std::string> names;
  std::vector<std::vector<float>> tensors;
};

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError("not a checkpoint file: " + path.string());
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (!in) throw IoError("truncated checkpoint: " + path.string());
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) +
                                 " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || hlen > (1ULL << 24)) throw ParseError("bad checkpoint header length");
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated checkpoint: " + path.string());

  Checkpoint ckpt;
  try {
    nlohmann::json header = nlohmann::json::parse(hs);
    ckpt.config = header.at("config").get<NetworkConfig>();
    ckpt.norm_stats = header.at("norm_stats").get<NormStats>();
    for (const auto& t : header.at("tensors")) {
      ckpt.names.push_back(t.at("name").get<std::string>());
      size_t total = 1;
      for (int d : t.at("shape").get<std::vector<int>>()) total *= static_cast<size_t>(d);
      ckpt.tensors.emplace_back(total);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  for (auto& buf : ckpt.tensors) {
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint: " + path.string());
  }
  return ckpt;
}

// Rebuilds the network from a checkpoint; tensor names and shapes must match
// what the config produces.
inline SegNetF build_from_checkpoint(const Checkpoint& ckpt) {
  SegNetF net(ckpt.config);
  auto& params = net.params();
  if (params.size() != ckpt.tensors.size())
    throw ParseError("checkpoint tensor count does not match network");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != ckpt.names[i])
      throw ParseError("checkpoint tensor name mismatch: " + ckpt.names[i] + " vs " +
                       params[i]->name);
    if (params[i]->value.size() != ckpt.tensors[i].size())
      throw ParseError("checkpoint tensor size mismatch for " + ckpt.names[i]);
    params[i]->value = ckpt.tensors[i];
  }
  return net;
}

}  // namespace octseg
