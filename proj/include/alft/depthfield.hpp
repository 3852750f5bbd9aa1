#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <ostream>
#include <string>
#include <vector>

#include "alft/diffcore/graph.hpp"
#include "alft/diffcore/ops.hpp"
#include "alft/diffcore/params.hpp"
#include "alft/skeleton.hpp"

namespace alft {

/// K_bin uniform bins over [-d_min, d_max].
struct DepthBinning {
  double d_min = 1.0;
  double d_max = 1.0;
  int k_bins = 64;

  void validate() const {
    if (!(d_min > 0.0) || !(d_max > 0.0)) throw ContractViolation("depth binning: d_min and d_max must be > 0");
    if (k_bins < 2) throw ContractViolation("depth binning: k_bins must be >= 2");
  }
  [[nodiscard]] double width() const { return (d_min + d_max) / k_bins; }
  [[nodiscard]] double bin_center(int k) const { return -d_min + (k + 0.5) * width(); }
  /// Depth axis whose nodes are the bin centers.
  [[nodiscard]] ad::GridAxis axis() const { return {-d_min, d_max, k_bins}; }
};

/// floor((d + d_min) / w), clamped to [0, K_bin - 1].
inline int depth_to_bin(double d, const DepthBinning& b) {
  const double f = std::floor((d + b.d_min) / b.width());
  if (!(f >= 0.0)) return 0;
  return static_cast<int>(std::min(f, static_cast<double>(b.k_bins - 1)));
}

enum class DepthMode { joint_wise, single, none };
enum class DepthHead { classification, regression };
enum class DistMode { ordinal, softmax };

struct DepthNetConfig {
  int in_channels = 8;
  int width = 16;
  int embed_dim = 64;  // C_D, equal to the decoder width
  int joints = 17;
  int pe_freqs = 3;
  DepthBinning binning;
  DepthMode mode = DepthMode::joint_wise;
  DepthHead head = DepthHead::classification;
  DistMode dist = DistMode::ordinal;

  [[nodiscard]] int maps() const { return mode == DepthMode::single ? 1 : joints; }
  [[nodiscard]] int channels_per_map() const { return head == DepthHead::classification ? binning.k_bins : 1; }
  [[nodiscard]] int head_channels() const { return maps() * channels_per_map(); }
};

/// Outputs of the depth net for one sample. `logits` rows are (pixel, map)
/// pairs in row p * maps + m; columns are bins (or one regressed depth).
struct DepthOutput {
  ad::Var logits;
  ad::Var embedding;  // (H_d W_d) x C_D
  int height = 0;
  int width = 0;
  int maps = 0;
  DepthHead head = DepthHead::classification;
};

namespace detail {

inline void add_linear(ad::ParameterStore& s, const std::string& name, int in, int out, Rng& rng, double gain = 1.0) {
  s.add_uniform(name + ".w", ad::Shape{in, out}, in, rng, gain);
  s.add(name + ".b", ad::Shape{out});
}

inline void add_layer_norm(ad::ParameterStore& s, const std::string& name, int dim) {
  s.add_constant(name + ".g", ad::Shape{dim}, 1.0);
  s.add(name + ".b", ad::Shape{dim});
}

inline ad::Var apply_linear(ad::Graph& g, ad::ParameterStore& s, const std::string& name, ad::Var x) {
  return ad::linear(x, g.param(s.at(name + ".w")), g.param(s.at(name + ".b")));
}

inline ad::Var apply_layer_norm(ad::Graph& g, ad::ParameterStore& s, const std::string& name, ad::Var x) {
  return ad::layer_norm_rows(x, g.param(s.at(name + ".g")), g.param(s.at(name + ".b")));
}

inline ad::Var checked_layer(ad::Var v, int layer) {
  for (double x : v.value())
    if (!std::isfinite(x)) throw ad::NumericError("depth net layer " + std::to_string(layer) + " produced non-finite activations");
  return v;
}

/// Normalized coordinate of pixel center i on an n-pixel axis.
inline double pixel_center(int i, int n) { return -1.0 + (i + 0.5) * 2.0 / n; }

/// Pixel index containing normalized coordinate x.
inline int pixel_of(double x, int n) {
  return std::clamp(static_cast<int>(std::floor((x + 1.0) * 0.5 * n)), 0, n - 1);
}

/// Single-head scaled dot-product self attention over rows, with output projection.
inline ad::Var single_head_self_attention(ad::Graph& g, ad::ParameterStore& s, const std::string& p, ad::Var x) {
  ad::Var q = apply_linear(g, s, p + ".q", x);
  ad::Var k = apply_linear(g, s, p + ".k", x);
  ad::Var v = apply_linear(g, s, p + ".v", x);
  ad::Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols()))));
  return apply_linear(g, s, p + ".o", ad::matmul(att, v));
}

}  // namespace detail

/// Registers depth-net parameters under "depthnet.*".
inline void register_depth_params(ad::ParameterStore& s, const DepthNetConfig& cfg, Rng& rng) {
  cfg.binning.validate();
  const int w = cfg.width, e = cfg.embed_dim;
  detail::add_linear(s, "depthnet.proj", cfg.in_channels, w, rng);
  for (const char* name : {"depthnet.conv1", "depthnet.conv2", "depthnet.dil"}) {
    s.add_uniform(std::string(name) + ".w", ad::Shape{3, 3, w, w}, 9 * w, rng);
    s.add(std::string(name) + ".b", ad::Shape{w});
  }
  detail::add_linear(s, "depthnet.head", w, cfg.head_channels(), rng, 0.5);
  if (cfg.head == DepthHead::classification && cfg.dist == DistMode::ordinal) {
    // Start from the uniform distribution: c_k = (k + 1) / K.
    auto& b = s.at("depthnet.head.b").value;
    const int K = cfg.binning.k_bins;
    for (int m = 0; m < cfg.maps(); ++m)
      for (int k = 0; k < K - 1; ++k) {
        const double c = (k + 1.0) / K;
        b[static_cast<std::size_t>(m * K + k)] = std::log(c / (1.0 - c));
      }
  }
  detail::add_linear(s, "depthnet.enc.in", w, e, rng);
  detail::add_linear(s, "depthnet.enc.pos", 6 * cfg.pe_freqs, e, rng);
  for (const char* n : {"q", "k", "v", "o"}) detail::add_linear(s, std::string("depthnet.enc.") + n, e, e, rng);
  detail::add_layer_norm(s, "depthnet.enc.ln1", e);
  detail::add_linear(s, "depthnet.enc.ffn1", e, 2 * e, rng);
  detail::add_linear(s, "depthnet.enc.ffn2", 2 * e, e, rng);
  detail::add_layer_norm(s, "depthnet.enc.ln2", e);
}

/// Depth net on the depth-resolution feature grid {H_d, W_d, C}.
inline DepthOutput predict_depth(ad::Var features, ad::ParameterStore& s, const DepthNetConfig& cfg) {
  ad::Graph& g = features.graph();
  if (features.shape().rank() != 3 || features.shape()[2] != cfg.in_channels)
    throw ad::ShapeError("predict_depth: expected {H,W," + std::to_string(cfg.in_channels) + "} features, got " +
                         features.shape().str());
  const int H = features.shape()[0], W = features.shape()[1], P = H * W, w = cfg.width;
  auto conv = [&](const std::string& name, ad::Var x, int dil) {
    return ad::conv2d(x, g.param(s.at(name + ".w")), g.param(s.at(name + ".b")), dil);
  };
  ad::Var h0 = detail::checked_layer(
      ad::reshape(detail::apply_linear(g, s, "depthnet.proj", ad::reshape(features, ad::Shape{P, cfg.in_channels})),
                  ad::Shape{H, W, w}),
      0);
  ad::Var h1 = detail::checked_layer(ad::gelu(conv("depthnet.conv1", h0, 1)), 1);
  ad::Var h2 = detail::checked_layer(ad::gelu(conv("depthnet.conv2", h1, 1)), 2);
  ad::Var h3 = detail::checked_layer(ad::add(h2, ad::gelu(conv("depthnet.dil", h2, 2))), 3);
  ad::Var flat = ad::reshape(h3, ad::Shape{P, w});
  ad::Var head = detail::checked_layer(detail::apply_linear(g, s, "depthnet.head", flat), 4);

  DepthOutput out;
  out.height = H;
  out.width = W;
  out.maps = cfg.maps();
  out.head = cfg.head;
  out.logits = ad::reshape(head, ad::Shape{P * cfg.maps(), cfg.channels_per_map()});

  std::vector<double> coords(static_cast<std::size_t>(P) * 3, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      coords[static_cast<std::size_t>(y * W + x) * 3] = detail::pixel_center(x, W);
      coords[static_cast<std::size_t>(y * W + x) * 3 + 1] = detail::pixel_center(y, H);
    }
  ad::Var pe = detail::apply_linear(g, s, "depthnet.enc.pos", ad::sinusoid_encode(g.constant(ad::Shape{P, 3}, coords), cfg.pe_freqs));
  ad::Var t0 = ad::add(detail::apply_linear(g, s, "depthnet.enc.in", flat), pe);
  ad::Var t1 = detail::apply_layer_norm(g, s, "depthnet.enc.ln1", ad::add(t0, detail::single_head_self_attention(g, s, "depthnet.enc", t0)));
  ad::Var ffn = detail::apply_linear(g, s, "depthnet.enc.ffn2", ad::gelu(detail::apply_linear(g, s, "depthnet.enc.ffn1", t1)));
  out.embedding = detail::checked_layer(detail::apply_layer_norm(g, s, "depthnet.enc.ln2", ad::add(t1, ffn)), 5);
  return out;
}

/// Per-(pixel, map) distribution over bins: ordinal-CDF increments or softmax
/// of the logits; for the regression head, a hat split of the regressed depth.
inline ad::Var depth_distribution(const DepthOutput& d, const DepthNetConfig& cfg) {
  if (cfg.head == DepthHead::regression) return ad::hat_distribution(d.logits, cfg.binning.axis());
  return cfg.dist == DistMode::ordinal ? ad::ordinal_distribution(d.logits) : ad::softmax_rows(d.logits);
}

/// Bilinear resampling of a {h, w, C} map to {H, W, C} at cell centers,
/// then renormalization of every `group`-wide column block to sum to one.
inline ad::Var upsample_distribution(ad::Var map, int H, int W, int group) {
  if (map.shape().rank() != 3) throw ad::ShapeError("upsample_distribution: map must be {h,w,C}, got " + map.shape().str());
  const int h = map.shape()[0], w = map.shape()[1], C = map.shape()[2];
  if (H < h || W < w) throw ContractViolation("upsample_distribution: target smaller than source");
  if (C % group != 0) throw ad::ShapeError("upsample_distribution: channels not divisible by group");
  std::vector<ad::PlanePoint> pts;
  pts.reserve(static_cast<std::size_t>(H * W * (C / group)));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int b = 0; b < C / group; ++b) pts.push_back({detail::pixel_center(x, W), detail::pixel_center(y, H), b * group});
  return ad::reshape(ad::normalize_rows(ad::bilinear_sample_blocks(map, std::move(pts), group)), ad::Shape{H, W, C});
}

/// Pixels of the r x r window around normalized point (x, y) on an H x W
/// grid, clipped at the border, row-major.
inline std::vector<int> window_pixels(double x, double y, int H, int W, int r) {
  const int cx = detail::pixel_of(x, W), cy = detail::pixel_of(y, H);
  const int lo = -((r - 1) / 2);
  std::vector<int> out;
  for (int dy = lo; dy < lo + r; ++dy)
    for (int dx = lo; dx < lo + r; ++dx) {
      const int px = cx + dx, py = cy + dy;
      if (px >= 0 && px < W && py >= 0 && py < H) out.push_back(py * W + px);
    }
  return out;
}

/// Default depth-loss window at depth-map resolution.
inline int default_depth_window(int depth_height) { return std::max(1, depth_height / 8); }

/// Sparse ordinal loss: mean over the N window pixels of the per-bin binary
/// cross-entropy against targets t_k = [k >= l_j]. For the regression head the
/// per-pixel term is |d - z_j| / bin width.
inline ad::Var depth_loss(const DepthOutput& d, const Coords3& gt3d, const Coords2& gt2d_norm, const DepthBinning& b, int r) {
  if (r < 1) throw ContractViolation("depth_loss: r must be >= 1");
  const int J = static_cast<int>(gt3d.rows());
  const bool regression = d.head == DepthHead::regression;
  std::vector<int> rows;
  std::vector<double> targets;
  for (int j = 0; j < J; ++j) {
    const int label = depth_to_bin(gt3d(j, 2), b);
    const int map = d.maps == 1 ? 0 : j;
    for (int p : window_pixels(gt2d_norm(j, 0), gt2d_norm(j, 1), d.height, d.width, r)) {
      rows.push_back(p * d.maps + map);
      if (regression) targets.push_back(gt3d(j, 2));
      else
        for (int k = 0; k < b.k_bins; ++k) targets.push_back(k >= label ? 1.0 : 0.0);
    }
  }
  const double n = static_cast<double>(rows.size());
  ad::Graph& g = d.logits.graph();
  const int R = static_cast<int>(rows.size());
  ad::Var picked = ad::gather_rows(d.logits, std::move(rows));
  if (regression) {
    ad::Var err = ad::row_norm(ad::sub(picked, g.constant(ad::Shape{R, 1}, std::move(targets))));
    return ad::scale(ad::sum_all(err), 1.0 / (n * b.width()));
  }
  return ad::scale(ad::bce_with_logits_sum(picked, std::move(targets)), 1.0 / n);
}

/// Per-pixel argmax bin and expected depth of one map, as two CSV grids.
inline void write_depth_csv(std::ostream& argmax_os, std::ostream& expect_os, std::span<const double> dist, int H, int W,
                            int maps, int map, const DepthBinning& b) {
  const int K = b.k_bins;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double* row = dist.data() + (static_cast<std::size_t>(y * W + x) * maps + map) * K;
      int best = 0;
      double e = 0.0;
      for (int k = 0; k < K; ++k) {
        if (row[k] > row[best]) best = k;
        e += row[k] * b.bin_center(k);
      }
      argmax_os << (x ? "," : "") << best;
      expect_os << (x ? "," : "") << format_real(e);
    }
    argmax_os << '\n';
    expect_os << '\n';
  }
}

}  // namespace alft
