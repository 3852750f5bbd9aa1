#pragma once

#include <algorithm>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "alft/depthfield.hpp"
#include "alft/diffcore/graph.hpp"
#include "alft/diffcore/ops.hpp"
#include "alft/diffcore/params.hpp"
#include "alft/skeleton.hpp"

namespace alft {

/// Feature grids {H_l, W_l, C_l}, highest resolution first.
struct FeaturePyramid {
  std::vector<ad::Tensor> levels;

  void validate() const {
    if (levels.empty()) throw ContractViolation("pyramid has no levels");
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (levels[l].shape.rank() != 3) throw ContractViolation("pyramid level must be {H,W,C}");
      if (l > 0 && (levels[l].shape[0] * 2 != levels[l - 1].shape[0] || levels[l].shape[1] * 2 != levels[l - 1].shape[1]))
        throw ContractViolation("pyramid levels must halve in resolution");
    }
  }
  [[nodiscard]] int height(int l) const { return levels[static_cast<std::size_t>(l)].shape[0]; }
  [[nodiscard]] int width(int l) const { return levels[static_cast<std::size_t>(l)].shape[1]; }
  [[nodiscard]] int channels(int l) const { return levels[static_cast<std::size_t>(l)].shape[2]; }
  [[nodiscard]] int size() const { return static_cast<int>(levels.size()); }
};

enum class SamplingMode { pose_prior, full_map, random };

struct SamplerConfig {
  int token_dim = 64;  // C_I
  SamplingMode mode = SamplingMode::pose_prior;
  std::vector<int> radius;  // per level; empty means max(1, H_l / 16)

  [[nodiscard]] int radius_for(int level, int height) const {
    if (static_cast<std::size_t>(level) < radius.size()) return radius[static_cast<std::size_t>(level)];
    return std::max(1, height / 16);
  }
};

struct LiftEntry {
  int token;  // level-local token index
  int joint;  // owner joint
};

struct TokenLevel {
  int height = 0;
  int width = 0;
  std::vector<int> pixels;         // sorted pixel indices of the level's tokens
  std::vector<LiftEntry> entries;  // ordered by joint, then pixel
};

/// Which pixels become tokens and which joint distributions lift them.
struct TokenSelection {
  std::vector<TokenLevel> levels;

  [[nodiscard]] int token_count() const {
    int n = 0;
    for (const auto& l : levels) n += static_cast<int>(l.pixels.size());
    return n;
  }
  [[nodiscard]] int entry_count() const {
    int n = 0;
    for (const auto& l : levels) n += static_cast<int>(l.entries.size());
    return n;
  }
};

namespace detail {

/// (2r + 1)^2 window around the pixel containing normalized (x, y), clipped.
inline std::vector<int> square_window(double x, double y, int H, int W, int r) {
  const int cx = pixel_of(x, W), cy = pixel_of(y, H);
  std::vector<int> out;
  for (int py = std::max(0, cy - r); py <= std::min(H - 1, cy + r); ++py)
    for (int px = std::max(0, cx - r); px <= std::min(W - 1, cx + r); ++px) out.push_back(py * W + px);
  return out;
}

/// Owners of each pixel in `pixels`: joints whose window contains it, or the
/// nearest joint if none does. Entries come out ordered by joint then pixel.
inline std::vector<LiftEntry> assign_owners(const std::vector<int>& pixels, const Coords2& pose, int H, int W, int r) {
  const int J = static_cast<int>(pose.rows());
  std::vector<int> token_of(static_cast<std::size_t>(H * W), -1);
  for (std::size_t t = 0; t < pixels.size(); ++t) token_of[static_cast<std::size_t>(pixels[t])] = static_cast<int>(t);
  std::vector<std::vector<int>> owned(static_cast<std::size_t>(J));
  std::vector<char> covered(pixels.size(), 0);
  for (int j = 0; j < J; ++j)
    for (int p : square_window(pose(j, 0), pose(j, 1), H, W, r)) {
      const int t = token_of[static_cast<std::size_t>(p)];
      if (t < 0) continue;
      owned[static_cast<std::size_t>(j)].push_back(t);
      covered[static_cast<std::size_t>(t)] = 1;
    }
  for (std::size_t t = 0; t < pixels.size(); ++t) {
    if (covered[t]) continue;
    const double x = pixel_center(pixels[t] % W, W), y = pixel_center(pixels[t] / W, H);
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int j = 0; j < J; ++j) {
      const double d = (pose(j, 0) - x) * (pose(j, 0) - x) + (pose(j, 1) - y) * (pose(j, 1) - y);
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    owned[static_cast<std::size_t>(best)].push_back(static_cast<int>(t));
  }
  std::vector<LiftEntry> entries;
  for (int j = 0; j < J; ++j) {
    auto& o = owned[static_cast<std::size_t>(j)];
    std::sort(o.begin(), o.end());
    for (int t : o) entries.push_back({t, j});
  }
  return entries;
}

}  // namespace detail

/// Token selection for one sample. Pose-prior mode keeps the union of
/// per-joint windows on every level but the last, which is kept whole; full-map
/// mode keeps every pixel; random mode draws as many pixels per level as
/// pose-prior mode would, uniformly without replacement.
inline TokenSelection select_tokens(const FeaturePyramid& pyr, const Coords2& pose_norm, const SamplerConfig& cfg,
                                    Rng* rng = nullptr) {
  pyr.validate();
  TokenSelection sel;
  const int L = pyr.size();
  for (int l = 0; l < L; ++l) {
    TokenLevel lv;
    lv.height = pyr.height(l);
    lv.width = pyr.width(l);
    const int HW = lv.height * lv.width;
    const int r = cfg.radius_for(l, lv.height);
    const bool whole = l == L - 1 || cfg.mode == SamplingMode::full_map;
    if (whole) {
      lv.pixels.resize(static_cast<std::size_t>(HW));
      std::iota(lv.pixels.begin(), lv.pixels.end(), 0);
    } else {
      std::vector<char> mark(static_cast<std::size_t>(HW), 0);
      for (Eigen::Index j = 0; j < pose_norm.rows(); ++j)
        for (int p : detail::square_window(pose_norm(j, 0), pose_norm(j, 1), lv.height, lv.width, r))
          mark[static_cast<std::size_t>(p)] = 1;
      for (int p = 0; p < HW; ++p)
        if (mark[static_cast<std::size_t>(p)]) lv.pixels.push_back(p);
      if (cfg.mode == SamplingMode::random) {
        if (!rng) throw ContractViolation("select_tokens: random sampling needs a generator");
        std::vector<int> all(static_cast<std::size_t>(HW));
        std::iota(all.begin(), all.end(), 0);
        const std::size_t n = lv.pixels.size();
        for (std::size_t i = 0; i < n; ++i) std::swap(all[i], all[i + rng->below(all.size() - i)]);
        lv.pixels.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
        std::sort(lv.pixels.begin(), lv.pixels.end());
      }
    }
    if (whole || cfg.mode == SamplingMode::random) {
      lv.entries = detail::assign_owners(lv.pixels, pose_norm, lv.height, lv.width, r);
    } else {
      std::vector<int> token_of(static_cast<std::size_t>(HW), -1);
      for (std::size_t t = 0; t < lv.pixels.size(); ++t) token_of[static_cast<std::size_t>(lv.pixels[t])] = static_cast<int>(t);
      for (Eigen::Index j = 0; j < pose_norm.rows(); ++j)
        for (int p : detail::square_window(pose_norm(j, 0), pose_norm(j, 1), lv.height, lv.width, r))
          lv.entries.push_back({token_of[static_cast<std::size_t>(p)], static_cast<int>(j)});
    }
    sel.levels.push_back(std::move(lv));
  }
  return sel;
}

/// Projected tokens F_I (N_F x C_I) plus everything lifting needs.
struct TokenSet {
  ad::Var features;                  // N_F x C_I
  ad::Var depth_dist;                // N_E x K_bin, one row per lift entry
  std::vector<int> level_offset;     // first token row of each level
  std::vector<int> entry_offset;     // first entry row of each level
  std::shared_ptr<const ad::LiftLayout> layout;
  TokenSelection selection;

  [[nodiscard]] int token_count() const { return features.rows(); }
};

inline void register_sampler_params(ad::ParameterStore& s, const std::vector<int>& level_channels, const SamplerConfig& cfg,
                                    Rng& rng) {
  for (std::size_t l = 0; l < level_channels.size(); ++l) {
    const std::string p = "sampler.proj" + std::to_string(l);
    s.add_uniform(p + ".w", ad::Shape{level_channels[l], cfg.token_dim}, level_channels[l], rng);
    s.add(p + ".b", ad::Shape{cfg.token_dim});
  }
}

/// Per-level linear projection of the selected pixels to C_I.
inline ad::Var project_tokens(ad::Graph& g, ad::ParameterStore& s, const FeaturePyramid& pyr, const TokenSelection& sel) {
  std::vector<ad::Var> parts;
  for (int l = 0; l < pyr.size(); ++l) {
    const auto& lv = sel.levels[static_cast<std::size_t>(l)];
    if (lv.pixels.empty()) continue;
    const ad::Tensor& t = pyr.levels[static_cast<std::size_t>(l)];
    ad::Var flat = g.constant(ad::Shape{lv.height * lv.width, t.shape[2]}, t.data);
    const std::string p = "sampler.proj" + std::to_string(l);
    parts.push_back(ad::linear(ad::gather_rows(flat, lv.pixels), g.param(s.at(p + ".w")), g.param(s.at(p + ".b"))));
  }
  return parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
}

/// How the per-entry depth rows are produced from the depth output.
struct DepthRowSource {
  DepthMode mode = DepthMode::joint_wise;
  DepthHead head = DepthHead::classification;
  DepthBinning binning;
};

/// Joint-matched depth rows: entry (token, j) reads map j (or the single map)
/// of the depth distribution, bilinearly upsampled to the token's pixel center
/// and renormalized. `dist` has rows (pixel, map) as produced by the depth net;
/// for the regression head it holds one depth per row instead.
inline ad::Var token_depth_rows(ad::Graph& g, ad::Var dist, int depth_h, int depth_w, int maps, const TokenSelection& sel,
                                const DepthRowSource& src) {
  const int K = src.binning.k_bins;
  const int E = sel.entry_count();
  if (src.mode == DepthMode::none)
    return g.constant(ad::Shape{E, K}, std::vector<double>(static_cast<std::size_t>(E) * K, 1.0 / K));
  const int width = src.head == DepthHead::regression ? 1 : K;
  ad::Var map = ad::reshape(dist, ad::Shape{depth_h, depth_w, maps * width});
  std::vector<ad::PlanePoint> pts;
  pts.reserve(static_cast<std::size_t>(E));
  for (const auto& lv : sel.levels)
    for (const auto& e : lv.entries) {
      const int p = lv.pixels[static_cast<std::size_t>(e.token)];
      const int m = maps == 1 ? 0 : e.joint;
      pts.push_back({detail::pixel_center(p % lv.width, lv.width), detail::pixel_center(p / lv.width, lv.height), m * width});
    }
  ad::Var rows = ad::bilinear_sample_blocks(map, std::move(pts), width);
  if (src.head == DepthHead::regression) return ad::hat_distribution(rows, src.binning.axis());
  return ad::normalize_rows(rows);
}

/// CSR lift layout over the selection; entry rows and token rows are global.
inline std::shared_ptr<const ad::LiftLayout> build_lift_layout(const TokenSelection& sel, const DepthBinning& b) {
  auto layout = std::make_shared<ad::LiftLayout>();
  layout->depth = b.axis();
  int token_base = 0, entry_base = 0;
  for (const auto& lv : sel.levels) {
    ad::LiftLevel out;
    out.height = lv.height;
    out.width = lv.width;
    const int HW = lv.height * lv.width;
    std::vector<int> count(static_cast<std::size_t>(HW) + 1, 0);
    for (const auto& e : lv.entries) ++count[static_cast<std::size_t>(lv.pixels[static_cast<std::size_t>(e.token)]) + 1];
    for (int p = 0; p < HW; ++p) count[static_cast<std::size_t>(p) + 1] += count[static_cast<std::size_t>(p)];
    out.pixel_start = count;
    out.entry_row.resize(lv.entries.size());
    out.entry_token.resize(lv.entries.size());
    std::vector<int> fill(count.begin(), count.end() - 1);
    for (std::size_t i = 0; i < lv.entries.size(); ++i) {
      const int p = lv.pixels[static_cast<std::size_t>(lv.entries[i].token)];
      const int slot = fill[static_cast<std::size_t>(p)]++;
      out.entry_row[static_cast<std::size_t>(slot)] = entry_base + static_cast<int>(i);
      out.entry_token[static_cast<std::size_t>(slot)] = token_base + lv.entries[i].token;
    }
    token_base += static_cast<int>(lv.pixels.size());
    entry_base += static_cast<int>(lv.entries.size());
    layout->levels.push_back(std::move(out));
  }
  return layout;
}

inline TokenSet sample_tokens(ad::Graph& g, ad::ParameterStore& s, const FeaturePyramid& pyr, TokenSelection sel,
                              ad::Var depth_dist, int depth_h, int depth_w, int maps, const DepthRowSource& src) {
  TokenSet ts;
  ts.features = project_tokens(g, s, pyr, sel);
  ts.depth_dist = token_depth_rows(g, depth_dist, depth_h, depth_w, maps, sel, src);
  int t = 0, e = 0;
  for (const auto& lv : sel.levels) {
    ts.level_offset.push_back(t);
    ts.entry_offset.push_back(e);
    t += static_cast<int>(lv.pixels.size());
    e += static_cast<int>(lv.entries.size());
  }
  ts.layout = build_lift_layout(sel, src.binning);
  ts.selection = std::move(sel);
  return ts;
}

/// Dense lifted volumes, one {H_l, W_l, K_bin, C} grid per level:
/// volume[x, y, k, :] = sum over entries at (x, y) of dist_k * value.
/// `values` are per-token vectors (N_F x C), `dists` per-entry rows (N_E x K).
inline std::vector<ad::Var> lift_features(ad::Var values, ad::Var dists, const TokenSelection& sel) {
  std::vector<ad::Var> out;
  const int K = dists.cols(), C = values.cols();
  int token_base = 0, entry_base = 0;
  for (const auto& lv : sel.levels) {
    std::vector<int> tok, ent, pix;
    for (std::size_t i = 0; i < lv.entries.size(); ++i) {
      tok.push_back(token_base + lv.entries[i].token);
      ent.push_back(entry_base + static_cast<int>(i));
      pix.push_back(lv.pixels[static_cast<std::size_t>(lv.entries[i].token)]);
    }
    const int HW = lv.height * lv.width;
    ad::Var vol;
    if (tok.empty()) {
      vol = values.graph().constant(ad::Shape{HW, K * C}, std::vector<double>(static_cast<std::size_t>(HW) * K * C, 0.0));
    } else {
      ad::Var prod = ad::outer_rows(ad::gather_rows(dists, std::move(ent)), ad::gather_rows(values, std::move(tok)));
      vol = ad::scatter_add_rows(prod, std::move(pix), HW);
    }
    out.push_back(ad::reshape(vol, ad::Shape{lv.height, lv.width, K, C}));
    token_base += static_cast<int>(lv.pixels.size());
    entry_base += static_cast<int>(lv.entries.size());
  }
  return out;
}

/// Per-level occupancy masks (token pixels white) as binary PGM images.
inline void write_occupancy_pgm(const std::string& prefix, const TokenSelection& sel) {
  for (std::size_t l = 0; l < sel.levels.size(); ++l) {
    const auto& lv = sel.levels[l];
    std::vector<unsigned char> img(static_cast<std::size_t>(lv.height * lv.width), 0);
    for (int p : lv.pixels) img[static_cast<std::size_t>(p)] = 255;
    std::ofstream os(prefix + std::to_string(l) + ".pgm", std::ios::binary);
    os << "P5\n" << lv.width << ' ' << lv.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  }
}

}  // namespace alft
