#pragma once

#include "alft/model.hpp"
#include "support.hpp"

namespace alft::testing {

/// Four joints, two local anchors each plus a 4x3 grid (20 anchors), 8 depth
/// bins, C = 8, on a 16-pixel image.
inline ModelConfig micro_config(Variant v = Variant::full) {
  ModelConfig c;
  c.joints = 4;
  c.image_size = 16;
  c.level_channels = {3, 3, 3};
  c.anchors.local_per_joint = 2;
  c.anchors.grid_x = 4;
  c.anchors.grid_y = 3;
  c.depth.width = 4;
  c.depth.pe_freqs = 1;
  c.depth.binning = {1.0, 1.0, 8};
  c.sampler.token_dim = 4;
  c.decoder.layers = 1;
  c.decoder.heads = 2;
  c.decoder.model_dim = 8;
  c.decoder.sample_points = 2;
  c.decoder.pe_freqs = 1;
  c.decoder.ffn_mult = 1;
  return apply_variant(c, v);
}

struct MicroSample {
  FeaturePyramid pyramid;
  Coords2 pose2d;
  ModelTarget target;

  [[nodiscard]] ModelInput input() const { return {&pyramid, pose2d}; }
};

inline MicroSample micro_sample(std::uint64_t seed) {
  Rng rng(seed);
  MicroSample s;
  for (int n = 8; n >= 2; n /= 2) s.pyramid.levels.push_back(random_tensor(rng, ad::Shape{n, n, 3}, 0.0, 1.0));
  Coords2 p2(4, 2);
  Coords3 p3(4, 3);
  for (int j = 0; j < 4; ++j) {
    p2.row(j) << rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7);
    p3.row(j) << p2(j, 0), p2(j, 1), j == 0 ? 0.0 : rng.uniform(-0.6, 0.6);
  }
  s.target.gt3d.coords = p3;
  s.target.gt2d = p2;
  s.pose2d = p2;
  for (int j = 0; j < 4; ++j)
    for (int c = 0; c < 2; ++c) s.pose2d(j, c) += rng.uniform(-0.05, 0.05);
  return s;
}

/// Moves every parameter off its initial value so no head starts at an exact
/// symmetric point.
inline void perturb(ad::ParameterStore& s, std::uint64_t seed, double spread) {
  Rng rng(seed);
  for (std::size_t i = 0; i < s.count(); ++i)
    for (double& v : s[i].value) v += rng.uniform(-spread, spread);
}

}  // namespace alft::testing
