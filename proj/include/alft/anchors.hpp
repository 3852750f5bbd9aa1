#pragma once

#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "alft/diffcore/graph.hpp"
#include "alft/diffcore/ops.hpp"
#include "alft/diffcore/params.hpp"
#include "alft/skeleton.hpp"

namespace alft {

class ParameterHealthError : public ad::NumericError {
 public:
  using ad::NumericError::NumericError;
};

struct AnchorConfig {
  int local_per_joint = 16;  // K
  int grid_x = 16;
  int grid_y = 16;
  double global_depth = 0.0;
  bool use_global = true;
  bool use_local = true;
  double init_bias_spread = 0.1;  // local offsets start at U(-s, s), weight at 0

  void validate() const {
    if (local_per_joint < 1) throw ContractViolation("anchors: local_per_joint must be >= 1");
    if (grid_x < 1 || grid_y < 1) throw ContractViolation("anchors: grid dims must be >= 1");
    if (!use_global && !use_local) throw ContractViolation("anchors: at least one of global/local must be enabled");
  }
  /// Grid spacing in normalized units along x and y.
  [[nodiscard]] double stride_x() const { return 2.0 / grid_x; }
  [[nodiscard]] double stride_y() const { return 2.0 / grid_y; }
  [[nodiscard]] int global_count() const { return use_global ? grid_x * grid_y : 0; }
  [[nodiscard]] int local_count(int joints) const { return use_local ? joints * local_per_joint : 0; }
  [[nodiscard]] int total(int joints) const { return global_count() + local_count(joints); }
};

struct AnchorTag {
  bool global = true;
  int joint = -1;
  int slot = -1;

  bool operator==(const AnchorTag&) const = default;
  [[nodiscard]] std::string str() const {
    return global ? "global" : "local(" + std::to_string(joint) + "," + std::to_string(slot) + ")";
  }
};

/// Anchor positions with provenance. Order: global block (row-major over the
/// grid, y outer), then local block in (joint, slot) order.
struct AnchorSet {
  Coords3 positions;
  std::vector<AnchorTag> tags;

  [[nodiscard]] int size() const { return static_cast<int>(tags.size()); }
};

inline const char* kAnchorWeight = "anchors.offsetmap.weight";
inline const char* kAnchorBias = "anchors.offsetmap.bias";

/// Registers the shared linear offset map (2 N_J) -> (N_J K 3).
inline void register_anchor_params(ad::ParameterStore& store, int joints, const AnchorConfig& cfg, Rng& rng) {
  cfg.validate();
  const int out = joints * cfg.local_per_joint * 3;
  store.add(kAnchorWeight, ad::Shape{2 * joints, out});
  auto& b = store.add(kAnchorBias, ad::Shape{out});
  for (double& v : b.value) v = rng.uniform(-cfg.init_bias_spread, cfg.init_bias_spread);
}

inline std::vector<AnchorTag> anchor_tags(int joints, const AnchorConfig& cfg) {
  std::vector<AnchorTag> tags;
  for (int i = 0; i < cfg.global_count(); ++i) tags.push_back({});
  if (cfg.use_local)
    for (int j = 0; j < joints; ++j)
      for (int k = 0; k < cfg.local_per_joint; ++k) tags.push_back({false, j, k});
  return tags;
}

/// Grid centers spanning [-1, 1]^2 at z = global_depth, y outer, x inner.
inline ad::Tensor global_anchor_grid(const AnchorConfig& cfg) {
  cfg.validate();
  ad::Tensor t(ad::Shape{cfg.grid_x * cfg.grid_y, 3});
  std::size_t o = 0;
  for (int iy = 0; iy < cfg.grid_y; ++iy)
    for (int ix = 0; ix < cfg.grid_x; ++ix) {
      t.data[o++] = -1.0 + (ix + 0.5) * cfg.stride_x();
      t.data[o++] = -1.0 + (iy + 0.5) * cfg.stride_y();
      t.data[o++] = cfg.global_depth;
    }
  return t;
}

namespace detail {

inline void require_finite(ad::Var v, const char* what) {
  for (double x : v.value())
    if (!std::isfinite(x)) throw ParameterHealthError(std::string(what) + " produced a non-finite value");
}

}  // namespace detail

/// Local anchors (N_J K) x 3: anchor (j, k) = (j_x, j_y, 0) + delta[j, k] with
/// delta = reshape(flatten(pose) W + b). pose2d: N_J x 2, normalized.
inline ad::Var generate_local_anchors(ad::Var pose2d, ad::Var weight, ad::Var bias, int per_joint) {
  ad::Graph& g = pose2d.graph();
  const int J = pose2d.rows();
  if (pose2d.cols() != 2) throw ad::ShapeError("generate_local_anchors: pose must be N_J x 2, got " + pose2d.shape().str());
  if (weight.shape() != ad::Shape({2 * J, J * per_joint * 3}))
    throw ad::ShapeError("generate_local_anchors: weight shape " + weight.shape().str() + " inconsistent with N_J=" +
                         std::to_string(J) + ", K=" + std::to_string(per_joint));
  ad::Var flat = ad::reshape(pose2d, ad::Shape{1, 2 * J});
  ad::Var delta = ad::reshape(ad::linear(flat, weight, bias), ad::Shape{J * per_joint, 3});
  detail::require_finite(delta, "local anchor offset map");
  ad::Var base3 = ad::concat_cols({pose2d, g.constant(ad::Shape{J, 1}, std::vector<double>(static_cast<std::size_t>(J), 0.0))});
  std::vector<int> repeat;
  repeat.reserve(static_cast<std::size_t>(J * per_joint));
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < per_joint; ++k) repeat.push_back(j);
  return ad::add(ad::gather_rows(base3, std::move(repeat)), delta);
}

/// Full anchor set as a graph value (A_total x 3), global block first.
inline ad::Var build_anchor_positions(ad::Var pose2d, ad::ParameterStore& store, const AnchorConfig& cfg) {
  cfg.validate();
  ad::Graph& g = pose2d.graph();
  std::vector<ad::Var> parts;
  if (cfg.use_global) parts.push_back(g.constant(global_anchor_grid(cfg)));
  if (cfg.use_local)
    parts.push_back(generate_local_anchors(pose2d, g.param(store.at(kAnchorWeight)), g.param(store.at(kAnchorBias)),
                                           cfg.local_per_joint));
  return parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
}

/// Value-level convenience: evaluates the anchor set for one normalized pose.
inline AnchorSet build_anchor_set(const Pose2D& pose, ad::ParameterStore& store, const AnchorConfig& cfg) {
  if (!pose.normalized) throw ContractViolation("build_anchor_set: pose must be normalized");
  ad::Graph g;
  std::vector<double> flat(pose.coords.data(), pose.coords.data() + pose.coords.size());
  ad::Var p = g.constant(ad::Shape{pose.joints(), 2}, std::move(flat));
  ad::Var pos = build_anchor_positions(p, store, cfg);
  AnchorSet set;
  set.positions = Eigen::Map<const Coords3>(pos.value().data(), pos.rows(), 3);
  set.tags = anchor_tags(pose.joints(), cfg);
  return set;
}

/// Rows of the local block only.
inline Coords3 local_block(const AnchorSet& set) {
  std::vector<int> rows;
  for (int i = 0; i < set.size(); ++i)
    if (!set.tags[static_cast<std::size_t>(i)].global) rows.push_back(i);
  Coords3 out(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = set.positions.row(rows[i]);
  return out;
}

/// CSV with header x,y,z,provenance.
inline void write_anchor_csv(std::ostream& os, const AnchorSet& set) {
  os << "x,y,z,provenance\n";
  for (int i = 0; i < set.size(); ++i) {
    const auto& t = set.tags[static_cast<std::size_t>(i)];
    os << format_real(set.positions(i, 0)) << ',' << format_real(set.positions(i, 1)) << ',' << format_real(set.positions(i, 2))
       << ',' << (t.global ? std::string("global") : "local:" + std::to_string(t.joint) + ":" + std::to_string(t.slot)) << '\n';
  }
}

}  // namespace alft
