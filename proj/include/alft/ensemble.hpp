#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "alft/anchors.hpp"
#include "alft/depthfield.hpp"
#include "alft/diffcore/graph.hpp"
#include "alft/diffcore/ops.hpp"
#include "alft/diffcore/params.hpp"
#include "alft/skeleton.hpp"
#include "json.hpp"

namespace alft {

struct LossConfig {
  double lambda_pose = 2.0;
  double lambda_depth = 0.1;

  void validate() const {
    if (lambda_pose < 0.0 || lambda_depth < 0.0) throw ContractViolation("loss weights must be non-negative");
  }
};

/// Ensemble output for one sample.
struct PosePrediction {
  ad::Var absolute;  // N_J x 3, weighted anchor proposals before centering
  ad::Var pose;      // N_J x 3, root-relative
  ad::Var weights;   // A x N_J, columns sum to one over anchors
  ad::Var offsets;   // A x (N_J 3)
};

/// Registers "ensemble.*": two-layer perceptrons C -> C -> 3 N_J and C -> C -> N_J.
/// Output layers start at zero: zero offsets and uniform anchor weights.
inline void register_ensemble_params(ad::ParameterStore& s, int C, int joints, Rng& rng) {
  detail::add_linear(s, "ensemble.offset.fc1", C, C, rng);
  s.add("ensemble.offset.fc2.w", ad::Shape{C, 3 * joints});
  s.add("ensemble.offset.fc2.b", ad::Shape{3 * joints});
  detail::add_linear(s, "ensemble.weight.fc1", C, C, rng);
  s.add("ensemble.weight.fc2.w", ad::Shape{C, joints});
  s.add("ensemble.weight.fc2.b", ad::Shape{joints});
}

/// Per-anchor offsets (A x 3 N_J) and weight logits (A x N_J).
inline std::pair<ad::Var, ad::Var> predict_offsets_weights(ad::Var q, ad::ParameterStore& s) {
  ad::Graph& g = q.graph();
  auto mlp = [&](const std::string& p) {
    return detail::apply_linear(g, s, p + ".fc2", ad::gelu(detail::apply_linear(g, s, p + ".fc1", q)));
  };
  return {mlp("ensemble.offset"), mlp("ensemble.weight")};
}

/// Softmax over the anchor axis of every joint's logit column.
inline ad::Var anchor_softmax(ad::Var logits) { return ad::transpose(ad::softmax_rows(ad::transpose(logits))); }

/// P_j = sum_a W[a, j] (P_a + O[a, j]), then centered on the predicted root.
inline PosePrediction anchor_to_joint(ad::Var anchors, ad::Var offsets, ad::Var weight_logits) {
  PosePrediction p;
  p.offsets = offsets;
  p.weights = anchor_softmax(weight_logits);
  p.absolute = ad::anchor_ensemble(anchors, offsets, p.weights);
  p.pose = ad::center_on_first_row(p.absolute);
  return p;
}

/// Mean per-joint L2 error of a root-relative prediction against root-centered ground truth.
inline ad::Var pose_loss(ad::Var pose, const Pose3D& gt) {
  const Coords3 c = gt.root_centered().coords;
  if (pose.rows() != c.rows()) throw ContractViolation("pose_loss: joint count mismatch");
  ad::Var target = pose.graph().constant(ad::Shape{static_cast<int>(c.rows()), 3}, std::vector<double>(c.data(), c.data() + c.size()));
  return ad::mean_all(ad::row_norm(ad::sub(pose, target)));
}

/// lambda_pose * L_pose + lambda_depth * L_depth.
inline ad::Var total_loss(ad::Var pose_term, ad::Var depth_term, const LossConfig& cfg) {
  cfg.validate();
  ad::Var l = ad::scale(pose_term, cfg.lambda_pose);
  return depth_term.valid() ? ad::add(l, ad::scale(depth_term, cfg.lambda_depth)) : l;
}

inline double total_loss(double pose_term, double depth_term, const LossConfig& cfg) {
  cfg.validate();
  if (depth_term < 0.0) throw ContractViolation("total_loss: depth loss must be >= 0");
  return cfg.lambda_pose * pose_term + cfg.lambda_depth * depth_term;
}

/// Value-level copy of a J x 3 graph result.
inline Pose3D to_pose(ad::Var v) {
  Pose3D p;
  p.coords = Eigen::Map<const Coords3>(v.value().data(), v.rows(), 3);
  return p;
}

/// Indices of the k largest entries of column j of an A x J matrix, descending.
inline std::vector<int> top_anchors(std::span<const double> w, int A, int J, int j, int k) {
  std::vector<int> idx(static_cast<std::size_t>(A));
  std::iota(idx.begin(), idx.end(), 0);
  const int n = std::min(k, A);
  std::partial_sort(idx.begin(), idx.begin() + n, idx.end(), [&](int a, int b) {
    const double wa = w[static_cast<std::size_t>(a * J + j)], wb = w[static_cast<std::size_t>(b * J + j)];
    return wa != wb ? wa > wb : a < b;
  });
  idx.resize(static_cast<std::size_t>(n));
  return idx;
}

/// {"pose3d": [[x,y,z]...], "top_anchors": [{"joint", "index": [...], "weight": [...]}...]}
inline nlohmann::json prediction_json(const PosePrediction& p, int k = 50) {
  const int A = p.weights.rows(), J = p.weights.cols();
  nlohmann::json top = nlohmann::json::array();
  for (int j = 0; j < J; ++j) {
    nlohmann::json idx = nlohmann::json::array(), wt = nlohmann::json::array();
    for (int a : top_anchors(p.weights.value(), A, J, j, k)) {
      idx.push_back(a);
      wt.push_back(p.weights.at(static_cast<std::size_t>(a * J + j)));
    }
    top.push_back({{"joint", j}, {"index", idx}, {"weight", wt}});
  }
  return {{"pose3d", coords_to_json(to_pose(p.pose).coords)}, {"top_anchors", top}};
}

/// Mean distance from each joint's top-k anchors to that joint's root-centered
/// ground truth position.
inline double informative_anchor_distance(ad::Var anchors, ad::Var weights, const Pose3D& gt, int k = 50) {
  const int A = weights.rows(), J = weights.cols();
  const Coords3 c = gt.root_centered().coords;
  double sum = 0.0;
  int n = 0;
  for (int j = 0; j < J; ++j)
    for (int a : top_anchors(weights.value(), A, J, j, k)) {
      const Eigen::RowVector3d pa(anchors.at(static_cast<std::size_t>(a * 3)), anchors.at(static_cast<std::size_t>(a * 3 + 1)),
                                  anchors.at(static_cast<std::size_t>(a * 3 + 2)));
      sum += (pa - c.row(j)).norm();
      ++n;
    }
  return n ? sum / n : 0.0;
}

}  // namespace alft
