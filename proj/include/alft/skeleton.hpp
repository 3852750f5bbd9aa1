#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "json.hpp"

namespace alft {

using Coords2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;
using Coords3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Kinematic tree. Joint 0 is the root; every other joint's parent has a
/// smaller index.
struct SkeletonTopology {
  int joint_count = 0;
  std::vector<int> parent_index;
  std::vector<double> bone_length;

  void validate() const {
    if (joint_count < 1) throw ContractViolation("topology needs at least one joint");
    if (static_cast<int>(parent_index.size()) != joint_count || static_cast<int>(bone_length.size()) != joint_count)
      throw ContractViolation("topology arrays must have joint_count entries");
    if (parent_index[0] != -1) throw ContractViolation("joint 0 must be the root (parent -1)");
    if (bone_length[0] != 0.0) throw ContractViolation("root bone length must be 0");
    for (int j = 1; j < joint_count; ++j) {
      const int p = parent_index[static_cast<std::size_t>(j)];
      if (p < 0 || p >= j) throw ContractViolation("parent_index[" + std::to_string(j) + "] must be in [0, j)");
      if (bone_length[static_cast<std::size_t>(j)] < 0.0) throw ContractViolation("negative bone length");
    }
  }

  /// 17-joint Human3.6M-style tree: pelvis, right leg, left leg, spine,
  /// thorax, neck, head, left arm, right arm. Lengths in synthetic units with
  /// every root-to-leaf chain shorter than 1.
  static SkeletonTopology human17() {
    SkeletonTopology t;
    t.joint_count = 17;
    t.parent_index = {-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15};
    t.bone_length = {0.0, 0.11, 0.38, 0.38, 0.11, 0.38, 0.38, 0.20, 0.20, 0.09, 0.09, 0.13, 0.22, 0.20, 0.13, 0.22, 0.20};
    return t;
  }

  [[nodiscard]] double max_chain_length() const {
    std::vector<double> depth(static_cast<std::size_t>(joint_count), 0.0);
    double best = 0.0;
    for (int j = 1; j < joint_count; ++j) {
      depth[static_cast<std::size_t>(j)] =
          depth[static_cast<std::size_t>(parent_index[static_cast<std::size_t>(j)])] + bone_length[static_cast<std::size_t>(j)];
      best = std::max(best, depth[static_cast<std::size_t>(j)]);
    }
    return best;
  }
};

struct Pose2D {
  Coords2 coords;
  bool normalized = false;

  [[nodiscard]] int joints() const { return static_cast<int>(coords.rows()); }
};

/// Root-relative 3D joint positions.
struct Pose3D {
  Coords3 coords;

  [[nodiscard]] int joints() const { return static_cast<int>(coords.rows()); }
  [[nodiscard]] Pose3D root_centered() const {
    Pose3D out = *this;
    if (coords.rows() > 0) out.coords.rowwise() -= coords.row(0);
    return out;
  }
};

struct MetricReport {
  double mpjpe = 0.0;
  double pa_mpjpe = 0.0;
  double pck = 0.0;
  double auc = 0.0;
  std::vector<double> per_joint_error;
  int sample_count = 0;
  int degenerate_alignments = 0;
};

// ---------------------------------------------------------------- normalization

/// Affine map of [0, width] x [0, height] onto [-1, 1]^2. Off-image
/// coordinates are clamped; `clamped` (if given) counts clamped coordinates.
inline Pose2D normalize_pose_2d(const Pose2D& pose, int width, int height, int* clamped = nullptr) {
  if (pose.normalized) throw ContractViolation("normalize_pose_2d: pose is already normalized");
  if (width <= 0 || height <= 0) throw ContractViolation("normalize_pose_2d: image size must be positive");
  Pose2D out;
  out.coords.resize(pose.coords.rows(), 2);
  out.normalized = true;
  for (Eigen::Index j = 0; j < pose.coords.rows(); ++j) {
    const double u = 2.0 * pose.coords(j, 0) / width - 1.0;
    const double v = 2.0 * pose.coords(j, 1) / height - 1.0;
    const double cu = std::clamp(u, -1.0, 1.0);
    const double cv = std::clamp(v, -1.0, 1.0);
    if (clamped) *clamped += (cu != u) + (cv != v);
    out.coords(j, 0) = cu;
    out.coords(j, 1) = cv;
  }
  return out;
}

// ---------------------------------------------------------------- 3D metrics

namespace detail {

inline void require_same_joints(int a, int b, const char* op) {
  if (a != b) throw ContractViolation(std::string(op) + ": joint count mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}

inline std::vector<double> joint_errors(const Coords3& pred, const Coords3& gt) {
  std::vector<double> e(static_cast<std::size_t>(pred.rows()));
  for (Eigen::Index j = 0; j < pred.rows(); ++j) e[static_cast<std::size_t>(j)] = (pred.row(j) - gt.row(j)).norm();
  return e;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

/// Per-joint Euclidean errors. Both poses are expected root-relative; the
/// accumulator root-centers before calling this.
inline std::vector<double> per_joint_error(const Pose3D& pred, const Pose3D& gt) {
  detail::require_same_joints(pred.joints(), gt.joints(), "per_joint_error");
  return detail::joint_errors(pred.coords, gt.coords);
}

inline double mpjpe(const Pose3D& pred, const Pose3D& gt) { return detail::mean(per_joint_error(pred, gt)); }

struct AlignmentResult {
  double error = 0.0;
  bool degenerate = false;  // translation-only fallback was used
  Coords3 aligned;
};

/// Mean joint error after the least-squares similarity alignment
/// (rotation, isotropic scale, translation) of pred onto gt.
inline AlignmentResult procrustes_align(const Pose3D& pred, const Pose3D& gt) {
  detail::require_same_joints(pred.joints(), gt.joints(), "pa_mpjpe");
  const Eigen::RowVector3d mu_p = pred.coords.colwise().mean();
  const Eigen::RowVector3d mu_g = gt.coords.colwise().mean();
  const Coords3 xp = pred.coords.rowwise() - mu_p;
  const Coords3 xg = gt.coords.rowwise() - mu_g;

  AlignmentResult res;
  const Eigen::JacobiSVD<Eigen::MatrixXd> gsvd(xg);
  const auto gs = gsvd.singularValues();
  const double norm_p = xp.squaredNorm();
  const bool collinear = gs.size() < 2 || gs(1) <= 1e-9 * std::max(gs(0), 1e-300);
  if (collinear || pred.joints() < 3 || norm_p <= 0.0) {
    res.degenerate = true;
    res.aligned = xp.rowwise() + mu_g;
  } else {
    const Eigen::Matrix3d h = xp.transpose() * xg;
    const Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d v = svd.matrixV();
    Eigen::Vector3d s = svd.singularValues();
    const Eigen::Matrix3d& u = svd.matrixU();
    if ((v * u.transpose()).determinant() < 0.0) {
      v.col(2) *= -1.0;
      s(2) *= -1.0;
    }
    const Eigen::Matrix3d r = v * u.transpose();  // maps pred frame onto gt frame
    const double scale = s.sum() / norm_p;
    res.aligned = (scale * (xp * r.transpose())).rowwise() + mu_g;
  }
  res.error = detail::mean(detail::joint_errors(res.aligned, gt.coords));
  return res;
}

inline double pa_mpjpe(const Pose3D& pred, const Pose3D& gt) { return procrustes_align(pred, gt).error; }

struct PckAuc {
  double pck = 0.0;
  double auc = 0.0;
};

/// PCK: percentage of joints with error strictly below `threshold`. AUC: mean
/// PCK over `steps` thresholds spaced uniformly on [0, threshold].
inline PckAuc pck_auc_from_errors(const std::vector<double>& errors, double threshold, int steps = 31) {
  if (!(threshold > 0.0)) throw ContractViolation("pck threshold must be > 0");
  auto pck_at = [&](double t) {
    if (errors.empty()) return 0.0;
    std::size_t n = 0;
    for (double e : errors) n += e < t;
    return 100.0 * static_cast<double>(n) / static_cast<double>(errors.size());
  };
  PckAuc r;
  r.pck = pck_at(threshold);
  double s = 0.0;
  for (int i = 0; i < steps; ++i) s += pck_at(threshold * i / (steps - 1));
  r.auc = s / steps;
  return r;
}

inline PckAuc pck_auc(const Pose3D& pred, const Pose3D& gt, double threshold, int steps = 31) {
  return pck_auc_from_errors(per_joint_error(pred, gt), threshold, steps);
}

// ---------------------------------------------------------------- 2D subset protocol

enum class ChallengeMode { mean, max };

/// True iff the mean (or max) per-joint 2D error exceeds `threshold`.
inline bool select_challenging(const Pose2D& pred2d, const Pose2D& gt2d, double threshold = 5.0,
                               ChallengeMode mode = ChallengeMode::mean) {
  detail::require_same_joints(pred2d.joints(), gt2d.joints(), "select_challenging");
  double agg = 0.0;
  for (Eigen::Index j = 0; j < pred2d.coords.rows(); ++j) {
    const double e = (pred2d.coords.row(j) - gt2d.coords.row(j)).norm();
    agg = mode == ChallengeMode::mean ? agg + e : std::max(agg, e);
  }
  if (mode == ChallengeMode::mean && pred2d.joints() > 0) agg /= pred2d.joints();
  return agg > threshold;
}

/// Distance between the mean positions of two point sets.
inline double centroid_distance(const Coords3& a, const Coords3& b) {
  if (a.rows() == 0 || b.rows() == 0) throw ContractViolation("centroid_distance: empty set");
  return (a.colwise().mean() - b.colwise().mean()).norm();
}

// ---------------------------------------------------------------- aggregation

/// Sequential, fixed-order accumulation of per-sample metrics.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(double pck_threshold) : threshold_(pck_threshold) {}

  /// Root-centers both poses, then accumulates.
  void add(const Pose3D& pred_raw, const Pose3D& gt_raw) {
    const Pose3D pred = pred_raw.root_centered(), gt = gt_raw.root_centered();
    const auto errors = per_joint_error(pred, gt);
    if (joint_sum_.empty()) joint_sum_.assign(errors.size(), 0.0);
    detail::require_same_joints(static_cast<int>(joint_sum_.size()), static_cast<int>(errors.size()), "MetricAccumulator");
    const auto pa = procrustes_align(pred, gt);
    const auto pk = pck_auc_from_errors(errors, threshold_);
    mpjpe_sum_ += detail::mean(errors);
    pa_sum_ += pa.error;
    pck_sum_ += pk.pck;
    auc_sum_ += pk.auc;
    for (std::size_t j = 0; j < errors.size(); ++j) joint_sum_[j] += errors[j];
    degenerate_ += pa.degenerate;
    ++n_;
  }

  [[nodiscard]] int count() const { return n_; }

  /// Empty accumulators have no report.
  [[nodiscard]] std::optional<MetricReport> report() const {
    if (n_ == 0) return std::nullopt;
    MetricReport r;
    r.mpjpe = mpjpe_sum_ / n_;
    r.pa_mpjpe = pa_sum_ / n_;
    r.pck = pck_sum_ / n_;
    r.auc = auc_sum_ / n_;
    r.per_joint_error = joint_sum_;
    for (double& e : r.per_joint_error) e /= n_;
    r.sample_count = n_;
    r.degenerate_alignments = degenerate_;
    return r;
  }

 private:
  double threshold_;
  double mpjpe_sum_ = 0.0, pa_sum_ = 0.0, pck_sum_ = 0.0, auc_sum_ = 0.0;
  std::vector<double> joint_sum_;
  int n_ = 0;
  int degenerate_ = 0;
};

// ---------------------------------------------------------------- serialization

/// Shortest-round-trip-safe fixed format used by every CSV the tools write.
inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json to_json(const MetricReport& r) {
  return {{"mpjpe", r.mpjpe},
          {"pa_mpjpe", r.pa_mpjpe},
          {"pck", r.pck},
          {"auc", r.auc},
          {"per_joint_error", r.per_joint_error},
          {"n", r.sample_count},
          {"degenerate_alignments", r.degenerate_alignments}};
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.mpjpe = j.at("mpjpe").get<double>();
  r.pa_mpjpe = j.at("pa_mpjpe").get<double>();
  r.pck = j.at("pck").get<double>();
  r.auc = j.at("auc").get<double>();
  r.per_joint_error = j.value("per_joint_error", std::vector<double>{});
  r.sample_count = j.at("n").get<int>();
  r.degenerate_alignments = j.value("degenerate_alignments", 0);
  return r;
}

inline const char* kMetricCsvHeader = "mpjpe,pa_mpjpe,pck,auc,n";

inline std::string to_csv_row(const MetricReport& r) {
  return format_real(r.mpjpe) + "," + format_real(r.pa_mpjpe) + "," + format_real(r.pck) + "," + format_real(r.auc) + "," +
         std::to_string(r.sample_count);
}

template <typename Coords>
nlohmann::json coords_to_json(const Coords& c) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index k = 0; k < c.cols(); ++k) row.push_back(c(i, k));
    out.push_back(std::move(row));
  }
  return out;
}

template <typename Coords>
Coords coords_from_json(const nlohmann::json& j) {
  Coords c(static_cast<Eigen::Index>(j.size()), Coords::ColsAtCompileTime);
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (j[i].size() != static_cast<std::size_t>(Coords::ColsAtCompileTime)) throw ContractViolation("pose row has wrong arity");
    for (Eigen::Index k = 0; k < c.cols(); ++k) c(static_cast<Eigen::Index>(i), k) = j[i][static_cast<std::size_t>(k)].get<double>();
  }
  return c;
}

/// One record of the pose file: {"gt3d", "gt2d", "pred2d"} (2D in pixels).
struct PoseRecord {
  Pose3D gt3d;
  Pose2D gt2d;
  Pose2D pred2d;
};

inline nlohmann::json to_json(const PoseRecord& r) {
  return {{"gt3d", coords_to_json(r.gt3d.coords)}, {"gt2d", coords_to_json(r.gt2d.coords)}, {"pred2d", coords_to_json(r.pred2d.coords)}};
}

inline PoseRecord pose_record_from_json(const nlohmann::json& j) {
  PoseRecord r;
  r.gt3d.coords = coords_from_json<Coords3>(j.at("gt3d"));
  r.gt2d.coords = coords_from_json<Coords2>(j.at("gt2d"));
  r.pred2d.coords = coords_from_json<Coords2>(j.at("pred2d"));
  if (r.gt2d.joints() != r.gt3d.joints() || r.pred2d.joints() != r.gt3d.joints())
    throw ContractViolation("pose record joint counts differ");
  return r;
}

}  // namespace alft
