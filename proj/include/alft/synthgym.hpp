#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "alft/diffcore/container.hpp"
#include "alft/diffcore/optimizer.hpp"
#include "alft/model.hpp"
#include "alft/skeleton.hpp"
#include "json.hpp"

namespace alft {

struct CameraConfig {
  double focal = 160.0;    // pixels
  double distance = 5.0;   // root-to-camera distance along Z
};

struct SynthConfig {
  std::uint64_t seed = 0;
  int sample_count = 2000;
  int image_size = 64;
  CameraConfig camera;
  double yaw_range = 3.14159;           // global rotation about the vertical axis
  double tilt_range = 0.3;              // global pitch and roll
  std::vector<double> angle_range;      // per joint, radians; empty means the built-in table
  double occlusion_rate = 1.0;          // per-sample rate drawn from U[0, occlusion_rate]
  double noise_sigma = 5.0;             // per-sample sigma drawn from U[0, noise_sigma], pixels
  double overlap_radius = 0.15;         // normalized distance at which a nearer joint occludes
  int channels = 8;
  std::uint64_t mixing_seed = 20240917;  // fixed joint-to-channel mixing

  void validate() const {
    if (occlusion_rate < 0.0 || occlusion_rate > 1.0) throw ContractViolation("occlusion_rate must be in [0, 1]");
    if (noise_sigma < 0.0) throw ContractViolation("noise_sigma must be >= 0");
    if (image_size < 8 || image_size % 8 != 0) throw ContractViolation("image size must be a positive multiple of 8");
    if (sample_count < 0) throw ContractViolation("sample_count must be >= 0");
    if (channels < 2) throw ContractViolation("need at least two feature channels");
  }
};

struct Sample {
  Pose3D gt3d;
  Pose2D gt2d;     // pixels, exact projection
  Pose2D input2d;  // pixels, gt2d plus noise
  FeaturePyramid pyramid;
  double occlusion_rate = 0.0;
  double noise_sigma = 0.0;
  bool challenging = false;

  [[nodiscard]] bool occluded() const { return occlusion_rate >= 0.8; }
};

struct Dataset {
  SynthConfig config;
  std::vector<Sample> samples;
  int rejected = 0;

  [[nodiscard]] int size() const { return static_cast<int>(samples.size()); }
};

// ---------------------------------------------------------------- skeleton

/// Rest-pose bone directions for the 17-joint tree (X right, Y down, Z away).
inline std::vector<Eigen::Vector3d> rest_directions17() {
  return {{0, 0, 0},   {-1, 0, 0}, {0, 1, 0},     {0, 1, 0},     {1, 0, 0},  {0, 1, 0},   {0, 1, 0},  {0, -1, 0}, {0, -1, 0},
          {0, -1, 0},  {0, -1, 0}, {1, 0, 0},     {0.3, 1, 0},   {0, 1, 0},  {-1, 0, 0},  {-0.3, 1, 0}, {0, 1, 0}};
}

inline std::vector<double> default_angle_ranges17() {
  // Torso joints bend little, limbs a lot.
  return {0.0, 0.2, 1.0, 1.0, 0.2, 1.0, 1.0, 0.25, 0.25, 0.3, 0.4, 0.3, 1.2, 1.2, 0.3, 1.2, 1.2};
}

namespace detail {

inline Eigen::Matrix3d euler(double a, double b, double c) {
  return (Eigen::AngleAxisd(a, Eigen::Vector3d::UnitY()) * Eigen::AngleAxisd(b, Eigen::Vector3d::UnitX()) *
          Eigen::AngleAxisd(c, Eigen::Vector3d::UnitZ()))
      .toRotationMatrix();
}

}  // namespace detail

/// Forward kinematics from the root: every joint's frame is its parent's frame
/// times a random local rotation; the bone follows the rotated rest direction.
inline Pose3D generate_skeleton(Rng& rng, const SkeletonTopology& topo, const SynthConfig& cfg) {
  topo.validate();
  const int J = topo.joint_count;
  std::vector<Eigen::Vector3d> rest = rest_directions17();
  if (J != 17) throw ContractViolation("generate_skeleton: rest pose is defined for the 17-joint tree");
  const std::vector<double> range = cfg.angle_range.empty() ? default_angle_ranges17() : cfg.angle_range;
  if (static_cast<int>(range.size()) != J) throw ContractViolation("angle_range needs one entry per joint");
  std::vector<Eigen::Matrix3d> frame(static_cast<std::size_t>(J));
  frame[0] = detail::euler(rng.uniform(-cfg.yaw_range, cfg.yaw_range), rng.uniform(-cfg.tilt_range, cfg.tilt_range),
                           rng.uniform(-cfg.tilt_range, cfg.tilt_range));
  Pose3D p;
  p.coords = Coords3::Zero(J, 3);
  for (int j = 1; j < J; ++j) {
    const auto u = static_cast<std::size_t>(j);
    const double r = range[u];
    const int parent = topo.parent_index[u];
    frame[u] = frame[static_cast<std::size_t>(parent)] * detail::euler(rng.uniform(-r, r), rng.uniform(-r, r), rng.uniform(-r, r));
    const Eigen::Vector3d dir = frame[u] * rest[u].normalized();
    p.coords.row(j) = p.coords.row(parent) + topo.bone_length[u] * dir.transpose();
  }
  return p;
}

/// Pinhole projection in pixels; the root sits `distance` in front of the camera
/// on the optical axis. Joints at or behind the camera plane throw.
inline Pose2D project(const Pose3D& pose, const CameraConfig& cam, int width, int height) {
  Pose2D out;
  out.coords.resize(pose.joints(), 2);
  for (int j = 0; j < pose.joints(); ++j) {
    const double z = pose.coords(j, 2) + cam.distance;
    if (!(z > 1e-6)) throw ContractViolation("project: joint " + std::to_string(j) + " is behind the camera");
    out.coords(j, 0) = cam.focal * pose.coords(j, 0) / z + 0.5 * width;
    out.coords(j, 1) = cam.focal * pose.coords(j, 1) / z + 0.5 * height;
  }
  return out;
}

/// i.i.d. Gaussian perturbation of every pixel coordinate.
inline Pose2D add_noise(const Pose2D& pose, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ContractViolation("add_noise: sigma must be >= 0");
  if (pose.normalized) throw ContractViolation("add_noise: expects pixel coordinates");
  Pose2D out = pose;
  if (sigma == 0.0) return out;
  for (Eigen::Index i = 0; i < out.coords.size(); ++i) out.coords.data()[i] += rng.normal(0.0, sigma);
  return out;
}

// ---------------------------------------------------------------- features

/// Fixed positive joint-to-channel mixing for the identity channels: channels x joints.
inline Eigen::MatrixXd joint_mixing(int channels, int joints, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(channels, joints);
  for (int c = 0; c < channels; ++c)
    for (int j = 0; j < joints; ++j) m(c, j) = rng.uniform(0.1, 1.0);
  return m;
}

/// Per-joint amplitudes after self-occlusion at fine levels: a joint farther
/// than some other joint within `overlap_radius` (normalized units) keeps 1 - rate.
inline std::vector<double> occlusion_gains(const Pose3D& gt3d, const Coords2& gt2d_norm, double rate, double overlap_radius) {
  const int J = gt3d.joints();
  std::vector<double> gain(static_cast<std::size_t>(J), 1.0);
  for (int j = 0; j < J; ++j)
    for (int i = 0; i < J; ++i) {
      if (i == j || !(gt3d.coords(i, 2) < gt3d.coords(j, 2))) continue;
      if ((gt2d_norm.row(i) - gt2d_norm.row(j)).norm() < overlap_radius) {
        gain[static_cast<std::size_t>(j)] = 1.0 - rate;
        break;
      }
    }
  return gain;
}

/// Gaussian-blob feature pyramid at H/2, H/4, H/8. Channels 0..C-2 mix joint
/// identities; channel C-1 carries each blob scaled by its depth mapped to [0, 1].
inline FeaturePyramid synthesize_features(const Pose3D& gt3d, const Pose2D& gt2d_px, double occlusion_rate, const SynthConfig& cfg,
                                          const DepthBinning& bins = {}) {
  const int J = gt3d.joints(), C = cfg.channels;
  const Eigen::MatrixXd mix = joint_mixing(C - 1, J, cfg.mixing_seed);
  const Pose2D norm = normalize_pose_2d(gt2d_px, cfg.image_size, cfg.image_size);
  const std::vector<double> occl = occlusion_gains(gt3d, norm.coords, occlusion_rate, cfg.overlap_radius);
  FeaturePyramid pyr;
  for (int l = 0; l < 3; ++l) {
    const int S = cfg.image_size >> (l + 1);
    const double sigma = std::max(0.6, 0.05 * S);
    const bool fine = l < 2;
    ad::Tensor t(ad::Shape{S, S, C});
    for (int j = 0; j < J; ++j) {
      const double gain = fine ? occl[static_cast<std::size_t>(j)] : 1.0;
      if (gain == 0.0) continue;
      const double cx = (norm.coords(j, 0) + 1.0) * 0.5 * S, cy = (norm.coords(j, 1) + 1.0) * 0.5 * S;
      const double d01 = std::clamp((gt3d.coords(j, 2) - gt3d.coords(0, 2) + bins.d_min) / (bins.d_min + bins.d_max), 0.0, 1.0);
      const int x0 = std::max(0, static_cast<int>(std::floor(cx - 4 * sigma))), x1 = std::min(S - 1, static_cast<int>(std::ceil(cx + 4 * sigma)));
      const int y0 = std::max(0, static_cast<int>(std::floor(cy - 4 * sigma))), y1 = std::min(S - 1, static_cast<int>(std::ceil(cy + 4 * sigma)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double b = gain * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          double* px = t.data.data() + (static_cast<std::size_t>(y) * S + x) * C;
          for (int c = 0; c < C - 1; ++c) px[c] += mix(c, j) * b;
          px[C - 1] += d01 * b;
        }
    }
    pyr.levels.push_back(std::move(t));
  }
  return pyr;
}

inline double pyramid_energy(const FeaturePyramid& p) {
  double e = 0.0;
  for (const auto& l : p.levels)
    for (double v : l.data) e += v * v;
  return e;
}

// ---------------------------------------------------------------- datasets

inline constexpr int kMaxRejections = 1000;

/// Sample i of a dataset uses its own generator stream, so samples are
/// independent of generation order.
inline Sample generate_sample(const SynthConfig& cfg, const SkeletonTopology& topo, std::uint64_t index, int* rejected = nullptr) {
  Rng rng = Rng::stream(cfg.seed, index);
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxRejections)
      throw ContractViolation("sample " + std::to_string(index) + " rejected " + std::to_string(kMaxRejections) +
                              " times; the camera does not fit skeletons in the image");
    Sample s;
    s.gt3d = generate_skeleton(rng, topo, cfg);
    s.occlusion_rate = rng.uniform(0.0, cfg.occlusion_rate);
    s.noise_sigma = rng.uniform(0.0, cfg.noise_sigma);
    bool ok = true;
    try {
      s.gt2d = project(s.gt3d, cfg.camera, cfg.image_size, cfg.image_size);
    } catch (const ContractViolation&) {
      ok = false;
    }
    const double margin = 0.5;
    for (Eigen::Index j = 0; ok && j < s.gt2d.coords.rows(); ++j)
      for (int c = 0; c < 2; ++c)
        if (s.gt2d.coords(j, c) < margin || s.gt2d.coords(j, c) > cfg.image_size - margin) ok = false;
    if (!ok) {
      if (rejected) ++*rejected;
      continue;
    }
    s.input2d = add_noise(s.gt2d, s.noise_sigma, rng);
    s.pyramid = synthesize_features(s.gt3d, s.gt2d, s.occlusion_rate, cfg);
    s.challenging = select_challenging(s.input2d, s.gt2d, 5.0);
    return s;
  }
}

inline Dataset generate_dataset(const SynthConfig& cfg, std::uint64_t first_index = 0) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  const SkeletonTopology topo = SkeletonTopology::human17();
  d.samples.reserve(static_cast<std::size_t>(cfg.sample_count));
  for (int i = 0; i < cfg.sample_count; ++i)
    d.samples.push_back(generate_sample(cfg, topo, first_index + static_cast<std::uint64_t>(i), &d.rejected));
  return d;
}

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"seed", c.seed},
          {"sample_count", c.sample_count},
          {"image_size", c.image_size},
          {"focal", c.camera.focal},
          {"distance", c.camera.distance},
          {"yaw_range", c.yaw_range},
          {"tilt_range", c.tilt_range},
          {"angle_range", c.angle_range},
          {"occlusion_rate", c.occlusion_rate},
          {"noise_sigma", c.noise_sigma},
          {"overlap_radius", c.overlap_radius},
          {"channels", c.channels},
          {"mixing_seed", c.mixing_seed}};
}

inline void merge_json(SynthConfig& c, const nlohmann::json& j) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  take("seed", c.seed);
  take("sample_count", c.sample_count);
  take("image_size", c.image_size);
  take("focal", c.camera.focal);
  take("distance", c.camera.distance);
  take("yaw_range", c.yaw_range);
  take("tilt_range", c.tilt_range);
  take("angle_range", c.angle_range);
  take("occlusion_rate", c.occlusion_rate);
  take("noise_sigma", c.noise_sigma);
  take("overlap_radius", c.overlap_radius);
  take("channels", c.channels);
  take("mixing_seed", c.mixing_seed);
}

/// `<stem>.json` (pose records and per-sample metadata) plus `<stem>.bin` (pyramids).
inline void save_dataset(const Dataset& d, const std::filesystem::path& stem) {
  nlohmann::json j;
  j["config"] = to_json(d.config);
  j["rejected"] = d.rejected;
  j["samples"] = nlohmann::json::array();
  io::Container c;
  c.meta = {{"kind", "pyramids"}, {"count", d.size()}};
  for (int i = 0; i < d.size(); ++i) {
    const Sample& s = d.samples[static_cast<std::size_t>(i)];
    nlohmann::json rec = to_json(PoseRecord{s.gt3d, s.gt2d, s.input2d});
    rec["occlusion_rate"] = s.occlusion_rate;
    rec["noise_sigma"] = s.noise_sigma;
    rec["challenging"] = s.challenging;
    j["samples"].push_back(std::move(rec));
    for (std::size_t l = 0; l < s.pyramid.levels.size(); ++l)
      c.arrays.push_back({"s" + std::to_string(i) + ".l" + std::to_string(l), s.pyramid.levels[l].shape, s.pyramid.levels[l].data});
  }
  std::filesystem::path js = stem, bin = stem;
  js += ".json";
  bin += ".bin";
  io::write_file(js, j.dump(1) + "\n");
  io::write_container(bin, c);
}

inline Dataset load_dataset(const std::filesystem::path& stem) {
  std::filesystem::path js = stem, bin = stem;
  js += ".json";
  bin += ".bin";
  const nlohmann::json j = nlohmann::json::parse(io::read_file(js));
  const io::Container c = io::read_container(bin);
  Dataset d;
  merge_json(d.config, j.at("config"));
  d.rejected = j.value("rejected", 0);
  for (std::size_t i = 0; i < j.at("samples").size(); ++i) {
    const auto& rec = j.at("samples")[i];
    const PoseRecord r = pose_record_from_json(rec);
    Sample s;
    s.gt3d = r.gt3d;
    s.gt2d = r.gt2d;
    s.input2d = r.pred2d;
    s.occlusion_rate = rec.at("occlusion_rate").get<double>();
    s.noise_sigma = rec.at("noise_sigma").get<double>();
    s.challenging = rec.at("challenging").get<bool>();
    for (int l = 0; l < 3; ++l) {
      const io::NamedArray* a = c.find("s" + std::to_string(i) + ".l" + std::to_string(l));
      if (!a) throw io::FormatError("dataset sidecar lacks the pyramid of sample " + std::to_string(i));
      s.pyramid.levels.emplace_back(a->shape, a->data);
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------- model I/O

inline ModelInput model_input(const Sample& s, int image_size) {
  return {&s.pyramid, normalize_pose_2d(s.input2d, image_size, image_size).coords};
}

inline ModelTarget model_target(const Sample& s, int image_size) {
  return {s.gt3d, normalize_pose_2d(s.gt2d, image_size, image_size).coords};
}

// ---------------------------------------------------------------- training

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double lr_decay = 0.95;
  double weight_decay = 1e-4;
  double grad_clip = 5.0;  // global L2 norm; 0 disables
  int validation_samples = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0 || batch_size < 1) throw ContractViolation("train: epochs >= 0 and batch_size >= 1 required");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},       {"batch_size", c.batch_size},     {"learning_rate", c.learning_rate},
          {"lr_decay", c.lr_decay},   {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip},
          {"validation_samples", c.validation_samples}, {"seed", c.seed}};
}

inline void merge_json(TrainConfig& c, const nlohmann::json& j) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  take("epochs", c.epochs);
  take("batch_size", c.batch_size);
  take("learning_rate", c.learning_rate);
  take("lr_decay", c.lr_decay);
  take("weight_decay", c.weight_decay);
  take("grad_clip", c.grad_clip);
  take("validation_samples", c.validation_samples);
  take("seed", c.seed);
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_mpjpe = 0.0;
  double val_mpjpe = 0.0;
};

struct TrainResult {
  double initial_loss = 0.0;
  std::vector<EpochStats> curve;
  double seconds = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const char* kCurveCsvHeader = "epoch,train_loss,train_mpjpe,val_mpjpe";

inline std::string curve_csv(const TrainResult& r) {
  std::string out = std::string(kCurveCsvHeader) + "\n";
  for (const auto& e : r.curve)
    out += std::to_string(e.epoch) + "," + format_real(e.train_loss) + "," + format_real(e.train_mpjpe) + "," +
           format_real(e.val_mpjpe) + "\n";
  return out;
}

/// Mean MPJPE of root-relative predictions over the first `n` samples.
inline double quick_mpjpe(Model& m, const Dataset& d, int n, std::uint64_t seed) {
  n = std::min(n, d.size());
  if (n <= 0) return 0.0;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const Sample& s = d.samples[static_cast<std::size_t>(i)];
    Rng rng = Rng::stream(seed ^ 0x5eedULL, static_cast<std::uint64_t>(i));
    sum += mpjpe(m.predict(model_input(s, d.config.image_size), &rng).root_centered(), s.gt3d.root_centered());
  }
  return sum / n;
}

inline double clip_gradients(ad::ParameterStore& s, double max_norm) {
  double n2 = 0.0;
  for (std::size_t i = 0; i < s.count(); ++i)
    for (double g : s[i].grad) n2 += g * g;
  const double n = std::sqrt(n2);
  if (max_norm > 0.0 && n > max_norm) {
    const double f = max_norm / n;
    for (std::size_t i = 0; i < s.count(); ++i)
      for (double& g : s[i].grad) g *= f;
  }
  return n;
}

using EpochCallback = std::function<void(const EpochStats&)>;

/// Mini-batch AdamW over per-sample graphs with accumulated gradients.
inline TrainResult train(Model& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ad::OptimizerConfig oc;
  oc.learning_rate = cfg.learning_rate;
  oc.decay = cfg.lr_decay;
  oc.weight_decay = cfg.weight_decay;
  oc.epochs = cfg.epochs;
  ad::AdamW opt(oc);
  TrainResult res;
  const int N = train_set.size(), S = train_set.config.image_size;
  auto sample_loss = [&](int i, std::uint64_t epoch, double scale, double* mp) {
    const Sample& s = train_set.samples[static_cast<std::size_t>(i)];
    Rng rng = Rng::stream(cfg.seed ^ (epoch << 32), static_cast<std::uint64_t>(i));
    ad::Graph g;
    const ModelTarget tgt = model_target(s, S);
    ForwardResult r = model.forward(g, model_input(s, S), &tgt, &rng);
    if (!std::isfinite(r.loss.item())) throw ad::NumericError("non-finite training loss at sample " + std::to_string(i));
    if (scale != 0.0) {
      g.backward(r.loss);
      g.flush_param_grads(scale);
    }
    if (mp) *mp = r.pose_loss.item();
    return r.loss.item();
  };
  {
    const int n = std::min(N, cfg.batch_size);
    double l = 0.0;
    for (int i = 0; i < n; ++i) l += sample_loss(i, 0, 0.0, nullptr);
    res.initial_loss = n ? l / n : 0.0;
  }
  int strikes = 0;
  std::vector<int> order(static_cast<std::size_t>(N));
  for (int e = 1; e <= cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = Rng::stream(cfg.seed, 0xE0000ULL + static_cast<std::uint64_t>(e));
    for (int i = N - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[shuffle.below(static_cast<std::uint64_t>(i + 1))]);
    EpochStats st;
    st.epoch = e;
    for (int b = 0; b < N; b += cfg.batch_size) {
      const int n = std::min(cfg.batch_size, N - b);
      model.params().zero_grad();
      for (int k = 0; k < n; ++k) {
        double mp = 0.0;
        st.train_loss += sample_loss(order[static_cast<std::size_t>(b + k)], static_cast<std::uint64_t>(e), 1.0 / n, &mp);
        st.train_mpjpe += mp;
      }
      clip_gradients(model.params(), cfg.grad_clip);
      opt.step(model.params());
    }
    if (N > 0) {
      st.train_loss /= N;
      st.train_mpjpe /= N;
    }
    st.val_mpjpe = quick_mpjpe(model, val_set, cfg.validation_samples, cfg.seed);
    opt.end_epoch();
    res.curve.push_back(st);
    if (on_epoch) on_epoch(st);
    strikes = st.train_loss > 10.0 * res.initial_loss ? strikes + 1 : 0;
    if (strikes >= 3)
      throw DivergenceError("training diverged: epoch " + std::to_string(e) + " loss " + format_real(st.train_loss) +
                            " exceeds 10x the initial " + format_real(res.initial_loss) + " for 3 consecutive epochs");
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------- evaluation

struct EvalReport {
  std::optional<MetricReport> full, challenging, non_challenging, occluded;
  double informative_anchor_distance = 0.0;  // top-50 anchors to their joints, averaged
  double mean_tokens = 0.0;
};

inline constexpr double kPckThreshold = 0.15;

inline nlohmann::json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<MetricReport>& m) { return m ? to_json(*m) : nlohmann::json(nullptr); };
  return {{"full", opt(r.full)},
          {"challenging", opt(r.challenging)},
          {"non_challenging", opt(r.non_challenging)},
          {"occluded", opt(r.occluded)},
          {"informative_anchor_distance", r.informative_anchor_distance},
          {"mean_tokens", r.mean_tokens}};
}

/// Predictor interface used by evaluate(): returns a root-relative pose.
using Predictor = std::function<Pose3D(const Sample&, int index)>;

inline Predictor model_predictor(Model& m, int image_size, std::uint64_t seed = 0) {
  return [&m, image_size, seed](const Sample& s, int i) {
    Rng rng = Rng::stream(seed ^ 0x5eedULL, static_cast<std::uint64_t>(i));
    return m.predict(model_input(s, image_size), &rng);
  };
}

inline Predictor oracle_predictor() {
  return [](const Sample& s, int) { return s.gt3d.root_centered(); };
}

/// Metrics on the whole set and on the challenging / non-challenging /
/// high-occlusion subsets. Empty subsets are absent.
inline EvalReport evaluate(const Predictor& predict, const Dataset& d, int limit = -1) {
  MetricAccumulator full(kPckThreshold), ch(kPckThreshold), non(kPckThreshold), occ(kPckThreshold);
  const int n = limit < 0 ? d.size() : std::min(limit, d.size());
  for (int i = 0; i < n; ++i) {
    const Sample& s = d.samples[static_cast<std::size_t>(i)];
    const Pose3D pred = predict(s, i);
    full.add(pred, s.gt3d);
    (s.challenging ? ch : non).add(pred, s.gt3d);
    if (s.occluded()) occ.add(pred, s.gt3d);
  }
  EvalReport r;
  r.full = full.report();
  r.challenging = ch.report();
  r.non_challenging = non.report();
  r.occluded = occ.report();
  return r;
}

/// Model evaluation that also records token counts and the informative-anchor statistic.
inline EvalReport evaluate_model(Model& m, const Dataset& d, int limit = -1, std::uint64_t seed = 0) {
  const int S = d.config.image_size;
  double tokens = 0.0, informative = 0.0;
  int counted = 0, informative_n = 0;
  EvalReport r = evaluate(
      [&](const Sample& s, int i) {
        Rng rng = Rng::stream(seed ^ 0x5eedULL, static_cast<std::uint64_t>(i));
        ad::Graph g;
        ForwardResult fr = m.forward(g, model_input(s, S), nullptr, &rng);
        tokens += fr.token_count;
        ++counted;
        if (fr.weights.valid()) {
          informative += informative_anchor_distance(fr.anchors, fr.weights, s.gt3d);
          ++informative_n;
        }
        return to_pose(fr.pose);
      },
      d, limit);
  r.mean_tokens = counted ? tokens / counted : 0.0;
  r.informative_anchor_distance = informative_n ? informative / informative_n : 0.0;
  return r;
}

/// Copy of `d` whose input poses are re-drawn from the exact projection at a fixed sigma.
inline Dataset renoise(const Dataset& d, double sigma, std::uint64_t seed) {
  Dataset out = d;
  for (int i = 0; i < out.size(); ++i) {
    Sample& s = out.samples[static_cast<std::size_t>(i)];
    Rng rng = Rng::stream(seed ^ 0x9015eULL, static_cast<std::uint64_t>(i));
    s.noise_sigma = sigma;
    s.input2d = add_noise(s.gt2d, sigma, rng);
    s.challenging = select_challenging(s.input2d, s.gt2d, 5.0);
  }
  return out;
}

inline const char* kNoiseCsvHeader = "sigma,mpjpe,pa_mpjpe,pck,auc";

struct NoisePoint {
  double sigma = 0.0;
  MetricReport report;
};

inline std::vector<NoisePoint> sweep_noise(Model& m, const Dataset& d, const std::vector<double>& sigmas, int limit = -1,
                                           std::uint64_t seed = 0) {
  std::vector<NoisePoint> out;
  for (double s : sigmas) out.push_back({s, *evaluate_model(m, renoise(d, s, seed), limit, seed).full});
  return out;
}

inline std::string noise_csv(const std::vector<NoisePoint>& pts) {
  std::string out = std::string(kNoiseCsvHeader) + "\n";
  for (const auto& p : pts)
    out += format_real(p.sigma) + "," + format_real(p.report.mpjpe) + "," + format_real(p.report.pa_mpjpe) + "," +
           format_real(p.report.pck) + "," + format_real(p.report.auc) + "\n";
  return out;
}

/// Per-sample anchor stability under input noise: centroid shift of the local
/// anchors between clean and noised 2D input versus the centroid shift of the
/// noised joints themselves. Returns the fraction of samples where anchors move less.
struct StabilityResult {
  double fraction_stable = 0.0;
  double mean_anchor_shift = 0.0;
  double mean_joint_shift = 0.0;
  int samples = 0;
};

inline StabilityResult anchor_stability(Model& m, const Dataset& d, double sigma, std::uint64_t seed, int limit = -1) {
  const ModelConfig& cfg = m.config();
  if (!cfg.anchors.use_local) throw ContractViolation("anchor_stability: model has no local anchors");
  const int S = d.config.image_size;
  const int n = limit < 0 ? d.size() : std::min(limit, d.size());
  StabilityResult r;
  int stable = 0;
  AnchorConfig local = cfg.anchors;
  local.use_global = false;
  for (int i = 0; i < n; ++i) {
    const Sample& s = d.samples[static_cast<std::size_t>(i)];
    Rng rng = Rng::stream(seed ^ 0xC3A7ULL, static_cast<std::uint64_t>(i));
    Pose2D clean = normalize_pose_2d(s.gt2d, S, S);
    Pose2D noisy = normalize_pose_2d(add_noise(s.gt2d, sigma, rng), S, S);
    const Coords3 a = build_anchor_set(clean, m.params(), local).positions;
    const Coords3 b = build_anchor_set(noisy, m.params(), local).positions;
    Coords3 jc = Coords3::Zero(clean.joints(), 3), jn = Coords3::Zero(noisy.joints(), 3);
    jc.leftCols(2) = clean.coords;
    jn.leftCols(2) = noisy.coords;
    const double da = centroid_distance(a, b), dj = centroid_distance(jc, jn);
    r.mean_anchor_shift += da;
    r.mean_joint_shift += dj;
    stable += da < dj ? 1 : 0;
    ++r.samples;
  }
  if (r.samples) {
    r.fraction_stable = static_cast<double>(stable) / r.samples;
    r.mean_anchor_shift /= r.samples;
    r.mean_joint_shift /= r.samples;
  }
  return r;
}

}  // namespace alft
