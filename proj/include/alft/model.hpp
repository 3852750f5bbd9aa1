#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "alft/anchors.hpp"
#include "alft/decoder.hpp"
#include "alft/depthfield.hpp"
#include "alft/diffcore/container.hpp"
#include "alft/ensemble.hpp"
#include "alft/sampler.hpp"
#include "alft/skeleton.hpp"
#include "json.hpp"

namespace alft {

enum class Variant {
  full,
  local_only,
  global_only,
  no_anchor,
  single_depth,
  joint_depth,
  no_depth,
  depth_regression,
  pose_prior_sampling,
  full_map_sampling,
  random_sampling,
};

NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::full, "full"},
                                       {Variant::local_only, "local_only"},
                                       {Variant::global_only, "global_only"},
                                       {Variant::no_anchor, "no_anchor"},
                                       {Variant::single_depth, "single_depth"},
                                       {Variant::joint_depth, "joint_depth"},
                                       {Variant::no_depth, "no_depth"},
                                       {Variant::depth_regression, "depth_regression"},
                                       {Variant::pose_prior_sampling, "pose_prior_sampling"},
                                       {Variant::full_map_sampling, "full_map_sampling"},
                                       {Variant::random_sampling, "random_sampling"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DepthMode, {{DepthMode::joint_wise, "joint_wise"}, {DepthMode::single, "single"}, {DepthMode::none, "none"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DepthHead, {{DepthHead::classification, "classification"}, {DepthHead::regression, "regression"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DistMode, {{DistMode::ordinal, "ordinal"}, {DistMode::softmax, "softmax"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SamplingMode,
                             {{SamplingMode::pose_prior, "pose_prior"}, {SamplingMode::full_map, "full_map"}, {SamplingMode::random, "random"}})

inline std::string to_string(Variant v) { return nlohmann::json(v).get<std::string>(); }

inline Variant parse_variant(const std::string& s) {
  const Variant v = nlohmann::json(s).get<Variant>();
  if (to_string(v) != s) throw ContractViolation("unknown variant: " + s);
  return v;
}

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {"full",       "local_only",       "global_only",         "no_anchor",
                                                 "single_depth", "joint_depth",    "no_depth",            "depth_regression",
                                                 "pose_prior_sampling", "full_map_sampling", "random_sampling"};
  return names;
}

/// Every architectural knob of the lifter.
struct ModelConfig {
  int joints = 17;
  int image_size = 64;
  std::vector<int> level_channels = {8, 8, 8};
  AnchorConfig anchors;
  DepthNetConfig depth;
  SamplerConfig sampler;
  DecoderConfig decoder;
  LossConfig loss;
  bool direct_head = false;  // pooled-query regression instead of the anchor ensemble
  int depth_window = 0;      // r at depth-map resolution; 0 means max(1, H_d / 8)

  void sync() {
    depth.joints = joints;
    depth.in_channels = level_channels.back();
    depth.embed_dim = decoder.model_dim;
    decoder.depth_attention = depth.mode != DepthMode::none;
  }
  void validate() const {
    anchors.validate();
    decoder.validate();
    depth.binning.validate();
    loss.validate();
    if (joints < 1) throw ContractViolation("model: joints must be >= 1");
    if (image_size % 8 != 0) throw ContractViolation("model: image size must be divisible by 8");
    if (level_channels.size() != 3) throw ContractViolation("model: three pyramid levels expected");
  }
  [[nodiscard]] int depth_resolution() const { return image_size / 8; }
};

/// Adjusts a configuration to one ablation variant.
inline ModelConfig apply_variant(ModelConfig cfg, Variant v) {
  switch (v) {
    case Variant::full:
    case Variant::joint_depth:
    case Variant::pose_prior_sampling: break;
    case Variant::local_only: cfg.anchors.use_global = false; break;
    case Variant::global_only: cfg.anchors.use_local = false; break;
    case Variant::no_anchor: cfg.direct_head = true; break;
    case Variant::single_depth: cfg.depth.mode = DepthMode::single; break;
    case Variant::no_depth: cfg.depth.mode = DepthMode::none; break;
    case Variant::depth_regression: cfg.depth.head = DepthHead::regression; break;
    case Variant::full_map_sampling: cfg.sampler.mode = SamplingMode::full_map; break;
    case Variant::random_sampling: cfg.sampler.mode = SamplingMode::random; break;
  }
  cfg.sync();
  return cfg;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"joints", c.joints},
          {"image_size", c.image_size},
          {"level_channels", c.level_channels},
          {"anchors",
           {{"local_per_joint", c.anchors.local_per_joint},
            {"grid_x", c.anchors.grid_x},
            {"grid_y", c.anchors.grid_y},
            {"global_depth", c.anchors.global_depth},
            {"use_global", c.anchors.use_global},
            {"use_local", c.anchors.use_local},
            {"init_bias_spread", c.anchors.init_bias_spread}}},
          {"depth",
           {{"width", c.depth.width},
            {"pe_freqs", c.depth.pe_freqs},
            {"d_min", c.depth.binning.d_min},
            {"d_max", c.depth.binning.d_max},
            {"k_bins", c.depth.binning.k_bins},
            {"mode", c.depth.mode},
            {"head", c.depth.head},
            {"dist", c.depth.dist}}},
          {"sampler", {{"token_dim", c.sampler.token_dim}, {"mode", c.sampler.mode}, {"radius", c.sampler.radius}}},
          {"decoder",
           {{"layers", c.decoder.layers},
            {"heads", c.decoder.heads},
            {"model_dim", c.decoder.model_dim},
            {"sample_points", c.decoder.sample_points},
            {"ffn_mult", c.decoder.ffn_mult},
            {"pe_freqs", c.decoder.pe_freqs},
            {"shared_offsets", c.decoder.shared_offsets}}},
          {"loss", {{"lambda_pose", c.loss.lambda_pose}, {"lambda_depth", c.loss.lambda_depth}}},
          {"direct_head", c.direct_head},
          {"depth_window", c.depth_window}};
}

/// Overlays the keys present in `j` onto `c`; absent keys keep their values.
inline void merge_json(ModelConfig& c, const nlohmann::json& j) {
  auto take = [](const nlohmann::json& o, const char* key, auto& field) {
    if (o.contains(key)) field = o.at(key).get<std::decay_t<decltype(field)>>();
  };
  take(j, "joints", c.joints);
  take(j, "image_size", c.image_size);
  take(j, "level_channels", c.level_channels);
  take(j, "direct_head", c.direct_head);
  take(j, "depth_window", c.depth_window);
  if (j.contains("anchors")) {
    const auto& a = j.at("anchors");
    take(a, "local_per_joint", c.anchors.local_per_joint);
    take(a, "grid_x", c.anchors.grid_x);
    take(a, "grid_y", c.anchors.grid_y);
    take(a, "global_depth", c.anchors.global_depth);
    take(a, "use_global", c.anchors.use_global);
    take(a, "use_local", c.anchors.use_local);
    take(a, "init_bias_spread", c.anchors.init_bias_spread);
  }
  if (j.contains("depth")) {
    const auto& d = j.at("depth");
    take(d, "width", c.depth.width);
    take(d, "pe_freqs", c.depth.pe_freqs);
    take(d, "d_min", c.depth.binning.d_min);
    take(d, "d_max", c.depth.binning.d_max);
    take(d, "k_bins", c.depth.binning.k_bins);
    take(d, "mode", c.depth.mode);
    take(d, "head", c.depth.head);
    take(d, "dist", c.depth.dist);
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    take(s, "token_dim", c.sampler.token_dim);
    take(s, "mode", c.sampler.mode);
    take(s, "radius", c.sampler.radius);
  }
  if (j.contains("decoder")) {
    const auto& d = j.at("decoder");
    take(d, "layers", c.decoder.layers);
    take(d, "heads", c.decoder.heads);
    take(d, "model_dim", c.decoder.model_dim);
    take(d, "sample_points", c.decoder.sample_points);
    take(d, "ffn_mult", c.decoder.ffn_mult);
    take(d, "pe_freqs", c.decoder.pe_freqs);
    take(d, "shared_offsets", c.decoder.shared_offsets);
  }
  if (j.contains("loss")) {
    take(j.at("loss"), "lambda_pose", c.loss.lambda_pose);
    take(j.at("loss"), "lambda_depth", c.loss.lambda_depth);
  }
  c.sync();
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  merge_json(c, j);
  return c;
}

/// One sample as the model sees it.
struct ModelInput {
  const FeaturePyramid* pyramid = nullptr;
  Coords2 pose2d;  // normalized input 2D pose (possibly noisy)
};

/// Supervision for one sample.
struct ModelTarget {
  Pose3D gt3d;
  Coords2 gt2d;  // normalized exact projection
};

struct ForwardResult {
  ad::Var anchors;     // A x 3
  ad::Var pose;        // N_J x 3, root-relative
  ad::Var weights;     // A x N_J, absent for the direct head
  ad::Var pose_loss;   // present when a target was given
  ad::Var depth_loss;  // present when a target was given and the depth branch exists
  ad::Var loss;
  int token_count = 0;
};

/// The full lifter: parameters plus the forward pass.
class Model {
 public:
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.sync();
    cfg_.validate();
    Rng rng = Rng::stream(seed, 1);
    const int J = cfg_.joints, C = cfg_.decoder.model_dim;
    if (cfg_.anchors.use_local) register_anchor_params(store_, J, cfg_.anchors, rng);
    if (cfg_.depth.mode != DepthMode::none) register_depth_params(store_, cfg_.depth, rng);
    register_sampler_params(store_, cfg_.level_channels, cfg_.sampler, rng);
    register_decoder_params(store_, cfg_.decoder, J * cfg_.anchors.local_per_joint, cfg_.sampler.token_dim, rng);
    if (cfg_.direct_head) {
      detail::add_linear(store_, "direct.fc1", C, C, rng);
      store_.add("direct.fc2.w", ad::Shape{C, 3 * J});
      store_.add("direct.fc2.b", ad::Shape{3 * J});
    } else {
      register_ensemble_params(store_, C, J, rng);
    }
    prov_rows_ = provenance_rows(anchor_tags(J, cfg_.anchors), cfg_.anchors.local_per_joint);
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  ad::ParameterStore& params() { return store_; }
  [[nodiscard]] const ad::ParameterStore& params() const { return store_; }

  /// Forward pass for one sample. `sampling_rng` is needed only for random token sampling.
  ForwardResult forward(ad::Graph& g, const ModelInput& in, const ModelTarget* target = nullptr, Rng* sampling_rng = nullptr,
                        AttentionTrace* trace = nullptr) {
    const FeaturePyramid& pyr = *in.pyramid;
    const int J = cfg_.joints;
    if (in.pose2d.rows() != J) throw ContractViolation("model input has the wrong joint count");
    ForwardResult r;
    ad::Var pose2d = g.constant(ad::Shape{J, 2}, std::vector<double>(in.pose2d.data(), in.pose2d.data() + in.pose2d.size()));
    r.anchors = build_anchor_positions(pose2d, store_, cfg_.anchors);

    const int Hd = pyr.height(pyr.size() - 1), Wd = pyr.width(pyr.size() - 1);
    std::optional<DepthOutput> depth;
    ad::Var rows_source, embedding;
    int maps = 1;
    if (cfg_.depth.mode != DepthMode::none) {
      depth = predict_depth(g.constant(pyr.levels.back()), store_, cfg_.depth);
      maps = depth->maps;
      embedding = depth->embedding;
      rows_source = cfg_.depth.head == DepthHead::regression ? depth->logits : depth_distribution(*depth, cfg_.depth);
    }
    TokenSelection sel = select_tokens(pyr, in.pose2d, cfg_.sampler, sampling_rng);
    const DepthRowSource src{cfg_.depth.mode, cfg_.depth.head, cfg_.depth.binning};
    const TokenSet ts = sample_tokens(g, store_, pyr, std::move(sel), rows_source, Hd, Wd, maps, src);
    r.token_count = ts.token_count();

    const LiftSource lift{ts.features, ts.depth_dist, ts.layout};
    ad::Var q = decode(r.anchors, prov_rows_, embedding, lift, store_, cfg_.decoder, trace);

    if (cfg_.direct_head) {
      ad::Var pooled = ad::mean_rows(q);
      ad::Var h = ad::gelu(detail::apply_linear(g, store_, "direct.fc1", pooled));
      r.pose = ad::center_on_first_row(ad::reshape(detail::apply_linear(g, store_, "direct.fc2", h), ad::Shape{J, 3}));
    } else {
      auto [offsets, logits] = predict_offsets_weights(q, store_);
      PosePrediction p = anchor_to_joint(r.anchors, offsets, logits);
      r.pose = p.pose;
      r.weights = p.weights;
    }

    if (target) {
      r.pose_loss = pose_loss(r.pose, target->gt3d);
      if (depth) {
        const int rad = cfg_.depth_window > 0 ? cfg_.depth_window : default_depth_window(Hd);
        r.depth_loss = alft::depth_loss(*depth, target->gt3d.root_centered().coords, target->gt2d, cfg_.depth.binning, rad);
      }
      r.loss = total_loss(r.pose_loss, r.depth_loss, cfg_.loss);
    }
    return r;
  }

  /// Value-level prediction.
  Pose3D predict(const ModelInput& in, Rng* sampling_rng = nullptr) {
    ad::Graph g;
    return to_pose(forward(g, in, nullptr, sampling_rng).pose);
  }

  void save(const std::filesystem::path& path, nlohmann::json extra = nlohmann::json::object()) const {
    extra["model"] = to_json(cfg_);
    io::write_container(path, io::to_container(store_, std::move(extra)));
  }

  static Model load(const std::filesystem::path& path) {
    const io::Container c = io::read_container(path);
    Model m(model_config_from_json(c.meta.at("model")));
    io::restore(m.store_, c);
    return m;
  }

 private:
  ModelConfig cfg_;
  ad::ParameterStore store_;
  std::vector<int> prov_rows_;
};

}  // namespace alft
