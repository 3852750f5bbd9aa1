#pragma once

// Ablation experiments on the synthetic gym: presets, variant suites, and
// checkpoint caching shared by the command-line tool and the acceptance run.

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "alft/synthgym.hpp"

namespace alft {

/// Everything that determines a trained model and its test numbers.
struct ExperimentPreset {
  SynthConfig train_set;
  SynthConfig val_set;
  SynthConfig test_set;
  ModelConfig model;
  TrainConfig training;
  std::uint64_t model_seed = 7;
};

/// Desk-scale dimensions: narrower than the ModelConfig defaults, same structure.
inline ModelConfig desk_model() {
  ModelConfig m;
  m.anchors.local_per_joint = 4;
  m.anchors.grid_x = 8;
  m.anchors.grid_y = 8;
  m.depth.width = 16;
  m.sampler.token_dim = 32;
  m.decoder.model_dim = 32;
  m.decoder.layers = 2;
  m.sync();
  return m;
}

inline ExperimentPreset desk_preset(std::uint64_t seed = 1) {
  ExperimentPreset p;
  p.train_set.seed = seed;
  p.train_set.sample_count = 2000;
  p.val_set = p.train_set;
  p.val_set.seed = seed + 1000;
  p.val_set.sample_count = 200;
  p.test_set = p.train_set;
  p.test_set.seed = seed + 2000;
  p.test_set.sample_count = 500;
  p.model = desk_model();
  p.training.seed = seed;
  p.training.validation_samples = 100;
  return p;
}

/// The budget the acceptance run can afford: nine variants in about 90 minutes
/// on one core.
inline ExperimentPreset acceptance_preset() {
  ExperimentPreset p = desk_preset(1);
  p.train_set.sample_count = 1000;
  p.training.epochs = 16;
  p.training.batch_size = 16;
  return p;
}

inline nlohmann::json to_json(const ExperimentPreset& p) {
  return {{"train_set", to_json(p.train_set)}, {"val_set", to_json(p.val_set)}, {"test_set", to_json(p.test_set)},
          {"model", to_json(p.model)},         {"training", to_json(p.training)}, {"model_seed", p.model_seed}};
}

inline void merge_json(ExperimentPreset& p, const nlohmann::json& j) {
  if (j.contains("train_set")) merge_json(p.train_set, j.at("train_set"));
  if (j.contains("val_set")) merge_json(p.val_set, j.at("val_set"));
  if (j.contains("test_set")) merge_json(p.test_set, j.at("test_set"));
  if (j.contains("model")) merge_json(p.model, j.at("model"));
  if (j.contains("training")) merge_json(p.training, j.at("training"));
  if (j.contains("model_seed")) p.model_seed = j.at("model_seed").get<std::uint64_t>();
}

/// One row of an ablation table: a label and the model configuration it trains.
struct SuiteEntry {
  std::string label;
  ModelConfig model;
};

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"anchors", "depth", "sampling", "bins"};
  return names;
}

inline std::vector<SuiteEntry> suite_entries(const std::string& suite, const ModelConfig& base) {
  auto v = [&](Variant x) { return SuiteEntry{to_string(x), apply_variant(base, x)}; };
  if (suite == "anchors") return {v(Variant::full), v(Variant::local_only), v(Variant::global_only), v(Variant::no_anchor)};
  if (suite == "depth") return {v(Variant::joint_depth), v(Variant::single_depth), v(Variant::no_depth), v(Variant::depth_regression)};
  if (suite == "sampling") return {v(Variant::pose_prior_sampling), v(Variant::full_map_sampling), v(Variant::random_sampling)};
  if (suite == "bins") {
    std::vector<SuiteEntry> out;
    for (int k : {16, 64, 128}) {
      ModelConfig m = base;
      m.depth.binning.k_bins = k;
      out.push_back({"bins" + std::to_string(k), m});
    }
    out.push_back(v(Variant::depth_regression));
    return out;
  }
  throw ContractViolation("unknown suite '" + suite + "' (expected anchors, depth, sampling or bins)");
}

/// A trained entry: checkpoint, curve, and how long training took when it ran.
struct TrainedModel {
  std::string label;
  std::filesystem::path checkpoint;
  Model model;
  std::vector<EpochStats> curve;
  double train_seconds = 0.0;
  bool from_cache = false;
};

/// Datasets of a preset, generated once per process.
struct PresetData {
  Dataset train, val, test;

  explicit PresetData(const ExperimentPreset& p)
      : train(generate_dataset(p.train_set)), val(generate_dataset(p.val_set)), test(generate_dataset(p.test_set)) {}
  PresetData(Dataset tr, Dataset va, Dataset te) : train(std::move(tr)), val(std::move(va)), test(std::move(te)) {}
};

namespace detail {

inline nlohmann::json cache_key(const ExperimentPreset& p, const ModelConfig& m) {
  return {{"train_set", to_json(p.train_set)},
          {"val_set", to_json(p.val_set)},
          {"training", to_json(p.training)},
          {"model_seed", p.model_seed},
          {"model", to_json(m)}};
}

inline nlohmann::json curve_json(const std::vector<EpochStats>& c) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& e : c) a.push_back({e.epoch, e.train_loss, e.train_mpjpe, e.val_mpjpe});
  return a;
}

inline std::vector<EpochStats> curve_from_json(const nlohmann::json& a) {
  std::vector<EpochStats> c;
  for (const auto& e : a) c.push_back({e[0].get<int>(), e[1].get<double>(), e[2].get<double>(), e[3].get<double>()});
  return c;
}

}  // namespace detail

/// Loads `dir/label.ckpt` when it was trained under the same preset and model
/// configuration; trains and writes it otherwise.
inline TrainedModel train_or_load(const ExperimentPreset& p, const PresetData& data, const SuiteEntry& e,
                                  const std::filesystem::path& dir, const EpochCallback& on_epoch = {}) {
  const std::filesystem::path ckpt = dir / (e.label + ".ckpt");
  const nlohmann::json key = detail::cache_key(p, e.model);
  if (std::filesystem::exists(ckpt)) {
    try {
      const io::Container c = io::read_container(ckpt);
      if (c.meta.contains("cache_key") && c.meta.at("cache_key") == key) {
        TrainedModel t{e.label, ckpt, Model::load(ckpt), detail::curve_from_json(c.meta.at("curve")),
                       c.meta.at("train_seconds").get<double>(), true};
        return t;
      }
    } catch (const io::FormatError&) {
      // Unreadable cache entries are simply retrained.
    }
  }
  Model m(e.model, p.model_seed);
  const TrainResult r = train(m, data.train, data.val, p.training, on_epoch);
  std::filesystem::create_directories(dir);
  m.save(ckpt, {{"cache_key", key}, {"curve", detail::curve_json(r.curve)}, {"train_seconds", r.seconds},
                {"initial_loss", r.initial_loss}});
  return {e.label, ckpt, std::move(m), r.curve, r.seconds, false};
}

inline const std::vector<double>& default_noise_sigmas() {
  static const std::vector<double> s = {0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
  return s;
}

/// CSV row header for ablation tables.
inline const char* kAblationCsvHeader =
    "variant,mpjpe,pa_mpjpe,pck,auc,challenging_mpjpe,occluded_mpjpe,mean_tokens,train_seconds";

inline std::string ablation_csv_row(const std::string& label, const EvalReport& r, double train_seconds) {
  auto m = [](const std::optional<MetricReport>& x) { return x ? format_real(x->mpjpe) : std::string(); };
  return label + "," + m(r.full) + "," + (r.full ? format_real(r.full->pa_mpjpe) : "") + "," +
         (r.full ? format_real(r.full->pck) : "") + "," + (r.full ? format_real(r.full->auc) : "") + "," + m(r.challenging) + "," +
         m(r.occluded) + "," + format_real(r.mean_tokens) + "," + format_real(train_seconds) + "\n";
}

}  // namespace alft
