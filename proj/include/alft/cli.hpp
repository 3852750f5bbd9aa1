#pragma once

// Command-line front end: gen, train, eval, sweep-noise, ablate, lift, report.
// Every command resolves its configuration (defaults < --config JSON < flags),
// writes a run manifest under --out, then does the work there.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "alft/experiment.hpp"

#ifndef ALFT_GIT_DESCRIBE
#define ALFT_GIT_DESCRIBE "unknown"
#endif

namespace alft::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string git_describe = ALFT_GIT_DESCRIBE;
  std::string started;
  std::string finished;  // empty while running
  std::vector<std::string> outputs;
};

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"command", m.command},          {"config", m.config},     {"seed", m.seed},      {"git_describe", m.git_describe},
          {"started", m.started},          {"finished", m.finished.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.finished)},
          {"outputs", m.outputs}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config");
  m.seed = j.at("seed").get<std::uint64_t>();
  m.git_describe = j.at("git_describe").get<std::string>();
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").is_null() ? "" : j.at("finished").get<std::string>();
  m.outputs = j.at("outputs").get<std::vector<std::string>>();
  return m;
}

/// Flags shared by every command; unset optionals leave the resolved config alone.
struct CommonOptions {
  std::string out = "alft_out";
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<int> n, n_val, n_test, epochs, batch_size, image_size;
  std::optional<double> lr, noise_sigma, occlusion_rate;
};

/// Seed: --seed, then ALFT_SEED, then the config file's "seed", then 1.
inline std::uint64_t resolve_seed(const CommonOptions& o, const nlohmann::json& file) {
  if (o.seed) return *o.seed;
  if (const char* env = std::getenv("ALFT_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw ContractViolation(std::string("ALFT_SEED is not an unsigned integer: '") + env + "'");
  }
  if (file.contains("seed")) return file.at("seed").get<std::uint64_t>();
  return 1;
}

inline ExperimentPreset resolve_preset(const CommonOptions& o, std::uint64_t* seed_out = nullptr) {
  nlohmann::json file = nlohmann::json::object();
  if (!o.config_file.empty()) file = nlohmann::json::parse(io::read_file(o.config_file));
  const std::uint64_t seed = resolve_seed(o, file);
  ExperimentPreset p = desk_preset(seed);
  merge_json(p, file);
  if (o.n) p.train_set.sample_count = *o.n;
  if (o.n_val) p.val_set.sample_count = *o.n_val;
  if (o.n_test) p.test_set.sample_count = *o.n_test;
  for (SynthConfig* s : {&p.train_set, &p.val_set, &p.test_set}) {
    if (o.image_size) {
      // Same field of view at the new resolution.
      s->camera.focal *= static_cast<double>(*o.image_size) / s->image_size;
      s->image_size = *o.image_size;
    }
    if (o.noise_sigma) s->noise_sigma = *o.noise_sigma;
    if (o.occlusion_rate) s->occlusion_rate = *o.occlusion_rate;
  }
  if (o.image_size) p.model.image_size = *o.image_size;
  if (o.epochs) p.training.epochs = *o.epochs;
  if (o.batch_size) p.training.batch_size = *o.batch_size;
  if (o.lr) p.training.learning_rate = *o.lr;
  p.train_set.validate();
  p.val_set.validate();
  p.test_set.validate();
  p.model.validate();
  p.training.validate();
  if (seed_out) *seed_out = seed;
  return p;
}

/// Writes the manifest when constructed and again, with the finish time and
/// outputs, when finish() is called.
class ManifestWriter {
 public:
  ManifestWriter(const fs::path& out, const std::string& command, const std::string& tag, nlohmann::json config, std::uint64_t seed)
      : path_(out / "manifests" / ((tag.empty() ? command : command + "_" + tag) + ".json")) {
    m_.command = command;
    m_.config = std::move(config);
    m_.seed = seed;
    m_.started = utc_now();
    fs::create_directories(path_.parent_path());
    write();
  }
  void output(const fs::path& p) { m_.outputs.push_back(p.generic_string()); }
  void finish() {
    m_.finished = utc_now();
    write();
  }
  [[nodiscard]] const fs::path& path() const { return path_; }

 private:
  void write() const { io::write_file(path_, to_json(m_).dump(2) + "\n"); }
  fs::path path_;
  RunManifest m_;
};

// ---------------------------------------------------------------- helpers

inline fs::path data_stem(const fs::path& out, const char* split) { return out / "data" / split; }

/// Loads a split from --out when it was generated with the same configuration,
/// otherwise generates and saves it.
inline Dataset dataset_for(const fs::path& out, const char* split, const SynthConfig& cfg, ManifestWriter* mw = nullptr) {
  const fs::path stem = data_stem(out, split);
  fs::path js = stem;
  js += ".json";
  if (fs::exists(js)) {
    Dataset d = load_dataset(stem);
    if (to_json(d.config) == to_json(cfg)) return d;
  }
  Dataset d = generate_dataset(cfg);
  fs::create_directories(stem.parent_path());
  save_dataset(d, stem);
  if (mw) {
    mw->output(js);
    mw->output(fs::path(stem).concat(".bin"));
  }
  return d;
}

inline std::string stem_name(const std::string& path) { return fs::path(path).stem().string(); }

inline std::vector<double> parse_sigmas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v < 0.0) throw CLI::ValidationError("--sigmas", "'" + item + "' is not a sigma >= 0");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError("--sigmas", "needs at least one value");
  return out;
}

inline const MetricReport& pick_split(const EvalReport& r, const std::string& split) {
  const std::optional<MetricReport>* m = &r.full;
  if (split == "challenging") m = &r.challenging;
  else if (split == "non") m = &r.non_challenging;
  else if (split == "occluded") m = &r.occluded;
  if (!*m) throw ContractViolation("split '" + split + "' is empty on this dataset");
  return **m;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string c;
  while (std::getline(ss, c, ',')) cells.push_back(c);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

/// Markdown summary of every CSV under `out`, in path order. Curves contribute
/// only their last epoch.
inline std::string summarize(const fs::path& out) {
  std::vector<fs::path> files;
  for (const char* dir : {"ablations", "eval", "noise", "curves"}) {
    if (!fs::is_directory(out / dir)) continue;
    std::vector<fs::path> here;
    for (const auto& e : fs::recursive_directory_iterator(out / dir))
      if (e.is_regular_file() && e.path().extension() == ".csv") here.push_back(e.path());
    std::sort(here.begin(), here.end());
    files.insert(files.end(), here.begin(), here.end());
  }
  std::string md = "# alft summary\n";
  for (const fs::path& f : files) {
    std::stringstream in(io::read_file(f));
    std::string header, line;
    std::getline(in, header);
    std::vector<std::string> rows;
    while (std::getline(in, line))
      if (!line.empty()) rows.push_back(line);
    const std::string rel = fs::relative(f, out).generic_string();
    const bool curve = rel.rfind("curves/", 0) == 0;
    if (curve && rows.size() > 1) rows.erase(rows.begin(), rows.end() - 1);
    md += "\n## " + rel + (curve ? " (last epoch)" : "") + "\n\n";
    const auto head = split_csv_line(header);
    md += "|";
    for (const auto& h : head) md += " " + h + " |";
    md += "\n|";
    for (std::size_t i = 0; i < head.size(); ++i) md += " --- |";
    md += "\n";
    for (const auto& r : rows) {
      md += "|";
      for (const auto& c : split_csv_line(r)) md += " " + c + " |";
      md += "\n";
    }
  }
  if (files.empty()) md += "\nNo CSV outputs found.\n";
  return md;
}

// ---------------------------------------------------------------- dispatch

/// Runs one command. Exit codes: 0 success, 1 usage error, 2 runtime failure.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"alft: anchor-based 2D-to-3D pose lifting on a synthetic gym"};
  app.name("alft");
  app.require_subcommand(1);
  app.fallthrough();
  CommonOptions o;
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--config", o.config_file, "JSON config (overridden by flags)")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Master seed (default: ALFT_SEED, config, then 1)");
  app.add_option("--n", o.n, "Training samples")->check(CLI::NonNegativeNumber);
  app.add_option("--n-val", o.n_val, "Validation samples")->check(CLI::NonNegativeNumber);
  app.add_option("--n-test", o.n_test, "Test samples")->check(CLI::NonNegativeNumber);
  app.add_option("--epochs", o.epochs, "Training epochs")->check(CLI::PositiveNumber);
  app.add_option("--batch-size", o.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  app.add_option("--lr", o.lr, "Learning rate")->check(CLI::PositiveNumber);
  app.add_option("--image-size", o.image_size, "Image side in pixels (multiple of 8)")->check(CLI::PositiveNumber);
  app.add_option("--noise-sigma", o.noise_sigma, "Upper bound of per-sample input noise, pixels")->check(CLI::NonNegativeNumber);
  app.add_option("--occlusion-rate", o.occlusion_rate, "Upper bound of per-sample occlusion rate")->check(CLI::Range(0.0, 1.0));

  auto* gen = app.add_subcommand("gen", "Generate train/val/test datasets");

  std::string variant = "full";
  auto* trn = app.add_subcommand("train", "Train one variant");
  trn->add_option("--variant", variant, "Ablation variant")->check(CLI::IsMember(variant_names()))->capture_default_str();

  std::string checkpoint, split = "full", dataset;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint (or 'oracle') on the test split");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint path, or 'oracle' for the ground-truth predictor")->required();
  ev->add_option("--split", split, "full, challenging, non or occluded")
      ->check(CLI::IsMember({"full", "challenging", "non", "occluded"}))
      ->capture_default_str();
  ev->add_option("--dataset", dataset, "Dataset stem (default: <out>/data/test)");

  std::string sigmas = "0,1,2,3,4,5";
  auto* sw = app.add_subcommand("sweep-noise", "MPJPE against fixed input noise");
  sw->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
  sw->add_option("--sigmas", sigmas, "Comma-separated sigmas in pixels")->capture_default_str();
  sw->add_option("--dataset", dataset, "Dataset stem (default: <out>/data/test)");

  std::string suite;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate every variant of a suite");
  ab->add_option("--suite", suite, "anchors, depth, sampling or bins")->required()->check(CLI::IsMember(suite_names()));

  std::string input;
  int index = 0;
  double lift_occlusion = 0.0;
  auto* lf = app.add_subcommand("lift", "Lift one pose record and print the 3D pose");
  lf->add_option("--input", input, "Pose file: a record or an array of records")->required()->check(CLI::ExistingFile);
  lf->add_option("--checkpoint", checkpoint, "Checkpoint path (default: <out>/checkpoints/full.ckpt)");
  lf->add_option("--index", index, "Record index when the file holds an array")->check(CLI::NonNegativeNumber);
  lf->add_option("--occlusion", lift_occlusion, "Occlusion rate used to synthesize features")->check(CLI::Range(0.0, 1.0));

  auto* rp = app.add_subcommand("report", "Aggregate CSV outputs into summary tables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitUsage;
  }

  std::uint64_t seed = 0;
  ExperimentPreset preset;
  try {
    preset = resolve_preset(o, &seed);
  } catch (const std::exception& e) {
    err << "alft: bad configuration: " << e.what() << "\n";
    return kExitUsage;
  }

  std::string command;
  try {
    const fs::path root(o.out);
    const nlohmann::json cfg = to_json(preset);

    if (gen->parsed()) {
      command = "gen";
      ManifestWriter mw(root, "gen", "", cfg, seed);
      const Dataset tr = dataset_for(root, "train", preset.train_set, &mw), va = dataset_for(root, "val", preset.val_set, &mw),
                    te = dataset_for(root, "test", preset.test_set, &mw);
      out << "train " << tr.size() << " val " << va.size() << " test " << te.size() << " samples (rejected "
          << tr.rejected + va.rejected + te.rejected << ") in " << (root / "data").generic_string() << "\n";
      mw.finish();
    } else if (trn->parsed()) {
      command = "train";
      const ModelConfig mc = apply_variant(preset.model, parse_variant(variant));
      nlohmann::json c = cfg;
      c["model"] = to_json(mc);
      c["variant"] = variant;
      ManifestWriter mw(root, "train", variant, c, seed);
      const Dataset tr = dataset_for(root, "train", preset.train_set, &mw), va = dataset_for(root, "val", preset.val_set, &mw);
      Model m(mc, preset.model_seed);
      const TrainResult r = train(m, tr, va, preset.training, [&](const EpochStats& e) {
        err << "epoch " << e.epoch << " loss " << format_real(e.train_loss) << " val_mpjpe " << format_real(e.val_mpjpe) << "\n";
      });
      const fs::path ck = root / "checkpoints" / (variant + ".ckpt"), cv = root / "curves" / (variant + ".csv");
      fs::create_directories(ck.parent_path());
      fs::create_directories(cv.parent_path());
      m.save(ck, {{"variant", variant}, {"train_seconds", r.seconds}});
      io::write_file(cv, curve_csv(r));
      mw.output(ck);
      mw.output(cv);
      out << "trained " << variant << " in " << format_real(r.seconds) << " s; checkpoint " << ck.generic_string() << "\n";
      mw.finish();
    } else if (ev->parsed()) {
      command = "eval";
      const bool oracle = checkpoint == "oracle";
      const std::string name = oracle ? "oracle" : stem_name(checkpoint);
      nlohmann::json c = cfg;
      c["checkpoint"] = checkpoint;
      c["split"] = split;
      c["dataset"] = dataset;
      ManifestWriter mw(root, "eval", name + "_" + split, c, seed);
      const Dataset d = dataset.empty() ? dataset_for(root, "test", preset.test_set, &mw) : load_dataset(dataset);
      EvalReport r;
      if (oracle) {
        r = evaluate(oracle_predictor(), d);
      } else {
        Model m = Model::load(checkpoint);
        r = evaluate_model(m, d, -1, seed);
      }
      const MetricReport& mr = pick_split(r, split);
      const fs::path csv = root / "eval" / (name + "_" + split + ".csv"), js = root / "eval" / (name + "_" + split + ".json");
      fs::create_directories(csv.parent_path());
      io::write_file(csv, std::string(kMetricCsvHeader) + "\n" + to_csv_row(mr) + "\n");
      io::write_file(js, to_json(r).dump(2) + "\n");
      mw.output(csv);
      mw.output(js);
      out << kMetricCsvHeader << "\n" << to_csv_row(mr) << "\n";
      mw.finish();
    } else if (sw->parsed()) {
      command = "sweep-noise";
      const std::vector<double> s = parse_sigmas(sigmas);
      const std::string name = stem_name(checkpoint);
      nlohmann::json c = cfg;
      c["checkpoint"] = checkpoint;
      c["sigmas"] = s;
      ManifestWriter mw(root, "sweep-noise", name, c, seed);
      const Dataset d = dataset.empty() ? dataset_for(root, "test", preset.test_set, &mw) : load_dataset(dataset);
      Model m = Model::load(checkpoint);
      const std::string csv = noise_csv(sweep_noise(m, d, s, -1, seed));
      const fs::path path = root / "noise" / (name + ".csv");
      fs::create_directories(path.parent_path());
      io::write_file(path, csv);
      mw.output(path);
      out << csv;
      mw.finish();
    } else if (ab->parsed()) {
      command = "ablate";
      ManifestWriter mw(root, "ablate", suite, cfg, seed);
      const Dataset tr = dataset_for(root, "train", preset.train_set, &mw), va = dataset_for(root, "val", preset.val_set, &mw),
                    te = dataset_for(root, "test", preset.test_set, &mw);
      const PresetData data(tr, va, te);
      std::string table = std::string(kAblationCsvHeader) + "\n";
      for (const SuiteEntry& e : suite_entries(suite, preset.model)) {
        err << "[" << e.label << "]\n";
        TrainedModel t = train_or_load(preset, data, e, root / "checkpoints" / suite, [&](const EpochStats& s) {
          err << "[" << e.label << "] epoch " << s.epoch << " val_mpjpe " << format_real(s.val_mpjpe) << "\n";
        });
        const EvalReport r = evaluate_model(t.model, te, -1, seed);
        table += ablation_csv_row(e.label, r, t.train_seconds);
        mw.output(t.checkpoint);
      }
      const fs::path path = root / "ablations" / (suite + ".csv");
      fs::create_directories(path.parent_path());
      io::write_file(path, table);
      mw.output(path);
      out << table;
      mw.finish();
    } else if (lf->parsed()) {
      command = "lift";
      const std::string ck = checkpoint.empty() ? (root / "checkpoints" / "full.ckpt").string() : checkpoint;
      nlohmann::json c = cfg;
      c["checkpoint"] = ck;
      c["input"] = input;
      c["index"] = index;
      c["occlusion"] = lift_occlusion;
      ManifestWriter mw(root, "lift", "", c, seed);
      const nlohmann::json file = nlohmann::json::parse(io::read_file(input));
      const nlohmann::json& rec = file.is_array() ? file.at(static_cast<std::size_t>(index)) : file;
      const PoseRecord pr = pose_record_from_json(rec);
      Model m = Model::load(ck);
      const int S = m.config().image_size;
      SynthConfig sc = preset.test_set;
      sc.image_size = S;
      // The gym's feature synthesizer stands in for an image backbone.
      Sample s;
      s.gt3d = pr.gt3d;
      s.gt2d = pr.gt2d;
      s.input2d = pr.pred2d;
      s.pyramid = synthesize_features(pr.gt3d, pr.gt2d, lift_occlusion, sc, m.config().depth.binning);
      ad::Graph g;
      Rng rng = Rng::stream(seed, 0);
      const ForwardResult fr = m.forward(g, model_input(s, S), nullptr, &rng);
      nlohmann::json result;
      if (fr.weights.valid()) {
        PosePrediction p;
        p.pose = fr.pose;
        p.weights = fr.weights;
        result = prediction_json(p);
      } else {
        result = {{"pose3d", coords_to_json(to_pose(fr.pose).coords)}};
      }
      const fs::path path = root / "lift" / "prediction.json";
      fs::create_directories(path.parent_path());
      io::write_file(path, result.dump(2) + "\n");
      mw.output(path);
      out << coords_to_json(to_pose(fr.pose).coords).dump() << "\n";
      mw.finish();
    } else if (rp->parsed()) {
      command = "report";
      ManifestWriter mw(root, "report", "", cfg, seed);
      const std::string md = summarize(root);
      const fs::path path = root / "report" / "summary.md";
      fs::create_directories(path.parent_path());
      io::write_file(path, md);
      mw.output(path);
      out << md;
      mw.finish();
    }
  } catch (const CLI::ValidationError& e) {
    err << "alft: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "alft" << (command.empty() ? "" : " " + command) << ": " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace alft::cli
