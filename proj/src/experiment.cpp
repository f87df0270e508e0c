#include "mmfal/experiment.hpp"

#include "mmfal/checkpoint.hpp"
#include "mmfal/plot.hpp"

#include <Eigen/Core>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#ifndef MMFAL_VERSION
#define MMFAL_VERSION "unknown"
#endif

namespace mmfal {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

Normalization ExperimentConfig::normalization_constants() const {
  if (normalization == "identity") return Normalization::identity();
  return Normalization{};
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("name must not be empty");
  if (manifest.empty() == !synthetic.has_value()) {
    throw ConfigError("dataset must name exactly one of a manifest and a synthetic spec");
  }
  if (!manifest.empty() && !fs::is_regular_file(manifest)) {
    throw ConfigError("manifest not found: " + manifest.string());
  }
  if (modalities.empty() || modalities.size() > 2) throw ConfigError("select one or two modalities");
  try {
    check_modalities(modalities);
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (synthetic) {
    for (auto m : modalities) {
      const bool present = std::any_of(synthetic->modalities.begin(), synthetic->modalities.end(),
                                       [m](const ModalitySignal& s) { return s.kind == m; });
      if (!present) throw ConfigError("synthetic spec does not generate " + std::string(to_string(m)));
    }
  }
  ModelConfig m = model;
  m.modalities = modalities;
  m.validate();
  if (!m.backbone_weights.empty() && !fs::is_regular_file(m.backbone_weights)) {
    throw ConfigError("backbone weights not found: " + m.backbone_weights);
  }
  train.validate();
  if (input.height < 1 || input.width < 1) throw ConfigError("input size must be positive");
  if (normalization != "imagenet" && normalization != "identity") {
    throw ConfigError("normalization must be 'imagenet' or 'identity'");
  }
  if (query) query->validate();
  schedule.validate();
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  if (output_dir.empty()) throw ConfigError("output_dir must be set");
  if (oracle != "simulated" && oracle != "live") throw ConfigError("oracle must be 'simulated' or 'live'");
  if (oracle == "live" && !query) throw ConfigError("live oracle requires active learning");
}

void to_json(json& j, const ExperimentConfig& c) {
  json mods = json::array();
  for (auto m : c.modalities) mods.push_back(std::string(to_string(m)));
  json dataset = json::object();
  if (!c.manifest.empty()) dataset["manifest"] = c.manifest.string();
  if (c.synthetic) {
    dataset["synthetic"] = *c.synthetic;
    dataset["seed"] = c.synthetic_seed;
  }
  ModelConfig model = c.model;
  model.modalities = c.modalities;
  json al;
  if (c.query) {
    al = *c.query;
  } else {
    al = json{{"strategy", "none"}};
  }
  j = json{{"name", c.name},
           {"dataset", dataset},
           {"modalities", mods},
           {"model", model},
           {"train", c.train},
           {"input", {{"height", c.input.height}, {"width", c.input.width}, {"normalization", c.normalization},
                      {"interpolation", kResizeInterpolation}}},
           {"active_learning", al},
           {"schedule", c.schedule},
           {"split", {{"fraction", c.split_fraction}, {"seed", c.split_seed}}},
           {"output_dir", c.output_dir.string()},
           {"oracle", c.oracle},
           {"resume", c.resume},
           {"write_plot", c.write_plot}};
}

namespace {

const std::set<std::string> kTopLevelKeys = {"name",   "dataset",  "modalities", "model",      "train",
                                             "input",  "active_learning", "schedule", "split", "output_dir",
                                             "oracle", "resume",   "write_plot", "$schema"};

}  // namespace

void from_json(const json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (!j.is_object()) throw SchemaError("experiment config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!kTopLevelKeys.count(key)) throw SchemaError("unknown config key '" + key + "'");
  }
  try {
    c.name = j.value("name", c.name);
    const auto& dataset = j.at("dataset");
    if (dataset.contains("manifest")) c.manifest = dataset.at("manifest").get<std::string>();
    if (dataset.contains("synthetic")) {
      c.synthetic = dataset.at("synthetic").is_null() ? SyntheticSpec{} : dataset.at("synthetic").get<SyntheticSpec>();
      c.synthetic_seed = dataset.value("seed", std::uint64_t{0});
    }
    if (j.contains("modalities")) {
      c.modalities.clear();
      for (const auto& m : j.at("modalities")) c.modalities.push_back(parse_modality(m.get<std::string>()));
    }
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    c.model.modalities = c.modalities;
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("input")) {
      const auto& in = j.at("input");
      c.input.height = in.value("height", c.input.height);
      c.input.width = in.value("width", c.input.width);
      c.normalization = in.value("normalization", c.normalization);
      if (in.contains("interpolation") && in.at("interpolation").get<std::string>() != kResizeInterpolation) {
        throw ConfigError("only bilinear resizing is supported");
      }
    }
    if (j.contains("active_learning")) {
      const auto& al = j.at("active_learning");
      if (al.value("strategy", std::string("ESD")) != "none") c.query = al.get<QueryConfig>();
    }
    if (j.contains("schedule")) c.schedule = j.at("schedule").get<Schedule>();
    if (j.contains("split")) {
      c.split_fraction = j.at("split").value("fraction", c.split_fraction);
      c.split_seed = j.at("split").value("seed", c.split_seed);
    }
    c.output_dir = j.value("output_dir", std::string());
    c.oracle = j.value("oracle", c.oracle);
    c.resume = j.value("resume", c.resume);
    c.write_plot = j.value("write_plot", c.write_plot);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  const fs::path base = fs::absolute(path).parent_path();
  auto resolve = [&](const fs::path& p) { return p.empty() || p.is_absolute() ? p : (base / p).lexically_normal(); };
  c.manifest = resolve(c.manifest);
  c.output_dir = resolve(c.output_dir);
  if (!c.model.backbone_weights.empty()) c.model.backbone_weights = resolve(c.model.backbone_weights).string();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::string RunReport::name() const { return config.value("name", std::string("run")); }

void to_json(json& j, const RunReport& r) {
  j = json{{"config", r.config},
           {"final", r.final_eval},
           {"environment", r.environment},
           {"wall_time_s", r.wall_time_s},
           {"split_fingerprint", r.split_fingerprint},
           {"test_patients", r.test_patients},
           {"complete", r.complete}};
  if (r.history) j["history"] = r.history->records;
  if (!r.error.empty()) j["error"] = r.error;
}

void from_json(const json& j, RunReport& r) {
  r = RunReport{};
  try {
    r.config = j.at("config");
    if (j.contains("final") && !j.at("final").is_null()) r.final_eval = j.at("final").get<EvalReport>();
    if (j.contains("history")) r.history = ALHistory{j.at("history").get<std::vector<ALRecord>>()};
    r.environment = j.value("environment", json::object());
    r.wall_time_s = j.value("wall_time_s", 0.0);
    r.split_fingerprint = j.at("split_fingerprint");
    r.test_patients = j.value("test_patients", std::vector<std::string>{});
    r.complete = j.value("complete", true);
    r.error = j.value("error", std::string());
  } catch (const json::exception& e) {
    throw SchemaError(std::string("run report: ") + e.what());
  }
}

RunReport read_run_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report " + path.string());
  try {
    return json::parse(in).get<RunReport>();
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_run_report(const RunReport& report, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << json(report).dump(2) << '\n';
}

std::string split_fingerprint(const std::vector<std::string>& test_patients) {
  std::vector<std::string> ids = test_patients;
  std::sort(ids.begin(), ids.end());
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& id : ids) {
    for (unsigned char ch : id + '\n') {
      h ^= ch;
      h *= 1099511628211ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

namespace {

json environment(const ExperimentConfig& c) {
  json seeds = {{"split", c.split_seed}, {"train", c.train.seed}, {"model_init", c.model.init_seed}};
  if (c.synthetic) seeds["synthetic"] = c.synthetic_seed;
  if (c.query) seeds["query"] = c.query->seed;
  std::string compiler;
#if defined(__clang__)
  compiler = "clang " __clang_version__;
#elif defined(__GNUC__)
  compiler = "gcc " __VERSION__;
#endif
  return {{"mmfal", MMFAL_VERSION},
          {"compiler", compiler},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"codec", codec_version()},
          {"hardware_threads", std::thread::hardware_concurrency()},
          {"seeds", seeds}};
}

DatasetIndex load_dataset(const ExperimentConfig& c) {
  if (c.synthetic) return generate_synthetic(*c.synthetic, c.synthetic_seed, c.output_dir / "data");
  return load_manifest(c.manifest);
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& config, const RunHooks& hooks) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  fs::create_directories(config.output_dir);

  RunReport report;
  report.config = config;
  report.environment = environment(config);
  const fs::path report_path = config.output_dir / "report.json";
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count(); };

  ALHistory partial;
  try {
    const DatasetIndex index = load_dataset(config);
    if (hooks.on_dataset) hooks.on_dataset(index);
    const PatientSplit split = stratified_patient_split(index, config.split_fraction, config.split_seed);
    report.test_patients = split.test;
    report.split_fingerprint = split_fingerprint(split.test);

    const auto train_tuples = build_tuples(index, config.modalities, split.train);
    const auto test_tuples = build_tuples(index, config.modalities, split.test);
    if (train_tuples.empty()) throw ConfigError("no training patient has every selected modality");
    if (test_tuples.empty()) throw ConfigError("no test patient has every selected modality");
    const ImageStore images(config.input, config.normalization_constants());
    ModelConfig model_config = config.model;
    model_config.modalities = config.modalities;

    if (!config.query) {
      FusionNet model(model_config);
      Trainer trainer(model, images, config.train);
      std::vector<LabeledExample> examples;
      examples.reserve(train_tuples.size());
      for (const auto& t : train_tuples) examples.push_back({&t, t.stage});
      trainer.train(examples);
      report.final_eval = evaluate_tuples(trainer, test_tuples, 1.0, config.schedule.skip_degenerate_auc);
      save_checkpoint(config.output_dir / "model.ckpt", model, images.normalization(), &trainer.optimizer());
    } else {
      SimulatedOracle simulated;
      ALSetup setup;
      setup.train_tuples = &train_tuples;
      setup.test_tuples = &test_tuples;
      setup.images = &images;
      setup.model = model_config;
      setup.train = config.train;
      setup.query = *config.query;
      setup.schedule = config.schedule;
      setup.oracle = hooks.oracle ? hooks.oracle : &simulated;
      setup.checkpoint_dir = config.output_dir / "checkpoint";
      setup.resume = config.resume;
      setup.on_record = [&](const ALRecord& r, const CandidatePool& pool) {
        partial.records.push_back(r);
        if (hooks.on_record) hooks.on_record(r, pool);
      };
      ALResult result = run_al_loop(setup);
      report.history = std::move(result.history);
      report.final_eval = report.history->records.back().eval;
      report.history->write_csv(config.output_dir / "history.csv");
      if (config.write_plot) {
        write_learning_curve(*report.history, config.output_dir / "curve.png", config.name);
      }
    }
  } catch (const std::exception& e) {
    report.complete = false;
    report.error = e.what();
    if (!partial.records.empty()) {
      report.history = partial;
      report.final_eval = partial.records.back().eval;
    }
    report.wall_time_s = elapsed();
    write_run_report(report, report_path);
    throw;
  }
  report.wall_time_s = elapsed();
  write_run_report(report, report_path);
  return report;
}

// ---------------------------------------------------------------------------
// Comparison and grid
// ---------------------------------------------------------------------------

std::string format_auc_at(double auc, double d) {
  char buf[32];
  std::snprintf(buf, sizeof buf, " (%.1f%%)", d * 100.0);
  return format_percent(auc) + buf;
}

ComparisonTable compare_runs(const std::vector<RunReport>& reports) {
  ComparisonTable table;
  if (reports.empty()) return table;
  const std::string& fingerprint = reports.front().split_fingerprint;
  for (const auto& r : reports) {
    if (r.split_fingerprint != fingerprint) {
      throw ArgumentError("runs '" + reports.front().name() + "' and '" + r.name() +
                          "' were evaluated on different test splits");
    }
  }
  for (const auto& r : reports) {
    ComparisonRow row;
    row.name = r.name();
    std::string mods;
    for (const auto& m : r.config.value("modalities", json::array())) {
      if (!mods.empty()) mods += '+';
      mods += m.get<std::string>();
    }
    row.modalities = mods;
    row.strategy = r.config.value("active_learning", json::object()).value("strategy", std::string("none"));
    row.accuracy = format_percent(r.final_eval.accuracy);
    row.macro_auc = format_percent(r.final_eval.macro_auc);
    if (r.history && !r.history->records.empty()) {
      const auto& best = r.history->best();
      row.best_auc_at = format_auc_at(best.macro_auc, best.d);
    } else {
      row.best_auc_at = format_auc_at(r.final_eval.macro_auc, r.final_eval.labeled_fraction);
    }
    if (!r.complete) row.name += " (incomplete)";
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string ComparisonTable::to_markdown() const {
  std::ostringstream os;
  os << "| Run | Modalities | Strategy | Acc (%) | AUC (%) | Best AUC (d) |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.name << " | " << r.modalities << " | " << r.strategy << " | " << r.accuracy << " | "
       << r.macro_auc << " | " << r.best_auc_at << " |\n";
  }
  return os.str();
}

std::string ComparisonTable::to_csv() const {
  auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  };
  std::ostringstream os;
  os << "run,modalities,strategy,accuracy,macro_auc,best_auc_d\n";
  for (const auto& r : rows) {
    os << quote(r.name) << ',' << quote(r.modalities) << ',' << quote(r.strategy) << ',' << r.accuracy << ','
       << r.macro_auc << ',' << quote(r.best_auc_at) << '\n';
  }
  return os.str();
}

std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base) {
  using M = ModalityKind;
  const std::vector<std::vector<M>> combos = {{M::LSTE}, {M::LUS}, {M::LSTQ},
                                              {M::LSTE, M::LUS}, {M::LSTE, M::LSTQ}, {M::LSTE, M::SSTE}};
  const std::vector<std::optional<QueryStrategy>> strategies = {std::nullopt, QueryStrategy::Random,
                                                                QueryStrategy::EntropyDropout};
  const QueryConfig query = base.query.value_or(QueryConfig{});
  std::vector<ExperimentConfig> out;
  for (const auto& combo : combos) {
    for (const auto& strategy : strategies) {
      ExperimentConfig c = base;
      c.modalities = combo;
      c.model.modalities = combo;
      std::string name;
      for (auto m : combo) name += (name.empty() ? "" : "+") + std::string(to_string(m));
      if (strategy) {
        c.query = query;
        c.query->strategy = *strategy;
        name += "_" + std::string(to_string(*strategy));
      } else {
        c.query.reset();
        name += "_none";
      }
      c.name = name;
      c.output_dir = base.output_dir / name;
      out.push_back(std::move(c));
    }
  }
  return out;
}

}  // namespace mmfal
