// mmfal: command-line front end.
//
//   mmfal run --config <file> [--grid] [--resume]
//   mmfal synth --spec <file> --out <dir> [--seed N]
//   mmfal compare <report...> [--format markdown|csv]
//   mmfal serve --config <file> --port <p> [--resume] [--keep-alive]

#include "mmfal/annotation_service.hpp"
#include "mmfal/experiment.hpp"
#include "mmfal/synthetic.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using namespace mmfal;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

void print_record(const std::string& name, const ALRecord& r) {
  std::printf("[%s] t=%d d=%.3f n=%zu acc=%s auc=%s (%.1fs)\n", name.c_str(), r.t, r.d, r.n_labeled,
              format_percent(r.accuracy).c_str(), format_percent(r.macro_auc).c_str(), r.wall_time_s);
  std::fflush(stdout);
}

void print_summary(const RunReport& report) {
  std::printf("[%s] accuracy %s%%, macro AUC %s%%", report.name().c_str(), format_percent(report.final_eval.accuracy).c_str(),
              format_percent(report.final_eval.macro_auc).c_str());
  if (report.history) {
    const auto& best = report.history->best();
    std::printf(", best AUC (d) %s", format_auc_at(best.macro_auc, best.d).c_str());
  }
  std::printf(", %.1fs\n", report.wall_time_s);
}

int cmd_run(const fs::path& config_path, bool grid, bool resume) {
  ExperimentConfig config = load_experiment_config(config_path);
  if (resume) config.resume = true;
  if (config.oracle == "live") {
    std::fprintf(stderr, "config uses the live oracle; start it with 'mmfal serve'\n");
    return 2;
  }
  std::vector<ExperimentConfig> runs = grid ? expand_grid(config) : std::vector<ExperimentConfig>{config};
  std::vector<RunReport> reports;
  for (const auto& run : runs) {
    RunHooks hooks;
    hooks.on_record = [&](const ALRecord& r, const CandidatePool&) { print_record(run.name, r); };
    reports.push_back(run_experiment(run, hooks));
    print_summary(reports.back());
  }
  if (grid) {
    const auto table = compare_runs(reports);
    std::ofstream(config.output_dir / "comparison.md") << table.to_markdown();
    std::ofstream(config.output_dir / "comparison.csv") << table.to_csv();
    std::cout << '\n' << table.to_markdown();
  }
  return 0;
}

int cmd_synth(const fs::path& spec_path, const fs::path& out, std::uint64_t seed) {
  SyntheticSpec spec;
  if (!spec_path.empty()) {
    std::ifstream in(spec_path);
    if (!in) throw IoError("cannot open " + spec_path.string());
    spec = nlohmann::json::parse(in).get<SyntheticSpec>();
  }
  const DatasetIndex index = generate_synthetic(spec, seed, out);
  std::printf("wrote %zu patients, %zu images to %s\n", index.patients().size(), index.num_samples(),
              (out / "manifest.jsonl").string().c_str());
  return 0;
}

int cmd_compare(const std::vector<std::string>& paths, const std::string& format) {
  std::vector<RunReport> reports;
  for (const auto& p : paths) {
    fs::path path = p;
    if (fs::is_directory(path)) path /= "report.json";
    reports.push_back(read_run_report(path));
  }
  const auto table = compare_runs(reports);
  std::cout << (format == "csv" ? table.to_csv() : table.to_markdown());
  return 0;
}

int cmd_serve(const fs::path& config_path, const std::string& host, int port, const fs::path& static_dir,
              const std::string& token, bool keep_alive, bool resume) {
  ExperimentConfig config = load_experiment_config(config_path);
  config.oracle = "live";
  if (resume) config.resume = true;
  config.validate();

  LiveOracle oracle;
  AnnotationService service(oracle, ServiceOptions{host, port, static_dir, token});
  service.start();
  std::printf("annotation service listening on http://%s:%d\n", host.c_str(), service.port());
  std::fflush(stdout);

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::atomic<bool> done{false};
  std::thread watcher([&] {
    while (!done) {
      if (g_interrupted) {
        oracle.shutdown();
        return;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  });

  RunHooks hooks;
  hooks.oracle = &oracle;
  hooks.on_dataset = [&](const DatasetIndex& index) { service.set_images(index); };
  hooks.on_record = [&](const ALRecord& r, const CandidatePool& pool) {
    oracle.record(r, pool);
    print_record(config.name, r);
  };
  int code = 0;
  try {
    print_summary(run_experiment(config, hooks));
    oracle.finish();
    if (keep_alive) {
      std::printf("loop finished; serving final status until interrupted\n");
      std::fflush(stdout);
      while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  } catch (const OracleTimeout& e) {
    std::fprintf(stderr, "stopped: %s; state saved in %s\n", e.what(), (config.output_dir / "checkpoint").string().c_str());
    code = 130;
  }
  done = true;
  watcher.join();
  service.stop();
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal fusion network with active learning"};
  app.require_subcommand(1);

  fs::path run_config;
  bool grid = false, resume = false;
  auto* run = app.add_subcommand("run", "Run an experiment (or the full grid) from a config file");
  run->add_option("--config", run_config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_flag("--grid", grid, "Expand into the modality x strategy grid");
  run->add_flag("--resume", resume, "Continue an interrupted active-learning run");

  fs::path spec_path, synth_out;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with a manifest");
  synth->add_option("--spec", spec_path, "Synthetic spec (JSON); defaults when omitted")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Generator seed");

  std::vector<std::string> report_paths;
  std::string format = "markdown";
  auto* compare = app.add_subcommand("compare", "Tabulate run reports");
  compare->add_option("reports", report_paths, "report.json files or run directories");
  compare->add_option("--format", format, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));

  fs::path serve_config, static_dir;
  bool keep_alive = false;
  std::string host = "127.0.0.1", token;
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Run an experiment with labels from the annotation service");
  serve->add_option("--config", serve_config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  serve->add_option("--port", port, "TCP port (0 picks a free one)")->required();
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--static", static_dir, "Directory with the annotation UI build")->check(CLI::ExistingDirectory);
  serve->add_option("--token", token, "Require this bearer token on API calls");
  serve->add_flag("--keep-alive", keep_alive, "Keep serving status after the loop finishes");
  serve->add_flag("--resume", resume, "Continue an interrupted labeling session");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_config, grid, resume);
    if (*synth) return cmd_synth(spec_path, synth_out, synth_seed);
    if (*compare) return cmd_compare(report_paths, format);
    if (*serve) return cmd_serve(serve_config, host, port, static_dir, token, keep_alive, resume);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
