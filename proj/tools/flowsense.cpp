#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "flowsense/pipeline.hpp"

namespace fp = flowsense::pipeline;

namespace {

int exit_code(const std::vector<fp::StageReport>& reports) {
  for (const auto& r : reports) {
    if (r.nonconverged) {
      std::cerr << "warning: some GEE fits did not converge; results were written\n";
      return 3;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowsense: network-flow behavioral features, sparse latents and panel statistics"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out_dir;
  app.add_option("--config", config_path, "Run config (JSON) written by `init`");
  app.add_option("--seed", seed, "Override the run seed");
  app.add_option("--threads", threads, "Worker threads within a stage (default 1)");
  app.add_option("--out-dir", out_dir, "Override paths.out_dir");

  auto* init = app.add_subcommand("init", "Write a config with every hyperparameter at its default");
  std::string init_out = "flowsense.json";
  bool force = false;
  init->add_option("--out", init_out, "Config file to create");
  init->add_flag("--force", force, "Overwrite an existing file");

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"synth", "Generate a synthetic cohort with planted patterns"},
      {"ingest", "Parse flows and aggregate hourly traffic"},
      {"featurize", "Build hourly features and training windows"},
      {"classical", "Compute rest-activity metrics per week"},
      {"train", "Train the backbone and per-user adapters; export latents"},
      {"sae", "Train the sparse autoencoder and write activations"},
      {"interpret", "Filter, label and validate sparse features"},
      {"stats", "Fit Mundlak GEE models with FDR control and verdicts"},
      {"probe", "Leave-one-subject-out probes of weekly latent summaries"},
      {"pipeline", "Run every stage in order"}};
  for (const auto& [name, help] : stages) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (init->parsed()) {
      if (std::filesystem::exists(init_out) && !force) {
        throw flowsense::ConfigError(init_out + " exists (use --force to overwrite)");
      }
      const auto parent = std::filesystem::path(init_out).parent_path();
      if (!parent.empty()) std::filesystem::create_directories(parent);
      std::ofstream out(init_out);
      if (!out) throw flowsense::ConfigError("cannot write " + init_out);
      out << fp::default_config_json().dump(2) << "\n";
      std::cout << "wrote " << init_out << "\n";
      return 0;
    }
    fp::RunConfig cfg;
    if (!config_path.empty()) {
      cfg = fp::RunConfig::load(config_path);
    } else {
      cfg = fp::RunConfig::from_json(nlohmann::json::object(), std::filesystem::current_path());
    }
    if (seed) cfg.apply_seed(*seed);
    if (threads) cfg.threads = *threads;
    if (!out_dir.empty()) cfg.paths.out_dir = out_dir;
    cfg.validate();

    const std::string cmd = app.get_subcommands().front()->get_name();
    std::vector<fp::StageReport> reports;
    if (cmd == "pipeline") {
      reports = fp::run_all(cfg, &std::cout);
    } else {
      using Fn = fp::StageReport (*)(const fp::RunConfig&);
      static const std::map<std::string, Fn> table = {
          {"synth", fp::run_synth},         {"ingest", fp::run_ingest},
          {"featurize", fp::run_featurize}, {"classical", fp::run_classical},
          {"train", fp::run_train},         {"sae", fp::run_sae},
          {"interpret", fp::run_interpret}, {"stats", fp::run_stats},
          {"probe", fp::run_probe}};
      reports.push_back(table.at(cmd)(cfg));
      std::cout << "[" << cmd << "] " << reports.back().summary.dump() << "\n";
    }
    return exit_code(reports);
  } catch (const flowsense::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
}
