#pragma once

// Command-line front end. Exit codes: 0 success, 2 usage or configuration
// error, 3 data error, 4 internal invariant violation.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "enas4d/pipeline.hpp"

namespace enas4d {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitInvariant = 4 };

inline ThresholdVector parse_threshold_list(const std::string& s) {
  ThresholdVector v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--thresholds: not a number: '" + item + "'");
    }
  }
  return v;
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Search for early-exit multi-stage CNNs with a weight-sharing supernet", "enas4d"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  app.add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  app.add_option("-o,--out", out_dir, "output directory (overrides the config)");
  app.fallthrough();

  auto* train = app.add_subcommand("train-supernet", "train the supernet and write a checkpoint");

  auto* build = app.add_subcommand("build-db", "evaluate sampled architectures into a confidence database");
  int num_arch = -1, num_images = -1;
  std::string checkpoint;
  build->add_option("--num-arch", num_arch, "number of sampled architectures");
  build->add_option("--num-images", num_images, "number of training images to evaluate");
  build->add_option("--checkpoint", checkpoint, "supernet checkpoint (default: <out>/supernet.ckpt)");

  auto* search = app.add_subcommand("search", "fit the metric predictor and run the evolutionary search");
  std::optional<double> omega, cost_target;
  std::optional<std::string> cost_kind;
  std::string latency_table;
  search->add_option("--omega", omega, "cost exponent of the metric");
  search->add_option("--cost-target", cost_target, "cost target (MACs or ms)");
  search->add_option("--cost-kind", cost_kind, "macs or latency");
  search->add_option("--latency-table", latency_table, "latency table (required for --cost-kind latency)");

  auto* eval = app.add_subcommand("eval-arch", "early-exit evaluation of one architecture on the test split");
  std::string arch_file, thresholds;
  eval->add_option("--arch", arch_file, "architecture document or search report")->required();
  eval->add_option("--checkpoint", checkpoint, "supernet checkpoint (default: <out>/supernet.ckpt)");
  eval->add_option("--thresholds", thresholds, "comma-separated thresholds for stages 0..S-2");
  eval->add_option("--latency-table", latency_table, "report costs in ms from this table");

  auto* bench = app.add_subcommand("bench-latency", "time every operation signature of the search space");
  std::string device;
  std::optional<int> repeats, warmups;
  bench->add_option("--device", device, "device label stored in the table")->required();
  bench->add_option("--repeats", repeats, "timed runs per signature");
  bench->add_option("--warmups", warmups, "untimed runs per signature");

  auto* exp = app.add_subcommand("export-arch", "write a standalone architecture document with costs");
  std::string name = "exported";
  exp->add_option("--arch", arch_file, "architecture document or search report")->required();
  exp->add_option("--name", name, "output base name");
  exp->add_option("--latency-table", latency_table, "add a latency profile from this table");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (!out_dir.empty()) cfg.out = out_dir;
    if (train->parsed()) {
      const auto r = cmd_train_supernet(cfg, &err);
      out << "checkpoint: " << r.checkpoint.string() << "\n";
      out << "steps: " << r.report.steps << "\n";
      if (!r.maximal_test_accuracy.empty()) {
        out << "maximal arch test accuracy per stage:";
        for (double a : r.maximal_test_accuracy) out << " " << a;
        out << "\n";
      }
    } else if (build->parsed()) {
      const auto db = cmd_build_db(cfg, num_arch > 0 ? num_arch : cfg.db.num_arch,
                                   num_images > 0 ? num_images : cfg.db.num_images, checkpoint, &err);
      out << "database: " << db_dir(cfg).string() << "\n";
      out << "archs: " << db.registry.size() << " records: " << db.record_count() << "\n";
    } else if (search->parsed()) {
      MetricConfig m = cfg.metric;
      if (omega) m.omega = *omega;
      if (cost_target) m.cost_target = *cost_target;
      if (cost_kind) {
        try {
          m.cost_kind = parse_cost_kind(*cost_kind);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
      }
      fs::path table = latency_table.empty() ? cfg.search.latency_table : fs::path(latency_table);
      if (m.cost_kind == CostKind::macs && latency_table.empty()) table.clear();
      const auto r = cmd_search(cfg, m, table, &err);
      out << "report: " << (r.dir / "report.json").string() << "\n";
      out << "true R: " << r.winner.grid.R << " predicted R: " << r.winner.predicted_R << "\n";
      out << "ACC_avg: " << r.winner.grid.metrics.acc << " COST_avg: " << r.winner.grid.metrics.cost << "\n";
      out << "predictor kendall tau: " << r.predictor.kendall_tau << "\n";
    } else if (eval->parsed()) {
      std::optional<ThresholdVector> thr;
      if (!thresholds.empty()) thr = parse_threshold_list(thresholds);
      const auto r = cmd_eval_arch(cfg, arch_file, thr, checkpoint, latency_table, &err);
      out << "report: " << (r.dir / "report.json").string() << "\n";
      out << "ACC_avg: " << r.metrics.acc << " COST_avg: " << r.metrics.cost << "\n";
      out << "exit fractions:";
      for (int s = 0; s < r.summary.stages(); ++s) out << " " << r.summary.fraction(s);
      out << "\n";
    } else if (bench->parsed()) {
      if (repeats) cfg.search.bench_repeats = *repeats;
      if (warmups) cfg.search.bench_warmups = *warmups;
      const auto t = cmd_bench_latency(cfg, device, &err);
      out << "latency table: " << latency_table_path(cfg, device).string() << " (" << t.entries.size()
          << " entries)\n";
    } else if (exp->parsed()) {
      out << "exported: " << cmd_export_arch(cfg, arch_file, latency_table, name).string() << "\n";
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const InvariantError& e) {
    err << "invariant violated: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const json::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInvariant;
  }
}

}  // namespace enas4d
