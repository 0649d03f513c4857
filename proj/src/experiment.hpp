#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "trainer.hpp"

namespace sbs {

struct ExperimentConfig {
  std::string target = "standard_normal";
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {1};
  std::filesystem::path out_dir = "runs";

  static ExperimentConfig from_json_text(const std::string& text, const std::string& origin = "<string>");
  static ExperimentConfig load(const std::filesystem::path& file);
  std::string to_json_text() const;  // lossless round trip

  // Dotted-path override with a JSON literal value, e.g. ("loss.lambda", "0.5").
  void override_value(const std::string& dotted_key, const std::string& value_json);
};

// Runs pretrain/train/evaluate for every seed, writing one directory of
// artifacts per (target, loss, seed): report.json, metrics.csv, phi.ckpt,
// psi.ckpt, samples.csv, hist_<dim>.csv, timing.json.  Returns the summary
// JSON (one entry per seed).  A lock file serializes runs per out_dir.
std::string run_experiment(const ExperimentConfig& cfg);

// Builds loss-kind x target tables of -log Z, mean abs error, stddev rel
// error, ESS and entropic W2 from persisted report.json files; emits CSV.
std::string compare_reports(const std::vector<std::filesystem::path>& report_paths);

std::string report_to_json(const RunReport& report, const ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace sbs
