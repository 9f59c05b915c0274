#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "miasrec/evaluation.hpp"
#include "miasrec/model.hpp"
#include "miasrec/sessions.hpp"
#include "miasrec/training.hpp"

namespace miasrec::cli {

inline constexpr int kReportFormatVersion = 1;
inline constexpr int kHistoryFormatVersion = 1;

// Everything a run needs. Serialised as one flat JSON object; every key is
// optional in a config file and command-line flags override file values.
struct RunConfig {
  // Data.
  std::string raw_log;
  std::string work_dir = "miasrec-run";
  std::string delimiter = "\t";
  bool has_header = true;
  std::string session_column = "0";
  std::string item_column = "1";
  std::string time_column = "2";
  std::string time_format = "auto";  // auto | seconds | date
  int min_item_support = 5;
  int min_session_len = 2;
  bool iterate_filters = false;

  // Model.
  int dim = 100;
  int max_len = 50;
  int num_layers = 1;
  int num_heads = 2;
  double alpha = 1.5;
  double beta = 0.7;
  double tau = 0.07;
  double dropout = 0.1;
  bool use_position_embedding = true;
  bool use_frequency_embedding = true;
  std::string intent_mode = "entmax";

  // Training.
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::size_t batch_size = 1024;
  double learning_rate = 1e-3;
  int max_epochs = 200;
  int patience = 3;

  // Evaluation.
  std::string cutoffs = "5,10,20";
  std::string buckets = "1,2,3-4,5-6,7-9,10+";

  // Sweep grids.
  std::vector<double> sweep_beta = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<double> sweep_tau = {0.01, 0.05, 0.07, 0.1, 0.5, 1.0};
  std::vector<double> sweep_dropout = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};

  nlohmann::json to_json() const;
  // Starts from `base` and applies the keys present in `j`. Unknown keys are
  // rejected.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base);
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  // Throws ConfigError on invalid values.
  void validate() const;

  LogFormat log_format() const;
  PreprocessOptions preprocess_options() const;
  ModelConfig model_config(int num_items) const;
  TrainOptions train_options() const;
  EvaluationOptions evaluation_options() const;

  std::filesystem::path corpus_path(const std::string& split) const;
  std::filesystem::path run_dir(std::uint64_t seed) const;
  std::filesystem::path report_path(const std::string& split) const;
  std::filesystem::path sweep_dir() const;
};

struct SplitStats {
  std::string name;
  std::size_t sessions = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
  double average_length() const;
};

std::vector<SplitStats> corpus_statistics(const CorpusSplit& split, const SessionCorpus& whole);

// Subcommands. Each writes its artifacts below `work_dir` and a human
// readable summary to `out`; failures are thrown as miasrec::Error.
void cmd_preprocess(const RunConfig& config, std::ostream& out);

struct TrainControl {
  bool resume = false;
  // Stop after this many epochs in this invocation (0 = run to completion).
  int stop_after = 0;
};
void cmd_train(const RunConfig& config, const TrainControl& control, std::ostream& out);

// Returns the written report.
nlohmann::json cmd_evaluate(const RunConfig& config, const std::string& split, std::ostream& out);

struct SweepRow {
  double beta = 0.0;
  double tau = 0.0;
  double dropout = 0.0;
  double val_mrr20 = 0.0;
  double val_recall20 = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::size_t best = 0;
  nlohmann::json to_json() const;
};

SweepResult cmd_sweep(const RunConfig& config, std::ostream& out);

// Index of the row with the highest val MRR@20; the first one on ties.
std::size_t best_row(const std::vector<SweepRow>& rows);

// Parses arguments, runs the subcommand, and maps errors to exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace miasrec::cli
