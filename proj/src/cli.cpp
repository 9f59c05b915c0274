#include "miasrec/cli.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "miasrec/checkpoint.hpp"
#include "miasrec/corpus_io.hpp"
#include "miasrec/errors.hpp"

namespace miasrec::cli {
namespace {

#define MIASREC_RUN_FIELDS(X)                                                                                    \
  X(raw_log) X(work_dir) X(delimiter) X(has_header) X(session_column) X(item_column) X(time_column)               \
  X(time_format) X(min_item_support) X(min_session_len) X(iterate_filters) X(dim) X(max_len) X(num_layers)       \
  X(num_heads) X(alpha) X(beta) X(tau) X(dropout) X(use_position_embedding) X(use_frequency_embedding)            \
  X(intent_mode) X(seeds) X(batch_size) X(learning_rate) X(max_epochs) X(patience) X(cutoffs) X(buckets)          \
  X(sweep_beta) X(sweep_tau) X(sweep_dropout)

ColumnRef column_ref(const std::string& text) {
  if (!text.empty() && std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isdigit(c); })) {
    return static_cast<std::size_t>(std::stoul(text));
  }
  return text;
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw DataError("cannot write " + tmp.string());
    file << content;
    if (!file) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json data_echo(const RunConfig& config) {
  const auto all = config.to_json();
  nlohmann::json echo;
  for (const char* key : {"raw_log", "delimiter", "has_header", "session_column", "item_column", "time_column",
                          "time_format", "min_item_support", "min_session_len", "iterate_filters"}) {
    echo[key] = all.at(key);
  }
  return echo;
}

StoredCorpus load_split(const RunConfig& config, const std::string& split) {
  const auto path = config.corpus_path(split);
  if (!std::filesystem::exists(path)) {
    throw DataError("missing corpus file " + path.string() + " (run preprocess first)");
  }
  return load_corpus(path);
}

void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ostringstream lines;
  for (const auto& record : history) {
    auto j = record.to_json();
    j["version"] = kHistoryFormatVersion;
    lines << j.dump() << '\n';
  }
  write_atomically(path, lines.str());
}

std::string fixed(double value, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << value;
  return s.str();
}

void check_split_name(const std::string& split) {
  if (split != "train" && split != "val" && split != "test") {
    throw ConfigError("unknown split '" + split + "' (expected train, val, or test)");
  }
}

}  // namespace

// --- RunConfig -----------------------------------------------------------------

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
#define X(name) j[#name] = name;
  MIASREC_RUN_FIELDS(X)
#undef X
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const RunConfig& base) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  RunConfig c = base;
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    try {
#define X(name)                                \
  if (key == #name) {                          \
    c.name = value.get<decltype(c.name)>();    \
    known = true;                              \
  }
      MIASREC_RUN_FIELDS(X)
#undef X
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
  return c;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) { return from_json(j, RunConfig{}); }

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::validate() const {
  if (delimiter.size() != 1 && delimiter != "tab") throw ConfigError("delimiter must be a single character or 'tab'");
  if (time_format != "auto" && time_format != "seconds" && time_format != "date") {
    throw ConfigError("time_format must be auto, seconds, or date");
  }
  if (min_item_support < 1) throw ConfigError("min_item_support must be positive");
  if (min_session_len < 2) throw ConfigError("min_session_len must be at least 2");
  model_config(1).validate();
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
  if (patience < 1) throw ConfigError("patience must be positive");
  evaluation_options();
  for (const double b : sweep_beta)
    if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("sweep_beta values must lie in [0, 1]");
  for (const double t : sweep_tau)
    if (!(t > 0.0)) throw ConfigError("sweep_tau values must be positive");
  for (const double d : sweep_dropout)
    if (!(d >= 0.0 && d < 1.0)) throw ConfigError("sweep_dropout values must lie in [0, 1)");
}

LogFormat RunConfig::log_format() const {
  LogFormat f;
  f.delimiter = delimiter == "tab" ? '\t' : delimiter[0];
  f.has_header = has_header;
  f.session_column = column_ref(session_column);
  f.item_column = column_ref(item_column);
  f.time_column = column_ref(time_column);
  f.time_format = time_format == "seconds" ? TimeFormat::kSeconds
                  : time_format == "date"  ? TimeFormat::kDate
                                           : TimeFormat::kAuto;
  return f;
}

PreprocessOptions RunConfig::preprocess_options() const {
  return {min_item_support, min_session_len, iterate_filters};
}

ModelConfig RunConfig::model_config(int num_items) const {
  ModelConfig m;
  m.num_items = num_items;
  m.dim = dim;
  m.max_len = max_len;
  m.num_layers = num_layers;
  m.num_heads = num_heads;
  m.alpha = alpha;
  m.beta = beta;
  m.tau = tau;
  m.dropout = dropout;
  m.use_position_embedding = use_position_embedding;
  m.use_frequency_embedding = use_frequency_embedding;
  m.intent_mode = IntentMode::parse(intent_mode);
  return m;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions t;
  t.batch_size = batch_size;
  t.learning_rate = learning_rate;
  t.max_epochs = max_epochs;
  t.patience = patience;
  return t;
}

EvaluationOptions RunConfig::evaluation_options() const {
  return {parse_cutoffs(cutoffs), parse_buckets(buckets)};
}

std::filesystem::path RunConfig::corpus_path(const std::string& split) const {
  return std::filesystem::path(work_dir) / "corpus" / (split + ".corpus");
}

std::filesystem::path RunConfig::run_dir(std::uint64_t seed) const {
  return std::filesystem::path(work_dir) / "runs" / ("seed-" + std::to_string(seed));
}

std::filesystem::path RunConfig::report_path(const std::string& split) const {
  return std::filesystem::path(work_dir) / "reports" / ("metrics-" + split + ".json");
}

std::filesystem::path RunConfig::sweep_dir() const { return std::filesystem::path(work_dir) / "sweep"; }

// --- preprocess -------------------------------------------------------------------

double SplitStats::average_length() const {
  return sessions == 0 ? 0.0 : static_cast<double>(interactions) / static_cast<double>(sessions);
}

std::vector<SplitStats> corpus_statistics(const CorpusSplit& split, const SessionCorpus& whole) {
  auto stats = [](std::string name, const SessionCorpus& c) {
    return SplitStats{std::move(name), c.sessions.size(), c.num_items(), c.num_interactions()};
  };
  return {stats("all", whole), stats("train", split.train), stats("val", split.val), stats("test", split.test)};
}

void cmd_preprocess(const RunConfig& config, std::ostream& out) {
  config.validate();
  if (config.raw_log.empty()) throw ConfigError("no raw log given (set raw_log or pass --log)");
  if (!std::filesystem::exists(config.raw_log)) throw DataError("raw log not found: " + config.raw_log);

  const auto log = load_events(config.raw_log, config.log_format());
  const auto corpus = preprocess(log, config.preprocess_options());
  const auto split = chronological_split(corpus);

  auto echo = data_echo(config);
  std::filesystem::create_directories(config.corpus_path("train").parent_path());
  for (const auto& [name, part] : {std::pair<std::string, const SessionCorpus*>{"train", &split.train},
                                   {"val", &split.val},
                                   {"test", &split.test}}) {
    echo["split"] = name;
    save_corpus(config.corpus_path(name), *part, echo);
  }

  out << "events read: " << log.rows.size() << '\n';
  out << std::left << std::setw(8) << "split" << std::right << std::setw(10) << "sessions" << std::setw(9) << "items"
      << std::setw(14) << "interactions" << std::setw(9) << "avg_len" << '\n';
  for (const auto& s : corpus_statistics(split, corpus)) {
    out << std::left << std::setw(8) << s.name << std::right << std::setw(10) << s.sessions << std::setw(9) << s.items
        << std::setw(14) << s.interactions << std::setw(9) << fixed(s.average_length(), 2) << '\n';
  }
  out << "corpus written to " << (std::filesystem::path(config.work_dir) / "corpus").string() << '\n';
}

// --- train ------------------------------------------------------------------------

void cmd_train(const RunConfig& config, const TrainControl& control, std::ostream& out) {
  config.validate();
  const auto train_corpus = load_split(config, "train").corpus;
  const auto val_corpus = load_split(config, "val").corpus;
  const auto model = config.model_config(static_cast<int>(train_corpus.num_items()));
  const auto options = config.train_options();
  const auto train_examples = expand_prefixes(train_corpus, model.max_len);
  const auto val_examples = expand_prefixes(val_corpus, model.max_len);
  if (train_examples.empty()) throw DataError("training split has no examples");
  if (val_examples.empty()) throw DataError("validation split has no examples");
  const auto fingerprint = corpus_fingerprint(train_corpus);

  for (const auto seed : config.seeds) {
    const auto dir = config.run_dir(seed);
    std::filesystem::create_directories(dir);
    const auto state_path = dir / "state.bin";

    TrainState<float> state;
    if (control.resume && std::filesystem::exists(state_path)) {
      state = load_train_state<float>(state_path, model, options);
      out << "seed " << seed << ": resuming after epoch " << state.epoch() << '\n';
    } else {
      state = initial_state<float>(model, options, seed);
    }

    nlohmann::json echo = config.to_json();
    echo["seed"] = seed;
    echo["train_corpus_fingerprint"] = fingerprint;

    TrainHooks<float> hooks;
    hooks.epoch_budget = control.stop_after;
    hooks.on_epoch_end = [&](const TrainState<float>& s) {
      const auto& r = s.history.back();
      if (s.stopping.last_improved()) save_checkpoint(dir / "best.ckpt", model, s.best_params, echo);
      save_checkpoint(dir / "last.ckpt", model, s.params, echo);
      write_history(dir / "history.jsonl", s.history);
      save_train_state(state_path, s, model, options);
      out << "seed " << seed << " epoch " << r.epoch << " loss " << fixed(r.train_loss) << " val_mrr20 "
          << fixed(r.val_mrr20) << " val_r20 " << fixed(r.val_recall20) << '\n';
    };
    const auto result = train<float>(train_examples, val_examples, model, options, seed, hooks, &state);
    if (state.finished) {
      out << "seed " << seed << ": " << result.history.size() << " epochs, best epoch " << result.best_epoch
          << (result.early_stopped ? " (early stop)" : "") << '\n';
    } else {
      out << "seed " << seed << ": paused after epoch " << state.epoch() << " (resume with --resume)\n";
    }
  }
}

// --- evaluate ---------------------------------------------------------------------

nlohmann::json cmd_evaluate(const RunConfig& config, const std::string& split, std::ostream& out) {
  config.validate();
  check_split_name(split);
  const auto train_corpus = load_split(config, "train").corpus;
  const auto eval_corpus = split == "train" ? train_corpus : load_split(config, split).corpus;
  const auto options = config.evaluation_options();

  std::vector<MetricsReport> reports;
  nlohmann::json per_seed = nlohmann::json::array();
  int max_len = config.max_len;
  for (const auto seed : config.seeds) {
    const auto path = config.run_dir(seed) / "best.ckpt";
    if (!std::filesystem::exists(path)) {
      throw DataError("no checkpoint for seed " + std::to_string(seed) + " at " + path.string() + " (run train first)");
    }
    auto checkpoint = load_checkpoint<float>(path);
    if (checkpoint.config.num_items != static_cast<int>(eval_corpus.num_items())) {
      throw DataError("checkpoint " + path.string() + " has " + std::to_string(checkpoint.config.num_items) +
                      " items but the " + split + " corpus vocabulary has " + std::to_string(eval_corpus.num_items()));
    }
    auto model = checkpoint.config;
    model.beta = config.beta;
    max_len = model.max_len;
    const auto examples = expand_prefixes(eval_corpus, model.max_len);
    reports.push_back(evaluate(checkpoint.params, model, std::span<const PrefixExample>(examples), options));
    per_seed.push_back({{"seed", seed}, {"metrics", reports.back().to_json()}});
  }
  const auto aggregate = aggregate_seeds(reports, config.seeds);
  const auto examples = expand_prefixes(eval_corpus, max_len);
  const auto popularity = evaluate_fixed_scores(popularity_baseline(train_corpus), examples, options);

  nlohmann::json report;
  report["format_version"] = kReportFormatVersion;
  report["kind"] = "miasrec-metrics";
  report["split"] = split;
  report["config"] = config.to_json();
  report["corpus_fingerprint"] = {{"train", corpus_fingerprint(train_corpus)}, {split, corpus_fingerprint(eval_corpus)}};
  report["per_seed"] = per_seed;
  report["aggregate"] = aggregate.to_json();
  report["popularity_baseline"] = popularity.to_json();
  write_atomically(config.report_path(split), report.dump(2) + "\n");

  out << split << " examples: " << aggregate.example_count << ", seeds: " << config.seeds.size() << '\n';
  out << std::left << std::setw(8) << "cutoff" << std::right << std::setw(10) << "recall" << std::setw(10) << "mrr"
      << std::setw(12) << "pop_recall" << std::setw(10) << "pop_mrr" << '\n';
  for (std::size_t c = 0; c < aggregate.cutoffs.size(); ++c) {
    const auto& m = aggregate.overall[c];
    const auto& p = popularity.overall[c];
    out << std::left << std::setw(8) << ("@" + std::to_string(m.cutoff)) << std::right << std::setw(10)
        << fixed(m.recall) << std::setw(10) << fixed(m.mrr) << std::setw(12) << fixed(p.recall) << std::setw(10)
        << fixed(p.mrr) << '\n';
  }
  out << "report written to " << config.report_path(split).string() << '\n';
  return report;
}

// --- sweep ------------------------------------------------------------------------

std::size_t best_row(const std::vector<SweepRow>& rows) {
  if (rows.empty()) throw ConfigError("empty sweep grid");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].val_mrr20 > rows[best].val_mrr20) best = i;
  return best;
}

nlohmann::json SweepResult::to_json() const {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"beta", r.beta}, {"tau", r.tau}, {"dropout", r.dropout}, {"val_mrr20", r.val_mrr20},
                         {"val_r20", r.val_recall20}});
  }
  j["best"] = j["rows"].empty() ? nlohmann::json(nullptr) : j["rows"][best];
  return j;
}

SweepResult cmd_sweep(const RunConfig& config, std::ostream& out) {
  config.validate();
  if (config.sweep_beta.empty() || config.sweep_tau.empty() || config.sweep_dropout.empty()) {
    throw ConfigError("empty sweep grid");
  }
  const auto train_corpus = load_split(config, "train").corpus;
  const auto val_corpus = load_split(config, "val").corpus;
  const auto num_items = static_cast<int>(train_corpus.num_items());
  const auto train_examples = expand_prefixes(train_corpus, config.max_len);
  const auto val_examples = expand_prefixes(val_corpus, config.max_len);
  if (train_examples.empty()) throw DataError("training split has no examples");
  if (val_examples.empty()) throw DataError("validation split has no examples");
  const auto seed = config.seeds.front();
  EvaluationOptions eval;
  eval.cutoffs = {20};

  SweepResult result;
  for (const double tau : config.sweep_tau) {
    for (const double dropout : config.sweep_dropout) {
      auto point = config;
      point.tau = tau;
      point.dropout = dropout;
      const auto model = point.model_config(num_items);
      const auto trained = train<float>(train_examples, val_examples, model, point.train_options(), seed);
      std::ostringstream name;
      name << "tau-" << tau << "_dropout-" << dropout;
      nlohmann::json echo = point.to_json();
      echo["seed"] = seed;
      std::filesystem::create_directories(config.sweep_dir() / name.str());
      save_checkpoint(config.sweep_dir() / name.str() / "best.ckpt", model, trained.best_params, echo);
      // beta only enters at aggregation time, so one trained model serves the whole beta grid.
      for (const double beta : config.sweep_beta) {
        auto scored = model;
        scored.beta = beta;
        const auto report = evaluate(trained.best_params, scored, std::span<const PrefixExample>(val_examples), eval);
        result.rows.push_back({beta, tau, dropout, report.at(20).mrr, report.at(20).recall});
      }
    }
  }
  result.best = best_row(result.rows);

  std::ostringstream table;
  table << "beta\ttau\tdropout\tval_mrr20\tval_r20\n";
  for (const auto& r : result.rows) {
    table << r.beta << '\t' << r.tau << '\t' << r.dropout << '\t' << fixed(r.val_mrr20, 6) << '\t'
          << fixed(r.val_recall20, 6) << '\n';
  }
  write_atomically(config.sweep_dir() / "sweep.tsv", table.str());
  nlohmann::json doc = result.to_json();
  doc["format_version"] = kReportFormatVersion;
  doc["kind"] = "miasrec-sweep";
  doc["config"] = config.to_json();
  doc["seed"] = seed;
  write_atomically(config.sweep_dir() / "sweep.json", doc.dump(2) + "\n");

  out << table.str();
  const auto& b = result.rows[result.best];
  out << "best: beta " << b.beta << " tau " << b.tau << " dropout " << b.dropout << " val_mrr20 " << fixed(b.val_mrr20)
      << '\n';
  return result;
}

// --- argument parsing ---------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Session-based recommendation with multiple sparse intents", "miasrec"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::vector<std::function<void(RunConfig&)>> overrides;
  TrainControl control;
  std::string split = "test";

  // Registers a flag that, when given, overwrites one config field.
  auto value_flag = [&](CLI::App* sub, const std::string& name, auto member, const std::string& help) {
    using Value = std::remove_reference_t<decltype(RunConfig{}.*member)>;
    auto holder = std::make_shared<Value>();
    auto* option = sub->add_option(name, *holder, help);
    if constexpr (std::is_same_v<Value, std::vector<std::uint64_t>> || std::is_same_v<Value, std::vector<double>>) {
      option->delimiter(',');
    }
    overrides.push_back([option, holder, member](RunConfig& c) {
      if (option->count() > 0) c.*member = *holder;
    });
  };
  auto switch_flag = [&](CLI::App* sub, const std::string& name, bool RunConfig::*member, bool value,
                         const std::string& help) {
    auto* option = sub->add_flag(name, help);
    overrides.push_back([option, member, value](RunConfig& c) {
      if (option->count() > 0) c.*member = value;
    });
  };

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON configuration file with flat keys");
    value_flag(sub, "--work-dir", &RunConfig::work_dir, "Directory for corpus files, checkpoints and reports");
    value_flag(sub, "--seed", &RunConfig::seeds, "Seed list, e.g. 1,2,3");
    value_flag(sub, "--beta", &RunConfig::beta, "Max/mean pooling mix in [0, 1]");
    value_flag(sub, "--tau", &RunConfig::tau, "Softmax temperature");
    value_flag(sub, "--dropout", &RunConfig::dropout, "Dropout rate");
    value_flag(sub, "--dim", &RunConfig::dim, "Embedding dimension");
    value_flag(sub, "--intent-mode", &RunConfig::intent_mode, "entmax, mean, or last:k");
    switch_flag(sub, "--no-position-embedding", &RunConfig::use_position_embedding, false, "Drop position embeddings");
    switch_flag(sub, "--no-frequency-embedding", &RunConfig::use_frequency_embedding, false,
                "Drop frequency embeddings");
    value_flag(sub, "--cutoffs", &RunConfig::cutoffs, "Metric cutoffs, e.g. 5,10,20");
    value_flag(sub, "--buckets", &RunConfig::buckets, "Length buckets, e.g. 1,2,3-4,5-6,7-9,10+");
    value_flag(sub, "--batch-size", &RunConfig::batch_size, "Examples per optimizer step");
    value_flag(sub, "--learning-rate", &RunConfig::learning_rate, "Adam step size");
    value_flag(sub, "--max-epochs", &RunConfig::max_epochs, "Epoch cap");
  };

  auto* preprocess_cmd = app.add_subcommand("preprocess", "Sessionise a raw log and write train/val/test corpora");
  common(preprocess_cmd);
  value_flag(preprocess_cmd, "--log", &RunConfig::raw_log, "Raw interaction log");
  value_flag(preprocess_cmd, "--delimiter", &RunConfig::delimiter, "Field delimiter");
  value_flag(preprocess_cmd, "--min-item-support", &RunConfig::min_item_support, "Minimum item occurrences");
  switch_flag(preprocess_cmd, "--iterate-filters", &RunConfig::iterate_filters, true,
              "Repeat item and session filters until stable");

  auto* train_cmd = app.add_subcommand("train", "Train one model per seed");
  common(train_cmd);
  train_cmd->add_flag("--resume", control.resume, "Continue from the saved training state");
  train_cmd->add_option("--stop-after", control.stop_after, "Pause after this many epochs in this invocation")
      ->check(CLI::NonNegativeNumber);

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate the best checkpoint of every seed");
  common(evaluate_cmd);
  evaluate_cmd->add_option("--split", split, "train, val, or test");

  auto* sweep_cmd = app.add_subcommand("sweep", "Grid search over beta, tau and dropout on validation MRR@20");
  common(sweep_cmd);
  value_flag(sweep_cmd, "--sweep-beta", &RunConfig::sweep_beta, "Beta grid");
  value_flag(sweep_cmd, "--sweep-tau", &RunConfig::sweep_tau, "Temperature grid");
  value_flag(sweep_cmd, "--sweep-dropout", &RunConfig::sweep_dropout, "Dropout grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    RunConfig config = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    for (const auto& apply : overrides) apply(config);
    if (preprocess_cmd->parsed()) cmd_preprocess(config, out);
    if (train_cmd->parsed()) cmd_train(config, control, out);
    if (evaluate_cmd->parsed()) cmd_evaluate(config, split, out);
    if (sweep_cmd->parsed()) cmd_sweep(config, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}

}  // namespace miasrec::cli
