#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "miasrec/types.hpp"

namespace miasrec {

struct Event {
  std::string session_id;
  std::string item_id;
  Timestamp timestamp = 0;
};

struct EventLog {
  std::vector<Event> rows;
};

// A column is addressed either by zero-based index or by header name.
using ColumnRef = std::variant<std::size_t, std::string>;

enum class TimeFormat {
  kAuto,     // integer seconds, or YYYY-MM-DD mapped to midnight UTC
  kSeconds,
  kDate,
};

struct LogFormat {
  char delimiter = '\t';
  bool has_header = true;
  ColumnRef session_column = std::size_t{0};
  ColumnRef item_column = std::size_t{1};
  ColumnRef time_column = std::size_t{2};
  TimeFormat time_format = TimeFormat::kAuto;
};

// Parses one timestamp field. Throws std::invalid_argument on malformed input.
Timestamp parse_timestamp(std::string_view field, TimeFormat format);

EventLog parse_events(std::istream& in, const LogFormat& format);
EventLog load_events(const std::filesystem::path& path, const LogFormat& format);

class Vocabulary {
 public:
  // Returns the existing index for `id`, or appends it.
  ItemIndex add(const std::string& id);
  // 0 when absent.
  ItemIndex find(const std::string& id) const;
  const std::string& id(ItemIndex index) const { return ids_.at(static_cast<std::size_t>(index - 1)); }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

  bool operator==(const Vocabulary& other) const { return ids_ == other.ids_; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, ItemIndex> index_;
};

struct Session {
  std::string id;
  std::vector<ItemIndex> items;
  Timestamp end_time = 0;

  bool operator==(const Session&) const = default;
};

struct SessionCorpus {
  std::vector<Session> sessions;
  Vocabulary vocabulary;

  std::size_t num_items() const { return vocabulary.size(); }
  std::size_t num_interactions() const;
  bool operator==(const SessionCorpus&) const = default;
};

struct PreprocessOptions {
  int min_item_support = 5;
  int min_session_len = 2;
  // Repeat both filters until nothing changes. Off by default: one pass of
  // item filtering followed by one pass of session filtering.
  bool iterate_to_fixed_point = false;
};

SessionCorpus preprocess(const EventLog& log, const PreprocessOptions& options = {});

// Flattens a corpus back into events. Every event of a session carries the
// session end time, so re-sorting preserves the item order.
EventLog to_event_log(const SessionCorpus& corpus);

struct SplitRatios {
  int train = 8;
  int val = 1;
  int test = 1;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

SplitSizes split_sizes(std::size_t session_count, const SplitRatios& ratios = {});

struct CorpusSplit {
  SessionCorpus train;
  SessionCorpus val;
  SessionCorpus test;
};

// The training portion is re-indexed onto the items it contains; validation
// and test sessions share that vocabulary and lose any item it lacks.
CorpusSplit chronological_split(const SessionCorpus& corpus, const SplitRatios& ratios = {});

struct PrefixExample {
  std::vector<ItemIndex> prefix;
  ItemIndex target = 0;
  // Reversed positions: the last prefix item has position 1.
  std::vector<int> positions;
  // Occurrences of each prefix item within the whole prefix.
  std::vector<int> frequencies;
  // Length of the revealed prefix before truncation to max_len.
  int revealed_length = 0;
};

PrefixExample make_prefix_example(std::span<const ItemIndex> revealed, ItemIndex target,
                                  int max_len = 50);

std::vector<PrefixExample> expand_prefixes(const SessionCorpus& corpus, int max_len = 50);

// Content hash of sessions and vocabulary, hex encoded.
std::string corpus_fingerprint(const SessionCorpus& corpus);

}  // namespace miasrec
