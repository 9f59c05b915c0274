#include "miasrec/sessions.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string_view>

#include "miasrec/errors.hpp"

namespace miasrec {
namespace {

std::vector<std::string_view> split_fields(std::string_view line, char delimiter) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delimiter, start);
    auto field = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    while (!field.empty() && (field.front() == ' ')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ')) field.remove_suffix(1);
    if (field.size() >= 2 && field.front() == '"' && field.back() == '"') {
      field = field.substr(1, field.size() - 2);
    }
    fields.push_back(field);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return fields;
}

bool parse_integer(std::string_view field, Timestamp& out) {
  if (field.empty()) return false;
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_date(std::string_view field, Timestamp& out) {
  // YYYY-MM-DD
  if (field.size() != 10 || field[4] != '-' || field[7] != '-') return false;
  int year = 0;
  unsigned month = 0;
  unsigned day = 0;
  auto parse_part = [](std::string_view s, auto& value) {
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    return ec == std::errc() && ptr == s.data() + s.size();
  };
  if (!parse_part(field.substr(0, 4), year) || !parse_part(field.substr(5, 2), month) ||
      !parse_part(field.substr(8, 2), day)) {
    return false;
  }
  const std::chrono::year_month_day ymd{std::chrono::year{year}, std::chrono::month{month},
                                        std::chrono::day{day}};
  if (!ymd.ok()) return false;
  const std::chrono::sys_days days{ymd};
  out = static_cast<Timestamp>(days.time_since_epoch().count()) * 86400;
  return true;
}

std::size_t resolve_column(const ColumnRef& ref, const std::vector<std::string_view>& header,
                           const char* role) {
  if (const auto* index = std::get_if<std::size_t>(&ref)) return *index;
  const auto& name = std::get<std::string>(ref);
  if (header.empty()) {
    throw ConfigError(std::string(role) + " column '" + name +
                      "' is addressed by name but the log has no header row");
  }
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) {
    throw ConfigError(std::string(role) + " column '" + name + "' not found in header");
  }
  return static_cast<std::size_t>(it - header.begin());
}

struct GroupedSession {
  std::string id;
  std::vector<std::string> items;
  Timestamp end_time = 0;
};

std::vector<GroupedSession> group_sessions(const EventLog& log) {
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<std::vector<const Event*>> members;
  std::vector<std::string> ids;
  for (const auto& event : log.rows) {
    auto [it, inserted] = slot.try_emplace(event.session_id, members.size());
    if (inserted) {
      members.emplace_back();
      ids.push_back(event.session_id);
    }
    members[it->second].push_back(&event);
  }
  std::vector<GroupedSession> sessions(members.size());
  for (std::size_t s = 0; s < members.size(); ++s) {
    auto& events = members[s];
    std::stable_sort(events.begin(), events.end(),
                     [](const Event* a, const Event* b) { return a->timestamp < b->timestamp; });
    sessions[s].id = ids[s];
    sessions[s].end_time = events.back()->timestamp;
    sessions[s].items.reserve(events.size());
    for (const auto* e : events) sessions[s].items.push_back(e->item_id);
  }
  return sessions;
}

// One round of item-support filtering followed by session-length filtering.
// Returns true when anything was removed.
bool filter_once(std::vector<GroupedSession>& sessions, const PreprocessOptions& options) {
  std::unordered_map<std::string, int> support;
  for (const auto& s : sessions)
    for (const auto& item : s.items) ++support[item];

  bool changed = false;
  std::vector<GroupedSession> kept;
  kept.reserve(sessions.size());
  for (auto& s : sessions) {
    const auto before = s.items.size();
    std::erase_if(s.items, [&](const std::string& item) {
      return support[item] < options.min_item_support;
    });
    changed |= s.items.size() != before;
    if (static_cast<int>(s.items.size()) >= options.min_session_len) {
      kept.push_back(std::move(s));
    } else {
      changed = true;
    }
  }
  sessions = std::move(kept);
  return changed;
}

bool session_order(const Session& a, const Session& b) {
  if (a.end_time != b.end_time) return a.end_time < b.end_time;
  return a.id < b.id;
}

}  // namespace

Timestamp parse_timestamp(std::string_view field, TimeFormat format) {
  Timestamp value = 0;
  switch (format) {
    case TimeFormat::kSeconds:
      if (parse_integer(field, value)) return value;
      break;
    case TimeFormat::kDate:
      if (parse_date(field, value)) return value;
      break;
    case TimeFormat::kAuto:
      if (parse_integer(field, value) || parse_date(field, value)) return value;
      break;
  }
  throw std::invalid_argument("malformed timestamp '" + std::string(field) + "'");
}

EventLog parse_events(std::istream& in, const LogFormat& format) {
  EventLog log;
  std::string line;
  std::size_t line_number = 0;
  std::size_t session_col = 0;
  std::size_t item_col = 0;
  std::size_t time_col = 0;
  bool resolved = false;

  auto resolve = [&](const std::vector<std::string_view>& header) {
    session_col = resolve_column(format.session_column, header, "session");
    item_col = resolve_column(format.item_column, header, "item");
    time_col = resolve_column(format.time_column, header, "timestamp");
    resolved = true;
  };

  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line, format.delimiter);
    if (!resolved) {
      if (format.has_header) {
        resolve(fields);
        continue;
      }
      resolve({});
    }
    const auto needed = std::max({session_col, item_col, time_col}) + 1;
    if (fields.size() < needed) {
      throw ParseError(line_number, "expected at least " + std::to_string(needed) + " columns, found " +
                                        std::to_string(fields.size()));
    }
    Event event;
    event.session_id = std::string(fields[session_col]);
    event.item_id = std::string(fields[item_col]);
    if (event.session_id.empty() || event.item_id.empty()) {
      throw ParseError(line_number, "empty session or item identifier");
    }
    try {
      event.timestamp = parse_timestamp(fields[time_col], format.time_format);
    } catch (const std::invalid_argument& e) {
      throw ParseError(line_number, e.what());
    }
    log.rows.push_back(std::move(event));
  }
  return log;
}

EventLog load_events(const std::filesystem::path& path, const LogFormat& format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open event log " + path.string());
  return parse_events(in, format);
}

ItemIndex Vocabulary::add(const std::string& id) {
  auto [it, inserted] = index_.try_emplace(id, static_cast<ItemIndex>(ids_.size() + 1));
  if (inserted) ids_.push_back(id);
  return it->second;
}

ItemIndex Vocabulary::find(const std::string& id) const {
  const auto it = index_.find(id);
  return it == index_.end() ? 0 : it->second;
}

std::size_t SessionCorpus::num_interactions() const {
  return std::accumulate(sessions.begin(), sessions.end(), std::size_t{0},
                         [](std::size_t acc, const Session& s) { return acc + s.items.size(); });
}

SessionCorpus preprocess(const EventLog& log, const PreprocessOptions& options) {
  if (log.rows.empty()) throw DataError("event log is empty");
  auto grouped = group_sessions(log);
  if (options.iterate_to_fixed_point) {
    while (filter_once(grouped, options)) {
    }
  } else {
    filter_once(grouped, options);
  }
  if (grouped.empty()) {
    throw DataError("empty corpus: no session survives preprocessing");
  }

  std::vector<std::size_t> order(grouped.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (grouped[a].end_time != grouped[b].end_time) return grouped[a].end_time < grouped[b].end_time;
    return grouped[a].id < grouped[b].id;
  });

  SessionCorpus corpus;
  corpus.sessions.reserve(grouped.size());
  for (const auto idx : order) {
    auto& g = grouped[idx];
    Session session{g.id, {}, g.end_time};
    session.items.reserve(g.items.size());
    for (const auto& item : g.items) session.items.push_back(corpus.vocabulary.add(item));
    corpus.sessions.push_back(std::move(session));
  }
  return corpus;
}

EventLog to_event_log(const SessionCorpus& corpus) {
  EventLog log;
  log.rows.reserve(corpus.num_interactions());
  for (const auto& s : corpus.sessions)
    for (const auto item : s.items) log.rows.push_back({s.id, corpus.vocabulary.id(item), s.end_time});
  return log;
}

SplitSizes split_sizes(std::size_t session_count, const SplitRatios& ratios) {
  if (ratios.train <= 0 || ratios.val < 0 || ratios.test < 0) {
    throw ConfigError("split ratios must be positive");
  }
  const auto total = static_cast<std::size_t>(ratios.train + ratios.val + ratios.test);
  SplitSizes sizes;
  sizes.train = session_count * static_cast<std::size_t>(ratios.train) / total;
  sizes.val = session_count * static_cast<std::size_t>(ratios.val) / total;
  sizes.test = session_count - sizes.train - sizes.val;
  return sizes;
}

CorpusSplit chronological_split(const SessionCorpus& corpus, const SplitRatios& ratios) {
  const auto n = corpus.sessions.size();
  if (n < 10) {
    throw DataError("chronological split needs at least 10 sessions, corpus has " + std::to_string(n));
  }
  if (!std::is_sorted(corpus.sessions.begin(), corpus.sessions.end(), session_order)) {
    throw DataError("corpus sessions are not ordered by end time");
  }
  const auto sizes = split_sizes(n, ratios);

  CorpusSplit split;
  for (std::size_t i = 0; i < sizes.train; ++i) {
    const auto& s = corpus.sessions[i];
    Session mapped{s.id, {}, s.end_time};
    mapped.items.reserve(s.items.size());
    for (const auto item : s.items) mapped.items.push_back(split.train.vocabulary.add(corpus.vocabulary.id(item)));
    split.train.sessions.push_back(std::move(mapped));
  }

  auto remap = [&](std::size_t first, std::size_t count, SessionCorpus& out) {
    out.vocabulary = split.train.vocabulary;
    for (std::size_t i = first; i < first + count; ++i) {
      const auto& s = corpus.sessions[i];
      Session mapped{s.id, {}, s.end_time};
      for (const auto item : s.items) {
        if (const auto idx = split.train.vocabulary.find(corpus.vocabulary.id(item)); idx != 0) {
          mapped.items.push_back(idx);
        }
      }
      if (mapped.items.size() >= 2) out.sessions.push_back(std::move(mapped));
    }
  };
  remap(sizes.train, sizes.val, split.val);
  remap(sizes.train + sizes.val, sizes.test, split.test);
  return split;
}

PrefixExample make_prefix_example(std::span<const ItemIndex> revealed, ItemIndex target, int max_len) {
  if (revealed.empty()) throw std::invalid_argument("prefix must contain at least one item");
  if (max_len < 1) throw std::invalid_argument("max_len must be positive");
  PrefixExample example;
  example.revealed_length = static_cast<int>(revealed.size());
  const auto keep = std::min(revealed.size(), static_cast<std::size_t>(max_len));
  example.prefix.assign(revealed.end() - static_cast<std::ptrdiff_t>(keep), revealed.end());
  example.target = target;

  const auto len = static_cast<int>(example.prefix.size());
  std::unordered_map<ItemIndex, int> counts;
  for (const auto item : example.prefix) ++counts[item];
  example.positions.resize(keep);
  example.frequencies.resize(keep);
  for (int i = 0; i < len; ++i) {
    example.positions[static_cast<std::size_t>(i)] = len - i;
    example.frequencies[static_cast<std::size_t>(i)] = counts[example.prefix[static_cast<std::size_t>(i)]];
  }
  return example;
}

std::vector<PrefixExample> expand_prefixes(const SessionCorpus& corpus, int max_len) {
  std::vector<PrefixExample> examples;
  for (const auto& s : corpus.sessions) {
    const std::span<const ItemIndex> items(s.items);
    for (std::size_t i = 1; i < items.size(); ++i) {
      examples.push_back(make_prefix_example(items.first(i), items[i], max_len));
    }
  }
  return examples;
}

std::string corpus_fingerprint(const SessionCorpus& corpus) {
  std::uint64_t hash = 1469598103934665603ULL;
  auto mix = [&](std::string_view bytes) {
    for (const unsigned char c : bytes) {
      hash ^= c;
      hash *= 1099511628211ULL;
    }
    hash ^= 0xff;
    hash *= 1099511628211ULL;
  };
  for (const auto& id : corpus.vocabulary.ids()) mix(id);
  for (const auto& s : corpus.sessions) {
    mix(s.id);
    mix(std::to_string(s.end_time));
    for (const auto item : s.items) mix(std::to_string(item));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

}  // namespace miasrec
