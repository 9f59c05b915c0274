#include "miasrec/corpus_io.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "miasrec/errors.hpp"

namespace miasrec {
namespace {

constexpr const char* kMagic = "miasrec-corpus";

struct LineReader {
  std::istream& in;
  std::size_t line_number = 0;

  std::string next(const char* what) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(line_number + 1, std::string("unexpected end of file, expected ") + what);
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  }
};

std::pair<std::string, std::string> split_key(const std::string& line, std::size_t line_number) {
  const auto tab = line.find('\t');
  if (tab == std::string::npos) throw ParseError(line_number, "expected '<key>\\t<value>'");
  return {line.substr(0, tab), line.substr(tab + 1)};
}

std::size_t parse_count(const std::string& s, std::size_t line_number) {
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ParseError(line_number, "bad count '" + s + "'");
  return value;
}

}  // namespace

void write_corpus(std::ostream& out, const SessionCorpus& corpus, const nlohmann::json& echo) {
  out << kMagic << '\t' << kCorpusFormatVersion << '\n';
  out << "config\t" << echo.dump() << '\n';
  out << "items\t" << corpus.num_items() << '\n';
  for (std::size_t i = 0; i < corpus.num_items(); ++i) {
    out << (i + 1) << '\t' << corpus.vocabulary.ids()[i] << '\n';
  }
  out << "sessions\t" << corpus.sessions.size() << '\n';
  for (const auto& s : corpus.sessions) {
    out << s.id << '\t' << s.end_time << '\t';
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      if (i) out << ' ';
      out << s.items[i];
    }
    out << '\n';
  }
}

StoredCorpus read_corpus(std::istream& in) {
  LineReader reader{in};
  StoredCorpus stored;

  auto [magic, version] = split_key(reader.next("header"), reader.line_number);
  if (magic != kMagic) throw ParseError(reader.line_number, "not a corpus file");
  if (parse_count(version, reader.line_number) != static_cast<std::size_t>(kCorpusFormatVersion)) {
    throw ParseError(reader.line_number, "unsupported corpus format version " + version);
  }

  auto [config_key, config] = split_key(reader.next("config"), reader.line_number);
  if (config_key != "config") throw ParseError(reader.line_number, "expected config line");
  try {
    stored.echo = nlohmann::json::parse(config);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(reader.line_number, e.what());
  }

  auto [items_key, items_count] = split_key(reader.next("items"), reader.line_number);
  if (items_key != "items") throw ParseError(reader.line_number, "expected items line");
  const auto n = parse_count(items_count, reader.line_number);
  for (std::size_t i = 0; i < n; ++i) {
    auto [index, id] = split_key(reader.next("item"), reader.line_number);
    if (parse_count(index, reader.line_number) != i + 1) throw ParseError(reader.line_number, "item indices must be 1..n in order");
    if (stored.corpus.vocabulary.add(id) != static_cast<ItemIndex>(i + 1)) {
      throw ParseError(reader.line_number, "duplicate item id '" + id + "'");
    }
  }

  auto [sessions_key, sessions_count] = split_key(reader.next("sessions"), reader.line_number);
  if (sessions_key != "sessions") throw ParseError(reader.line_number, "expected sessions line");
  const auto m = parse_count(sessions_count, reader.line_number);
  stored.corpus.sessions.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto line = reader.next("session");
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw ParseError(reader.line_number, "expected '<id>\\t<end time>\\t<items>'");
    Session s;
    s.id = line.substr(0, t1);
    const auto end_time = line.substr(t1 + 1, t2 - t1 - 1);
    auto [ptr, ec] = std::from_chars(end_time.data(), end_time.data() + end_time.size(), s.end_time);
    if (ec != std::errc() || ptr != end_time.data() + end_time.size()) throw ParseError(reader.line_number, "bad end time");
    std::istringstream items(line.substr(t2 + 1));
    ItemIndex item = 0;
    while (items >> item) {
      if (item < 1 || static_cast<std::size_t>(item) > n) throw ParseError(reader.line_number, "item index out of range");
      s.items.push_back(item);
    }
    if (!items.eof()) throw ParseError(reader.line_number, "bad item list");
    stored.corpus.sessions.push_back(std::move(s));
  }
  return stored;
}

void save_corpus(const std::filesystem::path& path, const SessionCorpus& corpus, const nlohmann::json& echo) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus file " + path.string());
  write_corpus(out, corpus, echo);
  if (!out) throw DataError("failed writing corpus file " + path.string());
}

StoredCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file " + path.string());
  return read_corpus(in);
}

}  // namespace miasrec
