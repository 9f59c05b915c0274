#pragma once

#include <filesystem>
#include <iosfwd>

#include "json.hpp"
#include "miasrec/sessions.hpp"

namespace miasrec {

// Text corpus file, version 1:
//
//   miasrec-corpus<TAB>1
//   config<TAB><single-line JSON echo of the producing run>
//   items<TAB><n>
//   <index><TAB><original item id>          (n lines, index 1..n)
//   sessions<TAB><m>
//   <session id><TAB><end time><TAB><space-separated item indices>   (m lines)
//
// Output depends only on the corpus and the echo, so identical inputs give
// byte-identical files.
inline constexpr int kCorpusFormatVersion = 1;

struct StoredCorpus {
  SessionCorpus corpus;
  nlohmann::json echo;
};

void write_corpus(std::ostream& out, const SessionCorpus& corpus, const nlohmann::json& echo);
StoredCorpus read_corpus(std::istream& in);

void save_corpus(const std::filesystem::path& path, const SessionCorpus& corpus,
                 const nlohmann::json& echo);
StoredCorpus load_corpus(const std::filesystem::path& path);

}  // namespace miasrec
