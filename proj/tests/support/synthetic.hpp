#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "miasrec/model.hpp"
#include "miasrec/sessions.hpp"

namespace miasrec::testing {

// Sessions that walk a fixed random permutation of the items: the next item
// is a function of the current one.
inline SessionCorpus deterministic_transition_corpus(int num_sessions, int vocab, std::uint64_t seed,
                                                     int min_len = 4, int max_len = 10) {
  std::mt19937_64 rng(seed);
  std::vector<ItemIndex> successor(static_cast<std::size_t>(vocab));
  std::iota(successor.begin(), successor.end(), 1);
  std::shuffle(successor.begin(), successor.end(), rng);
  SessionCorpus corpus;
  for (int i = 1; i <= vocab; ++i) corpus.vocabulary.add("item" + std::to_string(i));
  std::uniform_int_distribution<int> start(1, vocab);
  std::uniform_int_distribution<int> length(min_len, max_len);
  for (int s = 0; s < num_sessions; ++s) {
    Session session{"s" + std::to_string(s), {}, 1000 + s};
    ItemIndex item = start(rng);
    const int len = length(rng);
    for (int t = 0; t < len; ++t) {
      session.items.push_back(item);
      item = successor[static_cast<std::size_t>(item - 1)];
    }
    corpus.sessions.push_back(std::move(session));
  }
  return corpus;
}

// Uniformly random sessions over `vocab` items.
inline SessionCorpus random_corpus(int num_sessions, int vocab, std::uint64_t seed, int min_len = 2, int max_len = 12) {
  std::mt19937_64 rng(seed);
  SessionCorpus corpus;
  for (int i = 1; i <= vocab; ++i) corpus.vocabulary.add("item" + std::to_string(i));
  std::uniform_int_distribution<int> item(1, vocab);
  std::uniform_int_distribution<int> length(min_len, max_len);
  for (int s = 0; s < num_sessions; ++s) {
    Session session{"s" + std::to_string(s), {}, 1000 + s};
    const int len = length(rng);
    for (int t = 0; t < len; ++t) session.items.push_back(item(rng));
    corpus.sessions.push_back(std::move(session));
  }
  return corpus;
}

inline ModelConfig small_config(int num_items, int dim = 8, int heads = 2) {
  ModelConfig c;
  c.num_items = num_items;
  c.dim = dim;
  c.num_heads = heads;
  c.max_len = 50;
  c.dropout = 0.0;
  c.tau = 0.5;
  c.beta = 0.4;
  return c;
}

// Parameters with larger random entries than the default initialisation so
// that every code path carries signal.
template <typename Scalar>
ModelParameters<Scalar> random_parameters(const ModelConfig& config, std::uint64_t seed, double scale = 0.5) {
  auto p = ModelParameters<Scalar>::zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  p.for_each_tensor([&](const std::string& name, auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(normal(rng));
    if (name.find("norm") != std::string::npos && name.find("scale") != std::string::npos) t.array() += Scalar(1);
  });
  return p;
}

}  // namespace miasrec::testing
