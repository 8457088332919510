#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "unifier/encoder.hpp"
#include "unifier/objectives.hpp"
#include "unifier/repr.hpp"
#include "unifier/util.hpp"

namespace fixtures {

using namespace unifier;

inline EncoderConfig toy_config(std::size_t vocab = 64, std::size_t embed = 16) {
  EncoderConfig c;
  c.vocab_size = vocab;
  c.embed_dim = embed;
  c.layers_ctx = 2;
  c.layers_den = 2;
  c.layers_lex = 1;
  c.heads = 4;
  c.max_seq_len = 32;
  return c;
}

/// Random init with every parameter, biases and gains included, nudged away
/// from its default so no gradient path is trivially zero.
inline Model random_model(const EncoderConfig& cfg, std::uint64_t seed, bool gate = false,
                          double jitter = 0.05) {
  Model m(cfg, seed, gate);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (auto& p : m.named()) {
    for (double& v : p.tensor->mutable_data()) v += jitter * standard_normal(rng);
  }
  return m;
}

inline std::vector<TermId> random_tokens(std::mt19937_64& rng, std::size_t vocab, std::size_t len) {
  std::vector<TermId> t(len);
  for (auto& x : t) x = static_cast<TermId>(4 + uniform_index(rng, vocab - 4));
  return t;
}

inline Document random_doc(std::mt19937_64& rng, const std::string& id, std::size_t vocab,
                           std::size_t min_len, std::size_t max_len) {
  return {id, random_tokens(rng, vocab, min_len + uniform_index(rng, max_len - min_len + 1))};
}

inline std::vector<TrainBatch> random_batches(std::size_t vocab, std::size_t queries, std::size_t m,
                                              std::uint64_t seed, bool teacher = false) {
  std::mt19937_64 rng(seed);
  std::vector<TrainBatch> out;
  for (std::size_t qi = 0; qi < queries; ++qi) {
    TrainBatch b;
    b.query = random_doc(rng, "q" + std::to_string(qi), vocab, 3, 5);
    b.positive = random_doc(rng, "p" + std::to_string(qi), vocab, 5, 8);
    for (std::size_t k = 0; k < m; ++k) {
      b.negatives.push_back(random_doc(rng, "n" + std::to_string(qi) + "_" + std::to_string(k), vocab, 5, 8));
    }
    if (teacher) {
      std::vector<double> s(m + 1);
      for (auto& x : s) x = 2.0 * standard_normal(rng);
      b.teacher_scores = s;
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<Document> random_corpus(std::size_t n, std::size_t vocab, std::uint64_t seed,
                                           const std::string& prefix = "d") {
  std::mt19937_64 rng(seed);
  std::vector<Document> docs;
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%05zu", prefix.c_str(), i);
    docs.push_back(random_doc(rng, buf, vocab, 6, 14));
  }
  return docs;
}

/// Fresh directory below the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("unifier_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
