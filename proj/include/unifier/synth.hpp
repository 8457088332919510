#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "unifier/repr.hpp"

namespace unifier {

/// Knobs of the synthetic retrieval task. Every document mixes a few latent
/// topics and carries a handful of entity terms. Queries name one of their
/// positive's entities (lexical evidence) and describe its topics mostly with
/// query-side synonyms that documents rarely use (semantic evidence).
struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t num_docs = 2000;
  std::size_t train_queries = 200;
  std::size_t dev_queries = 50;

  std::size_t topics = 20;
  std::size_t doc_words_per_topic = 8;
  std::size_t query_words_per_topic = 6;
  std::size_t shared_words_per_topic = 0;
  std::size_t entities = 100;
  std::size_t noise_words = 100;

  std::size_t topics_per_doc = 2;
  std::size_t entities_per_doc = 2;
  std::size_t doc_topic_tokens = 14;
  std::size_t doc_noise_tokens = 4;
  std::size_t entities_per_query = 1;
  std::size_t query_topic_tokens = 6;
  std::size_t query_noise_tokens = 1;

  /// Write planted teacher scores for every (train query, doc) pair.
  bool teacher = false;

  void validate() const;
  [[nodiscard]] std::size_t vocab_size() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

/// Reserved token ids; content ids start at kFirstContentToken.
inline constexpr TermId kPadToken = 0;
inline constexpr TermId kClsToken = 1;
inline constexpr TermId kSepToken = 2;
inline constexpr TermId kFirstContentToken = 4;

using TeacherScores = std::map<std::pair<std::string, std::string>, double>;

struct SynthTask {
  SynthConfig config;
  std::vector<Document> corpus;
  std::vector<Query> train_queries;
  std::vector<Query> dev_queries;
  Qrels train_qrels;
  Qrels dev_qrels;
  TeacherScores teacher;
};

SynthTask generate_synth(const SynthConfig& config);

/// corpus.jsonl, train_queries.jsonl, dev_queries.jsonl, train_qrels.txt,
/// dev_qrels.txt, synth.json and (optionally) teacher.txt.
void write_synth(const std::filesystem::path& dir, const SynthTask& task);

/// "qid docid score" lines.
TeacherScores read_teacher(const std::filesystem::path& path);
void write_teacher(const std::filesystem::path& path, const TeacherScores& scores);

}  // namespace unifier
