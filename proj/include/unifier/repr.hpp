#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace unifier {

using TermId = std::uint32_t;
using Impact = std::uint32_t;

inline constexpr std::size_t kDefaultMaxSeqLen = 128;

/// A tokenized passage. Token ids index the model vocabulary.
struct Document {
  std::string id;
  std::vector<TermId> tokens;
};

/// Queries share the document layout; the alias keeps call sites readable.
using Query = Document;

/// Throws std::invalid_argument unless tokens is non-empty, no longer than
/// max_len and every id is below vocab_size.
void validate_tokens(std::span<const TermId> tokens, std::size_t vocab_size,
                     std::size_t max_len = kDefaultMaxSeqLen);

/// Sequence-level dense representation.
class DenseVec {
 public:
  DenseVec() = default;
  explicit DenseVec(std::vector<double> values);

  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] std::span<const double> values() const { return values_; }
  [[nodiscard]] double operator[](std::size_t i) const { return values_[i]; }

  friend bool operator==(const DenseVec&, const DenseVec&) = default;

 private:
  std::vector<double> values_;
};

/// Non-negative sparse vector over the vocabulary. Term ids are strictly
/// increasing and every stored weight is finite and > 0.
class SparseLexVec {
 public:
  using Entry = std::pair<TermId, double>;

  SparseLexVec() = default;
  /// Validates ordering and positivity; zero weights are rejected, not dropped.
  explicit SparseLexVec(std::vector<Entry> entries);

  /// Keeps the strictly positive coordinates of a full-vocabulary array.
  static SparseLexVec from_dense(std::span<const double> weights);

  [[nodiscard]] std::span<const Entry> entries() const { return entries_; }
  [[nodiscard]] std::size_t nnz() const { return entries_.size(); }
  [[nodiscard]] bool empty() const { return entries_.empty(); }
  /// Weight of `term`, 0 when absent.
  [[nodiscard]] double weight(TermId term) const;
  [[nodiscard]] std::vector<double> to_dense(std::size_t vocab_size) const;

  /// Keeps the n highest weights; ties favour the lower term id.
  [[nodiscard]] SparseLexVec top_n(std::size_t n) const;

  friend bool operator==(const SparseLexVec&, const SparseLexVec&) = default;

 private:
  std::vector<Entry> entries_;
};

/// Integer impacts floor(100 * w); zero impacts are never stored.
class QuantizedVec {
 public:
  using Entry = std::pair<TermId, Impact>;

  QuantizedVec() = default;
  explicit QuantizedVec(std::vector<Entry> entries);

  [[nodiscard]] std::span<const Entry> entries() const { return entries_; }
  [[nodiscard]] std::size_t nnz() const { return entries_.size(); }
  [[nodiscard]] bool empty() const { return entries_.empty(); }
  [[nodiscard]] Impact impact(TermId term) const;

  friend bool operator==(const QuantizedVec&, const QuantizedVec&) = default;

 private:
  std::vector<Entry> entries_;
};

/// floor(100 * w) for one weight. A product that lands within 1e-9 of an
/// integer is snapped to it, so a weight written with two decimals maps to
/// exactly that integer despite binary representation error.
Impact quantize_weight(double w);

QuantizedVec quantize(const SparseLexVec& v);

double sparse_dot(const SparseLexVec& a, const SparseLexVec& b);
std::uint64_t impact_dot(const QuantizedVec& a, const QuantizedVec& b);

/// Throws std::invalid_argument on dimension mismatch.
double dense_dot(const DenseVec& a, const DenseVec& b);
double dense_dot(std::span<const double> a, std::span<const double> b);

/// One retrieved document with its score.
struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;

  friend bool operator==(const ScoredDoc&, const ScoredDoc&) = default;
};

/// Total order used for every ranking: higher score first, then ascending
/// doc_id.
inline bool ranks_before(const ScoredDoc& a, const ScoredDoc& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.doc_id < b.doc_id;
}

/// Relevance judgments. Grades are >= 0; a grade > 0 marks a relevant doc.
class Qrels {
 public:
  void add(const std::string& query_id, const std::string& doc_id, int grade);

  [[nodiscard]] bool has_query(const std::string& query_id) const;
  /// Doc id -> grade for one query; empty map when unknown.
  [[nodiscard]] const std::map<std::string, int>& judgments(const std::string& query_id) const;
  /// Doc ids with grade > 0, ascending.
  [[nodiscard]] std::vector<std::string> relevant(const std::string& query_id) const;
  [[nodiscard]] bool is_relevant(const std::string& query_id, const std::string& doc_id) const;
  [[nodiscard]] const std::map<std::string, std::map<std::string, int>>& all() const {
    return judged_;
  }
  [[nodiscard]] std::size_t size() const { return judged_.size(); }

 private:
  std::map<std::string, std::map<std::string, int>> judged_;
};

/// Ranked lists per query, kept in ranks_before order without duplicate doc
/// ids.
class RunFile {
 public:
  /// Sorts the list and throws std::invalid_argument on a duplicate doc id.
  void set(const std::string& query_id, std::vector<ScoredDoc> ranked);

  [[nodiscard]] bool has_query(const std::string& query_id) const;
  [[nodiscard]] const std::vector<ScoredDoc>& ranking(const std::string& query_id) const;
  [[nodiscard]] const std::map<std::string, std::vector<ScoredDoc>>& all() const { return runs_; }
  [[nodiscard]] std::size_t size() const { return runs_.size(); }

  friend bool operator==(const RunFile&, const RunFile&) = default;

 private:
  std::map<std::string, std::vector<ScoredDoc>> runs_;
};

void sort_ranking(std::vector<ScoredDoc>& ranked);

// Text formats.

/// JSONL, one {"id": str, "tokens": [int, ...]} per line.
std::vector<Document> read_documents(const std::filesystem::path& path);
void write_documents(const std::filesystem::path& path, std::span<const Document> docs);

/// TREC qrels: "qid 0 docid grade".
Qrels read_qrels(const std::filesystem::path& path);
void write_qrels(const std::filesystem::path& path, const Qrels& qrels);

/// TREC run: "qid Q0 docid rank score tag".
RunFile read_run(const std::filesystem::path& path);
void write_run(const std::filesystem::path& path, const RunFile& run, const std::string& tag);

}  // namespace unifier
