#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unifier/encoder.hpp"
#include "unifier/repr.hpp"

namespace unifier {

/// Doc ordinal <-> doc id, plus each ordinal's position in ascending doc id
/// order for tie-breaking.
class DocTable {
 public:
  DocTable() = default;
  explicit DocTable(std::vector<std::string> ids);

  [[nodiscard]] std::size_t size() const { return ids_.size(); }
  [[nodiscard]] const std::string& id(std::uint32_t ord) const { return ids_[ord]; }
  [[nodiscard]] std::uint32_t tie_rank(std::uint32_t ord) const { return tie_rank_[ord]; }
  [[nodiscard]] std::span<const std::string> ids() const { return ids_; }

  friend bool operator==(const DocTable& a, const DocTable& b) { return a.ids_ == b.ids_; }

 private:
  std::vector<std::string> ids_;
  std::vector<std::uint32_t> tie_rank_;
};

struct Posting {
  std::uint32_t doc;
  std::uint16_t impact;

  friend bool operator==(const Posting&, const Posting&) = default;
};

inline constexpr std::uint32_t kMaxImpact = 65535;

/// Inverted index over quantized lexicon vectors. Posting lists are sorted by
/// doc ordinal. A forward copy of every document vector (float precision) is
/// kept for on-demand scoring.
class ImpactIndex {
 public:
  ImpactIndex() = default;

  /// vectors[i] belongs to ids[i]. With top_n, each vector keeps only its
  /// top_n weights before quantization. Impacts above 65535 are clamped and
  /// counted in clamped().
  static ImpactIndex build(std::vector<std::string> ids, std::span<const SparseLexVec> vectors,
                           std::size_t vocab_size, std::optional<std::size_t> top_n = std::nullopt);

  [[nodiscard]] const DocTable& docs() const { return docs_; }
  [[nodiscard]] std::size_t num_docs() const { return docs_.size(); }
  [[nodiscard]] std::size_t vocab_size() const { return postings_.size(); }
  [[nodiscard]] std::span<const Posting> postings(TermId term) const;
  [[nodiscard]] std::size_t total_postings() const { return total_postings_; }
  [[nodiscard]] std::size_t doc_nnz(std::uint32_t ord) const { return forward_[ord].nnz(); }
  [[nodiscard]] const QuantizedVec& doc_vector(std::uint32_t ord) const { return forward_[ord]; }
  [[nodiscard]] const SparseLexVec& doc_weights(std::uint32_t ord) const { return weights_[ord]; }
  [[nodiscard]] std::optional<std::size_t> top_n() const { return top_n_; }
  [[nodiscard]] std::size_t clamped() const { return clamped_; }

  friend bool operator==(const ImpactIndex& a, const ImpactIndex& b) {
    return a.docs_ == b.docs_ && a.postings_ == b.postings_ && a.forward_ == b.forward_ &&
           a.weights_ == b.weights_ && a.top_n_ == b.top_n_ && a.clamped_ == b.clamped_;
  }

  // Serialization into an index directory (postings.bin, forward.bin).
  void save(const std::filesystem::path& dir) const;
  static ImpactIndex load(const std::filesystem::path& dir, const DocTable& docs);

 private:
  DocTable docs_;
  std::vector<std::vector<Posting>> postings_;
  std::vector<QuantizedVec> forward_;
  std::vector<SparseLexVec> weights_;
  std::optional<std::size_t> top_n_;
  std::size_t total_postings_ = 0;
  std::size_t clamped_ = 0;
};

/// Row-major matrix of document dense vectors.
class DenseIndex {
 public:
  DenseIndex() = default;
  DenseIndex(std::vector<std::string> ids, std::span<const DenseVec> rows, std::size_t dim);

  [[nodiscard]] const DocTable& docs() const { return docs_; }
  [[nodiscard]] std::size_t num_docs() const { return docs_.size(); }
  [[nodiscard]] std::size_t dim() const { return dim_; }
  [[nodiscard]] std::span<const double> row(std::uint32_t ord) const {
    return {data_.data() + static_cast<std::size_t>(ord) * dim_, dim_};
  }

  friend bool operator==(const DenseIndex& a, const DenseIndex& b) {
    return a.docs_ == b.docs_ && a.dim_ == b.dim_ && a.data_ == b.data_;
  }

  void save(const std::filesystem::path& dir) const;
  static DenseIndex load(const std::filesystem::path& dir, const DocTable& docs);

 private:
  DocTable docs_;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

/// Okapi BM25 over raw token frequencies.
class Bm25Index {
 public:
  Bm25Index() = default;
  static Bm25Index build(std::span<const Document> corpus, Bm25Params params = {});

  [[nodiscard]] const DocTable& docs() const { return docs_; }
  [[nodiscard]] std::size_t num_docs() const { return docs_.size(); }
  [[nodiscard]] double avgdl() const { return avgdl_; }
  [[nodiscard]] std::size_t df(TermId t) const;
  [[nodiscard]] double idf(TermId t) const;
  [[nodiscard]] std::size_t doc_length(std::uint32_t ord) const { return doc_len_[ord]; }
  [[nodiscard]] const Bm25Params& params() const { return params_; }
  /// (doc ordinal, term frequency) sorted by ordinal.
  [[nodiscard]] std::span<const std::pair<std::uint32_t, std::uint32_t>> postings(TermId t) const;
  /// Scores accumulated term-at-a-time over the query's tokens (repeated
  /// query tokens contribute repeatedly); only docs with a match appear.
  [[nodiscard]] std::vector<std::pair<std::uint32_t, double>> score(std::span<const TermId> query) const;

 private:
  DocTable docs_;
  Bm25Params params_;
  std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> postings_;
  std::vector<std::size_t> doc_len_;
  double avgdl_ = 0.0;
};

/// Both first-stage indexes from one encoding pass, plus the identity of the
/// checkpoint that produced them.
struct IndexSet {
  ImpactIndex lexicon;
  DenseIndex dense;
  std::string checkpoint_hash;
};

ImpactIndex build_impact_index(std::span<const Document> corpus, const Model& model,
                               std::optional<std::size_t> top_n = std::nullopt);
DenseIndex build_dense_index(std::span<const Document> corpus, const Model& model);
IndexSet build_indexes(std::span<const Document> corpus, const Model& model,
                       std::optional<std::size_t> top_n = std::nullopt);
/// Re-sparsifies an already encoded collection without re-running the encoder.
IndexSet build_indexes(std::span<const Document> corpus, std::span<const DualRepr> encoded,
                       const Model& model, std::optional<std::size_t> top_n = std::nullopt);

inline constexpr int kIndexVersion = 1;

/// Writes manifest.json, doctable.bin, postings.bin, forward.bin, dense.bin.
void save_index_set(const std::filesystem::path& dir, const IndexSet& set);
IndexSet load_index_set(const std::filesystem::path& dir);
/// Parsed manifest.json of an index directory.
nlohmann::json read_index_manifest(const std::filesystem::path& dir);

}  // namespace unifier
