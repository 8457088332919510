#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unifier/encoder.hpp"
#include "unifier/index.hpp"
#include "unifier/repr.hpp"

namespace unifier {

enum class Scheme { lexicon, dense, uni, gated, ensemble, bm25 };

std::string to_string(Scheme s);
Scheme parse_scheme(const std::string& s);

/// Units of the lexicon component when it is combined with dense scores.
enum class LexScore {
  impact,       // integer impact dot product, as produced by the index
  dequantized,  // impact dot product / 10^4, i.e. on the scale of real weights
  real,         // float-precision dot product of the stored real weights
};

std::string to_string(LexScore s);
LexScore parse_lex_score(const std::string& s);

struct SearchConfig {
  std::size_t k_final = 1000;
  std::size_t k_uni = 2048;
  Scheme scheme = Scheme::uni;
  LexScore lex_score = LexScore::impact;

  /// Throws std::invalid_argument when k_final == 0.
  void validate() const;
};

/// A query with everything search needs precomputed.
struct EncodedQuery {
  std::string id;
  std::vector<TermId> tokens;
  DenseVec dense;
  SparseLexVec lex;
  QuantizedVec quantized;
  /// Gate output; 0.5 when the model has no gate.
  double gate = 0.5;
};

EncodedQuery encode_query(const Model& model, const Query& q);
std::vector<EncodedQuery> encode_queries(const Model& model, std::span<const Query> queries);

/// A scored doc ordinal.
struct Hit {
  std::uint32_t doc;
  double score;

  friend bool operator==(const Hit&, const Hit&) = default;
};

/// Keeps the k best hits, score descending then doc id ascending.
void select_top(std::vector<Hit>& hits, std::size_t k, const DocTable& docs);

/// DAAT over the query's posting lists; only docs with a positive impact
/// score are returned.
std::vector<Hit> search_lexicon(const EncodedQuery& q, const ImpactIndex& index, std::size_t k);
std::vector<Hit> search_dense(const EncodedQuery& q, const DenseIndex& index, std::size_t k);
/// Lexicon top-K candidates rescored by lexicon + dense. When K < k_final the
/// remaining lexicon candidates follow in lexicon order (their dense score is
/// imputed as the lowest dense score among the rescored head), so K = 0 is
/// lexicon-only retrieval.
std::vector<Hit> search_uni(const EncodedQuery& q, const ImpactIndex& lex, const DenseIndex& dense,
                            const SearchConfig& cfg);
/// As search_uni with g * dense + (1 - g) * lexicon.
std::vector<Hit> search_gated(const EncodedQuery& q, const ImpactIndex& lex, const DenseIndex& dense,
                              double g, const SearchConfig& cfg);
/// Union of top-10k from each head, rescored by lexicon + dense.
std::vector<Hit> search_ensemble(const EncodedQuery& q, const ImpactIndex& lex,
                                 const DenseIndex& dense, std::size_t k,
                                 LexScore mode = LexScore::impact);
std::vector<Hit> search_bm25(std::span<const TermId> query, const Bm25Index& index, std::size_t k);

/// Lexicon score of one doc in the given units.
double lexicon_score(const EncodedQuery& q, const ImpactIndex& lex, std::uint32_t doc, LexScore mode);

std::vector<ScoredDoc> to_scored(std::span<const Hit> hits, const DocTable& docs);

/// Batch search over immutable indexes. Queries run in parallel.
class Searcher {
 public:
  Searcher(const IndexSet& indexes, const Bm25Index* bm25 = nullptr)
      : indexes_(indexes), bm25_(bm25) {}

  [[nodiscard]] std::vector<Hit> search(const EncodedQuery& q, const SearchConfig& cfg) const;
  [[nodiscard]] RunFile run(std::span<const EncodedQuery> queries, const SearchConfig& cfg) const;

 private:
  const IndexSet& indexes_;
  const Bm25Index* bm25_;
};

/// BM25 run over raw query tokens.
RunFile bm25_run(const Bm25Index& index, std::span<const Query> queries, std::size_t k);

struct OverlapResult {
  double fraction = 0.0;
  std::size_t queries = 0;
  std::size_t skipped = 0;
};

/// Mean over shared queries of |top-depth(a) & top-depth(b)| / depth.
OverlapResult candidate_overlap(const RunFile& a, const RunFile& b, std::size_t depth);

}  // namespace unifier
