#include "unifier/search.hpp"

#include <algorithm>
#include <iostream>
#include <limits>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "unifier/util.hpp"

namespace unifier {

std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::lexicon: return "lexicon";
    case Scheme::dense: return "dense";
    case Scheme::uni: return "uni";
    case Scheme::gated: return "gated";
    case Scheme::ensemble: return "ensemble";
    case Scheme::bm25: return "bm25";
  }
  return "?";
}

Scheme parse_scheme(const std::string& s) {
  for (Scheme x : {Scheme::lexicon, Scheme::dense, Scheme::uni, Scheme::gated, Scheme::ensemble,
                   Scheme::bm25}) {
    if (to_string(x) == s) return x;
  }
  throw std::invalid_argument("unknown scheme '" + s +
                              "' (expected lexicon|dense|uni|gated|ensemble|bm25)");
}

std::string to_string(LexScore s) {
  switch (s) {
    case LexScore::impact: return "impact";
    case LexScore::dequantized: return "dequantized";
    case LexScore::real: return "real";
  }
  return "?";
}

LexScore parse_lex_score(const std::string& s) {
  for (LexScore x : {LexScore::impact, LexScore::dequantized, LexScore::real}) {
    if (to_string(x) == s) return x;
  }
  throw std::invalid_argument("unknown lexicon score mode '" + s +
                              "' (expected impact|dequantized|real)");
}

void SearchConfig::validate() const {
  if (k_final == 0) throw std::invalid_argument("SearchConfig: k_final must be >= 1");
}

EncodedQuery encode_query(const Model& model, const Query& q) {
  auto r = encode(model, q.tokens);
  EncodedQuery out{q.id, q.tokens, r.dense, r.lex, quantize(r.lex), 0.5};
  if (model.gate) out.gate = gate_value(model, out.dense);
  return out;
}

std::vector<EncodedQuery> encode_queries(const Model& model, std::span<const Query> queries) {
  std::vector<EncodedQuery> out(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) { out[i] = encode_query(model, queries[i]); });
  return out;
}

void select_top(std::vector<Hit>& hits, std::size_t k, const DocTable& docs) {
  auto before = [&](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return docs.tie_rank(a.doc) < docs.tie_rank(b.doc);
  };
  if (k < hits.size()) {
    std::nth_element(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), before);
    hits.resize(k);
  }
  std::sort(hits.begin(), hits.end(), before);
}

std::vector<Hit> search_lexicon(const EncodedQuery& q, const ImpactIndex& index, std::size_t k) {
  if (q.quantized.empty()) {
    std::cerr << "warning: query " << q.id << " has an empty quantized vector\n";
    return {};
  }
  struct Cursor {
    std::span<const Posting> list;
    std::size_t pos;
    std::uint64_t weight;
  };
  std::vector<Cursor> cursors;
  for (const auto& [t, w] : q.quantized.entries()) {
    auto list = index.postings(t);
    if (!list.empty()) cursors.push_back({list, 0, w});
  }
  std::vector<Hit> hits;
  if (k == 0) return hits;
  const auto& docs = index.docs();
  // Min-heap on (score, reverse tie order) keeps the current best k.
  auto worse = [&](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return docs.tie_rank(a.doc) < docs.tie_rank(b.doc);
  };
  constexpr std::uint32_t kDone = std::numeric_limits<std::uint32_t>::max();
  while (true) {
    std::uint32_t doc = kDone;
    for (const auto& c : cursors) {
      if (c.pos < c.list.size()) doc = std::min(doc, c.list[c.pos].doc);
    }
    if (doc == kDone) break;
    std::uint64_t score = 0;
    for (auto& c : cursors) {
      if (c.pos < c.list.size() && c.list[c.pos].doc == doc) {
        score += c.weight * c.list[c.pos].impact;
        ++c.pos;
      }
    }
    Hit h{doc, static_cast<double>(score)};
    if (hits.size() < k) {
      hits.push_back(h);
      std::push_heap(hits.begin(), hits.end(), worse);
    } else if (worse(h, hits.front())) {
      std::pop_heap(hits.begin(), hits.end(), worse);
      hits.back() = h;
      std::push_heap(hits.begin(), hits.end(), worse);
    }
  }
  std::sort(hits.begin(), hits.end(), worse);
  return hits;
}

std::vector<Hit> search_dense(const EncodedQuery& q, const DenseIndex& index, std::size_t k) {
  if (index.num_docs() > 0 && q.dense.size() != index.dim()) {
    throw std::invalid_argument("search_dense: query dimension does not match index");
  }
  std::vector<Hit> hits(index.num_docs());
  for (std::uint32_t d = 0; d < hits.size(); ++d) hits[d] = {d, dense_dot(q.dense.values(), index.row(d))};
  select_top(hits, k, index.docs());
  return hits;
}

double lexicon_score(const EncodedQuery& q, const ImpactIndex& lex, std::uint32_t doc, LexScore mode) {
  switch (mode) {
    case LexScore::impact:
      return static_cast<double>(impact_dot(q.quantized, lex.doc_vector(doc)));
    case LexScore::dequantized:
      return static_cast<double>(impact_dot(q.quantized, lex.doc_vector(doc))) / 1e4;
    case LexScore::real:
      return sparse_dot(q.lex, lex.doc_weights(doc));
  }
  return 0.0;
}

namespace {

void check_pair(const ImpactIndex& lex, const DenseIndex& dense) {
  if (!(lex.docs() == dense.docs())) {
    throw std::invalid_argument("lexicon and dense indexes cover different documents");
  }
}

// Shared two-stage core: score = wd * dense + wl * lexicon on the lexicon
// top-K, with the tail beyond K imputed at the head's minimum dense score.
std::vector<Hit> two_stage(const EncodedQuery& q, const ImpactIndex& lex, const DenseIndex& dense,
                           const SearchConfig& cfg, double wd, double wl) {
  cfg.validate();
  check_pair(lex, dense);
  auto cands = search_lexicon(q, lex, std::max(cfg.k_uni, cfg.k_final));
  const std::size_t head = std::min(cfg.k_uni, cands.size());
  std::vector<double> dn(head);
  double dmin = 0.0;
  for (std::size_t i = 0; i < head; ++i) {
    dn[i] = dense_dot(q.dense.values(), dense.row(cands[i].doc));
    dmin = i == 0 ? dn[i] : std::min(dmin, dn[i]);
  }
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const double l = cfg.lex_score == LexScore::impact ? cands[i].score
                                                       : lexicon_score(q, lex, cands[i].doc, cfg.lex_score);
    cands[i].score = wd * (i < head ? dn[i] : dmin) + wl * l;
  }
  select_top(cands, cfg.k_final, lex.docs());
  return cands;
}

}  // namespace

std::vector<Hit> search_uni(const EncodedQuery& q, const ImpactIndex& lex, const DenseIndex& dense,
                            const SearchConfig& cfg) {
  return two_stage(q, lex, dense, cfg, 1.0, 1.0);
}

std::vector<Hit> search_gated(const EncodedQuery& q, const ImpactIndex& lex, const DenseIndex& dense,
                              double g, const SearchConfig& cfg) {
  if (!(g >= 0.0 && g <= 1.0)) throw std::invalid_argument("search_gated: gate outside [0, 1]");
  return two_stage(q, lex, dense, cfg, g, 1.0 - g);
}

std::vector<Hit> search_ensemble(const EncodedQuery& q, const ImpactIndex& lex,
                                 const DenseIndex& dense, std::size_t k, LexScore mode) {
  check_pair(lex, dense);
  const std::size_t kk = 10 * k;
  std::set<std::uint32_t> pool;
  for (const auto& h : search_lexicon(q, lex, kk)) pool.insert(h.doc);
  for (const auto& h : search_dense(q, dense, kk)) pool.insert(h.doc);
  std::vector<Hit> hits;
  hits.reserve(pool.size());
  for (std::uint32_t d : pool) {
    hits.push_back({d, lexicon_score(q, lex, d, mode) + dense_dot(q.dense.values(), dense.row(d))});
  }
  select_top(hits, k, lex.docs());
  return hits;
}

std::vector<Hit> search_bm25(std::span<const TermId> query, const Bm25Index& index, std::size_t k) {
  std::vector<Hit> hits;
  for (const auto& [d, s] : index.score(query)) hits.push_back({d, s});
  select_top(hits, k, index.docs());
  return hits;
}

std::vector<ScoredDoc> to_scored(std::span<const Hit> hits, const DocTable& docs) {
  std::vector<ScoredDoc> out;
  out.reserve(hits.size());
  for (const auto& h : hits) out.push_back({docs.id(h.doc), h.score});
  return out;
}

std::vector<Hit> Searcher::search(const EncodedQuery& q, const SearchConfig& cfg) const {
  cfg.validate();
  const auto& lex = indexes_.lexicon;
  const auto& dense = indexes_.dense;
  switch (cfg.scheme) {
    case Scheme::lexicon: {
      auto hits = search_lexicon(q, lex, cfg.k_final);
      if (cfg.lex_score != LexScore::impact) {
        for (auto& h : hits) h.score = lexicon_score(q, lex, h.doc, cfg.lex_score);
        select_top(hits, cfg.k_final, lex.docs());
      }
      return hits;
    }
    case Scheme::dense: return search_dense(q, dense, cfg.k_final);
    case Scheme::uni: return search_uni(q, lex, dense, cfg);
    case Scheme::gated: return search_gated(q, lex, dense, q.gate, cfg);
    case Scheme::ensemble: return search_ensemble(q, lex, dense, cfg.k_final, cfg.lex_score);
    case Scheme::bm25:
      if (!bm25_) throw std::logic_error("Searcher: no BM25 index attached");
      return search_bm25(q.tokens, *bm25_, cfg.k_final);
  }
  return {};
}

RunFile Searcher::run(std::span<const EncodedQuery> queries, const SearchConfig& cfg) const {
  const DocTable& docs = cfg.scheme == Scheme::bm25 && bm25_ ? bm25_->docs() : indexes_.lexicon.docs();
  std::vector<std::vector<ScoredDoc>> results(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) { results[i] = to_scored(search(queries[i], cfg), docs); });
  RunFile run;
  for (std::size_t i = 0; i < queries.size(); ++i) run.set(queries[i].id, std::move(results[i]));
  return run;
}

RunFile bm25_run(const Bm25Index& index, std::span<const Query> queries, std::size_t k) {
  std::vector<std::vector<ScoredDoc>> results(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    results[i] = to_scored(search_bm25(queries[i].tokens, index, k), index.docs());
  });
  RunFile run;
  for (std::size_t i = 0; i < queries.size(); ++i) run.set(queries[i].id, std::move(results[i]));
  return run;
}

OverlapResult candidate_overlap(const RunFile& a, const RunFile& b, std::size_t depth) {
  if (depth == 0) throw std::invalid_argument("candidate_overlap: depth must be >= 1");
  OverlapResult r;
  double acc = 0.0;
  for (const auto& [qid, ra] : a.all()) {
    if (!b.has_query(qid)) {
      ++r.skipped;
      continue;
    }
    const auto& rb = b.ranking(qid);
    std::set<std::string> top_a;
    for (std::size_t i = 0; i < std::min(depth, ra.size()); ++i) top_a.insert(ra[i].doc_id);
    std::size_t common = 0;
    for (std::size_t i = 0; i < std::min(depth, rb.size()); ++i) common += top_a.count(rb[i].doc_id);
    acc += static_cast<double>(common) / static_cast<double>(depth);
    ++r.queries;
  }
  for (const auto& [qid, rb] : b.all()) {
    if (!a.has_query(qid)) ++r.skipped;
  }
  r.fraction = r.queries ? acc / static_cast<double>(r.queries) : 0.0;
  return r;
}

}  // namespace unifier
