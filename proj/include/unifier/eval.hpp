#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unifier/index.hpp"
#include "unifier/repr.hpp"
#include "unifier/search.hpp"

namespace unifier {

// Per-query metrics over one ranking and one query's judgments.
double reciprocal_rank(std::span<const ScoredDoc> ranking, const std::map<std::string, int>& judged,
                       std::size_t k);
/// |relevant in top-n| / min(n, |relevant|); 0 without relevant docs.
double recall_marco(std::span<const ScoredDoc> ranking, const std::map<std::string, int>& judged,
                    std::size_t n);
/// 1 when any relevant doc is in the top-n.
double recall_dpr(std::span<const ScoredDoc> ranking, const std::map<std::string, int>& judged,
                  std::size_t n);
/// Gain 2^grade - 1, discount log2(rank + 1); 0 when the ideal DCG is 0.
double ndcg(std::span<const ScoredDoc> ranking, const std::map<std::string, int>& judged,
            std::size_t k);

/// Mean over run queries that have judgments; `excluded` counts the rest.
struct MetricValue {
  double mean = 0.0;
  std::map<std::string, double> per_query;
  std::size_t excluded = 0;
};

MetricValue mrr_at_k(const RunFile& run, const Qrels& qrels, std::size_t k = 10);
MetricValue recall_marco(const RunFile& run, const Qrels& qrels, std::size_t n);
MetricValue recall_dpr(const RunFile& run, const Qrels& qrels, std::size_t n);
MetricValue ndcg_at_k(const RunFile& run, const Qrels& qrels, std::size_t k = 10);

struct MetricReport {
  std::map<std::string, MetricValue> metrics;
  std::size_t queries = 0;
  std::size_t excluded = 0;

  [[nodiscard]] double operator[](const std::string& name) const;
  [[nodiscard]] nlohmann::json to_json(bool per_query = false) const;
  /// Aligned "name value" columns.
  [[nodiscard]] std::string to_text() const;
};

/// MRR@10, R@100/R@1000 in both flavours and nDCG@10.
MetricReport evaluate(const RunFile& run, const Qrels& qrels);

/// Expected multiplications per query-doc pair: sum_t p_t(query) * p_t(doc),
/// from empirical nonzero frequencies. Throws on an empty sample or index.
double flops_metric(const ImpactIndex& index, std::span<const QuantizedVec> queries);

struct QpsReport {
  std::string scheme;
  std::size_t queries = 0;
  std::size_t trials = 0;
  std::size_t threads = 1;
  double qps = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double p99_ms = 0.0;
  nlohmann::json machine = nlohmann::json::object();

  [[nodiscard]] nlohmann::json to_json() const;
};

/// Nearest-rank percentile of an unsorted sample, q in (0, 100].
double percentile(std::vector<double> sample, double q);

/// Times `run_one` on every pre-encoded query `trials` times on the calling
/// thread. Throws on zero queries or trials.
QpsReport qps_bench(const std::string& scheme, std::span<const EncodedQuery> queries,
                    std::size_t trials, const std::function<void(const EncodedQuery&)>& run_one);
QpsReport qps_bench(const Searcher& searcher, const SearchConfig& cfg,
                    std::span<const EncodedQuery> queries, std::size_t trials);

}  // namespace unifier
