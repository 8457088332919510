#include "unifier/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace unifier {

namespace {

int grade_of(const std::map<std::string, int>& judged, const std::string& doc) {
  auto it = judged.find(doc);
  return it == judged.end() ? 0 : it->second;
}

std::size_t count_relevant(const std::map<std::string, int>& judged) {
  return static_cast<std::size_t>(
      std::count_if(judged.begin(), judged.end(), [](const auto& kv) { return kv.second > 0; }));
}

template <typename Fn>
MetricValue over_queries(const RunFile& run, const Qrels& qrels, Fn&& fn) {
  MetricValue v;
  double acc = 0.0;
  for (const auto& [qid, ranking] : run.all()) {
    if (!qrels.has_query(qid)) {
      ++v.excluded;
      continue;
    }
    const double x = fn(std::span<const ScoredDoc>(ranking), qrels.judgments(qid));
    v.per_query[qid] = x;
    acc += x;
  }
  v.mean = v.per_query.empty() ? 0.0 : acc / static_cast<double>(v.per_query.size());
  return v;
}

}  // namespace

double reciprocal_rank(std::span<const ScoredDoc> ranking, const std::map<std::string, int>& judged,
                       std::size_t k) {
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
    if (grade_of(judged, ranking[i].doc_id) > 0) return 1.0 / static_cast<double>(i + 1);
  }
  return 0.0;
}

double recall_marco(std::span<const ScoredDoc> ranking, const std::map<std::string, int>& judged,
                    std::size_t n) {
  const std::size_t rel = count_relevant(judged);
  if (rel == 0 || n == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < std::min(n, ranking.size()); ++i) {
    if (grade_of(judged, ranking[i].doc_id) > 0) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(std::min(n, rel));
}

double recall_dpr(std::span<const ScoredDoc> ranking, const std::map<std::string, int>& judged,
                  std::size_t n) {
  for (std::size_t i = 0; i < std::min(n, ranking.size()); ++i) {
    if (grade_of(judged, ranking[i].doc_id) > 0) return 1.0;
  }
  return 0.0;
}

double ndcg(std::span<const ScoredDoc> ranking, const std::map<std::string, int>& judged,
            std::size_t k) {
  auto gain = [](int g) { return std::exp2(static_cast<double>(g)) - 1.0; };
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
    const int g = grade_of(judged, ranking[i].doc_id);
    if (g > 0) dcg += gain(g) / std::log2(static_cast<double>(i + 2));
  }
  std::vector<int> grades;
  for (const auto& [doc, g] : judged) {
    if (g > 0) grades.push_back(g);
  }
  std::sort(grades.begin(), grades.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) {
    idcg += gain(grades[i]) / std::log2(static_cast<double>(i + 2));
  }
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

MetricValue mrr_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
  return over_queries(run, qrels, [k](auto r, const auto& j) { return reciprocal_rank(r, j, k); });
}

MetricValue recall_marco(const RunFile& run, const Qrels& qrels, std::size_t n) {
  return over_queries(run, qrels, [n](auto r, const auto& j) { return recall_marco(r, j, n); });
}

MetricValue recall_dpr(const RunFile& run, const Qrels& qrels, std::size_t n) {
  return over_queries(run, qrels, [n](auto r, const auto& j) { return recall_dpr(r, j, n); });
}

MetricValue ndcg_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
  return over_queries(run, qrels, [k](auto r, const auto& j) { return ndcg(r, j, k); });
}

double MetricReport::operator[](const std::string& name) const {
  auto it = metrics.find(name);
  if (it == metrics.end()) throw std::out_of_range("no metric named " + name);
  return it->second.mean;
}

nlohmann::json MetricReport::to_json(bool per_query) const {
  nlohmann::json j = {{"queries", queries}, {"excluded_queries", excluded}};
  for (const auto& [name, v] : metrics) {
    j["metrics"][name] = v.mean;
    if (per_query) j["per_query"][name] = v.per_query;
  }
  return j;
}

std::string MetricReport::to_text() const {
  std::size_t width = 7;
  for (const auto& [name, v] : metrics) width = std::max(width, name.size());
  std::ostringstream out;
  char buf[64];
  for (const auto& [name, v] : metrics) {
    std::snprintf(buf, sizeof buf, "%.4f", v.mean);
    out << name << std::string(width - name.size() + 2, ' ') << buf << '\n';
  }
  out << "queries" << std::string(width - 7 + 2, ' ') << queries << '\n';
  return out.str();
}

MetricReport evaluate(const RunFile& run, const Qrels& qrels) {
  MetricReport r;
  r.metrics["MRR@10"] = mrr_at_k(run, qrels, 10);
  r.metrics["R@100"] = recall_marco(run, qrels, 100);
  r.metrics["R@1000"] = recall_marco(run, qrels, 1000);
  r.metrics["R_dpr@100"] = recall_dpr(run, qrels, 100);
  r.metrics["R_dpr@1000"] = recall_dpr(run, qrels, 1000);
  r.metrics["nDCG@10"] = ndcg_at_k(run, qrels, 10);
  const auto& m = r.metrics.at("MRR@10");
  r.queries = m.per_query.size();
  r.excluded = m.excluded;
  return r;
}

double flops_metric(const ImpactIndex& index, std::span<const QuantizedVec> queries) {
  if (queries.empty()) throw std::invalid_argument("flops_metric: empty query sample");
  if (index.num_docs() == 0) throw std::invalid_argument("flops_metric: empty index");
  std::map<TermId, double> pq;
  for (const auto& q : queries) {
    for (const auto& [t, w] : q.entries()) pq[t] += 1.0;
  }
  const double nq = static_cast<double>(queries.size());
  const double nd = static_cast<double>(index.num_docs());
  double acc = 0.0;
  for (const auto& [t, c] : pq) {
    acc += (c / nq) * (static_cast<double>(index.postings(t).size()) / nd);
  }
  return acc;
}

nlohmann::json QpsReport::to_json() const {
  return {{"scheme", scheme}, {"queries", queries}, {"trials", trials},   {"threads", threads},
          {"qps", qps},       {"p50_ms", p50_ms},   {"p95_ms", p95_ms},   {"p99_ms", p99_ms},
          {"machine", machine}};
}

double percentile(std::vector<double> sample, double q) {
  if (sample.empty()) throw std::invalid_argument("percentile: empty sample");
  if (!(q > 0.0 && q <= 100.0)) throw std::invalid_argument("percentile: q outside (0, 100]");
  std::sort(sample.begin(), sample.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(sample.size())));
  return sample[std::max<std::size_t>(rank, 1) - 1];
}

QpsReport qps_bench(const std::string& scheme, std::span<const EncodedQuery> queries,
                    std::size_t trials, const std::function<void(const EncodedQuery&)>& run_one) {
  if (queries.empty()) throw std::invalid_argument("qps_bench: no queries");
  if (trials == 0) throw std::invalid_argument("qps_bench: trials must be >= 1");
  using clock = std::chrono::steady_clock;
  std::vector<double> latencies;
  latencies.reserve(queries.size() * trials);
  const auto start = clock::now();
  for (std::size_t t = 0; t < trials; ++t) {
    for (const auto& q : queries) {
      const auto t0 = clock::now();
      run_one(q);
      latencies.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
    }
  }
  const double total_s = std::chrono::duration<double>(clock::now() - start).count();
  QpsReport r;
  r.scheme = scheme;
  r.queries = queries.size();
  r.trials = trials;
  r.qps = static_cast<double>(latencies.size()) / std::max(total_s, 1e-12);
  r.p50_ms = percentile(latencies, 50);
  r.p95_ms = percentile(latencies, 95);
  r.p99_ms = percentile(latencies, 99);
  return r;
}

QpsReport qps_bench(const Searcher& searcher, const SearchConfig& cfg,
                    std::span<const EncodedQuery> queries, std::size_t trials) {
  volatile std::size_t sink = 0;
  auto r = qps_bench(to_string(cfg.scheme), queries, trials, [&](const EncodedQuery& q) {
    sink = sink + searcher.search(q, cfg).size();
  });
  return r;
}

}  // namespace unifier
