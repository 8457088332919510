#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "fixtures.hpp"
#include "unifier/eval.hpp"
#include "unifier/util.hpp"

using namespace unifier;

namespace {

std::vector<ScoredDoc> ranking(std::initializer_list<const char*> ids) {
  std::vector<ScoredDoc> r;
  double s = 100.0;
  for (const char* id : ids) r.push_back({id, s--});
  return r;
}

std::map<std::string, int> judged(std::initializer_list<std::pair<const char*, int>> g) {
  std::map<std::string, int> m;
  for (auto [d, x] : g) m[d] = x;
  return m;
}

struct Fixture {
  RunFile run;
  Qrels qrels;
};

// Random run/qrels pair: 20 docs per ranking, 1-4 relevant docs with grades
// 0-3 drawn from a 40-doc pool.
Fixture random_fixture(std::mt19937_64& rng, std::size_t queries) {
  Fixture f;
  for (std::size_t q = 0; q < queries; ++q) {
    const std::string qid = "q" + std::to_string(q);
    std::vector<std::string> pool;
    for (int d = 0; d < 40; ++d) pool.push_back("d" + std::to_string(d));
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<ScoredDoc> r;
    for (int i = 0; i < 20; ++i) r.push_back({pool[i], 20.0 - i});
    f.run.set(qid, r);
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t nrel = 1 + uniform_index(rng, 4);
    for (std::size_t i = 0; i < nrel; ++i) f.qrels.add(qid, pool[i], static_cast<int>(1 + uniform_index(rng, 3)));
    f.qrels.add(qid, pool[nrel], 0);
  }
  return f;
}

}  // namespace

TEST_CASE("reciprocal rank") {
  auto j = judged({{"x", 1}});
  CHECK(reciprocal_rank(ranking({"x", "a", "b"}), j, 10) == 1.0);
  CHECK(reciprocal_rank(ranking({"a", "b", "x"}), j, 10) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(reciprocal_rank(ranking({"a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "x"}), j, 10) == 0.0);
  CHECK(reciprocal_rank(ranking({"a", "y"}), judged({{"y", 0}}), 10) == 0.0);
}

TEST_CASE("recall flavours and the contrast case") {
  auto j = judged({{"x", 1}, {"y", 1}});
  auto r = ranking({"a", "x", "b", "c", "d", "y"});
  CHECK(recall_marco(r, j, 5) == 0.5);
  CHECK(recall_dpr(r, j, 5) == 1.0);
  CHECK(recall_marco(ranking({"y", "x"}), j, 5) == 1.0);
  CHECK(recall_dpr(ranking({"a", "b"}), j, 5) == 0.0);
  // min(n, |rel|) in the denominator.
  CHECK(recall_marco(ranking({"x", "a"}), j, 1) == 1.0);
}

TEST_CASE("ndcg") {
  CHECK(ndcg(ranking({"a", "x"}), judged({{"x", 1}}), 10) == doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-15));
  CHECK(ndcg(ranking({"a", "x"}), judged({{"x", 1}}), 10) == doctest::Approx(0.6309).epsilon(1e-4));
  CHECK(ndcg(ranking({"z", "y", "x"}), judged({{"x", 1}, {"y", 2}, {"z", 3}}), 10) == 1.0);
  CHECK(ndcg(ranking({"a"}), judged({{"a", 0}}), 10) == 0.0);
  // Hand-computed: grades 3 at rank 2 and 1 at rank 3; ideal 3 then 1.
  const double dcg = 7.0 / std::log2(3.0) + 1.0 / std::log2(4.0);
  const double idcg = 7.0 + 1.0 / std::log2(3.0);
  CHECK(std::abs(ndcg(ranking({"a", "z", "x"}), judged({{"z", 3}, {"x", 1}}), 10) - dcg / idcg) < 1e-12);
}

TEST_CASE("run-level metrics average over judged queries") {
  RunFile run;
  run.set("q1", ranking({"x", "a"}));
  run.set("q2", ranking({"a", "b", "y"}));
  run.set("q3", ranking({"a"}));
  Qrels qrels;
  qrels.add("q1", "x", 1);
  qrels.add("q2", "y", 1);
  auto m = mrr_at_k(run, qrels, 10);
  CHECK(m.excluded == 1);
  CHECK(m.per_query.size() == 2);
  CHECK(std::abs(m.mean - (1.0 + 1.0 / 3) / 2) < 1e-12);
  auto rep = evaluate(run, qrels);
  CHECK(rep.queries == 2);
  CHECK(rep.excluded == 1);
  CHECK(rep["R_dpr@100"] == 1.0);
  CHECK_THROWS_AS(static_cast<void>(rep["nope"]), std::out_of_range);
  auto j = rep.to_json(true);
  CHECK(j["metrics"]["MRR@10"].get<double>() == doctest::Approx(m.mean));
  CHECK(j["per_query"]["MRR@10"]["q1"].get<double>() == 1.0);
  CHECK(rep.to_text().find("MRR@10") != std::string::npos);
}

TEST_CASE("randomized fixtures match set-based oracles") {
  std::mt19937_64 rng(12);
  auto f = random_fixture(rng, 20);
  for (std::size_t n : {1u, 5u, 10u, 20u}) {
    double marco = 0.0, dpr = 0.0, nd = 0.0;
    for (const auto& [qid, r] : f.run.all()) {
      std::set<std::string> top;
      for (std::size_t i = 0; i < std::min<std::size_t>(n, r.size()); ++i) top.insert(r[i].doc_id);
      std::set<std::string> rel;
      for (const auto& [d, g] : f.qrels.judgments(qid)) if (g > 0) rel.insert(d);
      std::size_t hit = 0;
      for (const auto& d : rel) hit += top.count(d);
      marco += static_cast<double>(hit) / static_cast<double>(std::min(n, rel.size()));
      dpr += hit > 0 ? 1.0 : 0.0;
      // nDCG from the definition.
      double dcg = 0.0;
      for (std::size_t i = 0; i < std::min<std::size_t>(n, r.size()); ++i) {
        auto it = f.qrels.judgments(qid).find(r[i].doc_id);
        const int g = it == f.qrels.judgments(qid).end() ? 0 : it->second;
        dcg += (std::pow(2.0, g) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
      }
      std::vector<int> gs;
      for (const auto& [d, g] : f.qrels.judgments(qid)) gs.push_back(g);
      std::sort(gs.rbegin(), gs.rend());
      double idcg = 0.0;
      for (std::size_t i = 0; i < std::min(n, gs.size()); ++i) idcg += (std::pow(2.0, gs[i]) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
      nd += idcg > 0 ? dcg / idcg : 0.0;
    }
    CHECK(std::abs(recall_marco(f.run, f.qrels, n).mean - marco / 20) < 1e-12);
    CHECK(std::abs(recall_dpr(f.run, f.qrels, n).mean - dpr / 20) < 1e-12);
    CHECK(std::abs(ndcg_at_k(f.run, f.qrels, n).mean - nd / 20) < 1e-12);
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    auto f = random_fixture(rng, 5);
    for (std::size_t n : {1u, 3u, 10u, 100u}) {
      auto m = recall_marco(f.run, f.qrels, n);
      auto d = recall_dpr(f.run, f.qrels, n);
      for (const auto& [qid, v] : m.per_query) {
        CHECK(d.per_query.at(qid) >= v);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      auto nd = ndcg_at_k(f.run, f.qrels, n).mean;
      CHECK(nd >= 0.0);
      CHECK(nd <= 1.0 + 1e-12);
    }
    // Recomputation is bit-identical.
    CHECK(mrr_at_k(f.run, f.qrels).mean == mrr_at_k(f.run, f.qrels).mean);
  }
}

TEST_CASE("flops metric") {
  const std::size_t vocab = 8;
  // Every doc and query carries term 1.
  std::vector<SparseLexVec> docs{SparseLexVec({{1, 0.5}}), SparseLexVec({{1, 0.7}})};
  auto idx = ImpactIndex::build({"a", "b"}, docs, vocab);
  std::vector<QuantizedVec> qs{QuantizedVec({{1, 3}}), QuantizedVec({{1, 9}})};
  CHECK(flops_metric(idx, qs) == 1.0);
  // Disjoint halves.
  std::vector<SparseLexVec> low{SparseLexVec({{0, 1.0}, {1, 1.0}}), SparseLexVec({{2, 1.0}})};
  auto idx2 = ImpactIndex::build({"a", "b"}, low, vocab);
  std::vector<QuantizedVec> high{QuantizedVec({{5, 3}}), QuantizedVec({{6, 1}, {7, 2}})};
  CHECK(flops_metric(idx2, high) == 0.0);
  CHECK_THROWS(flops_metric(idx2, std::vector<QuantizedVec>{}));
  // Double-loop oracle on random vectors.
  std::mt19937_64 rng(14);
  auto rand_vec = [&](double density) {
    std::vector<SparseLexVec::Entry> e;
    for (TermId t = 0; t < 30; ++t) {
      if (uniform_unit(rng) < density) e.emplace_back(t, 0.05 + uniform_unit(rng));
    }
    return SparseLexVec(e);
  };
  std::vector<SparseLexVec> dv;
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) {
    dv.push_back(rand_vec(0.3));
    ids.push_back("d" + std::to_string(i));
  }
  std::vector<QuantizedVec> qv;
  for (int i = 0; i < 20; ++i) qv.push_back(quantize(rand_vec(0.2)));
  auto idx3 = ImpactIndex::build(ids, dv, 30);
  double expect = 0.0;
  for (const auto& q : qv) {
    for (std::size_t d = 0; d < dv.size(); ++d) {
      const auto dq = quantize(dv[d]);
      for (const auto& [t, w] : q.entries()) expect += dq.impact(t) > 0 ? 1.0 : 0.0;
    }
  }
  expect /= 100.0 * 20.0;
  CHECK(flops_metric(idx3, qv) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("nearest-rank percentiles") {
  std::vector<double> s{5, 1, 4, 2, 3};
  CHECK(percentile(s, 50) == 3);
  CHECK(percentile(s, 100) == 5);
  CHECK(percentile(s, 1) == 1);
  CHECK(percentile(s, 80) == 4);
  CHECK_THROWS(percentile({}, 50));
  CHECK_THROWS(percentile(s, 0));
}

TEST_CASE("qps harness") {
  std::vector<EncodedQuery> qs(3);
  std::size_t calls = 0;
  auto r = qps_bench("noop", qs, 4, [&](const EncodedQuery&) { ++calls; });
  CHECK(calls == 12);
  CHECK(r.queries == 3);
  CHECK(r.trials == 4);
  CHECK(r.threads == 1);
  CHECK(r.qps > 0.0);
  CHECK(r.p50_ms <= r.p95_ms);
  CHECK(r.p95_ms <= r.p99_ms);
  CHECK(r.to_json()["scheme"] == "noop");
  CHECK_THROWS(qps_bench("x", std::vector<EncodedQuery>{}, 1, [](const EncodedQuery&) {}));
  CHECK_THROWS(qps_bench("x", qs, 0, [](const EncodedQuery&) {}));
}
