#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "unifier/repr.hpp"
#include "unifier/util.hpp"

using namespace unifier;

TEST_CASE("quantize examples") {
  CHECK(quantize(SparseLexVec({{7, 0.123}})) == QuantizedVec({{7, 12}}));
  CHECK(quantize(SparseLexVec({{3, 0.009}})).empty());
  CHECK(quantize(SparseLexVec({{1, 1.0}, {2, 0.5049}})) == QuantizedVec({{1, 100}, {2, 50}}));
}

TEST_CASE("quantize is lossless on two-decimal weights") {
  for (int k = 1; k <= 20000; ++k) {
    CHECK(quantize_weight(k / 100.0) == static_cast<Impact>(k));
  }
}

TEST_CASE("quantize floors random weights") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10000; ++i) {
    const double w = 5.0 * uniform_unit(rng);
    const double scaled = 100.0 * w;
    const auto q = quantize_weight(w);
    // Away from integer boundaries the snap never triggers.
    if (std::abs(scaled - std::round(scaled)) > 1e-6) CHECK(q == static_cast<Impact>(std::floor(scaled)));
  }
}

TEST_CASE("sparse vector validation") {
  CHECK_THROWS_AS(SparseLexVec({{2, 1.0}, {1, 1.0}}), std::invalid_argument);
  CHECK_THROWS_AS(SparseLexVec({{1, 0.0}}), std::invalid_argument);
  CHECK_THROWS_AS(SparseLexVec({{1, -1.0}}), std::invalid_argument);
  CHECK_THROWS_AS(SparseLexVec({{1, NAN}}), std::invalid_argument);
  auto v = SparseLexVec::from_dense(std::vector<double>{0.0, 2.0, 0.0, 1.0});
  CHECK(v.nnz() == 2);
  CHECK(v.weight(1) == 2.0);
  CHECK(v.weight(0) == 0.0);
  CHECK(v.to_dense(5) == std::vector<double>{0.0, 2.0, 0.0, 1.0, 0.0});
}

TEST_CASE("top_n keeps the largest weights with low ids winning ties") {
  SparseLexVec v({{1, 0.5}, {2, 0.9}, {3, 0.5}, {4, 0.1}, {5, 0.9}});
  CHECK(v.top_n(2) == SparseLexVec({{2, 0.9}, {5, 0.9}}));
  CHECK(v.top_n(3) == SparseLexVec({{1, 0.5}, {2, 0.9}, {5, 0.9}}));
  CHECK(v.top_n(10) == v);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<SparseLexVec::Entry> e;
    for (TermId t = 0; t < 10; ++t) e.emplace_back(t, 0.01 + uniform_unit(rng));
    SparseLexVec r(e);
    auto sorted = e;
    std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    sorted.resize(4);
    std::sort(sorted.begin(), sorted.end());
    CHECK(r.top_n(4) == SparseLexVec(sorted));
  }
}

TEST_CASE("sparse_dot examples and dense oracle") {
  CHECK(sparse_dot(SparseLexVec({{1, 2.0}}), SparseLexVec({{2, 3.0}})) == 0.0);
  CHECK(sparse_dot(SparseLexVec({{1, 2.0}, {2, 1.0}}), SparseLexVec({{1, 0.5}})) == 1.0);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto make = [&] {
      std::vector<double> d(100, 0.0);
      for (int k = 0; k < 20; ++k) d[uniform_index(rng, 100)] = 0.1 + uniform_unit(rng);
      return d;
    };
    auto da = make(), db = make();
    double expect = 0.0;
    for (int i = 0; i < 100; ++i) expect += da[i] * db[i];
    auto a = SparseLexVec::from_dense(da), b = SparseLexVec::from_dense(db);
    CHECK(sparse_dot(a, b) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(sparse_dot(a, b) == sparse_dot(b, a));
  }
}

TEST_CASE("quantized dot approximates the real dot on two-decimal weights") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<SparseLexVec::Entry> ea, eb;
    for (TermId t = 0; t < 30; ++t) {
      if (uniform_unit(rng) < 0.5) ea.emplace_back(t, (1 + uniform_index(rng, 300)) / 100.0);
      if (uniform_unit(rng) < 0.5) eb.emplace_back(t, (1 + uniform_index(rng, 300)) / 100.0);
    }
    SparseLexVec a(ea), b(eb);
    CHECK(static_cast<double>(impact_dot(quantize(a), quantize(b))) / 10000.0 ==
          doctest::Approx(sparse_dot(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("dense_dot") {
  CHECK(dense_dot(DenseVec({1, 0, 0}), DenseVec({0, 1, 0})) == 0.0);
  CHECK(dense_dot(DenseVec({1, 2}), DenseVec({3, 4})) == 11.0);
  CHECK_THROWS_AS(dense_dot(DenseVec({1, 2}), DenseVec({3})), std::invalid_argument);
  std::mt19937_64 rng(8);
  std::vector<double> a(64), b(64);
  for (auto& x : a) x = standard_normal(rng);
  for (auto& x : b) x = standard_normal(rng);
  long double expect = 0.0L;
  for (int i = 0; i < 64; ++i) expect += static_cast<long double>(a[i]) * b[i];
  CHECK(dense_dot(DenseVec(a), DenseVec(b)) == doctest::Approx(static_cast<double>(expect)).epsilon(1e-12));
  CHECK(dense_dot(DenseVec(a), DenseVec(b)) == dense_dot(DenseVec(b), DenseVec(a)));
}

TEST_CASE("run file ordering and duplicates") {
  RunFile run;
  run.set("q", {{"b", 1.0}, {"a", 1.0}, {"c", 2.0}});
  const auto& r = run.ranking("q");
  REQUIRE(r.size() == 3);
  CHECK(r[0].doc_id == "c");
  CHECK(r[1].doc_id == "a");
  CHECK(r[2].doc_id == "b");
  auto copy = r;
  sort_ranking(copy);
  CHECK(copy == r);
  CHECK_THROWS_AS(run.set("q2", {{"a", 1.0}, {"a", 2.0}}), std::invalid_argument);
}

TEST_CASE("qrels") {
  Qrels q;
  q.add("q1", "d2", 1);
  q.add("q1", "d1", 0);
  q.add("q1", "d3", 2);
  CHECK(q.relevant("q1") == std::vector<std::string>{"d2", "d3"});
  CHECK(q.is_relevant("q1", "d3"));
  CHECK_FALSE(q.is_relevant("q1", "d1"));
  CHECK(q.judgments("nope").empty());
  CHECK_THROWS_AS(q.add("q1", "d4", -1), std::invalid_argument);
}

TEST_CASE("text formats round trip") {
  auto dir = fixtures::temp_dir("repr_io");
  std::vector<Document> docs{{"d1", {4, 5, 6}}, {"d2", {7}}};
  write_documents(dir / "c.jsonl", docs);
  auto back = read_documents(dir / "c.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "d1");
  CHECK(back[0].tokens == docs[0].tokens);
  CHECK(back[1].tokens == docs[1].tokens);

  Qrels q;
  q.add("q1", "d1", 1);
  q.add("q2", "d2", 3);
  write_qrels(dir / "qrels.txt", q);
  CHECK(read_qrels(dir / "qrels.txt").all() == q.all());

  RunFile run;
  run.set("q1", {{"d1", 2.5}, {"d2", -1.0}});
  write_run(dir / "run.txt", run, "tag");
  CHECK(read_run(dir / "run.txt") == run);
  CHECK(read_text(dir / "run.txt").rfind("q1 Q0 d1 1 ", 0) == 0);
}

TEST_CASE("token validation") {
  std::vector<TermId> ok{1, 2, 3};
  CHECK_NOTHROW(validate_tokens(ok, 10));
  CHECK_THROWS_AS(validate_tokens(std::vector<TermId>{}, 10), std::invalid_argument);
  CHECK_THROWS_AS(validate_tokens(std::vector<TermId>{10}, 10), std::invalid_argument);
  CHECK_THROWS_AS(validate_tokens(std::vector<TermId>(5, 1), 10, 4), std::invalid_argument);
}
