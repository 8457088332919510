#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "unifier/manifest.hpp"
#include "unifier/pipeline.hpp"
#include "unifier/search.hpp"
#include "unifier/util.hpp"

using namespace unifier;

namespace {

SynthTask small_task(std::uint64_t seed = 7) {
  SynthConfig c;
  c.seed = seed;
  c.num_docs = 200;
  c.train_queries = 24;
  c.dev_queries = 8;
  c.topics = 8;
  c.entities = 40;
  c.noise_words = 30;
  return generate_synth(c);
}

TrainConfig small_train(const SynthTask& t) {
  TrainConfig c;
  c.encoder = fixtures::toy_config(t.config.vocab_size(), 16);
  c.mine_depth = 10;
  c.warmup = StageConfig{4, 3, 3e-3, 42, 0.1, 0.0016, 6, 0.01, false, false};
  c.continual = StageConfig{4, 3, 1e-3, 22, 0.1, 0.0024, 4, 0.01, false, true};
  return c;
}

std::vector<std::vector<double>> snapshot(Model& m) {
  std::vector<std::vector<double>> out;
  for (auto& p : m.named()) out.emplace_back(p.tensor->data().begin(), p.tensor->data().end());
  return out;
}

}  // namespace

TEST_CASE("stage and train config validation and json") {
  StageConfig s;
  CHECK_NOTHROW(s.validate());
  auto bad = s;
  bad.batch_queries = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.negatives = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  s.steps = 17;
  s.share_positives = true;
  auto back = StageConfig::from_json(s.to_json(), StageConfig{});
  CHECK(back.to_json() == s.to_json());
  auto partial = StageConfig::from_json(nlohmann::json{{"lr", 0.5}}, s);
  CHECK(partial.lr == 0.5);
  CHECK(partial.steps == 17);

  TrainConfig t;
  t.encoder = fixtures::toy_config();
  t.mine_depth = 9;
  auto tb = TrainConfig::from_json(t.to_json());
  CHECK(tb.to_json() == t.to_json());
  CHECK(tb.encoder == t.encoder);
  CHECK(TrainConfig::from_json(nlohmann::json::object()).mine_depth == TrainConfig{}.mine_depth);
}

TEST_CASE("negative pool") {
  NegativePool p;
  CHECK(p.add("q1", "d3", NegSource::dense));
  CHECK(p.add("q1", "d1", NegSource::dense));
  CHECK_FALSE(p.add("q1", "d3", NegSource::dense));
  CHECK(p.add("q1", "d3", NegSource::lex));
  CHECK(p.add("q1", "d9", NegSource::lex));
  CHECK(p.add("q2", "d1", NegSource::bm25));
  CHECK(p.size() == 5);
  CHECK(p.get("q1", NegSource::dense) == std::vector<std::string>{"d3", "d1"});
  const std::vector<NegSource> both{NegSource::dense, NegSource::lex};
  CHECK(p.merged("q1", both) == std::vector<std::string>{"d3", "d1", "d9"});
  CHECK(p.get("q3", NegSource::bm25).empty());
  CHECK(p.queries() == std::vector<std::string>{"q1", "q2"});
  auto dir = fixtures::temp_dir("pool_io");
  write_pool(dir / "pool.txt", p);
  CHECK(read_pool(dir / "pool.txt") == p);
  for (NegSource s : {NegSource::bm25, NegSource::dense, NegSource::lex}) CHECK(parse_neg_source(to_string(s)) == s);
  CHECK_THROWS(parse_neg_source("random"));
}

TEST_CASE("bm25 mining matches an exhaustive oracle and never returns positives") {
  auto corpus = fixtures::random_corpus(80, 30, 11);
  auto queries = fixtures::random_corpus(15, 30, 12, "q");
  Qrels qrels;
  for (std::size_t i = 0; i < queries.size(); ++i) qrels.add(queries[i].id, corpus[i * 3].id, 1);
  auto bm = Bm25Index::build(corpus);
  const std::size_t depth = 7;
  auto r = mine_bm25_negatives(queries, bm, qrels, depth);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto all = search_bm25(queries[i].tokens, bm, corpus.size());
    std::vector<std::string> expect;
    for (const auto& h : all) {
      const auto& id = bm.docs().id(h.doc);
      if (id == corpus[i * 3].id) continue;
      if (expect.size() < depth) expect.push_back(id);
    }
    CHECK(r.pool.get(queries[i].id, NegSource::bm25) == expect);
  }

  // A query whose only lexical match is its positive gets no negatives.
  std::vector<Document> docs{{"a", {4, 5}}, {"b", {6, 7}}, {"c", {6, 8}}};
  std::vector<Query> qs{{"lonely", {4}}, {"busy", {6}}};
  Qrels qr;
  qr.add("lonely", "a", 1);
  qr.add("busy", "b", 1);
  auto small = mine_bm25_negatives(qs, Bm25Index::build(docs), qr, 1);
  CHECK(small.skipped == std::vector<std::string>{"lonely"});
  CHECK(small.pool.get("busy", NegSource::bm25) == std::vector<std::string>{"c"});
}

TEST_CASE("dual mining follows both heads of the checkpoint") {
  auto cfg = fixtures::toy_config(40, 16);
  auto model = fixtures::random_model(cfg, 21, false, 0.3);
  auto corpus = fixtures::random_corpus(60, 40, 22);
  auto queries = fixtures::random_corpus(10, 40, 23, "q");
  Qrels qrels;
  for (std::size_t i = 0; i < queries.size(); ++i) qrels.add(queries[i].id, corpus[i].id, 1);
  auto set = build_indexes(corpus, model);
  auto r = mine_dual_negatives(queries, model, set, qrels, 5);
  double overlap = 0.0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto q = encode_query(model, queries[i]);
    auto take = [&](std::vector<Hit> hits, const DocTable& docs) {
      std::vector<std::string> out;
      for (const auto& h : hits) {
        if (docs.id(h.doc) != corpus[i].id && out.size() < 5) out.push_back(docs.id(h.doc));
      }
      return out;
    };
    const auto d = take(search_dense(q, set.dense, 60), set.dense.docs());
    const auto l = take(search_lexicon(q, set.lexicon, 60), set.lexicon.docs());
    CHECK(r.pool.get(queries[i].id, NegSource::dense) == d);
    CHECK(r.pool.get(queries[i].id, NegSource::lex) == l);
    std::size_t common = 0;
    for (const auto& x : l) common += std::count(d.begin(), d.end(), x);
    overlap += common / 5.0;
  }
  CHECK(r.overlap == doctest::Approx(overlap / 10.0).epsilon(1e-12));

  auto other = fixtures::random_model(cfg, 99);
  CHECK_THROWS_AS(mine_dual_negatives(queries, other, set, qrels, 5), std::invalid_argument);
}

TEST_CASE("learning-rate schedule") {
  // 10 steps, ratio 0.2: two warmup steps then linear decay to 1/8 of base.
  CHECK(scheduled_lr(1.0, 0, 10, 0.2) == 0.5);
  CHECK(scheduled_lr(1.0, 1, 10, 0.2) == 1.0);
  CHECK(scheduled_lr(1.0, 2, 10, 0.2) == 1.0);
  CHECK(scheduled_lr(1.0, 6, 10, 0.2) == 0.5);
  CHECK(scheduled_lr(1.0, 9, 10, 0.2) == 0.125);
  // ceil(0.05 * 30) = 2 warmup steps.
  CHECK(scheduled_lr(2.0, 0, 30, 0.05) == 1.0);
  for (std::size_t s = 0; s < 100; ++s) {
    const double lr = scheduled_lr(1.0, s, 100, 0.05);
    CHECK(lr > 0.0);
    CHECK(lr <= 1.0);
  }
}

TEST_CASE("adamw decays matrices but not vectors") {
  nd::Tensor w({2, 3}, 1.0);
  nd::Tensor b({1, 3}, 1.0);
  std::vector<NamedParam> ps{{"w", ParamGroup::ctx, &w}, {"b", ParamGroup::ctx, &b}};
  for (auto* t : {&w, &b}) std::fill(t->mutable_grad().begin(), t->mutable_grad().end(), 0.0);
  AdamW opt(ps, 0.1);
  opt.step(0.5);
  CHECK(opt.steps_taken() == 1);
  for (double x : w.data()) CHECK(x == doctest::Approx(1.0 - 0.5 * 0.1).epsilon(1e-15));
  for (double x : b.data()) CHECK(x == 1.0);

  // First step with a gradient moves each weight by lr * g/(|g| + eps).
  nd::Tensor v({1, 2}, std::vector<double>{0.0, 0.0});
  v.mutable_grad()[0] = 4.0;
  v.mutable_grad()[1] = -0.25;
  AdamW opt2({{"v", ParamGroup::lex, &v}}, 0.0);
  opt2.step(0.01);
  CHECK(v.data()[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(v.data()[1] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("batch sampler is deterministic and keeps positives out of the negatives") {
  auto task = small_task();
  auto bm = Bm25Index::build(task.corpus);
  auto pool = mine_bm25_negatives(task.train_queries, bm, task.train_qrels, 10).pool;
  StageConfig cfg{4, 3, 1e-3, 5, 0.1, 0.0, 20, 0.0, false, true};
  BatchSampler a(Stage::warmup, cfg, task.corpus, task.train_queries, task.train_qrels, pool);
  BatchSampler b(Stage::warmup, cfg, task.corpus, task.train_queries, task.train_qrels, pool);
  std::map<std::string, std::size_t> seen;
  for (int step = 0; step < 20; ++step) {
    auto x = a.next();
    auto y = b.next();
    REQUIRE(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(x[i].query.id == y[i].query.id);
      CHECK(x[i].positive.id == y[i].positive.id);
      CHECK(x[i].negatives.size() == y[i].negatives.size());
      CHECK(task.train_qrels.is_relevant(x[i].query.id, x[i].positive.id));
      CHECK(x[i].negatives.size() >= 3);
      const auto own = pool.get(x[i].query.id, NegSource::bm25);
      for (std::size_t k = 0; k < x[i].negatives.size(); ++k) {
        CHECK_FALSE(task.train_qrels.is_relevant(x[i].query.id, x[i].negatives[k].id));
        if (k < 3) CHECK(std::find(own.begin(), own.end(), x[i].negatives[k].id) != own.end());
      }
      CHECK_NOTHROW(x[i].validate());
      ++seen[x[i].query.id];
    }
  }
  // Epoch-style shuffling visits every eligible query.
  CHECK(seen.size() + a.skipped().size() == task.train_queries.size());

  StageConfig distill = cfg;
  distill.distill = true;
  CHECK_THROWS_AS(BatchSampler(Stage::warmup, distill, task.corpus, task.train_queries, task.train_qrels, pool),
                  std::invalid_argument);
  CHECK_THROWS_AS(BatchSampler(Stage::warmup, cfg, task.corpus, task.train_queries, task.train_qrels, NegativePool{}),
                  std::runtime_error);
}

TEST_CASE("training steps") {
  auto task = small_task();
  auto bm = Bm25Index::build(task.corpus);
  auto pool = mine_bm25_negatives(task.train_queries, bm, task.train_qrels, 10).pool;
  auto cfg = fixtures::toy_config(task.config.vocab_size(), 16);

  SUBCASE("zero steps leave the parameters untouched") {
    Model m(cfg, 1, true);
    const auto before = m.fingerprint();
    StageConfig s{4, 3, 1e-3, 5, 0.1, 0.0016, 0, 0.01, false, false};
    auto r = train_stage(Stage::warmup, s, task.corpus, task.train_queries, task.train_qrels, pool, m);
    CHECK(r.batches == 0);
    CHECK(m.fingerprint() == before);
  }

  SUBCASE("a small step on a fixed batch lowers its loss") {
    Model m(cfg, 2, false);
    StageConfig s{4, 3, 1e-4, 5, 0.0, 0.0016, 1, 0.0, false, false};
    BatchSampler sampler(Stage::warmup, s, task.corpus, task.train_queries, task.train_qrels, pool);
    const auto batches = sampler.next();
    const StageLossConfig lc{Stage::warmup, s.lambda_flops, false, false};
    auto loss_of = [&](Model& model) {
      nd::Tape tape(false);
      return stage_loss(tape, model, batches, lc).report.total;
    };
    const double before = loss_of(m);
    auto r = train_stage(Stage::warmup, s, task.corpus, task.train_queries, task.train_qrels, pool, m);
    CHECK(r.log[0].total == doctest::Approx(before).epsilon(1e-12));
    CHECK(loss_of(m) < before);
  }

  SUBCASE("the continual stage leaves the gate alone and audits its negatives") {
    Model m(cfg, 3, true);
    auto indexes = build_indexes(task.corpus, m);
    auto dual = mine_dual_negatives(task.train_queries, m, indexes, task.train_qrels, 8).pool;
    auto gate_values = [&] {
      std::vector<double> v;
      for (auto& p : m.named()) {
        if (p.group == ParamGroup::gate) v.insert(v.end(), p.tensor->data().begin(), p.tensor->data().end());
      }
      return v;
    };
    const auto gate_copy = gate_values();
    REQUIRE_FALSE(gate_copy.empty());
    StageConfig s{4, 3, 1e-3, 22, 0.1, 0.0024, 3, 0.01, false, true};
    auto r = train_stage(Stage::continual, s, task.corpus, task.train_queries, task.train_qrels, dual, m);
    CHECK(r.batches == 3);
    CHECK(r.negatives_outside_pool == 0);
    CHECK(r.positives_as_negatives == 0);
    CHECK(gate_values() == gate_copy);
    for (const auto& l : r.log) {
      CHECK(l.l_gate == 0.0);
      CHECK(l.total == doctest::Approx(l.sum_of_parts()).epsilon(1e-12));
    }
  }

  SUBCASE("the same seed gives the same checkpoint") {
    StageConfig s{4, 3, 1e-3, 9, 0.1, 0.0016, 3, 0.01, false, true};
    Model a(cfg, 4, true), b(cfg, 4, true);
    set_thread_count(1);
    train_stage(Stage::warmup, s, task.corpus, task.train_queries, task.train_qrels, pool, a);
    set_thread_count(3);
    train_stage(Stage::warmup, s, task.corpus, task.train_queries, task.train_qrels, pool, b);
    set_thread_count(1);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(snapshot(a) == snapshot(b));
  }
}

TEST_CASE("full pipeline writes its artifacts and resumes") {
  auto task = small_task();
  auto cfg = small_train(task);
  auto dir = fixtures::temp_dir("pipeline_full");
  auto r = run_full_pipeline(cfg, task.corpus, task.train_queries, task.train_qrels, dir);
  CHECK(r.resumed.empty());
  for (const char* f : {"bm25_pool.txt", "warmup.ckpt", "warmup_log.jsonl", "dual_pool.txt", "continual.ckpt",
                        "continual_log.jsonl", "pipeline.json", "manifest.jsonl"}) {
    CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
  }
  CHECK(r.warmup_stage.batches == cfg.warmup.steps);
  CHECK(r.continual_stage.batches == cfg.continual.steps);
  CHECK(r.continual_stage.negatives_outside_pool == 0);
  CHECK(r.continual_stage.positives_as_negatives == 0);
  CHECK(r.dual_overlap >= 0.0);
  CHECK(r.dual_overlap <= 1.0);
  // Continual negatives come only from the dual pool.
  for (const auto& q : r.dual_pool.queries()) CHECK(r.dual_pool.get(q, NegSource::bm25).empty());
  CHECK(Model::load(dir / "continual.ckpt").fingerprint() == r.final_model.fingerprint());
  CHECK(r.final_model.fingerprint() != r.warmup.fingerprint());

  auto again = run_full_pipeline(cfg, task.corpus, task.train_queries, task.train_qrels, dir);
  CHECK(again.resumed == std::vector<std::string>{"bm25_pool", "warmup", "dual_pool", "continual"});
  CHECK(again.final_model.fingerprint() == r.final_model.fingerprint());
  CHECK(read_manifests(dir).size() == 2);

  // Changing the continual config recomputes only that stage.
  auto changed = cfg;
  changed.continual.lr *= 2.0;
  auto third = run_full_pipeline(changed, task.corpus, task.train_queries, task.train_qrels, dir);
  CHECK(third.resumed == std::vector<std::string>{"bm25_pool", "warmup", "dual_pool"});
  CHECK(third.final_model.fingerprint() != r.final_model.fingerprint());

  // A fresh directory reproduces the original checkpoint.
  auto dir2 = fixtures::temp_dir("pipeline_full_again");
  auto fresh = run_full_pipeline(cfg, task.corpus, task.train_queries, task.train_qrels, dir2);
  CHECK(fresh.final_model.fingerprint() == r.final_model.fingerprint());
  CHECK(file_hash(dir / "bm25_pool.txt") == file_hash(dir2 / "bm25_pool.txt"));
  CHECK(file_hash(dir2 / "warmup.ckpt") == r.warmup.fingerprint());
}

TEST_CASE("vocabulary inference") {
  std::vector<Document> docs{{"a", {4, 9}}};
  std::vector<Query> qs{{"q", {12}}};
  CHECK(infer_vocab_size(docs, qs) == 13);
  CHECK(infer_vocab_size(std::vector<Document>{}, std::vector<Query>{}) == kFirstContentToken);
}
