#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "unifier/encoder.hpp"
#include "unifier/util.hpp"

using namespace unifier;

namespace {

std::vector<TermId> toks(std::initializer_list<TermId> t) { return t; }

}  // namespace

TEST_CASE("config validation") {
  auto c = fixtures::toy_config();
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.layers_lex = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.sep_id = bad.cls_id;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.cls_id = 64;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("contextualize returns one row per wrapped token") {
  auto cfg = fixtures::toy_config();
  Model m(cfg, 1);
  nd::Tape tape(false);
  auto h = contextualize(tape, m.params, cfg, toks({5, 6, 7}));
  CHECK(h.rows() == 5);
  CHECK(h.cols() == cfg.embed_dim);
  std::vector<TermId> long_input(cfg.max_seq_len - 1, 5);
  CHECK_THROWS_AS(contextualize(tape, m.params, cfg, long_input), std::invalid_argument);
  CHECK_THROWS_AS(contextualize(tape, m.params, cfg, toks({64})), std::invalid_argument);
}

TEST_CASE("swapping two tokens changes the other rows only through attention") {
  auto cfg = fixtures::toy_config();
  cfg.layers_ctx = 1;
  Model m = fixtures::random_model(cfg, 3);
  // With attention output projection zeroed the trunk is position-wise.
  for (auto& l : m.params.ctx) {
    for (double& v : l.wo.mutable_data()) v = 0.0;
    for (double& v : l.bo.mutable_data()) v = 0.0;
  }
  nd::Tape t1(false), t2(false);
  auto a = contextualize(t1, m.params, cfg, toks({5, 6, 7, 8}));
  auto b = contextualize(t2, m.params, cfg, toks({5, 7, 6, 8}));
  for (std::size_t c = 0; c < cfg.embed_dim; ++c) {
    CHECK(a.at(0, c) == b.at(0, c));
    CHECK(a.at(1, c) == b.at(1, c));
    CHECK(a.at(4, c) == b.at(4, c));
  }
  Model full = fixtures::random_model(cfg, 3);
  nd::Tape t3(false), t4(false);
  auto c1 = contextualize(t3, full.params, cfg, toks({5, 6, 7, 8}));
  auto c2 = contextualize(t4, full.params, cfg, toks({5, 7, 6, 8}));
  bool differs = false;
  for (std::size_t c = 0; c < cfg.embed_dim; ++c) differs |= c1.at(1, c) != c2.at(1, c);
  CHECK(differs);
}

TEST_CASE("dense head is a deterministic e-vector that depends on H") {
  auto cfg = fixtures::toy_config();
  Model m = fixtures::random_model(cfg, 4);
  nd::Tape tape(false);
  auto h = contextualize(tape, m.params, cfg, toks({9, 10, 11}));
  auto u1 = dense_head(tape, m.params, cfg, h);
  auto u2 = dense_head(tape, m.params, cfg, h);
  CHECK(u1.cols() == cfg.embed_dim);
  CHECK(std::vector<double>(u1.values().begin(), u1.values().end()) ==
        std::vector<double>(u2.values().begin(), u2.values().end()));
  auto z = tape.constant(h.rows(), h.cols(), std::vector<double>(h.rows() * h.cols(), 0.0));
  auto uz = dense_head(tape, m.params, cfg, z);
  bool differs = false;
  for (std::size_t c = 0; c < cfg.embed_dim; ++c) differs |= uz.values()[c] != u1.values()[c];
  CHECK(differs);
}

TEST_CASE("saturation keeps non-positive logits out and maps 1 to log 2") {
  nd::Tape tape(false);
  auto logits = tape.constant(2, 3, {-1.0, 1.0, 0.0, -2.0, 0.5, -0.1});
  auto v = saturate(logits);
  CHECK(v.values()[0] == 0.0);
  CHECK(v.values()[1] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(v.values()[2] == 0.0);
  auto sparse = SparseLexVec::from_dense(v.values());
  CHECK(sparse.nnz() == 1);
  CHECK(sparse.weight(1) == doctest::Approx(0.6931).epsilon(1e-4));
}

TEST_CASE("raising one logit never lowers its term weight") {
  std::mt19937_64 rng(8);
  std::vector<double> base(4 * 6);
  for (auto& x : base) x = standard_normal(rng);
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto up = base;
    up[i] += 0.37;
    nd::Tape tape(false);
    auto a = saturate(tape.constant(4, 6, base));
    auto b = saturate(tape.constant(4, 6, up));
    for (std::size_t j = 0; j < 6; ++j) {
      if (j == i % 6) CHECK(b.values()[j] >= a.values()[j]);
      else CHECK(b.values()[j] == a.values()[j]);
    }
  }
}

TEST_CASE("encode is deterministic, non-negative and honours share_global") {
  auto cfg = fixtures::toy_config();
  Model m = fixtures::random_model(cfg, 5);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    auto t = fixtures::random_tokens(rng, cfg.vocab_size, 6);
    auto a = encode(m, t);
    CHECK(a == encode(m, t));
    CHECK(a.dense.size() == cfg.embed_dim);
    for (double x : a.dense.values()) CHECK(std::isfinite(x));
    for (const auto& [term, w] : a.lex.entries()) CHECK(w > 0.0);
  }
  Model no_share = m;
  no_share.config.share_global = false;
  auto t = toks({5, 6, 7, 8, 9});
  CHECK(encode(m, t).dense == encode(no_share, t).dense);
  CHECK_FALSE(encode(m, t).lex == encode(no_share, t).lex);
}

TEST_CASE("parameter partition") {
  auto cfg = fixtures::toy_config();
  Model m(cfg, 1, true);
  std::map<ParamGroup, std::size_t> count;
  bool embedding_in_lex = false;
  for (const auto& p : m.named()) {
    ++count[p.group];
    if (p.tensor == &m.params.word_embedding) embedding_in_lex = p.group == ParamGroup::lex;
  }
  CHECK(embedding_in_lex);
  CHECK(count[ParamGroup::ctx] > 0);
  CHECK(count[ParamGroup::den] > 0);
  CHECK(count[ParamGroup::lex] > 0);
  CHECK(count[ParamGroup::gate] == 4);
  // Every tensor of every layer is listed exactly once.
  std::set<const nd::Tensor*> seen;
  for (const auto& p : m.named()) CHECK(seen.insert(p.tensor).second);
}

TEST_CASE("lexicon-only losses leave the dense stack untouched") {
  auto cfg = fixtures::toy_config();
  Model m = fixtures::random_model(cfg, 6);
  auto batches = fixtures::random_batches(cfg.vocab_size, 2, 3, 17);
  auto g = gradcheck::lexicon_only_grads(m, batches, 0.01);
  CHECK(g[ParamGroup::den] == 0.0);
  CHECK(g[ParamGroup::ctx] > 0.0);
  CHECK(g[ParamGroup::lex] > 0.0);
}

TEST_CASE("encoder gradients match finite differences") {
  auto cfg = fixtures::toy_config();
  Model m = fixtures::random_model(cfg, 7);
  auto batches = fixtures::random_batches(cfg.vocab_size, 2, 3, 23);
  StageLossConfig lc{Stage::warmup, 0.01, false, false};
  auto rep = gradcheck::check(m, batches, lc, 4, 99);
  for (const auto& [group, r] : rep) {
    INFO(to_string(group), " ", r.worst);
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("checkpoint round trip and fingerprint") {
  auto cfg = fixtures::toy_config();
  Model m = fixtures::random_model(cfg, 9, true);
  auto dir = fixtures::temp_dir("encoder_ckpt");
  m.save(dir / "m.ckpt");
  Model back = Model::load(dir / "m.ckpt");
  CHECK(back.config == m.config);
  CHECK(back.fingerprint() == m.fingerprint());
  CHECK(file_hash(dir / "m.ckpt") == m.fingerprint());
  auto t = toks({4, 8, 15, 16});
  CHECK(encode(back, t) == encode(m, t));
  CHECK(gate_value(back, encode(m, t).dense) == gate_value(m, encode(m, t).dense));
}

TEST_CASE("gate output lies strictly inside (0, 1)") {
  auto cfg = fixtures::toy_config();
  Model m = fixtures::random_model(cfg, 10, true, 1.0);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const double g = gate_value(m, encode(m, fixtures::random_tokens(rng, cfg.vocab_size, 5)).dense);
    CHECK(g > 0.0);
    CHECK(g < 1.0);
  }
}

TEST_CASE("encode_all preserves order") {
  auto cfg = fixtures::toy_config();
  Model m = fixtures::random_model(cfg, 11);
  auto docs = fixtures::random_corpus(12, cfg.vocab_size, 4);
  set_thread_count(3);
  auto all = encode_all(m, docs);
  set_thread_count(1);
  for (std::size_t i = 0; i < docs.size(); ++i) CHECK(all[i] == encode(m, docs[i].tokens));
}
