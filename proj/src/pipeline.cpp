#include "unifier/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "unifier/manifest.hpp"
#include "unifier/search.hpp"
#include "unifier/util.hpp"

namespace unifier {

// ---------------------------------------------------------------- configs

void StageConfig::validate() const {
  if (batch_queries == 0) throw std::invalid_argument("stage config: batch_queries must be >= 1");
  if (negatives == 0) throw std::invalid_argument("stage config: negatives (M) must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("stage config: lr must be > 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) {
    throw std::invalid_argument("stage config: warmup_ratio must lie in [0, 1]");
  }
  if (!(lambda_flops >= 0.0)) throw std::invalid_argument("stage config: lambda_flops must be >= 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("stage config: weight_decay must be >= 0");
}

nlohmann::json StageConfig::to_json() const {
  return {{"batch_queries", batch_queries}, {"negatives", negatives},
          {"lr", lr},                       {"seed", seed},
          {"warmup_ratio", warmup_ratio},   {"lambda_flops", lambda_flops},
          {"steps", steps},                 {"weight_decay", weight_decay},
          {"distill", distill},             {"share_positives", share_positives}};
}

StageConfig StageConfig::from_json(const nlohmann::json& j, const StageConfig& defaults) {
  StageConfig c = defaults;
  c.batch_queries = j.value("batch_queries", c.batch_queries);
  c.negatives = j.value("negatives", c.negatives);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.lambda_flops = j.value("lambda_flops", c.lambda_flops);
  c.steps = j.value("steps", c.steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.distill = j.value("distill", c.distill);
  c.share_positives = j.value("share_positives", c.share_positives);
  return c;
}

void TrainConfig::validate() const {
  encoder.validate();
  warmup.validate();
  continual.validate();
  if (mine_depth == 0) throw std::invalid_argument("train config: mine_depth must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json enc;
  unifier::to_json(enc, encoder);
  return {{"encoder", enc},
          {"init_seed", init_seed},
          {"gate", gate},
          {"warmup", warmup.to_json()},
          {"continual", continual.to_json()},
          {"mine_depth", mine_depth}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("encoder")) {
    nlohmann::json enc;
    unifier::to_json(enc, c.encoder);
    enc.update(j.at("encoder"));
    unifier::from_json(enc, c.encoder);
  }
  c.init_seed = j.value("init_seed", c.init_seed);
  c.gate = j.value("gate", c.gate);
  if (j.contains("warmup")) c.warmup = StageConfig::from_json(j.at("warmup"), c.warmup);
  if (j.contains("continual")) c.continual = StageConfig::from_json(j.at("continual"), c.continual);
  c.mine_depth = j.value("mine_depth", c.mine_depth);
  return c;
}

std::size_t infer_vocab_size(std::span<const Document> corpus, std::span<const Query> queries) {
  TermId mx = kFirstContentToken - 1;
  for (const auto& d : corpus) {
    for (TermId t : d.tokens) mx = std::max(mx, t);
  }
  for (const auto& q : queries) {
    for (TermId t : q.tokens) mx = std::max(mx, t);
  }
  return static_cast<std::size_t>(mx) + 1;
}

nlohmann::json to_json(const LossReport& r) {
  return {{"l_con_dense", r.l_con_dense}, {"l_con_lex", r.l_con_lex},
          {"l_flops_doc", r.l_flops_doc}, {"l_flops_query", r.l_flops_query},
          {"l_reg", r.l_reg},             {"l_distill", r.l_distill},
          {"l_gate", r.l_gate},           {"lambda_flops", r.lambda_flops},
          {"total", r.total}};
}

// ---------------------------------------------------------------- pools

std::string to_string(NegSource s) {
  switch (s) {
    case NegSource::bm25: return "bm25";
    case NegSource::dense: return "dense";
    case NegSource::lex: return "lex";
  }
  return "?";
}

NegSource parse_neg_source(const std::string& s) {
  if (s == "bm25") return NegSource::bm25;
  if (s == "dense") return NegSource::dense;
  if (s == "lex") return NegSource::lex;
  throw std::invalid_argument("unknown negative source '" + s + "' (expected bm25|dense|lex)");
}

bool NegativePool::add(const std::string& query_id, const std::string& doc_id, NegSource source) {
  auto& list = pool_[query_id][source];
  if (std::find(list.begin(), list.end(), doc_id) != list.end()) return false;
  list.push_back(doc_id);
  return true;
}

std::vector<std::string> NegativePool::get(const std::string& query_id, NegSource source) const {
  auto q = pool_.find(query_id);
  if (q == pool_.end()) return {};
  auto s = q->second.find(source);
  return s == q->second.end() ? std::vector<std::string>{} : s->second;
}

std::vector<std::string> NegativePool::merged(const std::string& query_id,
                                              std::span<const NegSource> sources) const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (NegSource s : sources) {
    for (auto& d : get(query_id, s)) {
      if (seen.insert(d).second) out.push_back(d);
    }
  }
  return out;
}

std::vector<std::string> NegativePool::queries() const {
  std::vector<std::string> out;
  for (const auto& [q, _] : pool_) out.push_back(q);
  return out;
}

std::size_t NegativePool::size() const {
  std::size_t n = 0;
  for (const auto& [q, by_source] : pool_) {
    for (const auto& [s, list] : by_source) n += list.size();
  }
  return n;
}

void write_pool(const std::filesystem::path& path, const NegativePool& pool) {
  std::ostringstream out;
  for (const auto& [q, by_source] : pool.all()) {
    for (const auto& [s, list] : by_source) {
      for (const auto& d : list) out << q << ' ' << d << ' ' << to_string(s) << '\n';
    }
  }
  write_text_atomic(path, out.str());
}

NegativePool read_pool(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  NegativePool pool;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string q, d, s, extra;
    if (!(ls >> q >> d >> s) || (ls >> extra)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected 'qid docid source'");
    }
    pool.add(q, d, parse_neg_source(s));
  }
  return pool;
}

// ---------------------------------------------------------------- mining

namespace {

// Up to top_n doc ids from a ranking, skipping the query's positives.
std::vector<std::string> take_negatives(std::span<const Hit> hits, const DocTable& docs,
                                        const std::set<std::string>& positives, std::size_t top_n) {
  std::vector<std::string> out;
  for (const auto& h : hits) {
    if (out.size() == top_n) break;
    const auto& id = docs.id(h.doc);
    if (!positives.contains(id)) out.push_back(id);
  }
  return out;
}

std::set<std::string> positives_of(const Qrels& qrels, const std::string& qid) {
  const auto rel = qrels.relevant(qid);
  return {rel.begin(), rel.end()};
}

void warn_skipped(const std::vector<std::string>& skipped, const char* what) {
  if (!skipped.empty()) {
    std::cerr << "warning: " << skipped.size() << " queries have no " << what << " negatives\n";
  }
}

}  // namespace

MiningResult mine_bm25_negatives(std::span<const Query> queries, const Bm25Index& index,
                                 const Qrels& qrels, std::size_t top_n) {
  std::vector<std::vector<std::string>> found(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    const auto pos = positives_of(qrels, queries[i].id);
    const auto hits = search_bm25(queries[i].tokens, index, top_n + pos.size());
    found[i] = take_negatives(hits, index.docs(), pos, top_n);
  });
  MiningResult r;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (found[i].empty()) r.skipped.push_back(queries[i].id);
    for (const auto& d : found[i]) r.pool.add(queries[i].id, d, NegSource::bm25);
  }
  warn_skipped(r.skipped, "bm25");
  return r;
}

MiningResult mine_dual_negatives(std::span<const Query> queries, const Model& model,
                                 const IndexSet& indexes, const Qrels& qrels, std::size_t top_n) {
  if (indexes.checkpoint_hash != model.fingerprint()) {
    throw std::invalid_argument("mine_dual_negatives: indexes were not built from this checkpoint");
  }
  std::vector<std::vector<std::string>> dense(queries.size());
  std::vector<std::vector<std::string>> lex(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    const auto pos = positives_of(qrels, queries[i].id);
    const auto q = encode_query(model, queries[i]);
    dense[i] = take_negatives(search_dense(q, indexes.dense, top_n + pos.size()), indexes.dense.docs(),
                              pos, top_n);
    lex[i] = take_negatives(search_lexicon(q, indexes.lexicon, top_n + pos.size()),
                            indexes.lexicon.docs(), pos, top_n);
  });
  MiningResult r;
  double overlap = 0.0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& qid = queries[i].id;
    if (dense[i].empty() && lex[i].empty()) r.skipped.push_back(qid);
    for (const auto& d : dense[i]) r.pool.add(qid, d, NegSource::dense);
    for (const auto& d : lex[i]) r.pool.add(qid, d, NegSource::lex);
    const std::set<std::string> ds(dense[i].begin(), dense[i].end());
    std::size_t common = 0;
    for (const auto& d : lex[i]) common += ds.count(d);
    overlap += static_cast<double>(common) / static_cast<double>(top_n);
  }
  r.overlap = queries.empty() ? 0.0 : overlap / static_cast<double>(queries.size());
  warn_skipped(r.skipped, "dense or lexicon");
  return r;
}

// ---------------------------------------------------------------- optimizer

namespace {

bool decays(const nd::Tensor& t) {
  const auto& s = t.shape();
  return s.size() == 2 && s[0] > 1 && s[1] > 1;
}

}  // namespace

AdamW::AdamW(std::vector<NamedParam> params, double weight_decay, double beta1, double beta2,
             double eps)
    : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor->size(), 0.0);
    v_.emplace_back(p.tensor->size(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& tensor = *params_[i].tensor;
    auto w = tensor.mutable_data();
    const auto g = tensor.grad();
    const double wd = decays(tensor) ? wd_ : 0.0;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      m[k] = b1_ * m[k] + (1.0 - b1_) * gk;
      v[k] = b2_ * v[k] + (1.0 - b2_) * gk * gk;
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * w[k]);
    }
  }
}

double scheduled_lr(double base, std::size_t step, std::size_t steps, double warmup_ratio) {
  if (steps == 0) return base;
  const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(steps)));
  if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (steps == warm) return base;
  return base * static_cast<double>(steps - step) / static_cast<double>(steps - warm);
}

// ---------------------------------------------------------------- sampling

BatchSampler::BatchSampler(Stage stage, const StageConfig& cfg, std::span<const Document> corpus,
                           std::span<const Query> queries, const Qrels& qrels,
                           const NegativePool& pool, const TeacherScores* teacher)
    : stage_(stage), cfg_(cfg), corpus_(corpus), teacher_(teacher), rng_(cfg.seed) {
  cfg_.validate();
  if (cfg_.distill && !teacher_) throw std::invalid_argument("distillation enabled without teacher scores");
  sources_ = stage == Stage::warmup ? std::vector<NegSource>{NegSource::bm25}
                                    : std::vector<NegSource>{NegSource::dense, NegSource::lex};
  for (std::size_t i = 0; i < corpus.size(); ++i) doc_index_[corpus[i].id] = i;
  for (const auto& q : queries) {
    Eligible e{&q, {}, {}};
    const auto pos = positives_of(qrels, q.id);
    relevant_[q.id] = pos;
    for (const auto& d : pos) {
      if (auto it = doc_index_.find(d); it != doc_index_.end()) e.positives.push_back(it->second);
    }
    for (const auto& d : pool.merged(q.id, sources_)) {
      if (pos.contains(d)) continue;
      if (auto it = doc_index_.find(d); it != doc_index_.end()) e.negatives.push_back(it->second);
    }
    if (e.positives.empty() || e.negatives.empty()) {
      skipped_.push_back(q.id);
      continue;
    }
    eligible_.push_back(std::move(e));
  }
  if (!skipped_.empty()) {
    std::cerr << "warning: " << to_string(stage) << " stage skips " << skipped_.size()
              << " queries without a positive or negatives\n";
  }
  if (eligible_.empty()) throw std::runtime_error("no trainable queries for the " + to_string(stage) + " stage");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(eligible_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[uniform_index(rng_, i)]);
  cursor_ = 0;
}

StepBatches BatchSampler::next() {
  const std::size_t b = std::min(cfg_.batch_queries, eligible_.size());
  StepBatches out;
  out.reserve(b);
  for (std::size_t k = 0; k < b; ++k) {
    if (cursor_ == order_.size()) reshuffle();
    const auto& e = eligible_[order_[cursor_++]];
    TrainBatch batch;
    batch.query = *e.query;
    batch.positive = corpus_[e.positives[uniform_index(rng_, e.positives.size())]];
    const std::size_t m = cfg_.negatives;
    std::vector<std::size_t> cand = e.negatives;
    const std::size_t take = std::min(m, cand.size());
    for (std::size_t i = 0; i < take; ++i) std::swap(cand[i], cand[i + uniform_index(rng_, cand.size() - i)]);
    cand.resize(take);
    while (cand.size() < m) cand.push_back(e.negatives[uniform_index(rng_, e.negatives.size())]);
    for (auto d : cand) batch.negatives.push_back(corpus_[d]);
    if (cfg_.distill) {
      std::vector<double> scores;
      auto lookup = [&](const std::string& doc) {
        auto it = teacher_->find({batch.query.id, doc});
        if (it == teacher_->end()) {
          throw std::runtime_error("no teacher score for (" + batch.query.id + ", " + doc + ")");
        }
        scores.push_back(it->second);
      };
      lookup(batch.positive.id);
      for (const auto& n : batch.negatives) lookup(n.id);
      batch.teacher_scores = std::move(scores);
    }
    out.push_back(std::move(batch));
  }
  if (cfg_.share_positives) {
    const std::size_t own = cfg_.negatives;
    for (std::size_t i = 0; i < out.size(); ++i) {
      for (std::size_t j = 0; j < out.size(); ++j) {
        const auto& other = out[j].positive;
        if (i == j || other.id == out[i].positive.id) continue;
        if (relevant_.at(out[i].query.id).contains(other.id)) continue;
        auto& negs = out[i].negatives;
        const bool dup = std::any_of(negs.begin() + static_cast<std::ptrdiff_t>(own), negs.end(),
                                     [&](const Document& d) { return d.id == other.id; });
        if (!dup) negs.push_back(other);
      }
    }
    if (cfg_.distill) {
      for (auto& b : out) {
        auto& scores = *b.teacher_scores;
        for (std::size_t k = own; k < b.negatives.size(); ++k) {
          auto it = teacher_->find({b.query.id, b.negatives[k].id});
          if (it == teacher_->end()) {
            throw std::runtime_error("no teacher score for (" + b.query.id + ", " + b.negatives[k].id + ")");
          }
          scores.push_back(it->second);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- training

StageResult train_stage(Stage stage, const StageConfig& cfg, std::span<const Document> corpus,
                        std::span<const Query> queries, const Qrels& qrels, const NegativePool& pool,
                        Model& model, const TeacherScores* teacher, const StepCallback& on_step) {
  BatchSampler sampler(stage, cfg, corpus, queries, qrels, pool, teacher);
  StageResult result;
  result.skipped_queries = sampler.skipped();
  const bool train_gate = stage == Stage::warmup && model.gate.has_value();
  std::vector<NamedParam> trainable;
  for (auto& p : model.named()) {
    if (p.group == ParamGroup::gate && !train_gate) continue;
    trainable.push_back(p);
  }
  AdamW opt(trainable, cfg.weight_decay);
  const StageLossConfig loss_cfg{stage, cfg.lambda_flops, cfg.distill, train_gate};
  std::map<std::string, std::set<std::string>> allowed;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto batches = sampler.next();
    for (const auto& b : batches) {
      auto [it, fresh] = allowed.try_emplace(b.query.id);
      if (fresh) {
        const auto merged = pool.merged(b.query.id, sampler.sources());
        it->second.insert(merged.begin(), merged.end());
      }
      for (std::size_t k = 0; k < b.negatives.size(); ++k) {
        const auto& n = b.negatives[k];
        if (qrels.is_relevant(b.query.id, n.id)) ++result.positives_as_negatives;
        if (k >= cfg.negatives) {
          ++result.shared_negatives;
        } else if (!it->second.contains(n.id)) {
          ++result.negatives_outside_pool;
        }
      }
    }
    model.zero_grad();
    nd::Tape tape(true);
    auto graph = stage_loss(tape, model, batches, loss_cfg);
    tape.backward(graph.total);
    opt.step(scheduled_lr(cfg.lr, step, cfg.steps, cfg.warmup_ratio));
    ++result.batches;
    if (on_step) on_step(step, graph.report);
    result.log.push_back(graph.report);
  }
  model.zero_grad();
  return result;
}

// ---------------------------------------------------------------- pipeline

namespace {

std::string data_key(std::span<const Document> corpus, std::span<const Query> queries,
                     const Qrels& qrels, const TeacherScores* teacher) {
  std::ostringstream s;
  auto docs = [&](std::span<const Document> ds, char tag) {
    for (const auto& d : ds) {
      s << tag << d.id;
      for (TermId t : d.tokens) s << ' ' << t;
      s << '\n';
    }
  };
  docs(corpus, 'd');
  docs(queries, 'q');
  for (const auto& [q, judged] : qrels.all()) {
    for (const auto& [d, g] : judged) s << 'r' << q << ' ' << d << ' ' << g << '\n';
  }
  if (teacher) {
    for (const auto& [key, v] : *teacher) s << 't' << key.first << ' ' << key.second << ' ' << v << '\n';
  }
  return content_hash(s.str());
}

void write_log(const std::filesystem::path& path, const StageResult& r) {
  std::ostringstream out;
  for (std::size_t i = 0; i < r.log.size(); ++i) {
    auto j = to_json(r.log[i]);
    j["step"] = i;
    out << j.dump() << '\n';
  }
  write_text_atomic(path, out.str());
}

class PipelineState {
 public:
  explicit PipelineState(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (std::filesystem::exists(dir_ / "pipeline.json")) {
      state_ = nlohmann::json::parse(read_text(dir_ / "pipeline.json"));
    }
  }

  bool done(const std::string& stage, const std::string& key, const std::string& file) const {
    if (!state_.contains(stage)) return false;
    const auto& e = state_.at(stage);
    const auto path = dir_ / file;
    return e.value("key", "") == key && std::filesystem::exists(path) &&
           e.value("hash", "") == file_hash(path);
  }

  const nlohmann::json& entry(const std::string& stage) const { return state_.at(stage); }

  void record(const std::string& stage, const std::string& key, const std::string& file,
              nlohmann::json extra = nlohmann::json::object()) {
    extra["key"] = key;
    extra["file"] = file;
    extra["hash"] = file_hash(dir_ / file);
    state_[stage] = std::move(extra);
    write_text_atomic(dir_ / "pipeline.json", state_.dump(2) + "\n");
  }

 private:
  std::filesystem::path dir_;
  nlohmann::json state_ = nlohmann::json::object();
};

}  // namespace

PipelineResult run_full_pipeline(const TrainConfig& config, std::span<const Document> corpus,
                                 std::span<const Query> queries, const Qrels& qrels,
                                 const std::filesystem::path& run_dir, const TeacherScores* teacher) {
  TrainConfig cfg = config;
  if (cfg.encoder.vocab_size == 0) cfg.encoder.vocab_size = infer_vocab_size(corpus, queries);
  cfg.validate();
  std::filesystem::create_directories(run_dir);
  PipelineState state(run_dir);
  PipelineResult out;
  const std::string data = data_key(corpus, queries, qrels, teacher);

  // Step 1: BM25 negatives.
  const std::string k1 = content_hash(data + "|bm25|" + std::to_string(cfg.mine_depth));
  if (state.done("bm25_pool", k1, "bm25_pool.txt")) {
    out.bm25_pool = read_pool(run_dir / "bm25_pool.txt");
    out.resumed.push_back("bm25_pool");
  } else {
    const auto bm25 = Bm25Index::build(corpus);
    out.bm25_pool = mine_bm25_negatives(queries, bm25, qrels, cfg.mine_depth).pool;
    write_pool(run_dir / "bm25_pool.txt", out.bm25_pool);
    state.record("bm25_pool", k1, "bm25_pool.txt");
  }

  // Step 2: warmup.
  nlohmann::json enc;
  to_json(enc, cfg.encoder);
  const std::string k2 = content_hash(k1 + "|" + file_hash(run_dir / "bm25_pool.txt") + "|" + enc.dump() +
                                      "|" + std::to_string(cfg.init_seed) + "|" + std::to_string(cfg.gate) +
                                      "|" + cfg.warmup.to_json().dump());
  if (state.done("warmup", k2, "warmup.ckpt")) {
    out.warmup = Model::load(run_dir / "warmup.ckpt");
    out.resumed.push_back("warmup");
  } else {
    Model m(cfg.encoder, cfg.init_seed, cfg.gate);
    out.warmup_stage =
        train_stage(Stage::warmup, cfg.warmup, corpus, queries, qrels, out.bm25_pool, m, teacher);
    m.save(run_dir / "warmup.ckpt");
    write_log(run_dir / "warmup_log.jsonl", out.warmup_stage);
    out.warmup = std::move(m);
    state.record("warmup", k2, "warmup.ckpt");
  }

  // Step 3: self-adversarial mining from both heads of the warmed model.
  const std::string warm_hash = file_hash(run_dir / "warmup.ckpt");
  const std::string k3 = content_hash(data + "|dual|" + warm_hash + "|" + std::to_string(cfg.mine_depth));
  if (state.done("dual_pool", k3, "dual_pool.txt")) {
    out.dual_pool = read_pool(run_dir / "dual_pool.txt");
    out.dual_overlap = state.entry("dual_pool").value("overlap", 0.0);
    out.resumed.push_back("dual_pool");
  } else {
    const auto indexes = build_indexes(corpus, out.warmup);
    auto mined = mine_dual_negatives(queries, out.warmup, indexes, qrels, cfg.mine_depth);
    out.dual_pool = std::move(mined.pool);
    out.dual_overlap = mined.overlap;
    write_pool(run_dir / "dual_pool.txt", out.dual_pool);
    state.record("dual_pool", k3, "dual_pool.txt", {{"overlap", mined.overlap}});
  }

  // Step 4: continual learning on the union of both pools.
  const std::string k4 = content_hash(k3 + "|" + file_hash(run_dir / "dual_pool.txt") + "|" + warm_hash +
                                      "|" + cfg.continual.to_json().dump());
  if (state.done("continual", k4, "continual.ckpt")) {
    out.final_model = Model::load(run_dir / "continual.ckpt");
    out.resumed.push_back("continual");
  } else {
    Model m = out.warmup;
    out.continual_stage =
        train_stage(Stage::continual, cfg.continual, corpus, queries, qrels, out.dual_pool, m, teacher);
    m.save(run_dir / "continual.ckpt");
    write_log(run_dir / "continual_log.jsonl", out.continual_stage);
    out.final_model = std::move(m);
    state.record("continual", k4, "continual.ckpt");
  }

  RunManifest manifest;
  manifest.command = "pipeline";
  manifest.config = cfg.to_json();
  manifest.seeds = {{"init", cfg.init_seed}, {"warmup", cfg.warmup.seed}, {"continual", cfg.continual.seed}};
  manifest.inputs["data"] = data;
  for (const char* f : {"bm25_pool.txt", "warmup.ckpt", "dual_pool.txt", "continual.ckpt"}) {
    manifest.add_artifact(run_dir / f);
  }
  append_manifest(run_dir, manifest);
  return out;
}

}  // namespace unifier
