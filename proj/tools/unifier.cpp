// unifier: command-line driver for synthetic data, training, mining,
// indexing, search, evaluation and benchmarking.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "unifier/encoder.hpp"
#include "unifier/eval.hpp"
#include "unifier/index.hpp"
#include "unifier/manifest.hpp"
#include "unifier/pipeline.hpp"
#include "unifier/search.hpp"
#include "unifier/synth.hpp"
#include "unifier/util.hpp"

namespace fs = std::filesystem;
using namespace unifier;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Relative paths resolve against $UNIFIER_RUN_ROOT when it is set.
fs::path resolve(const std::string& p) {
  fs::path path(p);
  if (path.empty() || path.is_absolute()) return path;
  if (const char* root = std::getenv("UNIFIER_RUN_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

nlohmann::json config_section(const std::string& config_path, const char* section) {
  if (config_path.empty()) return nlohmann::json::object();
  auto j = nlohmann::json::parse(read_text(resolve(config_path)));
  return j.contains(section) ? j.at(section) : nlohmann::json::object();
}

fs::path manifest_dir(const fs::path& artifact) {
  auto parent = artifact.parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

// Refuses a checkpoint that did not produce the index.
void check_pair(const fs::path& index_dir, const fs::path& checkpoint) {
  const auto manifest = read_index_manifest(index_dir);
  const auto expected = manifest.at("checkpoint_hash").get<std::string>();
  const auto actual = file_hash(checkpoint);
  if (expected != actual) {
    throw UsageError("checkpoint " + checkpoint.string() + " (" + actual + ") does not match index " +
                     index_dir.string() + " (built from " + expected + ")");
  }
}

template <typename T>
void override_if(const CLI::Option* opt, T& field, const T& value) {
  if (opt->count() > 0) field = value;
}

struct Common {
  std::string config;
  std::size_t threads = 1;
};

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  SynthConfig cfg;
  bool teacher = false;
  CLI::Option *docs, *train, *dev, *topics, *entities, *seed;
};

void cmd_synth(const Common& common, SynthArgs& a) {
  auto cfg = SynthConfig::from_json(config_section(common.config, "synth"));
  override_if(a.docs, cfg.num_docs, a.cfg.num_docs);
  override_if(a.train, cfg.train_queries, a.cfg.train_queries);
  override_if(a.dev, cfg.dev_queries, a.cfg.dev_queries);
  override_if(a.topics, cfg.topics, a.cfg.topics);
  override_if(a.entities, cfg.entities, a.cfg.entities);
  override_if(a.seed, cfg.seed, a.cfg.seed);
  if (a.teacher) cfg.teacher = true;
  const auto out = resolve(a.out);
  const auto task = generate_synth(cfg);
  write_synth(out, task);
  RunManifest m;
  m.command = "synth";
  m.config = cfg.to_json();
  m.seeds["synth"] = cfg.seed;
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.path().filename() != "manifest.jsonl") m.add_artifact(e.path());
  }
  append_manifest(out, m);
  std::cout << "wrote " << task.corpus.size() << " docs, " << task.train_queries.size() << " train and "
            << task.dev_queries.size() << " dev queries (vocab " << cfg.vocab_size() << ") to " << out.string()
            << '\n';
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string stage = "warmup";
  std::string corpus, queries, qrels, pool, init, out, teacher;
  double lambda = 0.0, lr = 0.0;
  std::uint64_t seed = 0;
  std::size_t steps = 0, batch = 0, negatives = 0;
  CLI::Option *lambda_opt, *lr_opt, *seed_opt, *steps_opt, *batch_opt, *neg_opt;
};

TrainConfig load_train_config(const Common& common) {
  return TrainConfig::from_json(config_section(common.config, "train"));
}

void cmd_train(const Common& common, TrainArgs& a) {
  const Stage stage = parse_stage(a.stage);
  auto cfg = load_train_config(common);
  StageConfig& sc = stage == Stage::warmup ? cfg.warmup : cfg.continual;
  override_if(a.lambda_opt, sc.lambda_flops, a.lambda);
  override_if(a.lr_opt, sc.lr, a.lr);
  override_if(a.seed_opt, sc.seed, a.seed);
  override_if(a.steps_opt, sc.steps, a.steps);
  override_if(a.batch_opt, sc.batch_queries, a.batch);
  override_if(a.neg_opt, sc.negatives, a.negatives);
  const auto corpus = read_documents(resolve(a.corpus));
  const auto queries = read_documents(resolve(a.queries));
  const auto qrels = read_qrels(resolve(a.qrels));
  const auto pool = read_pool(resolve(a.pool));
  std::optional<TeacherScores> teacher;
  if (!a.teacher.empty()) teacher = read_teacher(resolve(a.teacher));
  if (sc.distill && !teacher) throw UsageError("distillation is enabled but --teacher is missing");

  Model model;
  if (!a.init.empty()) {
    model = Model::load(resolve(a.init));
  } else if (stage == Stage::continual) {
    throw UsageError("the continual stage starts from a warmup checkpoint (--init)");
  } else {
    if (cfg.encoder.vocab_size == 0) cfg.encoder.vocab_size = infer_vocab_size(corpus, queries);
    cfg.validate();
    model = Model(cfg.encoder, cfg.init_seed, cfg.gate);
  }
  const auto result = train_stage(stage, sc, corpus, queries, qrels, pool, model,
                                  teacher ? &*teacher : nullptr, [&](std::size_t step, const LossReport& r) {
                                    if ((step + 1) % 50 == 0 || step + 1 == sc.steps) {
                                      std::cerr << to_string(stage) << " step " << step + 1 << "/" << sc.steps
                                                << " loss " << r.total << '\n';
                                    }
                                  });
  const auto out = resolve(a.out);
  model.save(out);
  RunManifest m;
  m.command = "train";
  m.config = {{"stage", a.stage}, {"stage_config", sc.to_json()}, {"init_seed", cfg.init_seed}};
  m.seeds["stage"] = sc.seed;
  for (const auto& p : {a.corpus, a.queries, a.qrels, a.pool, a.init, a.teacher}) {
    if (!p.empty()) m.add_input(resolve(p));
  }
  m.add_artifact(out);
  append_manifest(manifest_dir(out), m);
  std::cout << "trained " << result.batches << " steps; skipped " << result.skipped_queries.size()
            << " queries; wrote " << out.string() << '\n';
}

// ---------------------------------------------------------------- mine

struct MineArgs {
  std::string source = "bm25";
  std::string corpus, queries, qrels, checkpoint, index, out;
  std::size_t depth = 200;
  CLI::Option* depth_opt;
};

void cmd_mine(const Common& common, MineArgs& a) {
  auto cfg = load_train_config(common);
  override_if(a.depth_opt, cfg.mine_depth, a.depth);
  if (a.source != "bm25" && a.source != "dual") {
    throw UsageError("unknown --source '" + a.source + "' (expected bm25|dual)");
  }
  if (a.source == "bm25" && a.corpus.empty()) throw UsageError("bm25 mining needs --corpus");
  if (a.source == "dual" && a.checkpoint.empty()) throw UsageError("dual mining needs --checkpoint");
  if (a.source == "dual" && a.index.empty() && a.corpus.empty()) {
    throw UsageError("dual mining needs --index or --corpus");
  }
  const auto queries = read_documents(resolve(a.queries));
  const auto qrels = read_qrels(resolve(a.qrels));
  MiningResult r;
  RunManifest m;
  m.command = "mine";
  if (a.source == "bm25") {
    const auto corpus = read_documents(resolve(a.corpus));
    r = mine_bm25_negatives(queries, Bm25Index::build(corpus), qrels, cfg.mine_depth);
    m.add_input(resolve(a.corpus));
  } else {
    const auto ckpt = resolve(a.checkpoint);
    const auto model = Model::load(ckpt);
    IndexSet indexes;
    if (!a.index.empty()) {
      check_pair(resolve(a.index), ckpt);
      indexes = load_index_set(resolve(a.index));
      m.add_input(resolve(a.index));
    } else {
      indexes = build_indexes(read_documents(resolve(a.corpus)), model);
      m.add_input(resolve(a.corpus));
    }
    r = mine_dual_negatives(queries, model, indexes, qrels, cfg.mine_depth);
    m.add_input(ckpt);
    std::cout << "dense/lexicon negative overlap " << r.overlap << '\n';
  }
  const auto out = resolve(a.out);
  write_pool(out, r.pool);
  m.config = {{"source", a.source}, {"depth", cfg.mine_depth}};
  m.add_input(resolve(a.queries));
  m.add_input(resolve(a.qrels));
  m.add_artifact(out);
  append_manifest(manifest_dir(out), m);
  std::cout << "mined " << r.pool.size() << " negatives; skipped " << r.skipped.size() << " queries\n";
}

// ---------------------------------------------------------------- index

struct IndexArgs {
  std::string corpus, checkpoint, out;
  std::size_t top_n = 0;
  CLI::Option* top_n_opt;
};

void cmd_index(const Common&, IndexArgs& a) {
  const auto ckpt = resolve(a.checkpoint);
  const auto model = Model::load(ckpt);
  const auto corpus = read_documents(resolve(a.corpus));
  std::optional<std::size_t> top_n;
  if (a.top_n_opt->count() > 0) top_n = a.top_n;
  const auto set = build_indexes(corpus, model, top_n);
  if (set.checkpoint_hash != file_hash(ckpt)) throw std::logic_error("checkpoint fingerprint mismatch");
  const auto out = resolve(a.out);
  save_index_set(out, set);
  RunManifest m;
  m.command = "index";
  m.config = {{"top_n", top_n ? nlohmann::json(*top_n) : nlohmann::json(nullptr)}};
  m.add_input(resolve(a.corpus));
  m.add_input(ckpt);
  m.add_artifact(out);
  append_manifest(manifest_dir(out), m);
  std::cout << "indexed " << set.lexicon.num_docs() << " docs, " << set.lexicon.total_postings()
            << " postings into " << out.string() << '\n';
}

// ---------------------------------------------------------------- search / bench

struct SearchArgs {
  std::string index, checkpoint, queries, out, corpus;
  std::string scheme = "uni";
  std::string lex_score = "impact";
  std::size_t k = 1000, k_uni = 2048, trials = 3;
  std::string machine;
  CLI::Option *scheme_opt, *k_opt, *k_uni_opt, *lex_opt;
};

SearchConfig search_config(const Common& common, const SearchArgs& a) {
  const auto j = config_section(common.config, "search");
  SearchConfig cfg;
  cfg.k_final = j.value("k", cfg.k_final);
  cfg.k_uni = j.value("K_uni", cfg.k_uni);
  if (j.contains("scheme")) cfg.scheme = parse_scheme(j.at("scheme").get<std::string>());
  if (j.contains("lex_score")) cfg.lex_score = parse_lex_score(j.at("lex_score").get<std::string>());
  override_if(a.k_opt, cfg.k_final, a.k);
  override_if(a.k_uni_opt, cfg.k_uni, a.k_uni);
  if (a.scheme_opt->count() > 0) cfg.scheme = parse_scheme(a.scheme);
  if (a.lex_opt->count() > 0) cfg.lex_score = parse_lex_score(a.lex_score);
  cfg.validate();
  return cfg;
}

struct Loaded {
  std::vector<EncodedQuery> queries;
  IndexSet indexes;
  std::optional<Bm25Index> bm25;
};

Loaded load_for_search(const SearchConfig& cfg, const SearchArgs& a, RunManifest& m) {
  Loaded l;
  const auto raw = read_documents(resolve(a.queries));
  m.add_input(resolve(a.queries));
  if (cfg.scheme == Scheme::bm25) {
    if (a.corpus.empty()) throw UsageError("--scheme bm25 needs --corpus");
    l.bm25 = Bm25Index::build(read_documents(resolve(a.corpus)));
    m.add_input(resolve(a.corpus));
    for (const auto& q : raw) l.queries.push_back({q.id, q.tokens, {}, {}, {}, 0.5});
    return l;
  }
  if (a.index.empty() || a.checkpoint.empty()) throw UsageError("--index and --checkpoint are required");
  const auto ckpt = resolve(a.checkpoint);
  const auto dir = resolve(a.index);
  check_pair(dir, ckpt);
  const auto model = Model::load(ckpt);
  l.indexes = load_index_set(dir);
  l.queries = encode_queries(model, raw);
  m.add_input(ckpt);
  m.add_input(dir);
  return l;
}

void cmd_search(const Common& common, SearchArgs& a) {
  const auto cfg = search_config(common, a);
  RunManifest m;
  m.command = "search";
  m.config = {{"scheme", to_string(cfg.scheme)}, {"k", cfg.k_final}, {"K_uni", cfg.k_uni},
              {"lex_score", to_string(cfg.lex_score)}};
  auto l = load_for_search(cfg, a, m);
  const Searcher searcher(l.indexes, l.bm25 ? &*l.bm25 : nullptr);
  const auto run = searcher.run(l.queries, cfg);
  const auto out = resolve(a.out);
  write_run(out, run, "unifier-" + to_string(cfg.scheme));
  m.add_artifact(out);
  append_manifest(manifest_dir(out), m);
  std::cout << "searched " << run.size() << " queries with " << to_string(cfg.scheme) << '\n';
}

void cmd_bench(const Common& common, SearchArgs& a) {
  const auto cfg = search_config(common, a);
  RunManifest m;
  m.command = "bench";
  auto l = load_for_search(cfg, a, m);
  const Searcher searcher(l.indexes, l.bm25 ? &*l.bm25 : nullptr);
  auto report = qps_bench(searcher, cfg, l.queries, a.trials);
  report.machine = config_section(common.config, "machine");
  if (!a.machine.empty()) report.machine["name"] = a.machine;
  const auto j = report.to_json();
  if (!a.out.empty()) {
    const auto out = resolve(a.out);
    write_text_atomic(out, j.dump(2) + "\n");
    m.config = j;
    m.add_artifact(out);
    append_manifest(manifest_dir(out), m);
  }
  std::cout << j.dump(2) << '\n';
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string run, qrels, out;
  bool per_query = false;
};

void cmd_eval(const Common&, EvalArgs& a) {
  const auto run = read_run(resolve(a.run));
  const auto qrels = read_qrels(resolve(a.qrels));
  const auto report = evaluate(run, qrels);
  std::cout << report.to_text();
  if (report.excluded > 0) std::cerr << "note: " << report.excluded << " run queries have no judgments\n";
  if (!a.out.empty()) {
    const auto out = resolve(a.out);
    write_text_atomic(out, report.to_json(a.per_query).dump(2) + "\n");
    RunManifest m;
    m.command = "eval";
    m.add_input(resolve(a.run));
    m.add_input(resolve(a.qrels));
    m.add_artifact(out);
    append_manifest(manifest_dir(out), m);
  }
}

// ---------------------------------------------------------------- pipeline

struct PipelineArgs {
  std::string corpus, queries, qrels, run_dir, teacher;
  double lambda = 0.0;
  CLI::Option* lambda_opt;
};

void cmd_pipeline(const Common& common, PipelineArgs& a) {
  auto cfg = load_train_config(common);
  if (a.lambda_opt->count() > 0) {
    cfg.warmup.lambda_flops = a.lambda;
    cfg.continual.lambda_flops = a.lambda;
  }
  const auto corpus = read_documents(resolve(a.corpus));
  const auto queries = read_documents(resolve(a.queries));
  const auto qrels = read_qrels(resolve(a.qrels));
  std::optional<TeacherScores> teacher;
  if (!a.teacher.empty()) teacher = read_teacher(resolve(a.teacher));
  const auto dir = resolve(a.run_dir);
  const auto r = run_full_pipeline(cfg, corpus, queries, qrels, dir, teacher ? &*teacher : nullptr);
  std::cout << "pipeline finished in " << dir.string() << " (resumed:";
  for (const auto& s : r.resumed) std::cout << ' ' << s;
  std::cout << "); dense/lexicon negative overlap " << r.dual_overlap << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid dense + lexicon retrieval: train, index, search, evaluate"};
  app.require_subcommand(1);
  // Global options may also follow the subcommand.
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config, "JSON config file; explicit flags override its values");
  app.add_option("--threads", common.threads, "Worker threads for parallel sections")->check(CLI::PositiveNumber);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic retrieval task");
  s->add_option("--out", synth.out, "Output directory")->required();
  synth.docs = s->add_option("--docs", synth.cfg.num_docs, "Number of documents");
  synth.train = s->add_option("--train-queries", synth.cfg.train_queries, "Training queries");
  synth.dev = s->add_option("--dev-queries", synth.cfg.dev_queries, "Dev queries");
  synth.topics = s->add_option("--topics", synth.cfg.topics, "Latent topics");
  synth.entities = s->add_option("--entities", synth.cfg.entities, "Entity terms");
  synth.seed = s->add_option("--seed", synth.cfg.seed, "Generator seed");
  s->add_flag("--teacher", synth.teacher, "Also write planted teacher scores");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run one training stage");
  t->add_option("--stage", train.stage, "warmup|continual")->check(CLI::IsMember({"warmup", "continual"}));
  t->add_option("--corpus", train.corpus)->required();
  t->add_option("--queries", train.queries)->required();
  t->add_option("--qrels", train.qrels)->required();
  t->add_option("--pool", train.pool, "Negative pool file")->required();
  t->add_option("--init", train.init, "Starting checkpoint");
  t->add_option("--out", train.out, "Output checkpoint")->required();
  t->add_option("--teacher", train.teacher, "Teacher scores for distillation");
  train.lambda_opt = t->add_option("--lambda-flops", train.lambda, "Sparsity weight");
  train.lr_opt = t->add_option("--lr", train.lr, "Peak learning rate");
  train.seed_opt = t->add_option("--seed", train.seed, "Data-order seed");
  train.steps_opt = t->add_option("--steps", train.steps, "Optimizer steps");
  train.batch_opt = t->add_option("--batch", train.batch, "Queries per step");
  train.neg_opt = t->add_option("--negatives", train.negatives, "Negatives per query (M)");

  MineArgs mine;
  auto* mi = app.add_subcommand("mine", "Mine hard negatives");
  mi->add_option("--source", mine.source, "bm25|dual");
  mi->add_option("--corpus", mine.corpus);
  mi->add_option("--queries", mine.queries)->required();
  mi->add_option("--qrels", mine.qrels)->required();
  mi->add_option("--checkpoint", mine.checkpoint);
  mi->add_option("--index", mine.index);
  mi->add_option("--out", mine.out)->required();
  mine.depth_opt = mi->add_option("--depth", mine.depth, "Negatives per source and query");

  IndexArgs index;
  auto* ix = app.add_subcommand("index", "Build impact and dense indexes");
  ix->add_option("--corpus", index.corpus)->required();
  ix->add_option("--checkpoint", index.checkpoint)->required();
  ix->add_option("--out", index.out, "Index directory")->required();
  index.top_n_opt = ix->add_option("--top-n", index.top_n, "Keep each document's top-N weights")
                        ->check(CLI::PositiveNumber);

  SearchArgs search;
  auto add_search_opts = [](CLI::App* c, SearchArgs& a) {
    c->add_option("--index", a.index);
    c->add_option("--checkpoint", a.checkpoint);
    c->add_option("--corpus", a.corpus, "Corpus for --scheme bm25");
    c->add_option("--queries", a.queries)->required();
    a.scheme_opt = c->add_option("--scheme", a.scheme, "lexicon|dense|uni|gated|ensemble|bm25");
    a.k_opt = c->add_option("--k", a.k, "Results per query")->check(CLI::PositiveNumber);
    a.k_uni_opt = c->add_option("--K-uni", a.k_uni, "Lexicon candidates rescored by uni-retrieval");
    a.lex_opt = c->add_option("--lex-score", a.lex_score, "impact|dequantized|real");
  };
  auto* se = app.add_subcommand("search", "Batch search into a TREC run file");
  add_search_opts(se, search);
  se->add_option("--out", search.out, "Run file")->required();

  SearchArgs bench;
  auto* be = app.add_subcommand("bench", "Single-thread QPS and latency percentiles");
  add_search_opts(be, bench);
  be->add_option("--trials", bench.trials, "Passes over the query set")->check(CLI::PositiveNumber);
  be->add_option("--machine", bench.machine, "Machine descriptor recorded in the report");
  be->add_option("--out", bench.out, "JSON report");

  EvalArgs eval;
  auto* ev = app.add_subcommand("eval", "Score a run against qrels");
  ev->add_option("--run", eval.run)->required();
  ev->add_option("--qrels", eval.qrels)->required();
  ev->add_option("--out", eval.out, "JSON report");
  ev->add_flag("--per-query", eval.per_query, "Include per-query values in the JSON report");

  PipelineArgs pipe;
  auto* pi = app.add_subcommand("pipeline", "warmup -> dual mining -> continual, resumable");
  pi->add_option("--corpus", pipe.corpus)->required();
  pi->add_option("--queries", pipe.queries)->required();
  pi->add_option("--qrels", pipe.qrels)->required();
  pi->add_option("--run-dir", pipe.run_dir)->required();
  pi->add_option("--teacher", pipe.teacher);
  pipe.lambda_opt = pi->add_option("--lambda-flops", pipe.lambda, "Sparsity weight for both stages");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    set_thread_count(common.threads);
    if (command == "synth") cmd_synth(common, synth);
    else if (command == "train") cmd_train(common, train);
    else if (command == "mine") cmd_mine(common, mine);
    else if (command == "index") cmd_index(common, index);
    else if (command == "search") cmd_search(common, search);
    else if (command == "bench") cmd_bench(common, bench);
    else if (command == "eval") cmd_eval(common, eval);
    else if (command == "pipeline") cmd_pipeline(common, pipe);
  } catch (const std::exception& e) {
    const bool usage = dynamic_cast<const UsageError*>(&e) != nullptr;
    std::cerr << nlohmann::json{{"error", e.what()},
                                {"command", command},
                                {"kind", usage ? "usage" : "runtime"}}
                     .dump()
              << '\n';
    return usage ? 2 : 1;
  }
  return 0;
}
