#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "unifier/encoder.hpp"
#include "unifier/eval.hpp"
#include "unifier/index.hpp"
#include "unifier/pipeline.hpp"
#include "unifier/repr.hpp"
#include "unifier/search.hpp"
#include "unifier/synth.hpp"
#include "unifier/util.hpp"

namespace py = pybind11;
using namespace unifier;

namespace {

using Ranking = std::vector<std::pair<std::string, double>>;
using Corpus = std::vector<std::pair<std::string, std::vector<TermId>>>;
using Judgments = std::map<std::string, std::map<std::string, int>>;

std::vector<Document> to_docs(const Corpus& c) {
  std::vector<Document> out;
  out.reserve(c.size());
  for (const auto& [id, tokens] : c) out.push_back({id, tokens});
  return out;
}

Corpus from_docs(const std::vector<Document>& docs) {
  Corpus out;
  for (const auto& d : docs) out.emplace_back(d.id, d.tokens);
  return out;
}

SparseLexVec to_sparse(const std::map<TermId, double>& w) {
  return SparseLexVec(std::vector<SparseLexVec::Entry>(w.begin(), w.end()));
}

Qrels to_qrels(const Judgments& j) {
  Qrels q;
  for (const auto& [qid, docs] : j) {
    for (const auto& [d, g] : docs) q.add(qid, d, g);
  }
  return q;
}

RunFile to_run(const std::map<std::string, Ranking>& r) {
  RunFile run;
  for (const auto& [qid, ranked] : r) {
    std::vector<ScoredDoc> v;
    for (const auto& [d, s] : ranked) v.push_back({d, s});
    run.set(qid, std::move(v));
  }
  return run;
}

Ranking from_scored(const std::vector<ScoredDoc>& v) {
  Ranking out;
  for (const auto& s : v) out.emplace_back(s.doc_id, s.score);
  return out;
}

// Model plus its built indexes, searchable from Python.
class Engine {
 public:
  Engine(IndexSet set, Model model) : set_(std::move(set)), model_(std::move(model)) {}

  static Engine build(const Model& model, const Corpus& corpus, std::optional<std::size_t> top_n) {
    return Engine(build_indexes(to_docs(corpus), model, top_n), model);
  }

  static Engine load(const std::filesystem::path& index_dir, const std::filesystem::path& checkpoint) {
    auto set = load_index_set(index_dir);
    auto model = Model::load(checkpoint);
    if (set.checkpoint_hash != model.fingerprint()) {
      throw std::invalid_argument("checkpoint does not match the index");
    }
    return Engine(std::move(set), std::move(model));
  }

  Ranking search(const std::vector<TermId>& tokens, const std::string& scheme, std::size_t k,
                 std::size_t k_uni, const std::string& lex_score) const {
    SearchConfig cfg{k, k_uni, parse_scheme(scheme), parse_lex_score(lex_score)};
    cfg.validate();
    const auto q = encode_query(model_, Query{"q", tokens});
    return from_scored(to_scored(Searcher(set_).search(q, cfg), set_.lexicon.docs()));
  }

  std::map<std::string, Ranking> run(const Corpus& queries, const std::string& scheme, std::size_t k,
                                     std::size_t k_uni, const std::string& lex_score) const {
    SearchConfig cfg{k, k_uni, parse_scheme(scheme), parse_lex_score(lex_score)};
    cfg.validate();
    const auto encoded = encode_queries(model_, to_docs(queries));
    const auto r = Searcher(set_).run(encoded, cfg);
    std::map<std::string, Ranking> out;
    for (const auto& [qid, ranked] : r.all()) out[qid] = from_scored(ranked);
    return out;
  }

  void save(const std::filesystem::path& dir) const { save_index_set(dir, set_); }
  std::size_t num_docs() const { return set_.lexicon.num_docs(); }
  std::size_t total_postings() const { return set_.lexicon.total_postings(); }

 private:
  IndexSet set_;
  Model model_;
};

}  // namespace

PYBIND11_MODULE(_unifier, m) {
  m.doc() = "Hybrid dense + lexicon retrieval";

  m.def("quantize_weight", &quantize_weight, py::arg("weight"));
  m.def(
      "quantize",
      [](const std::map<TermId, double>& w) {
        std::map<TermId, long> out;
        const auto q = quantize(to_sparse(w));
        for (const auto& [t, x] : q.entries()) out[t] = x;
        return out;
      },
      py::arg("weights"), "Integer impacts floor(100 * w); zero impacts are dropped.");
  m.def("set_thread_count", &set_thread_count, py::arg("n"));

  py::class_<Model>(m, "Model")
      .def(py::init([](std::size_t vocab_size, std::size_t embed_dim, std::size_t layers_ctx,
                       std::size_t layers_den, std::size_t layers_lex, std::size_t heads, std::uint64_t seed,
                       bool gate) {
             EncoderConfig c;
             c.vocab_size = vocab_size;
             c.embed_dim = embed_dim;
             c.layers_ctx = layers_ctx;
             c.layers_den = layers_den;
             c.layers_lex = layers_lex;
             c.heads = heads;
             c.validate();
             return Model(c, seed, gate);
           }),
           py::arg("vocab_size"), py::arg("embed_dim") = 32, py::arg("layers_ctx") = 2, py::arg("layers_den") = 2,
           py::arg("layers_lex") = 1, py::arg("heads") = 4, py::arg("seed") = 42, py::arg("gate") = false)
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def("fingerprint", &Model::fingerprint)
      .def_property_readonly("vocab_size", [](const Model& self) { return self.config.vocab_size; })
      .def_property_readonly("embed_dim", [](const Model& self) { return self.config.embed_dim; })
      .def_property_readonly("has_gate", [](const Model& self) { return self.gate.has_value(); })
      .def(
          "encode",
          [](const Model& self, const std::vector<TermId>& tokens) {
            const auto r = encode(self, tokens);
            std::map<TermId, double> lex;
            for (const auto& [t, w] : r.lex.entries()) lex[t] = w;
            std::vector<double> dense(r.dense.values().begin(), r.dense.values().end());
            return py::make_tuple(dense, lex);
          },
          py::arg("tokens"), "Returns (dense vector, {term: weight}).")
      .def(
          "gate",
          [](const Model& self, const std::vector<TermId>& tokens) {
            return encode_query(self, Query{"q", tokens}).gate;
          },
          py::arg("tokens"));

  py::class_<Engine>(m, "Engine")
      .def_static("build", &Engine::build, py::arg("model"), py::arg("corpus"), py::arg("top_n") = py::none(),
                  "corpus: list of (doc_id, tokens)")
      .def_static("load", &Engine::load, py::arg("index_dir"), py::arg("checkpoint"))
      .def("save", &Engine::save, py::arg("dir"))
      .def("search", &Engine::search, py::arg("tokens"), py::arg("scheme") = "uni", py::arg("k") = 10,
           py::arg("k_uni") = 2048, py::arg("lex_score") = "impact")
      .def("run", &Engine::run, py::arg("queries"), py::arg("scheme") = "uni", py::arg("k") = 1000,
           py::arg("k_uni") = 2048, py::arg("lex_score") = "impact")
      .def_property_readonly("num_docs", &Engine::num_docs)
      .def_property_readonly("total_postings", &Engine::total_postings);

  m.def(
      "evaluate",
      [](const std::map<std::string, Ranking>& run, const Judgments& qrels) {
        const auto rep = evaluate(to_run(run), to_qrels(qrels));
        std::map<std::string, double> out;
        for (const auto& [name, v] : rep.metrics) out[name] = v.mean;
        return out;
      },
      py::arg("run"), py::arg("qrels"), "Mean metric values over judged queries.");

  m.def(
      "generate_synth",
      [](const std::string& config_json) {
        const auto cfg = SynthConfig::from_json(nlohmann::json::parse(config_json));
        const auto t = generate_synth(cfg);
        py::dict d;
        d["corpus"] = from_docs(t.corpus);
        d["train_queries"] = from_docs(t.train_queries);
        d["dev_queries"] = from_docs(t.dev_queries);
        d["train_qrels"] = t.train_qrels.all();
        d["dev_qrels"] = t.dev_qrels.all();
        d["vocab_size"] = cfg.vocab_size();
        return d;
      },
      py::arg("config_json") = "{}");

  m.def(
      "train_pipeline",
      [](const std::string& config_json, const Corpus& corpus, const Corpus& queries, const Judgments& qrels,
         const std::filesystem::path& run_dir) {
        const auto cfg = TrainConfig::from_json(nlohmann::json::parse(config_json));
        auto r = run_full_pipeline(cfg, to_docs(corpus), to_docs(queries), to_qrels(qrels), run_dir);
        return py::make_tuple(std::move(r.warmup), std::move(r.final_model));
      },
      py::arg("config_json"), py::arg("corpus"), py::arg("queries"), py::arg("qrels"), py::arg("run_dir"),
      "warmup, dual mining and continual stages; returns (warmup model, final model).");
}
