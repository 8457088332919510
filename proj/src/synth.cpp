#include "unifier/synth.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "unifier/util.hpp"

namespace unifier {

void SynthConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("synth: ") + name + " must be > 0");
  };
  positive(num_docs, "num_docs");
  positive(topics, "topics");
  positive(entities, "entities");
  positive(topics_per_doc, "topics_per_doc");
  positive(doc_words_per_topic + shared_words_per_topic, "doc-side topic words");
  positive(query_words_per_topic + shared_words_per_topic, "query-side topic words");
  if (topics_per_doc > topics) throw std::invalid_argument("synth: topics_per_doc > topics");
  if (entities_per_doc > entities) throw std::invalid_argument("synth: entities_per_doc > entities");
  if (entities_per_query > entities_per_doc) {
    throw std::invalid_argument("synth: entities_per_query > entities_per_doc");
  }
  if ((doc_noise_tokens > 0 || query_noise_tokens > 0) && noise_words == 0) {
    throw std::invalid_argument("synth: noise tokens need noise_words > 0");
  }
  if (train_queries + dev_queries > num_docs) {
    throw std::invalid_argument("synth: more queries than documents (each query has its own positive)");
  }
  if (entities_per_doc + doc_topic_tokens + doc_noise_tokens == 0) {
    throw std::invalid_argument("synth: empty documents");
  }
  if (entities_per_query + query_topic_tokens + query_noise_tokens == 0) {
    throw std::invalid_argument("synth: empty queries");
  }
}

std::size_t SynthConfig::vocab_size() const {
  return kFirstContentToken +
         topics * (doc_words_per_topic + query_words_per_topic + shared_words_per_topic) + entities +
         noise_words;
}

nlohmann::json SynthConfig::to_json() const {
  return {{"seed", seed},
          {"num_docs", num_docs},
          {"train_queries", train_queries},
          {"dev_queries", dev_queries},
          {"topics", topics},
          {"doc_words_per_topic", doc_words_per_topic},
          {"query_words_per_topic", query_words_per_topic},
          {"shared_words_per_topic", shared_words_per_topic},
          {"entities", entities},
          {"noise_words", noise_words},
          {"topics_per_doc", topics_per_doc},
          {"entities_per_doc", entities_per_doc},
          {"doc_topic_tokens", doc_topic_tokens},
          {"doc_noise_tokens", doc_noise_tokens},
          {"entities_per_query", entities_per_query},
          {"query_topic_tokens", query_topic_tokens},
          {"query_noise_tokens", query_noise_tokens},
          {"teacher", teacher},
          {"vocab_size", vocab_size()}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("seed", c.seed);
  get("num_docs", c.num_docs);
  get("train_queries", c.train_queries);
  get("dev_queries", c.dev_queries);
  get("topics", c.topics);
  get("doc_words_per_topic", c.doc_words_per_topic);
  get("query_words_per_topic", c.query_words_per_topic);
  get("shared_words_per_topic", c.shared_words_per_topic);
  get("entities", c.entities);
  get("noise_words", c.noise_words);
  get("topics_per_doc", c.topics_per_doc);
  get("entities_per_doc", c.entities_per_doc);
  get("doc_topic_tokens", c.doc_topic_tokens);
  get("doc_noise_tokens", c.doc_noise_tokens);
  get("entities_per_query", c.entities_per_query);
  get("query_topic_tokens", c.query_topic_tokens);
  get("query_noise_tokens", c.query_noise_tokens);
  get("teacher", c.teacher);
  c.validate();
  return c;
}

namespace {

// k distinct values from [0, n), in draw order.
std::vector<std::size_t> sample_distinct(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_index(rng, n - i)]);
  pool.resize(k);
  return pool;
}

struct Layout {
  const SynthConfig& c;

  TermId topic_word(std::size_t topic, std::size_t slot) const {
    const std::size_t per = c.doc_words_per_topic + c.query_words_per_topic + c.shared_words_per_topic;
    return static_cast<TermId>(kFirstContentToken + topic * per + slot);
  }
  // Doc side: doc-only words then shared words.
  TermId doc_word(std::mt19937_64& rng, std::size_t topic) const {
    const std::size_t n = c.doc_words_per_topic + c.shared_words_per_topic;
    const std::size_t i = uniform_index(rng, n);
    return i < c.doc_words_per_topic ? topic_word(topic, i)
                                     : topic_word(topic, c.doc_words_per_topic + c.query_words_per_topic +
                                                             (i - c.doc_words_per_topic));
  }
  // Query side: query-only words then shared words.
  TermId query_word(std::mt19937_64& rng, std::size_t topic) const {
    const std::size_t n = c.query_words_per_topic + c.shared_words_per_topic;
    return topic_word(topic, c.doc_words_per_topic + uniform_index(rng, n));
  }
  TermId entity(std::size_t e) const {
    const std::size_t per = c.doc_words_per_topic + c.query_words_per_topic + c.shared_words_per_topic;
    return static_cast<TermId>(kFirstContentToken + c.topics * per + e);
  }
  TermId noise(std::mt19937_64& rng) const {
    return static_cast<TermId>(entity(c.entities) + uniform_index(rng, c.noise_words));
  }
};

struct Latent {
  std::vector<std::size_t> topics;
  std::vector<std::size_t> entities;
};

double planted_score(const Latent& q, const Latent& d) {
  double s = 0.0;
  for (auto e : q.entities) s += 2.0 * static_cast<double>(std::count(d.entities.begin(), d.entities.end(), e));
  for (auto t : q.topics) s += 1.0 * static_cast<double>(std::count(d.topics.begin(), d.topics.end(), t));
  return s;
}

std::string padded(const char* prefix, std::size_t i, std::size_t width) {
  std::string n = std::to_string(i);
  return prefix + std::string(width > n.size() ? width - n.size() : 0, '0') + n;
}

}  // namespace

SynthTask generate_synth(const SynthConfig& config) {
  config.validate();
  SynthTask task;
  task.config = config;
  std::mt19937_64 rng(config.seed);
  const Layout layout{config};
  const std::size_t width = std::to_string(config.num_docs - 1).size();

  std::vector<Latent> doc_latent(config.num_docs);
  task.corpus.reserve(config.num_docs);
  for (std::size_t d = 0; d < config.num_docs; ++d) {
    auto& lat = doc_latent[d];
    lat.topics = sample_distinct(rng, config.topics, config.topics_per_doc);
    lat.entities = sample_distinct(rng, config.entities, config.entities_per_doc);
    std::vector<TermId> tokens;
    for (auto e : lat.entities) tokens.push_back(layout.entity(e));
    for (std::size_t i = 0; i < config.doc_topic_tokens; ++i) {
      tokens.push_back(layout.doc_word(rng, lat.topics[i % lat.topics.size()]));
    }
    for (std::size_t i = 0; i < config.doc_noise_tokens; ++i) tokens.push_back(layout.noise(rng));
    // Shuffle so entity position carries no signal.
    for (std::size_t i = tokens.size(); i > 1; --i) std::swap(tokens[i - 1], tokens[uniform_index(rng, i)]);
    task.corpus.push_back({padded("d", d, width), std::move(tokens)});
  }

  const auto positives =
      sample_distinct(rng, config.num_docs, config.train_queries + config.dev_queries);
  std::vector<Latent> query_latent;
  for (std::size_t qi = 0; qi < positives.size(); ++qi) {
    const auto& dl = doc_latent[positives[qi]];
    Latent ql;
    ql.topics = dl.topics;
    const auto picks = sample_distinct(rng, dl.entities.size(), config.entities_per_query);
    for (auto p : picks) ql.entities.push_back(dl.entities[p]);
    std::vector<TermId> tokens;
    for (auto e : ql.entities) tokens.push_back(layout.entity(e));
    for (std::size_t i = 0; i < config.query_topic_tokens; ++i) {
      tokens.push_back(layout.query_word(rng, ql.topics[i % ql.topics.size()]));
    }
    for (std::size_t i = 0; i < config.query_noise_tokens; ++i) tokens.push_back(layout.noise(rng));
    for (std::size_t i = tokens.size(); i > 1; --i) std::swap(tokens[i - 1], tokens[uniform_index(rng, i)]);
    const bool train = qi < config.train_queries;
    const std::size_t local = train ? qi : qi - config.train_queries;
    Query q{padded(train ? "q" : "dq", local, 0), std::move(tokens)};
    (train ? task.train_qrels : task.dev_qrels).add(q.id, task.corpus[positives[qi]].id, 1);
    (train ? task.train_queries : task.dev_queries).push_back(std::move(q));
    query_latent.push_back(std::move(ql));
  }

  if (config.teacher) {
    for (std::size_t qi = 0; qi < config.train_queries; ++qi) {
      for (std::size_t d = 0; d < config.num_docs; ++d) {
        task.teacher[{task.train_queries[qi].id, task.corpus[d].id}] =
            planted_score(query_latent[qi], doc_latent[d]);
      }
    }
  }
  return task;
}

TeacherScores read_teacher(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  TeacherScores scores;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string q, d;
    double s = 0.0;
    if (!(ls >> q >> d >> s)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 'qid docid score'");
    }
    scores[{q, d}] = s;
  }
  return scores;
}

void write_teacher(const std::filesystem::path& path, const TeacherScores& scores) {
  std::ostringstream out;
  for (const auto& [key, s] : scores) out << key.first << ' ' << key.second << ' ' << s << '\n';
  write_text_atomic(path, out.str());
}

void write_synth(const std::filesystem::path& dir, const SynthTask& task) {
  std::filesystem::create_directories(dir);
  write_documents(dir / "corpus.jsonl", task.corpus);
  write_documents(dir / "train_queries.jsonl", task.train_queries);
  write_documents(dir / "dev_queries.jsonl", task.dev_queries);
  write_qrels(dir / "train_qrels.txt", task.train_qrels);
  write_qrels(dir / "dev_qrels.txt", task.dev_qrels);
  if (task.config.teacher) write_teacher(dir / "teacher.txt", task.teacher);
  write_text_atomic(dir / "synth.json", task.config.to_json().dump(2) + "\n");
}

}  // namespace unifier
