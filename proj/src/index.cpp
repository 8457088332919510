#include "unifier/index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "binary_io.hpp"
#include "unifier/util.hpp"

namespace unifier {

namespace {

constexpr char kDocsMagic[9] = "UNFRDOCS";
constexpr char kPostingsMagic[9] = "UNFRPOST";
constexpr char kForwardMagic[9] = "UNFRFWRD";
constexpr char kDenseMagic[9] = "UNFRDENS";
constexpr std::uint64_t kNoTopN = ~std::uint64_t{0};

std::ofstream open_bin_out(const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_bin_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

void check_version(std::uint32_t v, const std::filesystem::path& path) {
  if (v != static_cast<std::uint32_t>(kIndexVersion)) {
    throw std::runtime_error(path.string() + ": unsupported index version " + std::to_string(v));
  }
}

}  // namespace

// ---------------------------------------------------------------- DocTable

DocTable::DocTable(std::vector<std::string> ids) : ids_(std::move(ids)), tie_rank_(ids_.size()) {
  std::vector<std::uint32_t> order(ids_.size());
  std::iota(order.begin(), order.end(), 0U);
  std::sort(order.begin(), order.end(),
            [&](std::uint32_t a, std::uint32_t b) { return ids_[a] < ids_[b]; });
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (r > 0 && ids_[order[r]] == ids_[order[r - 1]]) {
      throw std::invalid_argument("duplicate doc id " + ids_[order[r]]);
    }
    tie_rank_[order[r]] = static_cast<std::uint32_t>(r);
  }
}

// ---------------------------------------------------------------- ImpactIndex

ImpactIndex ImpactIndex::build(std::vector<std::string> ids, std::span<const SparseLexVec> vectors,
                               std::size_t vocab_size, std::optional<std::size_t> top_n) {
  if (ids.size() != vectors.size()) throw std::invalid_argument("ImpactIndex: ids/vectors mismatch");
  ImpactIndex idx;
  idx.docs_ = DocTable(std::move(ids));
  idx.top_n_ = top_n;
  idx.postings_.assign(vocab_size, {});
  idx.forward_.reserve(vectors.size());
  idx.weights_.reserve(vectors.size());
  for (std::size_t d = 0; d < vectors.size(); ++d) {
    const SparseLexVec kept = top_n ? vectors[d].top_n(*top_n) : vectors[d];
    std::vector<SparseLexVec::Entry> stored;
    std::vector<QuantizedVec::Entry> impacts;
    for (const auto& [t, w] : kept.entries()) {
      if (t >= vocab_size) throw std::invalid_argument("ImpactIndex: term beyond vocabulary");
      // Serialized weights are single precision; keep the in-memory copy identical.
      const double wf = static_cast<double>(static_cast<float>(w));
      if (wf > 0.0) stored.emplace_back(t, wf);
      Impact q = quantize_weight(w);
      if (q == 0) continue;
      if (q > kMaxImpact) {
        q = kMaxImpact;
        ++idx.clamped_;
      }
      impacts.emplace_back(t, q);
      idx.postings_[t].push_back({static_cast<std::uint32_t>(d), static_cast<std::uint16_t>(q)});
    }
    idx.total_postings_ += impacts.size();
    idx.forward_.emplace_back(std::move(impacts));
    idx.weights_.emplace_back(std::move(stored));
  }
  if (idx.clamped_ > 0) {
    std::cerr << "warning: " << idx.clamped_ << " impacts clamped to " << kMaxImpact << '\n';
  }
  return idx;
}

std::span<const Posting> ImpactIndex::postings(TermId term) const {
  if (term >= postings_.size()) return {};
  return postings_[term];
}

void ImpactIndex::save(const std::filesystem::path& dir) const {
  {
    auto out = open_bin_out(dir / "postings.bin");
    detail::write_magic(out, kPostingsMagic, kIndexVersion);
    detail::write_le<std::uint64_t>(out, postings_.size());
    detail::write_le<std::uint64_t>(out, total_postings_);
    detail::write_le<std::uint64_t>(out, top_n_ ? *top_n_ : kNoTopN);
    detail::write_le<std::uint64_t>(out, clamped_);
    for (const auto& list : postings_) {
      detail::write_varint(out, list.size());
      std::uint32_t prev = 0;
      for (const auto& p : list) {
        detail::write_varint(out, p.doc - prev);  // delta-encoded ordinals
        detail::write_le<std::uint16_t>(out, p.impact);
        prev = p.doc;
      }
    }
    if (!out) throw std::runtime_error("write failed for postings.bin");
  }
  auto out = open_bin_out(dir / "forward.bin");
  detail::write_magic(out, kForwardMagic, kIndexVersion);
  detail::write_le<std::uint64_t>(out, weights_.size());
  for (const auto& v : weights_) {
    detail::write_varint(out, v.nnz());
    TermId prev = 0;
    for (const auto& [t, w] : v.entries()) {
      detail::write_varint(out, t - prev);
      detail::write_le<float>(out, static_cast<float>(w));
      prev = t;
    }
  }
  if (!out) throw std::runtime_error("write failed for forward.bin");
}

ImpactIndex ImpactIndex::load(const std::filesystem::path& dir, const DocTable& docs) {
  ImpactIndex idx;
  idx.docs_ = docs;
  {
    auto path = dir / "postings.bin";
    auto in = open_bin_in(path);
    check_version(detail::read_magic(in, kPostingsMagic, path.string()), path);
    const auto vocab = detail::read_le<std::uint64_t>(in);
    const auto total = detail::read_le<std::uint64_t>(in);
    if (const auto n = detail::read_le<std::uint64_t>(in); n != kNoTopN) idx.top_n_ = n;
    idx.clamped_ = detail::read_le<std::uint64_t>(in);
    idx.postings_.resize(vocab);
    idx.forward_.resize(docs.size());
    std::vector<std::vector<QuantizedVec::Entry>> fwd(docs.size());
    for (std::uint64_t t = 0; t < vocab; ++t) {
      const auto n = detail::read_varint(in);
      auto& list = idx.postings_[t];
      list.reserve(n);
      std::uint32_t doc = 0;
      for (std::uint64_t i = 0; i < n; ++i) {
        doc += static_cast<std::uint32_t>(detail::read_varint(in));
        const auto impact = detail::read_le<std::uint16_t>(in);
        if (doc >= docs.size()) throw std::runtime_error(path.string() + ": doc ordinal out of range");
        list.push_back({doc, impact});
        fwd[doc].emplace_back(static_cast<TermId>(t), impact);
      }
      idx.total_postings_ += n;
    }
    if (idx.total_postings_ != total) throw std::runtime_error(path.string() + ": posting count mismatch");
    for (std::size_t d = 0; d < fwd.size(); ++d) idx.forward_[d] = QuantizedVec(std::move(fwd[d]));
  }
  auto path = dir / "forward.bin";
  auto in = open_bin_in(path);
  check_version(detail::read_magic(in, kForwardMagic, path.string()), path);
  const auto n = detail::read_le<std::uint64_t>(in);
  if (n != docs.size()) throw std::runtime_error(path.string() + ": doc count mismatch");
  idx.weights_.reserve(n);
  for (std::uint64_t d = 0; d < n; ++d) {
    const auto nnz = detail::read_varint(in);
    std::vector<SparseLexVec::Entry> entries;
    entries.reserve(nnz);
    TermId t = 0;
    for (std::uint64_t i = 0; i < nnz; ++i) {
      t += static_cast<TermId>(detail::read_varint(in));
      entries.emplace_back(t, static_cast<double>(detail::read_le<float>(in)));
    }
    idx.weights_.emplace_back(std::move(entries));
  }
  return idx;
}

// ---------------------------------------------------------------- DenseIndex

DenseIndex::DenseIndex(std::vector<std::string> ids, std::span<const DenseVec> rows, std::size_t dim)
    : docs_(std::move(ids)), dim_(dim) {
  if (rows.size() != docs_.size()) throw std::invalid_argument("DenseIndex: ids/rows mismatch");
  data_.reserve(rows.size() * dim);
  for (const auto& r : rows) {
    if (r.size() != dim) throw std::invalid_argument("DenseIndex: row dimension mismatch");
    data_.insert(data_.end(), r.values().begin(), r.values().end());
  }
}

void DenseIndex::save(const std::filesystem::path& dir) const {
  auto out = open_bin_out(dir / "dense.bin");
  detail::write_magic(out, kDenseMagic, kIndexVersion);
  detail::write_le<std::uint64_t>(out, docs_.size());
  detail::write_le<std::uint64_t>(out, dim_);
  out.write(reinterpret_cast<const char*>(data_.data()),
            static_cast<std::streamsize>(data_.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for dense.bin");
}

DenseIndex DenseIndex::load(const std::filesystem::path& dir, const DocTable& docs) {
  auto path = dir / "dense.bin";
  auto in = open_bin_in(path);
  check_version(detail::read_magic(in, kDenseMagic, path.string()), path);
  DenseIndex idx;
  idx.docs_ = docs;
  const auto rows = detail::read_le<std::uint64_t>(in);
  idx.dim_ = detail::read_le<std::uint64_t>(in);
  if (rows != docs.size()) throw std::runtime_error(path.string() + ": row count mismatch");
  idx.data_.resize(rows * idx.dim_);
  if (!in.read(reinterpret_cast<char*>(idx.data_.data()),
               static_cast<std::streamsize>(idx.data_.size() * sizeof(double)))) {
    throw std::runtime_error(path.string() + ": truncated");
  }
  return idx;
}

// ---------------------------------------------------------------- BM25

Bm25Index Bm25Index::build(std::span<const Document> corpus, Bm25Params params) {
  Bm25Index idx;
  idx.params_ = params;
  std::vector<std::string> ids;
  ids.reserve(corpus.size());
  TermId max_term = 0;
  for (const auto& d : corpus) {
    ids.push_back(d.id);
    for (TermId t : d.tokens) max_term = std::max(max_term, t);
  }
  idx.docs_ = DocTable(std::move(ids));
  idx.postings_.assign(corpus.empty() ? 0 : max_term + 1, {});
  idx.doc_len_.reserve(corpus.size());
  double total_len = 0.0;
  for (std::size_t d = 0; d < corpus.size(); ++d) {
    std::vector<TermId> sorted(corpus[d].tokens);
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
      idx.postings_[sorted[i]].emplace_back(static_cast<std::uint32_t>(d),
                                            static_cast<std::uint32_t>(j - i));
      i = j;
    }
    idx.doc_len_.push_back(corpus[d].tokens.size());
    total_len += static_cast<double>(corpus[d].tokens.size());
  }
  idx.avgdl_ = corpus.empty() ? 0.0 : total_len / static_cast<double>(corpus.size());
  return idx;
}

std::size_t Bm25Index::df(TermId t) const { return t < postings_.size() ? postings_[t].size() : 0; }

double Bm25Index::idf(TermId t) const {
  const double n = static_cast<double>(num_docs());
  const double f = static_cast<double>(df(t));
  return std::log(1.0 + (n - f + 0.5) / (f + 0.5));
}

std::span<const std::pair<std::uint32_t, std::uint32_t>> Bm25Index::postings(TermId t) const {
  if (t >= postings_.size()) return {};
  return postings_[t];
}

std::vector<std::pair<std::uint32_t, double>> Bm25Index::score(std::span<const TermId> query) const {
  std::vector<double> acc(num_docs(), 0.0);
  std::vector<char> touched(num_docs(), 0);
  const double k1 = params_.k1;
  const double b = params_.b;
  for (TermId t : query) {
    const auto list = postings(t);
    if (list.empty()) continue;
    const double w = idf(t);
    for (const auto& [d, tf] : list) {
      const double f = static_cast<double>(tf);
      const double norm = k1 * (1.0 - b + b * static_cast<double>(doc_len_[d]) / avgdl_);
      acc[d] += w * f * (k1 + 1.0) / (f + norm);
      touched[d] = 1;
    }
  }
  std::vector<std::pair<std::uint32_t, double>> out;
  for (std::uint32_t d = 0; d < acc.size(); ++d) {
    if (touched[d]) out.emplace_back(d, acc[d]);
  }
  return out;
}

// ---------------------------------------------------------------- builders

namespace {

std::vector<std::string> corpus_ids(std::span<const Document> corpus) {
  std::vector<std::string> ids;
  ids.reserve(corpus.size());
  for (const auto& d : corpus) ids.push_back(d.id);
  return ids;
}

}  // namespace

IndexSet build_indexes(std::span<const Document> corpus, std::span<const DualRepr> encoded,
                       const Model& model, std::optional<std::size_t> top_n) {
  if (encoded.size() != corpus.size()) throw std::invalid_argument("build_indexes: size mismatch");
  std::vector<SparseLexVec> lex;
  std::vector<DenseVec> dense;
  lex.reserve(encoded.size());
  dense.reserve(encoded.size());
  for (const auto& r : encoded) {
    lex.push_back(r.lex);
    dense.push_back(r.dense);
  }
  IndexSet set;
  set.lexicon = ImpactIndex::build(corpus_ids(corpus), lex, model.config.vocab_size, top_n);
  set.dense = DenseIndex(corpus_ids(corpus), dense, model.config.embed_dim);
  set.checkpoint_hash = model.fingerprint();
  return set;
}

IndexSet build_indexes(std::span<const Document> corpus, const Model& model,
                       std::optional<std::size_t> top_n) {
  const auto encoded = encode_all(model, corpus);
  return build_indexes(corpus, encoded, model, top_n);
}

ImpactIndex build_impact_index(std::span<const Document> corpus, const Model& model,
                               std::optional<std::size_t> top_n) {
  return build_indexes(corpus, model, top_n).lexicon;
}

DenseIndex build_dense_index(std::span<const Document> corpus, const Model& model) {
  const auto encoded = encode_all(model, corpus);
  std::vector<DenseVec> dense;
  dense.reserve(encoded.size());
  for (const auto& r : encoded) dense.push_back(r.dense);
  return DenseIndex(corpus_ids(corpus), dense, model.config.embed_dim);
}

void save_index_set(const std::filesystem::path& dir, const IndexSet& set) {
  std::filesystem::create_directories(dir);
  {
    auto out = open_bin_out(dir / "doctable.bin");
    detail::write_magic(out, kDocsMagic, kIndexVersion);
    const auto ids = set.lexicon.docs().ids();
    detail::write_le<std::uint64_t>(out, ids.size());
    for (const auto& id : ids) detail::write_string(out, id);
  }
  set.lexicon.save(dir);
  set.dense.save(dir);
  nlohmann::json manifest = {
      {"format", "unifier-index"},
      {"version", kIndexVersion},
      {"checkpoint_hash", set.checkpoint_hash},
      {"top_n", set.lexicon.top_n() ? nlohmann::json(*set.lexicon.top_n()) : nlohmann::json(nullptr)},
      {"num_docs", set.lexicon.num_docs()},
      {"vocab_size", set.lexicon.vocab_size()},
      {"total_postings", set.lexicon.total_postings()},
      {"clamped_impacts", set.lexicon.clamped()},
      {"embed_dim", set.dense.dim()},
  };
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

nlohmann::json read_index_manifest(const std::filesystem::path& dir) {
  auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  if (manifest.value("format", "") != "unifier-index") {
    throw std::runtime_error(dir.string() + " is not a unifier index directory");
  }
  if (manifest.value("version", 0) != kIndexVersion) {
    throw std::runtime_error(dir.string() + ": unsupported index version");
  }
  return manifest;
}

IndexSet load_index_set(const std::filesystem::path& dir) {
  const auto manifest = read_index_manifest(dir);
  auto path = dir / "doctable.bin";
  auto in = open_bin_in(path);
  check_version(detail::read_magic(in, kDocsMagic, path.string()), path);
  const auto n = detail::read_le<std::uint64_t>(in);
  std::vector<std::string> ids;
  ids.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) ids.push_back(detail::read_string(in));
  DocTable docs(std::move(ids));
  IndexSet set;
  set.lexicon = ImpactIndex::load(dir, docs);
  set.dense = DenseIndex::load(dir, docs);
  set.checkpoint_hash = manifest.at("checkpoint_hash").get<std::string>();
  return set;
}

}  // namespace unifier
