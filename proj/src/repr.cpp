#include "unifier/repr.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace unifier {

void validate_tokens(std::span<const TermId> tokens, std::size_t vocab_size, std::size_t max_len) {
  if (tokens.empty()) throw std::invalid_argument("token sequence is empty");
  if (tokens.size() > max_len) {
    throw std::invalid_argument("token sequence of length " + std::to_string(tokens.size()) +
                                " exceeds max length " + std::to_string(max_len));
  }
  for (TermId t : tokens) {
    if (t >= vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(vocab_size));
    }
  }
}

DenseVec::DenseVec(std::vector<double> values) : values_(std::move(values)) {
  for (double v : values_) {
    if (!std::isfinite(v)) throw std::invalid_argument("DenseVec entry is not finite");
  }
}

SparseLexVec::SparseLexVec(std::vector<Entry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [term, w] = entries_[i];
    if (!std::isfinite(w) || w <= 0.0) {
      throw std::invalid_argument("SparseLexVec weight for term " + std::to_string(term) +
                                  " must be finite and positive");
    }
    if (i > 0 && entries_[i - 1].first >= term) {
      throw std::invalid_argument("SparseLexVec term ids must be strictly increasing");
    }
  }
}

SparseLexVec SparseLexVec::from_dense(std::span<const double> weights) {
  std::vector<Entry> entries;
  for (std::size_t t = 0; t < weights.size(); ++t) {
    if (weights[t] > 0.0) entries.emplace_back(static_cast<TermId>(t), weights[t]);
  }
  return SparseLexVec(std::move(entries));
}

double SparseLexVec::weight(TermId term) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), term,
                             [](const Entry& e, TermId t) { return e.first < t; });
  return (it != entries_.end() && it->first == term) ? it->second : 0.0;
}

std::vector<double> SparseLexVec::to_dense(std::size_t vocab_size) const {
  std::vector<double> out(vocab_size, 0.0);
  for (const auto& [t, w] : entries_) {
    if (t >= vocab_size) throw std::out_of_range("term id beyond requested vocabulary size");
    out[t] = w;
  }
  return out;
}

SparseLexVec SparseLexVec::top_n(std::size_t n) const {
  if (n >= entries_.size()) return *this;
  std::vector<Entry> kept = entries_;
  std::partial_sort(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(n), kept.end(),
                    [](const Entry& a, const Entry& b) {
                      if (a.second != b.second) return a.second > b.second;
                      return a.first < b.first;
                    });
  kept.resize(n);
  std::sort(kept.begin(), kept.end());
  return SparseLexVec(std::move(kept));
}

QuantizedVec::QuantizedVec(std::vector<Entry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].second == 0) throw std::invalid_argument("QuantizedVec stores a zero impact");
    if (i > 0 && entries_[i - 1].first >= entries_[i].first) {
      throw std::invalid_argument("QuantizedVec term ids must be strictly increasing");
    }
  }
}

Impact QuantizedVec::impact(TermId term) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), term,
                             [](const Entry& e, TermId t) { return e.first < t; });
  return (it != entries_.end() && it->first == term) ? it->second : 0;
}

Impact quantize_weight(double w) {
  const double scaled = 100.0 * w;
  const double nearest = std::round(scaled);
  double floored = std::floor(scaled);
  if (std::abs(scaled - nearest) <= 1e-9 * std::max(1.0, nearest)) floored = nearest;
  if (floored <= 0.0) return 0;
  if (floored >= static_cast<double>(std::numeric_limits<Impact>::max())) {
    return std::numeric_limits<Impact>::max();
  }
  return static_cast<Impact>(floored);
}

QuantizedVec quantize(const SparseLexVec& v) {
  std::vector<QuantizedVec::Entry> out;
  out.reserve(v.nnz());
  for (const auto& [t, w] : v.entries()) {
    if (Impact q = quantize_weight(w); q > 0) out.emplace_back(t, q);
  }
  return QuantizedVec(std::move(out));
}

namespace {

template <typename Entry, typename Acc>
Acc merge_dot(std::span<const Entry> a, std::span<const Entry> b, Acc acc) {
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i].first < b[j].first) {
      ++i;
    } else if (b[j].first < a[i].first) {
      ++j;
    } else {
      acc += static_cast<Acc>(a[i].second) * static_cast<Acc>(b[j].second);
      ++i;
      ++j;
    }
  }
  return acc;
}

}  // namespace

double sparse_dot(const SparseLexVec& a, const SparseLexVec& b) {
  return merge_dot(a.entries(), b.entries(), 0.0);
}

std::uint64_t impact_dot(const QuantizedVec& a, const QuantizedVec& b) {
  return merge_dot(a.entries(), b.entries(), std::uint64_t{0});
}

double dense_dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dense_dot dimension mismatch: " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double dense_dot(const DenseVec& a, const DenseVec& b) { return dense_dot(a.values(), b.values()); }

void Qrels::add(const std::string& query_id, const std::string& doc_id, int grade) {
  if (grade < 0) throw std::invalid_argument("negative relevance grade for " + query_id);
  judged_[query_id][doc_id] = grade;
}

bool Qrels::has_query(const std::string& query_id) const { return judged_.count(query_id) > 0; }

const std::map<std::string, int>& Qrels::judgments(const std::string& query_id) const {
  static const std::map<std::string, int> kEmpty;
  auto it = judged_.find(query_id);
  return it == judged_.end() ? kEmpty : it->second;
}

std::vector<std::string> Qrels::relevant(const std::string& query_id) const {
  std::vector<std::string> out;
  for (const auto& [doc, grade] : judgments(query_id)) {
    if (grade > 0) out.push_back(doc);
  }
  return out;
}

bool Qrels::is_relevant(const std::string& query_id, const std::string& doc_id) const {
  const auto& j = judgments(query_id);
  auto it = j.find(doc_id);
  return it != j.end() && it->second > 0;
}

void sort_ranking(std::vector<ScoredDoc>& ranked) {
  std::sort(ranked.begin(), ranked.end(), ranks_before);
}

void RunFile::set(const std::string& query_id, std::vector<ScoredDoc> ranked) {
  sort_ranking(ranked);
  std::set<std::string> seen;
  for (const auto& d : ranked) {
    if (!seen.insert(d.doc_id).second) {
      throw std::invalid_argument("duplicate doc id " + d.doc_id + " in ranking for " + query_id);
    }
  }
  runs_[query_id] = std::move(ranked);
}

bool RunFile::has_query(const std::string& query_id) const { return runs_.count(query_id) > 0; }

const std::vector<ScoredDoc>& RunFile::ranking(const std::string& query_id) const {
  static const std::vector<ScoredDoc> kEmpty;
  auto it = runs_.find(query_id);
  return it == runs_.end() ? kEmpty : it->second;
}

namespace {

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string format_score(double score) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), score);
  return std::string(buf, res.ptr);
}

[[noreturn]] void bad_line(const std::filesystem::path& path, std::size_t line_no,
                           const std::string& why) {
  throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + why);
}

}  // namespace

std::vector<Document> read_documents(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<Document> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Document d;
      d.id = j.at("id").get<std::string>();
      d.tokens = j.at("tokens").get<std::vector<TermId>>();
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      bad_line(path, line_no, e.what());
    }
  }
  return docs;
}

void write_documents(const std::filesystem::path& path, std::span<const Document> docs) {
  auto out = open_out(path);
  for (const auto& d : docs) {
    nlohmann::json j;
    j["id"] = d.id;
    j["tokens"] = d.tokens;
    out << j.dump() << '\n';
  }
}

Qrels read_qrels(const std::filesystem::path& path) {
  auto in = open_in(path);
  Qrels qrels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string qid, iter, docid;
    int grade = 0;
    if (!(ss >> qid)) continue;
    if (!(ss >> iter >> docid >> grade)) bad_line(path, line_no, "expected 'qid 0 docid grade'");
    qrels.add(qid, docid, grade);
  }
  return qrels;
}

void write_qrels(const std::filesystem::path& path, const Qrels& qrels) {
  auto out = open_out(path);
  for (const auto& [qid, docs] : qrels.all()) {
    for (const auto& [docid, grade] : docs) out << qid << " 0 " << docid << ' ' << grade << '\n';
  }
}

RunFile read_run(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::map<std::string, std::vector<ScoredDoc>> lists;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string qid, q0, docid, tag;
    long rank = 0;
    std::string score_text;
    if (!(ss >> qid)) continue;
    if (!(ss >> q0 >> docid >> rank >> score_text >> tag)) {
      bad_line(path, line_no, "expected 'qid Q0 docid rank score tag'");
    }
    double score = 0.0;
    auto res = std::from_chars(score_text.data(), score_text.data() + score_text.size(), score);
    if (res.ec != std::errc{}) bad_line(path, line_no, "bad score '" + score_text + "'");
    lists[qid].push_back({docid, score});
  }
  RunFile run;
  for (auto& [qid, list] : lists) run.set(qid, std::move(list));
  return run;
}

void write_run(const std::filesystem::path& path, const RunFile& run, const std::string& tag) {
  auto out = open_out(path);
  for (const auto& [qid, ranked] : run.all()) {
    std::size_t rank = 1;
    for (const auto& d : ranked) {
      out << qid << " Q0 " << d.doc_id << ' ' << rank++ << ' ' << format_score(d.score) << ' '
          << tag << '\n';
    }
  }
}

}  // namespace unifier
