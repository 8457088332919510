#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unifier/encoder.hpp"
#include "unifier/index.hpp"
#include "unifier/objectives.hpp"
#include "unifier/repr.hpp"
#include "unifier/synth.hpp"

namespace unifier {

struct StageConfig {
  std::size_t batch_queries = 16;
  std::size_t negatives = 15;
  double lr = 2e-5;
  std::uint64_t seed = 42;
  double warmup_ratio = 0.05;
  double lambda_flops = 0.0016;
  std::size_t steps = 1000;
  double weight_decay = 0.01;
  bool distill = false;
  /// Adds the other batch queries' positives to each query's negatives.
  bool share_positives = false;

  /// Throws std::invalid_argument unless every size/rate is positive.
  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static StageConfig from_json(const nlohmann::json& j, const StageConfig& defaults);
};

struct TrainConfig {
  EncoderConfig encoder;
  std::uint64_t init_seed = 42;
  bool gate = true;
  StageConfig warmup{};
  StageConfig continual{12, 15, 2e-5 / 3.0, 22, 0.05, 0.0024, 1000, 0.01, false, false};
  /// Negatives mined per source and query.
  std::size_t mine_depth = 200;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  /// Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

enum class NegSource { bm25, dense, lex };

std::string to_string(NegSource s);
NegSource parse_neg_source(const std::string& s);

/// query id -> source -> negative doc ids in mining order, deduplicated per
/// source.
class NegativePool {
 public:
  /// Returns false when (query, doc, source) was already present.
  bool add(const std::string& query_id, const std::string& doc_id, NegSource source);
  [[nodiscard]] std::vector<std::string> get(const std::string& query_id, NegSource source) const;
  /// Union over `sources` in source order, each doc once.
  [[nodiscard]] std::vector<std::string> merged(const std::string& query_id,
                                                std::span<const NegSource> sources) const;
  [[nodiscard]] std::vector<std::string> queries() const;
  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] const std::map<std::string, std::map<NegSource, std::vector<std::string>>>& all() const {
    return pool_;
  }

  friend bool operator==(const NegativePool&, const NegativePool&) = default;

 private:
  std::map<std::string, std::map<NegSource, std::vector<std::string>>> pool_;
};

/// "qid docid source" lines.
void write_pool(const std::filesystem::path& path, const NegativePool& pool);
NegativePool read_pool(const std::filesystem::path& path);

struct MiningResult {
  NegativePool pool;
  /// Queries left without a single negative.
  std::vector<std::string> skipped;
  /// Mean fraction of shared dense/lexicon negatives (dual mining only).
  double overlap = 0.0;
};

MiningResult mine_bm25_negatives(std::span<const Query> queries, const Bm25Index& index,
                                 const Qrels& qrels, std::size_t top_n);
MiningResult mine_dual_negatives(std::span<const Query> queries, const Model& model,
                                 const IndexSet& indexes, const Qrels& qrels, std::size_t top_n);

/// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);
  [[nodiscard]] std::size_t steps_taken() const { return t_; }

 private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<double>> m_, v_;
  double wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

/// Linear warmup over ceil(ratio * steps) steps, then linear decay.
double scheduled_lr(double base, std::size_t step, std::size_t steps, double warmup_ratio);

struct StageResult {
  std::vector<LossReport> log;
  std::vector<std::string> skipped_queries;
  std::size_t batches = 0;
  /// Sampled negatives that are not in the stage's pool, and positives
  /// sampled as negatives. Both stay 0.
  std::size_t negatives_outside_pool = 0;
  /// Negatives borrowed from other queries' positives (share_positives).
  std::size_t shared_negatives = 0;
  std::size_t positives_as_negatives = 0;
};

/// One sampled training step before encoding.
using StepBatches = std::vector<TrainBatch>;

/// Draws the query/positive/negative ids for every step without touching the
/// model. train_stage consumes exactly this sequence.
class BatchSampler {
 public:
  BatchSampler(Stage stage, const StageConfig& cfg, std::span<const Document> corpus,
               std::span<const Query> queries, const Qrels& qrels, const NegativePool& pool,
               const TeacherScores* teacher = nullptr);

  [[nodiscard]] StepBatches next();
  [[nodiscard]] const std::vector<std::string>& skipped() const { return skipped_; }
  [[nodiscard]] std::span<const NegSource> sources() const { return sources_; }

 private:
  Stage stage_;
  StageConfig cfg_;
  std::span<const Document> corpus_;
  std::map<std::string, std::size_t> doc_index_;
  struct Eligible {
    const Query* query;
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
  };
  std::vector<Eligible> eligible_;
  std::map<std::string, std::set<std::string>> relevant_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::vector<std::string> skipped_;
  std::vector<NegSource> sources_;
  const TeacherScores* teacher_;
  std::mt19937_64 rng_;

  void reshuffle();
};

using StepCallback = std::function<void(std::size_t step, const LossReport&)>;

/// Runs cfg.steps optimizer steps on `model`. The warmup stage also trains the
/// gate when the model has one.
StageResult train_stage(Stage stage, const StageConfig& cfg, std::span<const Document> corpus,
                        std::span<const Query> queries, const Qrels& qrels, const NegativePool& pool,
                        Model& model, const TeacherScores* teacher = nullptr,
                        const StepCallback& on_step = {});

struct PipelineResult {
  Model warmup;
  Model final_model;
  NegativePool bm25_pool;
  NegativePool dual_pool;
  StageResult warmup_stage;
  StageResult continual_stage;
  double dual_overlap = 0.0;
  /// Stages loaded from disk instead of recomputed.
  std::vector<std::string> resumed;
};

/// warmup -> dual mining -> continual. Artifacts land in run_dir:
/// bm25_pool.txt, warmup.ckpt, warmup_log.jsonl, dual_pool.txt, continual.ckpt,
/// continual_log.jsonl, pipeline.json. A stage whose artifact exists with
/// matching inputs is loaded instead of recomputed.
PipelineResult run_full_pipeline(const TrainConfig& config, std::span<const Document> corpus,
                                 std::span<const Query> queries, const Qrels& qrels,
                                 const std::filesystem::path& run_dir,
                                 const TeacherScores* teacher = nullptr);

/// Vocabulary size for a corpus and query set: 1 + the largest token id, never
/// below the reserved ids.
std::size_t infer_vocab_size(std::span<const Document> corpus, std::span<const Query> queries);

nlohmann::json to_json(const LossReport& r);

}  // namespace unifier
