#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unifier/encoder.hpp"
#include "unifier/nd.hpp"
#include "unifier/repr.hpp"

namespace unifier {

enum class Head { dense, lex };
enum class Stage { warmup, continual };

std::string to_string(Head h);
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

// Score-level definitions. These operate on plain score vectors and are the
// reference the tape-level losses are tested against.

/// softmax(scores). Throws std::domain_error on a non-finite score.
std::vector<double> relevance_distribution(std::span<const double> scores);
/// -log p[positive]. Throws std::domain_error when p[positive] == 0.
double contrastive_loss(std::span<const double> p, std::size_t positive);
/// KL(p || q). Throws std::domain_error when q_i == 0 where p_i > 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);
/// sum_j (mean_i a_ij)^2 over a batch of full-vocabulary activation rows.
double flops_reg(std::span<const std::vector<double>> activations);
double flops_reg(std::span<const SparseLexVec> batch);

/// One query with its positive and M negatives; optional teacher scores are
/// aligned to [positive, negatives...].
struct TrainBatch {
  Query query;
  Document positive;
  std::vector<Document> negatives;
  std::optional<std::vector<double>> teacher_scores;

  /// Throws std::invalid_argument unless M >= 1, the positive is not among
  /// the negatives and teacher scores (if any) have M + 1 entries.
  void validate() const;
};

struct LossReport {
  double l_con_dense = 0.0;
  double l_con_lex = 0.0;
  double l_flops_doc = 0.0;
  double l_flops_query = 0.0;
  double l_reg = 0.0;
  double l_distill = 0.0;
  double l_gate = 0.0;
  double lambda_flops = 0.0;
  double total = 0.0;

  /// The weighted sum the total is defined as.
  [[nodiscard]] double sum_of_parts() const {
    return l_con_dense + l_con_lex + lambda_flops * (l_flops_doc + l_flops_query) + l_reg +
           l_distill + l_gate;
  }
};

struct StageLossConfig {
  Stage stage = Stage::warmup;
  double lambda_flops = 0.0016;
  bool use_distill = false;
  /// Adds the gate's contrastive loss over detached combined scores.
  bool train_gate = false;
};

struct LossGraph {
  LossReport report;
  nd::Var total;
};

/// Scores of one query against [positive, negatives...] under both heads, plus
/// the activations the sparsity penalty needs.
struct BatchScores {
  nd::Var dense;        // 1 x (M + 1)
  nd::Var lex;          // 1 x (M + 1)
  nd::Var query_dense;  // 1 x e
  nd::Var query_lex;    // 1 x |V|
  nd::Var doc_lex;      // (M + 1) x |V|
};

BatchScores score_batch(nd::Tape& tape, Model& model, const TrainBatch& batch);

/// -log softmax(scores)[0] as a tape node; the positive sits at column 0.
nd::Var nll_first(nd::Var scores);
nd::Var flops_on_tape(nd::Var activations);

/// Builds the stage objective over a batch of queries on `tape`. Per-query
/// terms are averaged over the batch; the sparsity penalty is taken over all
/// queries and over all documents in the batch.
LossGraph stage_loss(nd::Tape& tape, Model& model, std::span<const TrainBatch> batches,
                     const StageLossConfig& config);
/// Value-only evaluation.
LossReport stage_loss(const Model& model, std::span<const TrainBatch> batches,
                      const StageLossConfig& config);

// Value-level views of individual terms for one batch.

std::vector<double> relevance_distribution(const Model& model, const TrainBatch& batch, Head head);
/// (l_den, l_lex)
std::pair<double, double> dual_contrastive(const Model& model, const TrainBatch& batch);
double self_reg_kl(const Model& model, const TrainBatch& batch);
/// KL(softmax(teacher) || P(.; head)). Throws std::invalid_argument without
/// teacher scores.
double distill_kl(const Model& model, const TrainBatch& batch, Head head);

}  // namespace unifier
