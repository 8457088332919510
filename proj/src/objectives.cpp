#include "unifier/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace unifier {

std::string to_string(Head h) { return h == Head::dense ? "dense" : "lex"; }
std::string to_string(Stage s) { return s == Stage::warmup ? "warmup" : "continual"; }

Stage parse_stage(const std::string& s) {
  if (s == "warmup") return Stage::warmup;
  if (s == "continual") return Stage::continual;
  throw std::invalid_argument("unknown stage '" + s + "' (expected warmup|continual)");
}

std::vector<double> relevance_distribution(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("relevance_distribution: no scores");
  for (double s : scores) {
    if (!std::isfinite(s)) throw std::domain_error("relevance_distribution: non-finite score");
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> p(scores.size());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = std::exp(scores[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

double contrastive_loss(std::span<const double> p, std::size_t positive) {
  if (positive >= p.size()) throw std::out_of_range("contrastive_loss: positive index");
  if (p[positive] <= 0.0) throw std::domain_error("contrastive_loss: positive has zero probability");
  return -std::log(p[positive]);
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) throw std::domain_error("kl_divergence: q has zero mass where p does not");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

double flops_reg(std::span<const std::vector<double>> activations) {
  if (activations.empty()) return 0.0;
  const std::size_t width = activations[0].size();
  std::vector<double> mean(width, 0.0);
  for (const auto& row : activations) {
    if (row.size() != width) throw std::invalid_argument("flops_reg: ragged batch");
    for (std::size_t j = 0; j < width; ++j) mean[j] += row[j];
  }
  double acc = 0.0;
  const double n = static_cast<double>(activations.size());
  for (double m : mean) acc += (m / n) * (m / n);
  return acc;
}

double flops_reg(std::span<const SparseLexVec> batch) {
  if (batch.empty()) return 0.0;
  std::map<TermId, double> mean;
  for (const auto& v : batch) {
    for (const auto& [t, w] : v.entries()) mean[t] += w;
  }
  double acc = 0.0;
  const double n = static_cast<double>(batch.size());
  for (const auto& [t, s] : mean) acc += (s / n) * (s / n);
  return acc;
}

void TrainBatch::validate() const {
  if (negatives.empty()) throw std::invalid_argument("TrainBatch: needs at least one negative");
  for (const auto& n : negatives) {
    if (n.id == positive.id) {
      throw std::invalid_argument("TrainBatch: positive " + positive.id + " listed as a negative");
    }
  }
  if (teacher_scores && teacher_scores->size() != negatives.size() + 1) {
    throw std::invalid_argument("TrainBatch: teacher scores must cover positive and negatives");
  }
}

BatchScores score_batch(nd::Tape& tape, Model& model, const TrainBatch& batch) {
  batch.validate();
  auto& params = model.params;
  const auto& cfg = model.config;
  auto q = encode_on_tape(tape, params, cfg, batch.query.tokens);
  std::vector<nd::Var> dense_rows;
  std::vector<nd::Var> lex_rows;
  dense_rows.reserve(batch.negatives.size() + 1);
  lex_rows.reserve(batch.negatives.size() + 1);
  auto add_doc = [&](const Document& d) {
    auto r = encode_on_tape(tape, params, cfg, d.tokens);
    dense_rows.push_back(r.dense);
    lex_rows.push_back(r.lex);
  };
  add_doc(batch.positive);
  for (const auto& n : batch.negatives) add_doc(n);
  auto doc_dense = nd::concat_rows(dense_rows);
  auto doc_lex = nd::concat_rows(lex_rows);
  return {nd::matmul_nt(q.dense, doc_dense), nd::matmul_nt(q.lex, doc_lex), q.dense, q.lex,
          doc_lex};
}

nd::Var nll_first(nd::Var scores) {
  return nd::scale(nd::element(nd::log_softmax_rows(scores), 0, 0), -1.0);
}

nd::Var flops_on_tape(nd::Var activations) {
  auto m = nd::mean_rows(activations);
  return nd::sum(nd::mul(m, m));
}

LossGraph stage_loss(nd::Tape& tape, Model& model, std::span<const TrainBatch> batches,
                     const StageLossConfig& config) {
  if (batches.empty()) throw std::invalid_argument("stage_loss: empty batch");
  if (config.train_gate && !model.gate) throw std::logic_error("stage_loss: model has no gate");
  const double inv_b = 1.0 / static_cast<double>(batches.size());
  LossReport report;
  report.lambda_flops = config.lambda_flops;

  std::vector<nd::Var> terms;
  std::vector<nd::Var> query_lex;
  std::vector<nd::Var> doc_lex;
  auto add_term = [&](nd::Var v, double weight, double& slot) {
    auto w = nd::scale(v, weight);
    slot += w.item();
    terms.push_back(w);
  };

  for (const auto& batch : batches) {
    auto s = score_batch(tape, model, batch);
    query_lex.push_back(s.query_lex);
    doc_lex.push_back(s.doc_lex);
    add_term(nll_first(s.dense), inv_b, report.l_con_dense);
    add_term(nll_first(s.lex), inv_b, report.l_con_lex);
    if (config.stage == Stage::continual) {
      add_term(nd::sum(nd::kl_div_rows(s.dense, s.lex)), inv_b, report.l_reg);
    }
    if (config.use_distill) {
      if (!batch.teacher_scores) {
        throw std::invalid_argument("stage_loss: distillation needs teacher scores for " +
                                    batch.query.id);
      }
      auto teacher = tape.constant(1, batch.teacher_scores->size(), *batch.teacher_scores);
      add_term(nd::add(nd::sum(nd::kl_div_rows(teacher, s.dense)),
                       nd::sum(nd::kl_div_rows(teacher, s.lex))),
               inv_b, report.l_distill);
    }
    if (config.train_gate) {
      // The gate learns on detached head scores; only its own parameters move.
      auto dense = tape.constant(1, s.dense.cols(), {s.dense.values().begin(), s.dense.values().end()});
      auto lex = tape.constant(1, s.lex.cols(), {s.lex.values().begin(), s.lex.values().end()});
      auto g = gate_on_tape(tape, *model.gate, tape.constant(1, s.query_dense.cols(),
                                                             {s.query_dense.values().begin(),
                                                              s.query_dense.values().end()}));
      auto combined = nd::add(nd::scale_by(nd::sub(dense, lex), g), lex);
      add_term(nll_first(combined), inv_b, report.l_gate);
    }
  }
  if (config.lambda_flops != 0.0) {
    auto fd = flops_on_tape(nd::concat_rows(doc_lex));
    auto fq = flops_on_tape(nd::concat_rows(query_lex));
    report.l_flops_doc = fd.item();
    report.l_flops_query = fq.item();
    terms.push_back(nd::scale(nd::add(fd, fq), config.lambda_flops));
  } else {
    report.l_flops_doc = flops_on_tape(nd::concat_rows(doc_lex)).item();
    report.l_flops_query = flops_on_tape(nd::concat_rows(query_lex)).item();
  }
  auto total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = nd::add(total, terms[i]);
  report.total = total.item();
  return {report, total};
}

LossReport stage_loss(const Model& model, std::span<const TrainBatch> batches,
                      const StageLossConfig& config) {
  nd::Tape tape(false);
  return stage_loss(tape, const_cast<Model&>(model), batches, config).report;
}

namespace {

// Runs score_batch on a non-recording tape and hands both score rows to fn.
template <typename Fn>
auto with_scores(const Model& model, const TrainBatch& batch, Fn&& fn) {
  nd::Tape tape(false);
  auto s = score_batch(tape, const_cast<Model&>(model), batch);
  auto dv = s.dense.values();
  auto lv = s.lex.values();
  return fn(std::vector<double>(dv.begin(), dv.end()), std::vector<double>(lv.begin(), lv.end()));
}

}  // namespace

std::vector<double> relevance_distribution(const Model& model, const TrainBatch& batch, Head head) {
  return with_scores(model, batch, [&](const auto& dense, const auto& lex) {
    return relevance_distribution(head == Head::dense ? dense : lex);
  });
}

std::pair<double, double> dual_contrastive(const Model& model, const TrainBatch& batch) {
  return with_scores(model, batch, [](const auto& dense, const auto& lex) {
    return std::pair{contrastive_loss(relevance_distribution(dense), 0),
                     contrastive_loss(relevance_distribution(lex), 0)};
  });
}

double self_reg_kl(const Model& model, const TrainBatch& batch) {
  return with_scores(model, batch, [](const auto& dense, const auto& lex) {
    return kl_divergence(relevance_distribution(dense), relevance_distribution(lex));
  });
}

double distill_kl(const Model& model, const TrainBatch& batch, Head head) {
  if (!batch.teacher_scores) throw std::invalid_argument("distill_kl: batch has no teacher scores");
  return with_scores(model, batch, [&](const auto& dense, const auto& lex) {
    return kl_divergence(relevance_distribution(*batch.teacher_scores),
                         relevance_distribution(head == Head::dense ? dense : lex));
  });
}

}  // namespace unifier
