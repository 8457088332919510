#pragma once

// Central finite differences against the tape gradients of stage_loss. The
// five-point stencil keeps truncation error at O(h^4), so near-zero gradients
// are not swamped by it. Relative errors use a 1e-6 floor in the denominator.
//
// The analytic gradient follows two detachments, so each group's oracle is the
// objective those detachments define:
//   ctx, lex  total - l_gate (the gate loss reads detached scores)
//   den       dense-side terms only, with lexicon scores from the unperturbed
//             model (the lexicon head reads the dense stack as constants)
//   gate      l_gate

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "unifier/encoder.hpp"
#include "unifier/nd.hpp"
#include "unifier/objectives.hpp"

namespace gradcheck {

using namespace unifier;

struct GroupReport {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::size_t tensors = 0;
  std::string worst;
};

using Report = std::map<ParamGroup, GroupReport>;

inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

inline std::vector<double> row(nd::Var v) { return {v.values().begin(), v.values().end()}; }

struct Rows {
  std::vector<std::vector<double>> dense, lex;
};

inline Rows score_rows(const Model& model, std::span<const TrainBatch> batches) {
  Rows r;
  for (const auto& b : batches) {
    nd::Tape tape(false);
    auto s = score_batch(tape, const_cast<Model&>(model), b);
    r.dense.push_back(row(s.dense));
    r.lex.push_back(row(s.lex));
  }
  return r;
}

/// Dense-side objective with the lexicon score rows held fixed.
inline double dense_side(const Rows& live, const Rows& fixed, std::span<const TrainBatch> batches,
                         const StageLossConfig& cfg) {
  double acc = 0.0;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto pd = relevance_distribution(live.dense[i]);
    double term = contrastive_loss(pd, 0);
    if (cfg.stage == Stage::continual) term += kl_divergence(pd, relevance_distribution(fixed.lex[i]));
    if (cfg.use_distill) term += kl_divergence(relevance_distribution(*batches[i].teacher_scores), pd);
    acc += term;
  }
  return acc / static_cast<double>(batches.size());
}

inline Report check(Model& model, std::span<const TrainBatch> batches, const StageLossConfig& cfg,
                    std::size_t coords_per_tensor, std::uint64_t seed, double h = 1e-4) {
  model.zero_grad();
  {
    nd::Tape tape(true);
    auto g = stage_loss(tape, model, batches, cfg);
    tape.backward(g.total);
  }
  const Rows base = score_rows(model, batches);
  std::mt19937_64 rng(seed);
  Report report;
  for (auto& p : model.named()) {
    auto& t = *p.tensor;
    const std::vector<double> analytic =
        t.grad().empty() ? std::vector<double>(t.size(), 0.0)
                         : std::vector<double>(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> coords(t.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(coords_per_tensor);
    }
    auto objective = [&]() {
      if (p.group == ParamGroup::den) return dense_side(score_rows(model, batches), base, batches, cfg);
      const auto r = stage_loss(model, batches, cfg);
      return p.group == ParamGroup::gate ? r.l_gate : r.total - r.l_gate;
    };
    auto& rep = report[p.group];
    ++rep.tensors;
    for (std::size_t c : coords) {
      auto data = t.mutable_data();
      const double orig = data[c];
      auto at = [&](double x) {
        data[c] = x;
        return objective();
      };
      const double numeric =
          (at(orig - 2 * h) - 8 * at(orig - h) + 8 * at(orig + h) - at(orig + 2 * h)) / (12 * h);
      data[c] = orig;
      const double e = rel_error(analytic[c], numeric);
      ++rep.checked;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        char buf[96];
        std::snprintf(buf, sizeof buf, "[%zu] analytic=%.6e numeric=%.6e", c, analytic[c], numeric);
        rep.worst = p.name + buf;
      }
    }
  }
  model.zero_grad();
  return report;
}

/// Backpropagates only lexicon-head terms and returns the largest absolute
/// gradient per group.
inline std::map<ParamGroup, double> lexicon_only_grads(Model& model, std::span<const TrainBatch> batches,
                                                       double lambda_flops) {
  model.zero_grad();
  nd::Tape tape(true);
  std::vector<nd::Var> terms, q_lex, d_lex;
  for (const auto& b : batches) {
    auto s = score_batch(tape, model, b);
    terms.push_back(nll_first(s.lex));
    q_lex.push_back(s.query_lex);
    d_lex.push_back(s.doc_lex);
  }
  auto total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = nd::add(total, terms[i]);
  total = nd::add(total, nd::scale(nd::add(flops_on_tape(nd::concat_rows(d_lex)),
                                           flops_on_tape(nd::concat_rows(q_lex))),
                                   lambda_flops));
  tape.backward(total);
  std::map<ParamGroup, double> out;
  for (auto& p : model.named()) {
    double m = 0.0;
    for (double g : p.tensor->grad()) m = std::max(m, std::abs(g));
    out[p.group] = std::max(out[p.group], m);
  }
  model.zero_grad();
  return out;
}

}  // namespace gradcheck
