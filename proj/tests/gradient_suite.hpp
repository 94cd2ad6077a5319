#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "instances.hpp"

namespace usrn::test {

struct TermCheck {
  std::string term;
  double rel_error = 0.0;
  bool exercised = false;  // some non-ignored target contributed
};

/// Finite-difference check of every objective term on one instance. Pseudo
/// targets are computed once at the base point and held fixed, matching
/// the stop-gradient on the weak view.
inline std::vector<TermCheck> check_objective_terms(const ObjectiveInstance& in) {
  std::vector<TermCheck> out;
  const ModelParams& p = in.params;

  const SupervisedLoss md = loss_supervised_md(p, in.labelled, in.weights);
  out.push_back({"supervised_md",
                 gradient_check(p, [&](const ModelParams& q) { return loss_supervised_md(q, in.labelled, in.weights).value; },
                                md.grad),
                 !md.ce_cls.empty});

  auto fixed_term = [&](const std::string& name, const SelfTrainingLoss& t, Head head) {
    const double err = gradient_check(
        p, [&](const ModelParams& q) { return self_training_term(q, in.unlabelled.strong, t.targets, head, 1.0).value; },
        t.grad);
    out.push_back({name, err, !t.ce.empty});
  };
  fixed_term("st_plain", loss_st_plain(p, in.unlabelled, in.weights), Head::cls);
  fixed_term("st_masked", loss_st(p, in.unlabelled, in.taxonomy, in.weights), Head::cls);
  fixed_term("st_gated", loss_st_entropy(p, in.unlabelled, in.taxonomy, in.weights), Head::cls);
  fixed_term("st_gated_original",
             loss_st_entropy(p, in.unlabelled, in.taxonomy, in.weights, GateFallback::original), Head::cls);
  fixed_term("st_sub", loss_st_sub(p, in.unlabelled, in.weights), Head::sub);

  const AblationFlags all;
  const ObjectiveTargets targets = objective_targets(p, in.unlabelled, in.taxonomy, in.weights, all);
  const ObjectiveValue total = evaluate_objective(p, in.labelled, in.unlabelled, targets, in.weights, all);
  out.push_back({"total",
                 gradient_check(p,
                                [&](const ModelParams& q) {
                                  return evaluate_objective(q, in.labelled, in.unlabelled, targets, in.weights, all).total;
                                },
                                total.grad),
                 targets.cls.valid_count() > 0 && targets.sub.valid_count() > 0});
  return out;
}

}  // namespace usrn::test
