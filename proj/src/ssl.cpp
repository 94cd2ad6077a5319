#include "usrn/ssl.hpp"

#include "usrn/error.hpp"

namespace usrn {

namespace {

double coverage_of(const LabelGrid& g) {
  return g.pixels() > 0 ? static_cast<double>(g.valid_count()) / g.pixels() : 0.0;
}

void require_same_geometry(const ProbGrid& a, const ProbGrid& b) {
  if (a.height != b.height || a.width != b.width || a.classes() != b.classes())
    throw DataError("probability grids differ in geometry or class count");
}

}  // namespace

void LossWeights::validate() const {
  if (!(lambda_u >= 0.0) || !(lambda_sub >= 0.0)) throw ConfigError("loss weights must be non-negative");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must be in [0, 1)");
}

std::string to_string(GateFallback f) { return f == GateFallback::literal ? "literal" : "original"; }

GateFallback gate_fallback_from_string(const std::string& s) {
  if (s == "literal") return GateFallback::literal;
  if (s == "original") return GateFallback::original;
  throw ConfigError("unknown gate_fallback '" + s + "' (expected literal or original)");
}

void AblationFlags::validate() const {
  if (usr && !msl) throw ConfigError("USR requires MSL: the subclass head is trained by the multi-distribution loss");
  if (sst && !usr) throw ConfigError("SST requires USR");
  if (egm && !sst) throw ConfigError("EGM requires SST");
}

LabelGrid select(const ProbGrid& pred, double gamma) {
  LabelGrid out = LabelGrid::ignored(pred.height, pred.width, pred.classes());
  for (int p = 0; p < pred.pixels(); ++p) {
    const int c = argmax_row(pred.probs, p);
    if (pred.probs(p, c) > gamma) out.at(p) = c;
  }
  return out;
}

ProbGrid map_to_class(const ProbGrid& sub_pred, const SubclassTaxonomy& taxonomy) {
  if (sub_pred.classes() != taxonomy.num_subclasses)
    throw DataError("subclass prediction has " + std::to_string(sub_pred.classes()) + " channels, taxonomy has " +
                    std::to_string(taxonomy.num_subclasses) + " subclasses");
  return ProbGrid{sub_pred.height, sub_pred.width, sub_pred.probs * taxonomy.mapping_matrix()};
}

Vector entropy(const ProbGrid& pred) { return entropy_rows(pred.probs); }

LabelGrid masked_select(const std::vector<int>& mask_class, const ProbGrid& cls_pred, double gamma) {
  if (mask_class.size() != static_cast<std::size_t>(cls_pred.pixels())) throw DataError("mask size mismatch");
  LabelGrid out = LabelGrid::ignored(cls_pred.height, cls_pred.width, cls_pred.classes());
  for (int p = 0; p < cls_pred.pixels(); ++p) {
    const int c = mask_class[static_cast<std::size_t>(p)];
    if (cls_pred.probs(p, c) > gamma) out.at(p) = c;
  }
  return out;
}

LabelGrid subclass_masked_select(const ProbGrid& sub_pred, const ProbGrid& cls_pred,
                                 const SubclassTaxonomy& taxonomy, double gamma) {
  if (sub_pred.classes() != taxonomy.num_subclasses || cls_pred.classes() != taxonomy.num_classes)
    throw DataError("predictions do not match the taxonomy");
  if (sub_pred.pixels() != cls_pred.pixels()) throw DataError("prediction grids differ in size");
  std::vector<int> mask(static_cast<std::size_t>(cls_pred.pixels()));
  for (int p = 0; p < cls_pred.pixels(); ++p)
    mask[static_cast<std::size_t>(p)] = taxonomy.parent_of[static_cast<std::size_t>(argmax_row(sub_pred.probs, p))];
  return masked_select(mask, cls_pred, gamma);
}

GatedSelection gated_select(const ProbGrid& mapped_sub, const ProbGrid& cls_pred, double gamma,
                            GateFallback fallback) {
  require_same_geometry(mapped_sub, cls_pred);
  const Vector e_sub = entropy(mapped_sub);
  const Vector e_cls = entropy(cls_pred);
  GatedSelection out;
  out.labels = LabelGrid::ignored(cls_pred.height, cls_pred.width, cls_pred.classes());
  out.gate_open.assign(static_cast<std::size_t>(cls_pred.pixels()), false);
  int open = 0;
  for (int p = 0; p < cls_pred.pixels(); ++p) {
    if (e_sub(p) < e_cls(p)) {
      out.gate_open[static_cast<std::size_t>(p)] = true;
      ++open;
      const int c = argmax_row(mapped_sub.probs, p);
      if (cls_pred.probs(p, c) > gamma) out.labels.at(p) = c;
    } else if (fallback == GateFallback::original) {
      const int c = argmax_row(cls_pred.probs, p);
      if (cls_pred.probs(p, c) > gamma) out.labels.at(p) = c;
    }
  }
  out.open_fraction = cls_pred.pixels() > 0 ? static_cast<double>(open) / cls_pred.pixels() : 0.0;
  return out;
}

SupervisedLoss loss_supervised_md(const ModelParams& params, const LabelledBatch& batch, const LossWeights& weights) {
  if (batch.sublabels.pixels() != batch.features.pixels() || batch.sublabels.labels.empty())
    throw DataError("multi-distribution loss needs subclass labels for every labelled pixel");
  SupervisedLoss out;
  TermValue cls = cross_entropy_term(params, batch.features, batch.labels, Head::cls, 1.0);
  TermValue sub = cross_entropy_term(params, batch.features, batch.sublabels, Head::sub, weights.lambda_sub);
  out.ce_cls = cls.ce;
  out.ce_sub = sub.ce;
  out.value = cls.ce.loss + weights.lambda_sub * sub.ce.loss;
  out.grad = std::move(cls.grad);
  out.grad += sub.grad;
  return out;
}

LabelGrid plain_targets(const ModelParams& params, const FeatureGrid& weak, double gamma) {
  return select(forward(params, weak, Head::cls), gamma);
}

LabelGrid usr_targets(const ModelParams& params, const FeatureGrid& weak, const SubclassTaxonomy& taxonomy,
                      double gamma) {
  return subclass_masked_select(forward(params, weak, Head::sub), forward(params, weak, Head::cls), taxonomy, gamma);
}

GatedSelection gated_targets(const ModelParams& params, const FeatureGrid& weak, const SubclassTaxonomy& taxonomy,
                             double gamma, GateFallback fallback) {
  return gated_select(map_to_class(forward(params, weak, Head::sub), taxonomy), forward(params, weak, Head::cls),
                      gamma, fallback);
}

LabelGrid sub_targets(const ModelParams& params, const FeatureGrid& weak, double gamma) {
  return select(forward(params, weak, Head::sub), gamma);
}

SelfTrainingLoss self_training_term(const ModelParams& params, const FeatureGrid& strong, LabelGrid targets,
                                    Head head, double weight) {
  TermValue t = cross_entropy_term(params, strong, targets, head, weight);
  SelfTrainingLoss out;
  out.ce = t.ce;
  out.value = t.ce.loss;
  out.coverage = coverage_of(targets);
  out.targets = std::move(targets);
  out.grad = std::move(t.grad);
  return out;
}

SelfTrainingLoss loss_st_plain(const ModelParams& params, const UnlabelledBatch& batch, const LossWeights& weights) {
  return self_training_term(params, batch.strong, plain_targets(params, batch.weak, weights.gamma), Head::cls, 1.0);
}

SelfTrainingLoss loss_st(const ModelParams& params, const UnlabelledBatch& batch, const SubclassTaxonomy& taxonomy,
                         const LossWeights& weights) {
  return self_training_term(params, batch.strong, usr_targets(params, batch.weak, taxonomy, weights.gamma),
                            Head::cls, 1.0);
}

SelfTrainingLoss loss_st_entropy(const ModelParams& params, const UnlabelledBatch& batch,
                                 const SubclassTaxonomy& taxonomy, const LossWeights& weights,
                                 GateFallback fallback) {
  GatedSelection g = gated_targets(params, batch.weak, taxonomy, weights.gamma, fallback);
  SelfTrainingLoss out = self_training_term(params, batch.strong, std::move(g.labels), Head::cls, 1.0);
  out.open_fraction = g.open_fraction;
  return out;
}

SelfTrainingLoss loss_st_sub(const ModelParams& params, const UnlabelledBatch& batch, const LossWeights& weights) {
  return self_training_term(params, batch.strong, sub_targets(params, batch.weak, weights.gamma), Head::sub, 1.0);
}

ObjectiveTargets objective_targets(const ModelParams& params, const UnlabelledBatch& batch,
                                   const SubclassTaxonomy& taxonomy, const LossWeights& weights,
                                   const AblationFlags& flags, GateFallback fallback) {
  flags.validate();
  ObjectiveTargets t;
  if (!flags.needs_unlabelled()) return t;
  if (flags.egm) {
    GatedSelection g = gated_targets(params, batch.weak, taxonomy, weights.gamma, fallback);
    t.cls = std::move(g.labels);
    t.gate_open_fraction = g.open_fraction;
  } else if (flags.usr) {
    t.cls = usr_targets(params, batch.weak, taxonomy, weights.gamma);
  } else if (flags.ost) {
    t.cls = plain_targets(params, batch.weak, weights.gamma);
  }
  if (flags.sst) t.sub = sub_targets(params, batch.weak, weights.gamma);
  return t;
}

ObjectiveValue evaluate_objective(const ModelParams& params, const LabelledBatch& labelled,
                                  const UnlabelledBatch& unlabelled, const ObjectiveTargets& targets,
                                  const LossWeights& weights, const AblationFlags& flags) {
  flags.validate();
  ObjectiveValue out;
  if (flags.msl) {
    SupervisedLoss md = loss_supervised_md(params, labelled, weights);
    out.supervised = md.value;
    out.grad = std::move(md.grad);
  } else {
    TermValue cls = cross_entropy_term(params, labelled.features, labelled.labels, Head::cls, 1.0);
    out.supervised = cls.ce.loss;
    out.grad = std::move(cls.grad);
  }
  out.total = out.supervised;

  if (flags.class_self_training()) {
    if (targets.cls.pixels() != unlabelled.strong.pixels())
      throw DataError("class self-training targets do not match the unlabelled batch");
    TermValue st = cross_entropy_term(params, unlabelled.strong, targets.cls, Head::cls, weights.lambda_u);
    out.self_training = st.ce.loss;
    out.coverage = coverage_of(targets.cls);
    out.gate_open_fraction = targets.gate_open_fraction;
    out.total += weights.lambda_u * st.ce.loss;
    out.grad += st.grad;
  }
  if (flags.sst) {
    if (targets.sub.pixels() != unlabelled.strong.pixels())
      throw DataError("subclass self-training targets do not match the unlabelled batch");
    const double w = weights.lambda_u * weights.lambda_sub;
    TermValue sub = cross_entropy_term(params, unlabelled.strong, targets.sub, Head::sub, w);
    out.subclass = sub.ce.loss;
    out.sub_coverage = coverage_of(targets.sub);
    out.total += w * sub.ce.loss;
    out.grad += sub.grad;
  }
  return out;
}

ObjectiveValue total_objective(const ModelParams& params, const LabelledBatch& labelled,
                               const UnlabelledBatch& unlabelled, const SubclassTaxonomy& taxonomy,
                               const LossWeights& weights, const AblationFlags& flags, GateFallback fallback) {
  const ObjectiveTargets t = objective_targets(params, unlabelled, taxonomy, weights, flags, fallback);
  return evaluate_objective(params, labelled, unlabelled, t, weights, flags);
}

}  // namespace usrn
