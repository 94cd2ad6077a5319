#pragma once

#include <string>
#include <vector>

#include "usrn/clustering.hpp"
#include "usrn/grid.hpp"
#include "usrn/netcore.hpp"

namespace usrn {

struct LossWeights {
  double lambda_u = 1.0;
  double lambda_sub = 1.0;
  double gamma = 0.75;

  void validate() const;
};

/// What gated selection does where the subclass view is not more confident.
enum class GateFallback {
  literal,   // IGNORE
  original,  // plain select on the class prediction
};

std::string to_string(GateFallback f);
GateFallback gate_fallback_from_string(const std::string& s);

/// Component switches of the objective:
///   msl  multi-distribution supervised loss (else class-head CE only)
///   ost  self-training of the class head from its own weak view
///   usr  subclass-masked pseudo-labels for the class head
///   sst  subclass-head self-training
///   egm  entropy gate on the subclass mask
struct AblationFlags {
  bool msl = true;
  bool ost = true;
  bool usr = true;
  bool sst = true;
  bool egm = true;

  /// Throws ConfigError unless usr => msl, sst => usr, egm => sst.
  void validate() const;
  bool class_self_training() const { return ost || usr; }
  bool needs_unlabelled() const { return class_self_training() || sst; }
};

/// S: argmax label where its probability exceeds gamma, else IGNORE.
LabelGrid select(const ProbGrid& pred, double gamma);

/// M: class probability = sum over its subclasses.
ProbGrid map_to_class(const ProbGrid& sub_pred, const SubclassTaxonomy& taxonomy);

/// Per-pixel -sum p ln p.
Vector entropy(const ProbGrid& pred);

/// S applied to onehot(mask_class) * cls_pred, unrenormalized: the pixel
/// gets mask_class[p] iff cls_pred[p][mask_class[p]] > gamma.
LabelGrid masked_select(const std::vector<int>& mask_class, const ProbGrid& cls_pred, double gamma);

/// Regularized pseudo-labels: the mask class is the parent of the subclass
/// argmax, i.e. M applied to the one-hot subclass prediction.
LabelGrid subclass_masked_select(const ProbGrid& sub_pred, const ProbGrid& cls_pred,
                                 const SubclassTaxonomy& taxonomy, double gamma);

struct GatedSelection {
  LabelGrid labels;
  std::vector<bool> gate_open;
  double open_fraction = 0.0;
};

/// Entropy gate: where E(mapped_sub) < E(cls_pred) (strictly) the label is
/// masked_select with mask argmax(mapped_sub); elsewhere IGNORE, or plain
/// select under GateFallback::original.
GatedSelection gated_select(const ProbGrid& mapped_sub, const ProbGrid& cls_pred, double gamma,
                            GateFallback fallback = GateFallback::literal);

/// Weak-augmented labelled images stacked into one grid.
struct LabelledBatch {
  FeatureGrid features;
  LabelGrid labels;
  LabelGrid sublabels;
};

/// Weak and strong views of the same unlabelled images, pixel-aligned.
struct UnlabelledBatch {
  FeatureGrid weak;
  FeatureGrid strong;
};

struct SupervisedLoss {
  double value = 0.0;  // ce_cls + lambda_sub * ce_sub
  CrossEntropy ce_cls;
  CrossEntropy ce_sub;
  GradientSet grad;
};

/// Multi-distribution supervised loss over both heads.
SupervisedLoss loss_supervised_md(const ModelParams& params, const LabelledBatch& batch, const LossWeights& weights);

/// One self-training cross-entropy term against frozen targets.
struct SelfTrainingLoss {
  double value = 0.0;  // unweighted cross-entropy
  CrossEntropy ce;
  LabelGrid targets;
  double coverage = 0.0;       // fraction of non-IGNORE targets
  double open_fraction = 0.0;  // gate-open pixels, entropy variant only
  GradientSet grad;            // gradient of weight * value
};

// Pseudo-label generators, all evaluated on the weak view with no gradient.
LabelGrid plain_targets(const ModelParams& params, const FeatureGrid& weak, double gamma);
LabelGrid usr_targets(const ModelParams& params, const FeatureGrid& weak, const SubclassTaxonomy& taxonomy,
                      double gamma);
GatedSelection gated_targets(const ModelParams& params, const FeatureGrid& weak, const SubclassTaxonomy& taxonomy,
                             double gamma, GateFallback fallback);
LabelGrid sub_targets(const ModelParams& params, const FeatureGrid& weak, double gamma);

/// Cross-entropy of the strong-view prediction of `head` against targets.
SelfTrainingLoss self_training_term(const ModelParams& params, const FeatureGrid& strong, LabelGrid targets,
                                    Head head, double weight);

SelfTrainingLoss loss_st_plain(const ModelParams& params, const UnlabelledBatch& batch, const LossWeights& weights);
SelfTrainingLoss loss_st(const ModelParams& params, const UnlabelledBatch& batch, const SubclassTaxonomy& taxonomy,
                         const LossWeights& weights);
SelfTrainingLoss loss_st_entropy(const ModelParams& params, const UnlabelledBatch& batch,
                                 const SubclassTaxonomy& taxonomy, const LossWeights& weights,
                                 GateFallback fallback = GateFallback::literal);
SelfTrainingLoss loss_st_sub(const ModelParams& params, const UnlabelledBatch& batch, const LossWeights& weights);

/// Frozen pseudo-labels for one objective evaluation.
struct ObjectiveTargets {
  LabelGrid cls;  // class-head targets; empty when no class self-training
  LabelGrid sub;  // subclass-head targets; empty when SST is off
  double gate_open_fraction = 0.0;
};

ObjectiveTargets objective_targets(const ModelParams& params, const UnlabelledBatch& batch,
                                   const SubclassTaxonomy& taxonomy, const LossWeights& weights,
                                   const AblationFlags& flags, GateFallback fallback = GateFallback::literal);

struct ObjectiveValue {
  double total = 0.0;
  double supervised = 0.0;     // L_s^md (or class CE without MSL)
  double self_training = 0.0;  // class-head self-training term
  double subclass = 0.0;       // subclass self-training term
  double coverage = 0.0;
  double sub_coverage = 0.0;
  double gate_open_fraction = 0.0;
  GradientSet grad;
};

/// L_s + lambda_u * (L_st + lambda_sub * L_st^sub), terms selected by flags,
/// with targets held fixed.
ObjectiveValue evaluate_objective(const ModelParams& params, const LabelledBatch& labelled,
                                  const UnlabelledBatch& unlabelled, const ObjectiveTargets& targets,
                                  const LossWeights& weights, const AblationFlags& flags);

/// objective_targets followed by evaluate_objective.
ObjectiveValue total_objective(const ModelParams& params, const LabelledBatch& labelled,
                               const UnlabelledBatch& unlabelled, const SubclassTaxonomy& taxonomy,
                               const LossWeights& weights, const AblationFlags& flags,
                               GateFallback fallback = GateFallback::literal);

}  // namespace usrn
