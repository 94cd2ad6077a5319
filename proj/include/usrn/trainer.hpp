#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "usrn/clustering.hpp"
#include "usrn/metrics.hpp"
#include "usrn/netcore.hpp"
#include "usrn/ssl.hpp"
#include "usrn/synthdata.hpp"

namespace usrn {

enum class TrainMode { baseline, usrn };

std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct TrainConfig {
  std::string run_id = "run";
  TrainMode mode = TrainMode::usrn;
  /// Joint-phase steps (usrn) or supervised steps (baseline).
  int steps = 600;
  /// Supervised class-path steps before clustering (usrn only).
  int warmup_steps = 300;
  /// Joint-phase steps that use only the supervised objective, letting the
  /// fresh subclass head catch up before self-training starts.
  int subclass_warmup_steps = 150;
  int labelled_batch = 4;
  int unlabelled_batch = 4;
  int eval_every = 100;
  int hidden_dim = 16;
  ShareMode share = ShareMode::low;
  LossWeights weights;
  SgdOptions optimizer{0.05, 0.9, 1e-4};
  AblationFlags ablation;
  ClusteringMethod clustering = ClusteringMethod::balanced;
  GateFallback gate_fallback = GateFallback::literal;
  std::optional<int> max_cluster_points;
  WeakAugmentOptions weak;
  StrongAugmentOptions strong;
  std::uint64_t seed = 0;

  /// Throws ConfigError on any invalid field or flag combination.
  void validate() const;
};

/// Strict JSON mapping: unknown keys anywhere raise ConfigError.
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct LossRow {
  int step = 0;
  std::string phase;
  double total = 0.0;
  double supervised = 0.0;
  double self_training = 0.0;
  double subclass = 0.0;
  double gate_open = 0.0;
  double coverage = 0.0;
  double sub_coverage = 0.0;
};

struct EvalSummary {
  IoUReport iou;
  std::vector<long> predicted_counts;
  double predicted_cbr = 0.0;
};

struct MetricRow {
  int step = 0;
  EvalSummary eval;
};

/// Append-only log of one training run.
struct RunRecord {
  TrainConfig config;
  std::vector<LossRow> losses;
  std::vector<MetricRow> metrics;
  ModelParams params;
  std::optional<TaxonomyBuild> taxonomy;
  /// Median ARI between dominant-class subclasses and latent modes of the
  /// labelled pool; set when a taxonomy exists.
  std::optional<double> dominant_ari;
  std::uint64_t split_hash = 0;
  double wall_seconds = 0.0;

  const MetricRow& final_metrics() const { return metrics.back(); }
};

/// Class-head-only inference over an evaluation pool.
EvalSummary evaluate(const ModelParams& params, const std::vector<LabeledSample>& pool);

/// Argmax class-head prediction for one image.
LabelGrid predict(const ModelParams& params, const FeatureGrid& features);

/// Class head trained on the labelled pool only.
RunRecord train_baseline(const TrainConfig& config, const DatasetSplit& split);

/// Warm-up, taxonomy construction, then joint training per ablation flags.
RunRecord train_usrn(const TrainConfig& config, const DatasetSplit& split);

/// Dispatches on config.mode.
RunRecord train(const TrainConfig& config, const DatasetSplit& split);

/// ARI between subclass labels and latent modes over the pixels of one
/// class in the labelled pool.
double subclass_mode_ari(const TaxonomyBuild& build, const std::vector<LabeledSample>& labelled, int cls);

/// Fraction of non-IGNORE class-head pseudo-labels over the given images.
double pseudo_label_coverage(const ModelParams& params, const std::vector<FeatureGrid>& images,
                             const SubclassTaxonomy& taxonomy, double gamma, const AblationFlags& flags,
                             GateFallback fallback = GateFallback::literal);

struct LadderRow {
  std::string name;
  AblationFlags flags;
  std::vector<std::uint64_t> seeds;
  std::vector<double> miou;      // per seed
  std::vector<double> min_iou;   // per seed
  std::vector<std::uint64_t> split_hashes;
  std::vector<RunRecord> runs;   // kept only when requested

  double median_miou() const;
  double median_min_iou() const;
};

struct LadderResult {
  std::vector<LadderRow> rows;
  std::uint64_t split_hash = 0;
};

/// The five cumulative component configurations, Model I through full USRN.
std::vector<std::pair<std::string, AblationFlags>> ablation_ladder_rows();

/// Runs every ladder row for every seed on the same split. Runs execute on
/// up to USRN_THREADS worker threads; results do not depend on the count.
LadderResult run_ablation_ladder(const TrainConfig& base, const DatasetSplit& split,
                                 const std::vector<std::uint64_t>& seeds, bool keep_runs = false);

/// Worker cap from USRN_THREADS, defaulting to the hardware concurrency.
int worker_threads();

double median(std::vector<double> v);

}  // namespace usrn
