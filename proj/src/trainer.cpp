#include "usrn/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "usrn/error.hpp"
#include "usrn/seeding.hpp"

namespace usrn {

namespace {

using nlohmann::json;

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kLabelledPick = 2;
constexpr std::uint64_t kUnlabelledPick = 3;
constexpr std::uint64_t kWeakAug = 4;
constexpr std::uint64_t kStrongAug = 5;
constexpr std::uint64_t kClusterStream = 6;
constexpr std::uint64_t kSubHeadInit = 7;

/// Reads keys from a JSON object and rejects any key it was not asked for.
class StrictObject {
 public:
  StrictObject(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(context_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(context_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown key '" + key + "' in " + context_);
  }

 private:
  const json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Picks `count` distinct pool indices (with reuse only when the pool is smaller).
std::vector<int> pick_indices(int pool, int count, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(pool));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::vector<int> out;
  while (static_cast<int>(out.size()) < count) {
    for (int i = pool - 1; i > 0; --i) {
      std::uniform_int_distribution<int> pick(0, i);
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    }
    for (int i = 0; i < pool && static_cast<int>(out.size()) < count; ++i) out.push_back(order[static_cast<std::size_t>(i)]);
  }
  return out;
}

/// The trainer's view of the data: labelled samples plus unlabelled
/// features only. Unlabelled labels never enter this struct.
struct TrainingData {
  const std::vector<LabeledSample>* labelled;
  std::vector<FeatureGrid> unlabelled;
  const std::vector<LabeledSample>* eval;
};

TrainingData training_view(const DatasetSplit& split) {
  if (split.labelled.empty()) throw ConfigError("split has no labelled images");
  TrainingData d{&split.labelled, {}, &split.eval};
  d.unlabelled.reserve(split.unlabelled.size());
  for (const auto& s : split.unlabelled) d.unlabelled.push_back(s.features);
  return d;
}

LabelledBatch labelled_batch(const TrainingData& data, const std::vector<LabelGrid>* sublabels,
                             const TrainConfig& cfg, int step) {
  const auto& pool = *data.labelled;
  const auto idx = pick_indices(static_cast<int>(pool.size()), cfg.labelled_batch,
                                derive_seed(cfg.seed, kLabelledPick, static_cast<std::uint64_t>(step)));
  std::vector<FeatureGrid> feats;
  std::vector<LabelGrid> labels, subs;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = pool[static_cast<std::size_t>(idx[i])];
    const auto t = WeakTransform::draw(s.features.height, s.features.width,
                                       derive_seed(cfg.seed, kWeakAug, static_cast<std::uint64_t>(step) * 1024 + i),
                                       cfg.weak);
    feats.push_back(t.apply(s.features));
    labels.push_back(t.apply(s.labels));
    if (sublabels) subs.push_back(t.apply((*sublabels)[static_cast<std::size_t>(idx[i])]));
  }
  LabelledBatch b;
  b.features = stack(feats);
  b.labels = stack(labels);
  if (sublabels) b.sublabels = stack(subs);
  return b;
}

UnlabelledBatch unlabelled_batch(const TrainingData& data, const TrainConfig& cfg, int step) {
  const auto idx = pick_indices(static_cast<int>(data.unlabelled.size()), cfg.unlabelled_batch,
                                derive_seed(cfg.seed, kUnlabelledPick, static_cast<std::uint64_t>(step)));
  std::vector<FeatureGrid> weak, strong;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& f = data.unlabelled[static_cast<std::size_t>(idx[i])];
    const std::uint64_t key = static_cast<std::uint64_t>(step) * 1024 + i + 512;
    weak.push_back(augment_weak(f, derive_seed(cfg.seed, kWeakAug, key), cfg.weak));
    strong.push_back(augment_strong(weak.back(), derive_seed(cfg.seed, kStrongAug, key), cfg.strong));
  }
  return UnlabelledBatch{stack(weak), stack(strong)};
}

void check_finite(double loss, int step) {
  if (!std::isfinite(loss)) throw NumericalError("non-finite loss at step " + std::to_string(step));
}

int num_classes_of(const DatasetSplit& split) { return split.labelled.front().labels.num_labels; }

void maybe_evaluate(RunRecord& rec, const TrainingData& data, int step, bool force) {
  if (!force && (rec.config.eval_every <= 0 || step % rec.config.eval_every != 0)) return;
  if (!rec.metrics.empty() && rec.metrics.back().step == step) return;
  rec.metrics.push_back({step, evaluate(rec.params, *data.eval)});
}

int dominant_class(const std::vector<long>& counts) {
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

}  // namespace

std::string to_string(TrainMode m) { return m == TrainMode::baseline ? "baseline" : "usrn"; }

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "baseline") return TrainMode::baseline;
  if (s == "usrn") return TrainMode::usrn;
  throw ConfigError("unknown mode '" + s + "' (expected baseline or usrn)");
}

void TrainConfig::validate() const {
  if (steps < 0 || warmup_steps < 0 || subclass_warmup_steps < 0) throw ConfigError("step counts must be non-negative");
  if (labelled_batch < 1 || unlabelled_batch < 1) throw ConfigError("batch sizes must be positive");
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be positive");
  if (max_cluster_points && *max_cluster_points < 1) throw ConfigError("max_cluster_points must be positive");
  if (!(weak.min_scale > 0.0 && weak.min_scale <= weak.max_scale && weak.max_scale <= 1.0))
    throw ConfigError("weak augmentation scales must satisfy 0 < min_scale <= max_scale <= 1");
  if (!(weak.flip_probability >= 0.0 && weak.flip_probability <= 1.0))
    throw ConfigError("flip_probability must be in [0, 1]");
  if (!(strong.gain_min <= strong.gain_max) || strong.bias_range < 0.0 || strong.noise_sigma < 0.0)
    throw ConfigError("invalid strong augmentation ranges");
  weights.validate();
  ablation.validate();
  SgdOptimizer check(optimizer);
  (void)check;
}

json to_json(const TrainConfig& c) {
  json j{{"run_id", c.run_id},
         {"mode", to_string(c.mode)},
         {"steps", c.steps},
         {"warmup_steps", c.warmup_steps},
         {"subclass_warmup_steps", c.subclass_warmup_steps},
         {"labelled_batch", c.labelled_batch},
         {"unlabelled_batch", c.unlabelled_batch},
         {"eval_every", c.eval_every},
         {"hidden_dim", c.hidden_dim},
         {"share_mode", to_string(c.share)},
         {"weights", {{"lambda_u", c.weights.lambda_u}, {"lambda_sub", c.weights.lambda_sub}, {"gamma", c.weights.gamma}}},
         {"optimizer",
          {{"lr", c.optimizer.lr}, {"momentum", c.optimizer.momentum}, {"weight_decay", c.optimizer.weight_decay}}},
         {"ablation",
          {{"msl", c.ablation.msl},
           {"ost", c.ablation.ost},
           {"usr", c.ablation.usr},
           {"sst", c.ablation.sst},
           {"egm", c.ablation.egm}}},
         {"clustering", to_string(c.clustering)},
         {"gate_fallback", to_string(c.gate_fallback)},
         {"augment",
          {{"weak",
            {{"min_scale", c.weak.min_scale}, {"max_scale", c.weak.max_scale}, {"flip_probability", c.weak.flip_probability}}},
           {"strong",
            {{"gain_min", c.strong.gain_min},
             {"gain_max", c.strong.gain_max},
             {"bias_range", c.strong.bias_range},
             {"noise_sigma", c.strong.noise_sigma},
             {"blur", c.strong.blur}}}}},
         {"seed", c.seed}};
  if (c.max_cluster_points) j["max_cluster_points"] = *c.max_cluster_points;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  StrictObject top(j, "config");
  top.get("run_id", c.run_id);
  std::string s;
  if (const json* m = top.child("mode")) c.mode = train_mode_from_string(m->get<std::string>());
  top.get("steps", c.steps);
  top.get("warmup_steps", c.warmup_steps);
  top.get("subclass_warmup_steps", c.subclass_warmup_steps);
  top.get("labelled_batch", c.labelled_batch);
  top.get("unlabelled_batch", c.unlabelled_batch);
  top.get("eval_every", c.eval_every);
  top.get("hidden_dim", c.hidden_dim);
  top.get("seed", c.seed);
  if (const json* v = top.child("share_mode")) c.share = share_mode_from_string(v->get<std::string>());
  if (const json* v = top.child("clustering")) c.clustering = clustering_method_from_string(v->get<std::string>());
  if (const json* v = top.child("gate_fallback")) c.gate_fallback = gate_fallback_from_string(v->get<std::string>());
  if (const json* v = top.child("max_cluster_points"); v && !v->is_null()) c.max_cluster_points = v->get<int>();
  if (const json* w = top.child("weights")) {
    StrictObject o(*w, "config.weights");
    o.get("lambda_u", c.weights.lambda_u);
    o.get("lambda_sub", c.weights.lambda_sub);
    o.get("gamma", c.weights.gamma);
    o.finish();
  }
  if (const json* w = top.child("optimizer")) {
    StrictObject o(*w, "config.optimizer");
    o.get("lr", c.optimizer.lr);
    o.get("momentum", c.optimizer.momentum);
    o.get("weight_decay", c.optimizer.weight_decay);
    o.finish();
  }
  if (const json* w = top.child("ablation")) {
    if (w->is_string()) {
      // Named ladder row, e.g. "full" or "II".
      const std::string name = w->get<std::string>();
      bool found = false;
      for (const auto& [row, flags] : ablation_ladder_rows())
        if (row == name || (name == "full" && row == "USRN")) {
          c.ablation = flags;
          found = true;
        }
      if (!found) throw ConfigError("unknown ablation row '" + name + "'");
    } else {
      StrictObject o(*w, "config.ablation");
      o.get("msl", c.ablation.msl);
      o.get("ost", c.ablation.ost);
      o.get("usr", c.ablation.usr);
      o.get("sst", c.ablation.sst);
      o.get("egm", c.ablation.egm);
      o.finish();
    }
  }
  if (const json* a = top.child("augment")) {
    StrictObject o(*a, "config.augment");
    if (const json* w = o.child("weak")) {
      StrictObject ow(*w, "config.augment.weak");
      ow.get("min_scale", c.weak.min_scale);
      ow.get("max_scale", c.weak.max_scale);
      ow.get("flip_probability", c.weak.flip_probability);
      ow.finish();
    }
    if (const json* w = o.child("strong")) {
      StrictObject os(*w, "config.augment.strong");
      os.get("gain_min", c.strong.gain_min);
      os.get("gain_max", c.strong.gain_max);
      os.get("bias_range", c.strong.bias_range);
      os.get("noise_sigma", c.strong.noise_sigma);
      os.get("blur", c.strong.blur);
      os.finish();
    }
    o.finish();
  }
  top.finish();
  c.validate();
  return c;
}

LabelGrid predict(const ModelParams& params, const FeatureGrid& features) {
  const ProbGrid p = forward(params, features, Head::cls);
  LabelGrid out(p.height, p.width, p.classes(), 0);
  for (int i = 0; i < p.pixels(); ++i) out.at(i) = argmax_row(p.probs, i);
  return out;
}

EvalSummary evaluate(const ModelParams& params, const std::vector<LabeledSample>& pool) {
  const int k = params.outputs(Head::cls);
  ConfusionMatrix cm(k);
  EvalSummary out;
  out.predicted_counts.assign(static_cast<std::size_t>(k), 0);
  for (const auto& s : pool) {
    const LabelGrid pred = predict(params, s.features);
    cm.accumulate(s.labels, pred);
    for (int v : pred.labels) ++out.predicted_counts[static_cast<std::size_t>(v)];
  }
  out.iou = miou(cm);
  const long total = std::accumulate(out.predicted_counts.begin(), out.predicted_counts.end(), 0L);
  if (k >= 2 && total > 0) out.predicted_cbr = cbr(out.predicted_counts);
  return out;
}

RunRecord train_baseline(const TrainConfig& config, const DatasetSplit& split) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const TrainingData data = training_view(split);
  RunRecord rec;
  rec.config = config;
  rec.config.mode = TrainMode::baseline;
  rec.split_hash = split.hash();
  const int c = num_classes_of(split);
  rec.params = ModelParams::initialize({split.labelled.front().features.dim(), config.hidden_dim, c, c, config.share},
                                       derive_seed(config.seed, kInitStream));
  SgdOptimizer opt(config.optimizer);
  maybe_evaluate(rec, data, 0, true);
  for (int step = 0; step < config.steps; ++step) {
    const LabelledBatch b = labelled_batch(data, nullptr, config, step);
    TermValue t = cross_entropy_term(rec.params, b.features, b.labels, Head::cls, 1.0);
    check_finite(t.ce.loss, step);
    opt.step(rec.params, t.grad);
    rec.losses.push_back({step, "supervised", t.ce.loss, t.ce.loss, 0, 0, 0, 0, 0});
    maybe_evaluate(rec, data, step + 1, step + 1 == config.steps);
  }
  rec.wall_seconds = seconds_since(t0);
  return rec;
}

double subclass_mode_ari(const TaxonomyBuild& build, const std::vector<LabeledSample>& labelled, int cls) {
  std::vector<int> sub, modes;
  for (std::size_t i = 0; i < labelled.size(); ++i) {
    const auto& s = labelled[i];
    for (int p = 0; p < s.labels.pixels(); ++p) {
      if (s.labels.at(p) != cls) continue;
      sub.push_back(build.sublabels[i].at(p));
      modes.push_back(s.latent_modes[static_cast<std::size_t>(p)]);
    }
  }
  return adjusted_rand_index(sub, modes);
}

RunRecord train_usrn(const TrainConfig& config, const DatasetSplit& split) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const TrainingData data = training_view(split);
  if (config.ablation.needs_unlabelled() && data.unlabelled.empty())
    throw ConfigError("self-training requested but the split has no unlabelled images");
  RunRecord rec;
  rec.config = config;
  rec.config.mode = TrainMode::usrn;
  rec.split_hash = split.hash();
  const int c = num_classes_of(split);
  rec.params = ModelParams::initialize({split.labelled.front().features.dim(), config.hidden_dim, c, c, config.share},
                                       derive_seed(config.seed, kInitStream));
  SgdOptimizer opt(config.optimizer);
  maybe_evaluate(rec, data, 0, true);

  // Phase 1: supervised warm-up of the class path.
  for (int step = 0; step < config.warmup_steps; ++step) {
    const LabelledBatch b = labelled_batch(data, nullptr, config, step);
    TermValue t = cross_entropy_term(rec.params, b.features, b.labels, Head::cls, 1.0);
    check_finite(t.ce.loss, step);
    opt.step(rec.params, t.grad);
    rec.losses.push_back({step, "warmup", t.ce.loss, t.ce.loss, 0, 0, 0, 0, 0});
    maybe_evaluate(rec, data, step + 1, false);
  }

  // Phase 2: fragment classes into balanced subclasses from warm-up features.
  TaxonomyOptions topt;
  topt.method = config.clustering;
  topt.max_points = config.max_cluster_points;
  rec.taxonomy = build_taxonomy(rec.params, split.labelled, derive_seed(config.seed, kClusterStream), topt);
  const auto& tax = rec.taxonomy->taxonomy;
  rec.dominant_ari = subclass_mode_ari(*rec.taxonomy, split.labelled, dominant_class(rec.taxonomy->report.class_counts));
  rec.params.copy_class_trunk_to_sub();
  rec.params.reset_head(Head::sub, tax.num_subclasses, derive_seed(config.seed, kSubHeadInit));
  opt.reset();

  // Phase 3: joint objective.
  AblationFlags supervised_only;
  supervised_only.msl = config.ablation.msl;
  supervised_only.ost = supervised_only.usr = supervised_only.sst = supervised_only.egm = false;
  const UnlabelledBatch empty_unlabelled;
  for (int j = 0; j < config.steps; ++j) {
    const int step = config.warmup_steps + j;
    const bool self_train = j >= config.subclass_warmup_steps && config.ablation.needs_unlabelled();
    const AblationFlags& flags = self_train ? config.ablation : supervised_only;
    const LabelledBatch lb = labelled_batch(data, &rec.taxonomy->sublabels, config, step);
    const UnlabelledBatch ub = self_train ? unlabelled_batch(data, config, step) : empty_unlabelled;
    ObjectiveValue v = total_objective(rec.params, lb, ub, tax, config.weights, flags, config.gate_fallback);
    check_finite(v.total, step);
    opt.step(rec.params, v.grad);
    rec.losses.push_back({step, "joint", v.total, v.supervised, v.self_training, v.subclass, v.gate_open_fraction,
                          v.coverage, v.sub_coverage});
    maybe_evaluate(rec, data, step + 1, j + 1 == config.steps);
  }
  maybe_evaluate(rec, data, config.warmup_steps + config.steps, true);
  rec.wall_seconds = seconds_since(t0);
  return rec;
}

RunRecord train(const TrainConfig& config, const DatasetSplit& split) {
  return config.mode == TrainMode::baseline ? train_baseline(config, split) : train_usrn(config, split);
}

double pseudo_label_coverage(const ModelParams& params, const std::vector<FeatureGrid>& images,
                             const SubclassTaxonomy& taxonomy, double gamma, const AblationFlags& flags,
                             GateFallback fallback) {
  long covered = 0, total = 0;
  for (const auto& f : images) {
    LabelGrid t;
    if (flags.egm) {
      t = gated_targets(params, f, taxonomy, gamma, fallback).labels;
    } else if (flags.usr) {
      t = usr_targets(params, f, taxonomy, gamma);
    } else {
      t = plain_targets(params, f, gamma);
    }
    covered += t.valid_count();
    total += t.pixels();
  }
  return total > 0 ? static_cast<double>(covered) / static_cast<double>(total) : 0.0;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double LadderRow::median_miou() const { return median(miou); }
double LadderRow::median_min_iou() const { return median(min_iou); }

std::vector<std::pair<std::string, AblationFlags>> ablation_ladder_rows() {
  auto flags = [](bool msl, bool ost, bool usr, bool sst, bool egm) { return AblationFlags{msl, ost, usr, sst, egm}; };
  return {{"I", flags(true, false, false, false, false)},
          {"II", flags(true, true, false, false, false)},
          {"III", flags(true, true, true, false, false)},
          {"IV", flags(true, true, true, true, false)},
          {"USRN", flags(true, true, true, true, true)}};
}

int worker_threads() {
  if (const char* env = std::getenv("USRN_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

LadderResult run_ablation_ladder(const TrainConfig& base, const DatasetSplit& split,
                                 const std::vector<std::uint64_t>& seeds, bool keep_runs) {
  if (seeds.empty()) throw ConfigError("ablation ladder needs at least one seed");
  LadderResult result;
  result.split_hash = split.hash();
  const auto rows = ablation_ladder_rows();
  for (const auto& [name, flags] : rows) {
    LadderRow r;
    r.name = name;
    r.flags = flags;
    r.seeds = seeds;
    r.miou.assign(seeds.size(), 0.0);
    r.min_iou.assign(seeds.size(), 0.0);
    r.split_hashes.assign(seeds.size(), 0);
    if (keep_runs) r.runs.resize(seeds.size());
    result.rows.push_back(std::move(r));
  }

  const std::size_t jobs = rows.size() * seeds.size();
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t job = next++; job < jobs; job = next++) {
      const std::size_t ri = job / seeds.size(), si = job % seeds.size();
      try {
        TrainConfig cfg = base;
        cfg.mode = TrainMode::usrn;
        cfg.ablation = rows[ri].second;
        cfg.seed = seeds[si];
        cfg.run_id = base.run_id + "-" + rows[ri].first + "-s" + std::to_string(seeds[si]);
        RunRecord rec = train_usrn(cfg, split);
        auto& row = result.rows[ri];
        row.miou[si] = rec.final_metrics().eval.iou.mean;
        row.min_iou[si] = rec.final_metrics().eval.iou.min;
        row.split_hashes[si] = rec.split_hash;
        if (keep_runs) row.runs[si] = std::move(rec);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int threads = std::min<int>(worker_threads(), static_cast<int>(jobs));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return result;
}

}  // namespace usrn
