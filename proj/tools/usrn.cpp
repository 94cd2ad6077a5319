// usrn: dataset generation, clustering inspection, training, evaluation,
// ablation ladders and reports.
//
// Exit codes: 0 success, 2 configuration or data error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "usrn/binary_io.hpp"
#include "usrn/error.hpp"
#include "usrn/rundir.hpp"
#include "usrn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace usrn;

namespace {

json parse_json_file(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

SceneSpec load_spec(const std::string& path) {
  if (path.empty()) return SceneSpec::default_spec();
  try {
    SceneSpec spec = parse_json_file(path).get<SceneSpec>();
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Parses a training config; the strong-view noise follows the dataset's
/// mode noise unless the config sets it.
TrainConfig load_config(const std::string& path, const SceneSpec& spec) {
  const json j = path.empty() ? json::object() : parse_json_file(path);
  TrainConfig cfg = train_config_from_json(j);
  const bool noise_set = j.contains("augment") && j["augment"].contains("strong") &&
                         j["augment"]["strong"].contains("noise_sigma");
  if (!noise_set) cfg.strong = StrongAugmentOptions::for_spec(spec);
  cfg.validate();
  return cfg;
}

void require_fresh_output(const fs::path& out) {
  if (fs::exists(out) && !fs::is_directory(out)) throw ConfigError(out.string() + " exists and is not a directory");
}

int cmd_gen_data(const std::string& spec_file, const std::string& out, double fraction, std::uint64_t seed,
                 int num_train, int num_eval) {
  SceneSpec spec = load_spec(spec_file);
  spec.ensure_centers();
  require_fresh_output(out);
  if (num_train < 2 || num_eval < 1) throw ConfigError("need at least 2 training and 1 eval image");
  DatasetDir data{spec, make_dataset(spec, num_train, num_eval, fraction, seed), seed};
  write_dataset_dir(out, data);
  const json m = dataset_manifest(data);
  std::cout << "labelled " << data.split.labelled.size() << ", unlabelled " << data.split.unlabelled.size()
            << ", eval " << data.split.eval.size() << "; split hash " << m["split_hash"].get<std::string>() << "\n";
  return 0;
}

int cmd_cluster(const std::string& data_dir, const std::string& out, const std::string& config_file,
                const std::string& params_file) {
  const DatasetDir data = read_dataset_dir(data_dir);
  TrainConfig cfg = load_config(config_file, data.spec);
  require_fresh_output(out);
  ModelParams params;
  std::optional<TaxonomyBuild> build;
  double ari = 0.0;
  if (params_file.empty()) {
    // Warm-up only: the joint phase is skipped.
    cfg.mode = TrainMode::usrn;
    cfg.steps = 0;
    RunRecord rec = train_usrn(cfg, data.split);
    build = std::move(rec.taxonomy);
    ari = rec.dominant_ari.value_or(0.0);
    params = std::move(rec.params);
  } else {
    params = load_params(params_file);
    TaxonomyOptions topt;
    topt.method = cfg.clustering;
    topt.max_points = cfg.max_cluster_points;
    build = build_taxonomy(params, data.split.labelled, cfg.seed, topt);
    const auto& counts = build->report.class_counts;
    const int dominant = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    ari = subclass_mode_ari(*build, data.split.labelled, dominant);
  }
  fs::create_directories(out);
  json tj = taxonomy_to_json(build->taxonomy, build->report);
  tj["dominant_ari"] = ari;
  write_text(fs::path(out) / "taxonomy.json", tj.dump(2) + "\n");
  std::cout << "subclasses " << build->taxonomy.num_subclasses << ", class CBR " << build->report.class_cbr
            << "%, subclass CBR " << build->report.subclass_cbr << "%, dominant-class ARI " << ari << "\n";
  return 0;
}

int cmd_train(const std::string& config_file, const std::string& data_dir, const std::string& out) {
  const DatasetDir data = read_dataset_dir(data_dir);
  const TrainConfig cfg = load_config(config_file, data.spec);
  require_fresh_output(out);
  const RunRecord rec = train(cfg, data.split);
  write_run_dir(out, rec);
  const auto& fin = rec.final_metrics();
  std::cout << cfg.run_id << ": mIoU " << fin.eval.iou.mean << ", min IoU " << fin.eval.iou.min << " at step "
            << fin.step << " (" << rec.wall_seconds << " s)\n";
  return 0;
}

int cmd_eval(const std::string& params_file, const std::string& data_dir, const std::string& pool_name,
             const std::string& out) {
  const DatasetDir data = read_dataset_dir(data_dir);
  const std::vector<LabeledSample>* pool = nullptr;
  if (pool_name == "eval") pool = &data.split.eval;
  else if (pool_name == "labelled") pool = &data.split.labelled;
  else if (pool_name == "unlabelled") pool = &data.split.unlabelled;
  else throw ConfigError("unknown pool '" + pool_name + "'");
  const ModelParams params = load_params(params_file);
  const EvalSummary s = evaluate(params, *pool);
  json per_class = json::array();
  for (double v : s.iou.per_class) per_class.push_back(std::isfinite(v) ? json(v) : json(nullptr));
  const json j{{"pool", pool_name},
               {"miou", s.iou.mean},
               {"min_iou", s.iou.min},
               {"per_class_iou", per_class},
               {"predicted_counts", s.predicted_counts},
               {"predicted_cbr", s.predicted_cbr}};
  if (out.empty()) std::cout << j.dump(2) << "\n";
  else write_text(out, j.dump(2) + "\n");
  return 0;
}

int cmd_ablate(const std::string& config_file, const std::string& data_dir, const std::string& out,
               const std::vector<std::uint64_t>& seeds) {
  const DatasetDir data = read_dataset_dir(data_dir);
  const TrainConfig cfg = load_config(config_file, data.spec);
  require_fresh_output(out);
  const LadderResult ladder = run_ablation_ladder(cfg, data.split, seeds, true);
  fs::create_directories(out);
  for (const auto& row : ladder.rows)
    for (const auto& run : row.runs) write_run_dir(fs::path(out) / run.config.run_id, run);
  write_text(fs::path(out) / "ladder.csv", ladder_csv(ladder));
  for (const auto& row : ladder.rows)
    std::cout << row.name << ": median mIoU " << row.median_miou() << ", median min IoU " << row.median_min_iou()
              << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<ReportEntry> entries;
  for (const auto& dir : runs) {
    try {
      entries.push_back(read_report_entry(dir));
    } catch (const DataError& e) {
      std::cerr << "warning: skipping " << dir << ": " << e.what() << "\n";
    }
  }
  if (entries.empty()) throw DataError("no readable run summaries");
  fs::create_directories(out);
  write_text(fs::path(out) / "report.csv", report_csv(entries));
  write_text(fs::path(out) / "curves.svg", report_svg(entries));
  std::cout << report_csv(entries);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised per-pixel classification with unbiased subclass regularization"};
  app.require_subcommand(1);

  std::string spec_file, out, data_dir, config_file, params_file, pool = "eval";
  double fraction = 1.0 / 32.0;
  std::uint64_t seed = 0;
  int num_train = 200, num_eval = 50;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset and its split manifest");
  gen->add_option("spec", spec_file, "SceneSpec JSON (default spec when omitted)");
  gen->add_option("--out,-o", out, "Output directory")->required();
  gen->add_option("--fraction", fraction, "Labelled fraction of the training pool");
  gen->add_option("--seed", seed, "Split seed");
  gen->add_option("--num-train", num_train, "Training images");
  gen->add_option("--num-eval", num_eval, "Evaluation images");

  auto* cluster = app.add_subcommand("cluster", "Warm up (or load params) and build the subclass taxonomy");
  cluster->add_option("data", data_dir, "Dataset directory")->required();
  cluster->add_option("--out,-o", out, "Output directory")->required();
  cluster->add_option("--config", config_file, "Training config JSON");
  cluster->add_option("--params", params_file, "Use these params instead of a warm-up run");

  auto* trn = app.add_subcommand("train", "Train one run");
  trn->add_option("config", config_file, "Training config JSON")->required();
  trn->add_option("data", data_dir, "Dataset directory")->required();
  trn->add_option("--out,-o", out, "Run directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate saved params on a pool");
  ev->add_option("params", params_file, "params.bin")->required();
  ev->add_option("data", data_dir, "Dataset directory")->required();
  ev->add_option("--pool", pool, "eval, labelled or unlabelled");
  ev->add_option("--out,-o", out, "Write the JSON summary here instead of stdout");

  auto* abl = app.add_subcommand("ablate", "Run the five-row ablation ladder");
  abl->add_option("config", config_file, "Base training config JSON")->required();
  abl->add_option("data", data_dir, "Dataset directory")->required();
  abl->add_option("--out,-o", out, "Output directory")->required();
  abl->add_option("--seeds", seeds, "Seeds per row")->delimiter(',');

  auto* rep = app.add_subcommand("report", "Comparison table and learning curves over run directories");
  rep->add_option("runs", runs, "Run directories")->required();
  rep->add_option("--out,-o", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(spec_file, out, fraction, seed, num_train, num_eval);
    if (*cluster) return cmd_cluster(data_dir, out, config_file, params_file);
    if (*trn) return cmd_train(config_file, data_dir, out);
    if (*ev) return cmd_eval(params_file, data_dir, pool, out);
    if (*abl) return cmd_ablate(config_file, data_dir, out, seeds);
    if (*rep) return cmd_report(runs, out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
