#include "usrn/rundir.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "usrn/binary_io.hpp"
#include "usrn/error.hpp"

namespace usrn {

namespace {

using nlohmann::json;

constexpr const char* kPools[] = {"labelled", "unlabelled", "eval"};

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

const std::vector<LabeledSample>& pool_of(const DatasetSplit& s, int i) {
  return i == 0 ? s.labelled : i == 1 ? s.unlabelled : s.eval;
}

std::vector<LabeledSample>& pool_of(DatasetSplit& s, int i) {
  return i == 0 ? s.labelled : i == 1 ? s.unlabelled : s.eval;
}

double mean_joint(const RunRecord& rec, double LossRow::*field) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : rec.losses)
    if (r.phase == "joint") {
      sum += r.*field;
      ++n;
    }
  return n > 0 ? sum / n : 0.0;
}

}  // namespace

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
  if (!os) throw DataError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json dataset_manifest(const DatasetDir& data) {
  json j{{"format", "USRNDS1"},
         {"num_classes", data.spec.num_classes},
         {"labelled_fraction", data.split.labelled_fraction},
         {"split_seed", data.split_seed},
         {"split_hash", io::hex64(data.split.hash())}};
  for (int i = 0; i < 3; ++i) {
    const auto& pool = pool_of(data.split, i);
    j["pools"][kPools[i]] = {{"file", std::string(kPools[i]) + ".bin"},
                             {"count", pool.size()},
                             {"hash", io::hex64(hash_samples(pool))}};
  }
  return j;
}

void write_dataset_dir(const fs::path& dir, const DatasetDir& data) {
  fs::create_directories(dir);
  json spec_json = data.spec;
  write_text(dir / "spec.json", spec_json.dump(2) + "\n");
  for (int i = 0; i < 3; ++i)
    save_samples((dir / (std::string(kPools[i]) + ".bin")).string(), pool_of(data.split, i), data.spec.num_classes);
  write_text(dir / "manifest.json", dataset_manifest(data).dump(2) + "\n");
}

DatasetDir read_dataset_dir(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw DataError("no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
  DatasetDir data;
  try {
    data.spec = json::parse(read_text(dir / "spec.json")).get<SceneSpec>();
    data.split_seed = manifest.at("split_seed").get<std::uint64_t>();
    data.split.labelled_fraction = manifest.at("labelled_fraction").get<double>();
    for (int i = 0; i < 3; ++i) {
      const json& entry = manifest.at("pools").at(kPools[i]);
      auto& pool = pool_of(data.split, i);
      pool = load_samples((dir / entry.at("file").get<std::string>()).string());
      if (io::hex64(hash_samples(pool)) != entry.at("hash").get<std::string>())
        throw DataError(std::string(kPools[i]) + " pool does not match its manifest hash");
      if (pool.size() != entry.at("count").get<std::size_t>())
        throw DataError(std::string(kPools[i]) + " pool count does not match the manifest");
    }
  } catch (const json::exception& e) {
    throw DataError("dataset manifest: " + std::string(e.what()));
  }
  if (data.split.labelled.empty()) throw DataError("dataset has no labelled images");
  return data;
}

std::string losses_csv(const RunRecord& rec) {
  std::ostringstream os;
  os << "run_id,step,phase,total,supervised,self_training,subclass,gate_open,coverage,sub_coverage\n";
  for (const auto& r : rec.losses)
    os << rec.config.run_id << ',' << r.step << ',' << r.phase << ',' << num(r.total) << ',' << num(r.supervised) << ','
       << num(r.self_training) << ',' << num(r.subclass) << ',' << num(r.gate_open) << ',' << num(r.coverage) << ','
       << num(r.sub_coverage) << '\n';
  return os.str();
}

std::string metrics_csv(const RunRecord& rec) {
  std::ostringstream os;
  const std::size_t k = rec.metrics.empty() ? 0 : rec.metrics.front().eval.iou.per_class.size();
  os << "run_id,step,miou";
  for (std::size_t c = 0; c < k; ++c) os << ",iou_" << c;
  os << ",min_iou,pred_cbr,subclass_cbr,ari\n";
  const double sub_cbr = rec.taxonomy ? rec.taxonomy->report.subclass_cbr : std::nan("");
  const double ari = rec.dominant_ari.value_or(std::nan(""));
  for (const auto& m : rec.metrics) {
    os << rec.config.run_id << ',' << m.step << ',' << num(m.eval.iou.mean);
    for (double v : m.eval.iou.per_class) os << ',' << num(v);
    os << ',' << num(m.eval.iou.min) << ',' << num(m.eval.predicted_cbr) << ',' << num(sub_cbr) << ',' << num(ari)
       << '\n';
  }
  return os.str();
}

json run_summary(const RunRecord& rec) {
  const MetricRow& fin = rec.final_metrics();
  json per_class = json::array();
  for (double v : fin.eval.iou.per_class) per_class.push_back(num_or_null(v));
  json curve = json::array();
  for (const auto& m : rec.metrics) curve.push_back({m.step, m.eval.iou.mean});
  json j{{"run_id", rec.config.run_id},
         {"mode", to_string(rec.config.mode)},
         {"final",
          {{"step", fin.step},
           {"miou", fin.eval.iou.mean},
           {"min_iou", fin.eval.iou.min},
           {"per_class_iou", per_class},
           {"predicted_counts", fin.eval.predicted_counts},
           {"predicted_cbr", fin.eval.predicted_cbr}}},
         {"curve", curve},
         {"gate_open_fraction", mean_joint(rec, &LossRow::gate_open)},
         {"pseudo_label_coverage", mean_joint(rec, &LossRow::coverage)},
         {"split_hash", io::hex64(rec.split_hash)},
         {"wall_seconds", rec.wall_seconds}};
  if (rec.taxonomy) {
    j["class_cbr"] = rec.taxonomy->report.class_cbr;
    j["subclass_cbr"] = rec.taxonomy->report.subclass_cbr;
    j["num_subclasses"] = rec.taxonomy->taxonomy.num_subclasses;
  }
  if (rec.dominant_ari) j["dominant_ari"] = *rec.dominant_ari;
  return j;
}

void write_run_dir(const fs::path& dir, const RunRecord& rec) {
  fs::create_directories(dir);
  write_text(dir / "config.json", to_json(rec.config).dump(2) + "\n");
  write_text(dir / "losses.csv", losses_csv(rec));
  write_text(dir / "metrics.csv", metrics_csv(rec));
  if (rec.taxonomy)
    write_text(dir / "taxonomy.json",
               taxonomy_to_json(rec.taxonomy->taxonomy, rec.taxonomy->report).dump(2) + "\n");
  save_params((dir / "params.bin").string(), rec.params);
  write_text(dir / "summary.json", run_summary(rec).dump(2) + "\n");
}

std::string ladder_csv(const LadderResult& ladder) {
  std::ostringstream os;
  os << "row,msl,ost,usr,sst,egm,seed,miou,min_iou,split_hash\n";
  for (const auto& r : ladder.rows) {
    const auto& f = r.flags;
    const std::string flags = std::to_string(f.msl) + ',' + std::to_string(f.ost) + ',' + std::to_string(f.usr) + ',' +
                              std::to_string(f.sst) + ',' + std::to_string(f.egm);
    for (std::size_t s = 0; s < r.seeds.size(); ++s)
      os << r.name << ',' << flags << ',' << r.seeds[s] << ',' << num(r.miou[s]) << ',' << num(r.min_iou[s]) << ','
         << io::hex64(r.split_hashes[s]) << '\n';
    os << r.name << ',' << flags << ",median," << num(r.median_miou()) << ',' << num(r.median_min_iou()) << ','
       << io::hex64(ladder.split_hash) << '\n';
  }
  return os.str();
}

ReportEntry read_report_entry(const fs::path& run_dir) {
  const fs::path path = run_dir / "summary.json";
  if (!fs::exists(path)) throw DataError("no summary.json in " + run_dir.string());
  try {
    const json j = json::parse(read_text(path));
    ReportEntry e;
    e.run_id = j.at("run_id").get<std::string>();
    const json& fin = j.at("final");
    e.miou = fin.at("miou").get<double>();
    for (const auto& v : fin.at("per_class_iou")) e.per_class.push_back(v.is_null() ? std::nan("") : v.get<double>());
    e.predicted_cbr = fin.at("predicted_cbr").get<double>();
    e.subclass_cbr = j.contains("subclass_cbr") ? j.at("subclass_cbr").get<double>() : std::nan("");
    e.gate_open = j.value("gate_open_fraction", 0.0);
    for (const auto& pt : j.at("curve")) e.curve.emplace_back(pt.at(0).get<int>(), pt.at(1).get<double>());
    return e;
  } catch (const json::exception& ex) {
    throw DataError(path.string() + ": " + ex.what());
  }
}

std::string report_csv(const std::vector<ReportEntry>& entries) {
  std::size_t k = 0;
  for (const auto& e : entries) k = std::max(k, e.per_class.size());
  std::ostringstream os;
  os << "run_id,miou";
  for (std::size_t c = 0; c < k; ++c) os << ",iou_" << c;
  os << ",pred_cbr,subclass_cbr,gate_open\n";
  for (const auto& e : entries) {
    os << e.run_id << ',' << num(e.miou);
    for (std::size_t c = 0; c < k; ++c) os << ',' << (c < e.per_class.size() ? num(e.per_class[c]) : "nan");
    os << ',' << num(e.predicted_cbr) << ',' << num(e.subclass_cbr) << ',' << num(e.gate_open) << '\n';
  }
  return os.str();
}

std::string report_svg(const std::vector<ReportEntry>& entries) {
  constexpr double W = 640, H = 400, L = 60, R = 160, T = 20, B = 40;
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  int max_step = 1;
  for (const auto& e : entries)
    for (const auto& [s, _] : e.curve) max_step = std::max(max_step, s);
  auto px = [&](int step) { return L + (W - L - R) * step / max_step; };
  auto py = [&](double v) { return H - B - (H - T - B) * std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0); };
  auto escape = [](const std::string& s) {
    std::string out;
    for (char ch : s) {
      if (ch == '&') out += "&amp;";
      else if (ch == '<') out += "&lt;";
      else if (ch == '>') out += "&gt;";
      else if (ch == '"') out += "&quot;";
      else out += ch;
    }
    return out;
  };

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\" font-size=\"12\">step</text>\n"
     << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 " << (T + H - B) / 2
     << ")\" text-anchor=\"middle\">eval mIoU</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << v
       << "</text>\n";
  }
  os << "<text x=\"" << W - R << "\" y=\"" << H - B + 14 << "\" text-anchor=\"end\" font-size=\"10\">" << max_step
     << "</text>\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const char* color = colors[i % std::size(colors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t p = 0; p < entries[i].curve.size(); ++p) {
      const auto& [s, v] = entries[i].curve[p];
      os << (p ? " " : "") << px(s) << ',' << py(v);
    }
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 14 * (i + 1) << "\" font-size=\"11\" fill=\"" << color
       << "\">" << escape(entries[i].run_id) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace usrn
