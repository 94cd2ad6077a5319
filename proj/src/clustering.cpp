#include "usrn/clustering.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <tuple>

#include <nlohmann/json.hpp>

#include "usrn/assignment.hpp"
#include "usrn/error.hpp"
#include "usrn/metrics.hpp"
#include "usrn/seeding.hpp"

namespace usrn {

namespace {

Matrix squared_distances(const Matrix& points, const Matrix& centroids) {
  // |x|^2 - 2 x.c + |c|^2, clamped against rounding below zero.
  Matrix d = (-2.0 * points * centroids.transpose()).eval();
  d.colwise() += points.rowwise().squaredNorm();
  d.rowwise() += centroids.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

Matrix cluster_means(const Matrix& points, std::span<const int> assignments, int k) {
  Matrix means = Matrix::Zero(k, points.cols());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int c = assignments[static_cast<std::size_t>(i)];
    means.row(c) += points.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < k; ++c)
    if (counts[static_cast<std::size_t>(c)] > 0) means.row(c) /= counts[static_cast<std::size_t>(c)];
  return means;
}

std::vector<int> nearest(const Matrix& points, const Matrix& centroids) {
  const Matrix d = squared_distances(points, centroids);
  std::vector<int> out(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    Eigen::Index best;
    d.row(i).minCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

void check_cluster_args(const Matrix& points, int k) {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (points.rows() < k)
    throw ConfigError("cannot form " + std::to_string(k) + " clusters from " + std::to_string(points.rows()) +
                      " points");
  if (!points.allFinite()) throw DataError("clustering input contains non-finite values");
}

template <typename Iterate>
KMeansResult best_of_restarts(const Matrix& points, int k, std::uint64_t seed, const KMeansOptions& options,
                              Iterate&& iterate) {
  KMeansResult best;
  bool have = false;
  for (int r = 0; r < std::max(1, options.restarts); ++r) {
    KMeansResult cur = iterate(kmeanspp_init(points, k, derive_seed(seed, static_cast<std::uint64_t>(r))));
    if (!have || cur.objective < best.objective) {
      best = std::move(cur);
      have = true;
    }
  }
  return best;
}

}  // namespace

std::string to_string(ClusteringMethod m) { return m == ClusteringMethod::balanced ? "balanced" : "plain"; }

ClusteringMethod clustering_method_from_string(const std::string& s) {
  if (s == "balanced") return ClusteringMethod::balanced;
  if (s == "plain") return ClusteringMethod::plain;
  throw ConfigError("unknown clustering method '" + s + "' (expected balanced or plain)");
}

double partition_objective(const Matrix& points, std::span<const int> assignments, int k) {
  const Matrix means = cluster_means(points, assignments, k);
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    total += (points.row(i) - means.row(assignments[static_cast<std::size_t>(i)])).squaredNorm();
  return total;
}

Matrix kmeanspp_init(const Matrix& points, int k, std::uint64_t seed) {
  check_cluster_args(points, k);
  std::mt19937_64 rng(seed);
  const auto n = points.rows();
  Matrix centroids(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centroids.row(0) = points.row(first(rng));
  Vector d2 = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double target = unit(rng) * total;
      for (pick = 0; pick < n - 1; ++pick) {
        target -= d2(pick);
        if (target < 0.0) break;
      }
    } else {
      pick = first(rng);
    }
    centroids.row(c) = points.row(pick);
    d2 = d2.cwiseMin((points.rowwise() - centroids.row(c)).rowwise().squaredNorm());
  }
  return centroids;
}

std::vector<int> balanced_assign(const Matrix& points, const Matrix& centroids, AssignmentBackend backend) {
  const int n = static_cast<int>(points.rows());
  const int k = static_cast<int>(centroids.rows());
  const int q = n / k, r = n % k;
  const Matrix d = squared_distances(points, centroids);
  std::vector<int> out(static_cast<std::size_t>(n), -1);

  if (backend == AssignmentBackend::greedy) {
    std::vector<std::tuple<double, int, int>> pairs;
    pairs.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(k));
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < k; ++c) pairs.emplace_back(d(i, c), i, c);
    std::sort(pairs.begin(), pairs.end());
    std::vector<int> size(static_cast<std::size_t>(k), 0);
    int at_ceil = 0, placed = 0;
    for (const auto& [dist, i, c] : pairs) {
      if (out[static_cast<std::size_t>(i)] >= 0) continue;
      auto& s = size[static_cast<std::size_t>(c)];
      // Exactly r clusters may grow past floor(n/k).
      if (s < q || (s == q && at_ceil < r)) {
        out[static_cast<std::size_t>(i)] = c;
        if (++s == q + 1) ++at_ceil;
        if (++placed == n) break;
      }
    }
    return out;
  }

  // Each cluster gets q regular slots plus, when r > 0, one extra slot
  // priced high enough that every regular slot fills first; that forces
  // exactly r clusters to size q + 1.
  const int slots = r > 0 ? q + 1 : q;
  const double penalty = r > 0 ? 1.0 + n * std::max(1.0, d.maxCoeff()) : 0.0;
  Matrix cost(n, k * slots);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c)
      for (int s = 0; s < slots; ++s) cost(i, c * slots + s) = d(i, c) + (s == q ? penalty : 0.0);
  const auto cols = solve_assignment(cost);
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = cols[static_cast<std::size_t>(i)] / slots;
  return out;
}

KMeansResult balanced_kmeans(const Matrix& points, int k, std::uint64_t seed, const KMeansOptions& options) {
  check_cluster_args(points, k);
  if (k == 1) {
    KMeansResult r;
    r.assignments.assign(static_cast<std::size_t>(points.rows()), 0);
    r.centroids = points.colwise().mean();
    r.objective = partition_objective(points, r.assignments, 1);
    r.converged = true;
    return r;
  }
  return best_of_restarts(points, k, seed, options, [&](Matrix centroids) {
    KMeansResult r;
    for (r.iterations = 1; r.iterations <= options.max_iter; ++r.iterations) {
      auto next = balanced_assign(points, centroids, options.backend);
      const bool same = next == r.assignments;
      r.assignments = std::move(next);
      centroids = cluster_means(points, r.assignments, k);
      if (same) {
        r.converged = true;
        break;
      }
    }
    r.iterations = std::min(r.iterations, options.max_iter);
    r.centroids = std::move(centroids);
    r.objective = partition_objective(points, r.assignments, k);
    return r;
  });
}

KMeansResult plain_kmeans(const Matrix& points, int k, std::uint64_t seed, const KMeansOptions& options) {
  check_cluster_args(points, k);
  return best_of_restarts(points, k, seed, options, [&](Matrix centroids) {
    KMeansResult r;
    for (r.iterations = 1; r.iterations <= options.max_iter; ++r.iterations) {
      auto next = nearest(points, centroids);
      const bool same = next == r.assignments;
      r.assignments = std::move(next);
      centroids = cluster_means(points, r.assignments, k);
      std::vector<int> size(static_cast<std::size_t>(k), 0);
      for (int a : r.assignments) ++size[static_cast<std::size_t>(a)];
      bool reseeded = false;
      for (int c = 0; c < k; ++c) {
        if (size[static_cast<std::size_t>(c)] > 0) continue;
        Eigen::Index far = 0;
        double far_d = -1.0;
        for (Eigen::Index i = 0; i < points.rows(); ++i) {
          const double dd = (points.row(i) - centroids.row(r.assignments[static_cast<std::size_t>(i)])).squaredNorm();
          if (dd > far_d) {
            far_d = dd;
            far = i;
          }
        }
        centroids.row(c) = points.row(far);
        r.assignments[static_cast<std::size_t>(far)] = c;
        reseeded = true;
      }
      if (same && !reseeded) {
        r.converged = true;
        break;
      }
    }
    r.iterations = std::min(r.iterations, options.max_iter);
    r.centroids = cluster_means(points, r.assignments, k);
    r.objective = partition_objective(points, r.assignments, k);
    return r;
  });
}

SubclassPlan subclass_counts(std::span<const long> counts) {
  if (counts.empty()) throw DataError("no classes to plan subclasses for");
  SubclassPlan plan;
  plan.n_min = *std::min_element(counts.begin(), counts.end());
  if (plan.n_min < 1) throw DataError("every class needs at least one pixel to plan subclasses");
  for (long n : counts) {
    const long k = std::max(1L, (2 * n + plan.n_min) / (2 * plan.n_min));
    plan.per_class.push_back(static_cast<int>(k));
    plan.total += static_cast<int>(k);
  }
  return plan;
}

Matrix SubclassTaxonomy::mapping_matrix() const {
  Matrix m = Matrix::Zero(num_subclasses, num_classes);
  for (int s = 0; s < num_subclasses; ++s) m(s, parent_of[static_cast<std::size_t>(s)]) = 1.0;
  return m;
}

SubclassTaxonomy SubclassTaxonomy::from_counts(std::span<const int> per_class) {
  SubclassTaxonomy t;
  t.num_classes = static_cast<int>(per_class.size());
  t.children_of.resize(per_class.size());
  for (int c = 0; c < t.num_classes; ++c) {
    const int k = per_class[static_cast<std::size_t>(c)];
    if (k < 1) throw DataError("every class needs at least one subclass");
    for (int i = 0; i < k; ++i) {
      t.children_of[static_cast<std::size_t>(c)].push_back(t.num_subclasses++);
      t.parent_of.push_back(c);
    }
  }
  t.absent_class.assign(per_class.size(), false);
  return t;
}

SubclassTaxonomy SubclassTaxonomy::identity(int num_classes, int feature_dim) {
  std::vector<int> ones(static_cast<std::size_t>(num_classes), 1);
  SubclassTaxonomy t = from_counts(ones);
  t.centroids = Matrix::Zero(num_classes, feature_dim);
  return t;
}

void SubclassTaxonomy::validate() const {
  if (static_cast<int>(parent_of.size()) != num_subclasses || static_cast<int>(children_of.size()) != num_classes)
    throw DataError("taxonomy maps have the wrong size");
  int expected = 0;
  for (int c = 0; c < num_classes; ++c) {
    const auto& kids = children_of[static_cast<std::size_t>(c)];
    if (kids.empty()) throw DataError("class " + std::to_string(c) + " has no subclass");
    for (int s : kids) {
      if (s != expected++) throw DataError("subclass blocks must be contiguous and sorted");
      if (parent_of[static_cast<std::size_t>(s)] != c) throw DataError("parent_of and children_of disagree");
    }
  }
  if (expected != num_subclasses) throw DataError("subclass indices have gaps");
}

long ClassFeatures::total() const {
  long n = 0;
  for (const auto& f : features) n += static_cast<long>(f.rows());
  return n;
}

ClassFeatures extract_features(const ModelParams& params, std::span<const LabeledSample> samples) {
  if (!params.all_finite()) throw NumericalError("cannot extract features from non-finite parameters");
  if (samples.empty()) throw DataError("no labelled samples to extract features from");
  const int num_classes = samples.front().labels.num_labels;
  ClassFeatures out;
  out.feature_dim = params.hidden_dim();
  out.origin.resize(static_cast<std::size_t>(num_classes));
  std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(num_classes));
  std::vector<Matrix> per_image;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    per_image.push_back(trunk_features(params, samples[i].features, Head::cls));
    const auto& labels = samples[i].labels;
    for (int p = 0; p < labels.pixels(); ++p) {
      if (labels.is_ignored(p)) continue;
      out.origin[static_cast<std::size_t>(labels.at(p))].push_back({static_cast<int>(i), p});
    }
  }
  for (int c = 0; c < num_classes; ++c) {
    const auto& org = out.origin[static_cast<std::size_t>(c)];
    Matrix f(static_cast<Eigen::Index>(org.size()), out.feature_dim);
    for (std::size_t r = 0; r < org.size(); ++r)
      f.row(static_cast<Eigen::Index>(r)) = per_image[static_cast<std::size_t>(org[r].image)].row(org[r].pixel);
    out.features.push_back(std::move(f));
  }
  return out;
}

TaxonomyBuild build_taxonomy(const ModelParams& params, std::span<const LabeledSample> samples, std::uint64_t seed,
                             const TaxonomyOptions& options) {
  return build_taxonomy(extract_features(params, samples), samples, seed, options);
}

TaxonomyBuild build_taxonomy(const ClassFeatures& features, std::span<const LabeledSample> samples,
                             std::uint64_t seed, const TaxonomyOptions& options) {
  const int num_classes = static_cast<int>(features.features.size());
  TaxonomyBuild out;
  auto& report = out.report;
  for (const auto& f : features.features) report.class_counts.push_back(static_cast<long>(f.rows()));

  std::vector<long> present;
  for (long n : report.class_counts)
    if (n > 0) present.push_back(n);
  if (present.empty()) throw DataError("labelled pool has no pixels");
  const SubclassPlan plan = subclass_counts(present);

  std::vector<int> k(static_cast<std::size_t>(num_classes), 1);
  for (int c = 0, j = 0; c < num_classes; ++c)
    if (report.class_counts[static_cast<std::size_t>(c)] > 0) k[static_cast<std::size_t>(c)] = plan.per_class[static_cast<std::size_t>(j++)];

  out.taxonomy = SubclassTaxonomy::from_counts(k);
  auto& tax = out.taxonomy;
  tax.cluster_size_target = plan.n_min;
  tax.centroids = Matrix::Zero(tax.num_subclasses, features.feature_dim);

  std::vector<std::vector<int>> assignments(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    const Matrix& pts = features.features[static_cast<std::size_t>(c)];
    const int kc = k[static_cast<std::size_t>(c)];
    const int offset = tax.children_of[static_cast<std::size_t>(c)].front();
    if (pts.rows() == 0) {
      tax.absent_class[static_cast<std::size_t>(c)] = true;
      continue;
    }
    const std::uint64_t class_seed = derive_seed(seed, static_cast<std::uint64_t>(c), 0x5bu);
    auto cluster = [&](const Matrix& p) {
      return options.method == ClusteringMethod::balanced ? balanced_kmeans(p, kc, class_seed, options.kmeans)
                                                          : plain_kmeans(p, kc, class_seed, options.kmeans);
    };
    KMeansResult res;
    if (options.max_points && pts.rows() > *options.max_points && *options.max_points >= kc) {
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(pts.rows()));
      std::iota(idx.begin(), idx.end(), 0);
      std::mt19937_64 rng(derive_seed(class_seed, 0x5a3du));
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(*options.max_points));
      std::sort(idx.begin(), idx.end());
      Matrix sub(static_cast<Eigen::Index>(idx.size()), pts.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = pts.row(idx[i]);
      res = cluster(sub);
      res.assignments = nearest(pts, res.centroids);
    } else {
      res = cluster(pts);
    }
    tax.centroids.middleRows(offset, kc) = res.centroids;
    assignments[static_cast<std::size_t>(c)] = std::move(res.assignments);
  }

  for (const auto& s : samples) out.sublabels.push_back(LabelGrid::ignored(s.labels.height, s.labels.width, tax.num_subclasses));
  report.subclass_counts.assign(static_cast<std::size_t>(tax.num_subclasses), 0);
  for (int c = 0; c < num_classes; ++c) {
    const auto& org = features.origin[static_cast<std::size_t>(c)];
    const int offset = tax.children_of[static_cast<std::size_t>(c)].front();
    for (std::size_t r = 0; r < org.size(); ++r) {
      const int sub = offset + assignments[static_cast<std::size_t>(c)][r];
      out.sublabels[static_cast<std::size_t>(org[r].image)].at(org[r].pixel) = sub;
      ++report.subclass_counts[static_cast<std::size_t>(sub)];
    }
  }
  if (num_classes >= 2) report.class_cbr = cbr(report.class_counts);
  if (tax.num_subclasses >= 2) report.subclass_cbr = cbr(report.subclass_counts);
  return out;
}

nlohmann::json taxonomy_to_json(const SubclassTaxonomy& t, const TaxonomyReport& report) {
  nlohmann::json centroids = nlohmann::json::array();
  for (Eigen::Index r = 0; r < t.centroids.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(t.centroids.cols()));
    for (Eigen::Index c = 0; c < t.centroids.cols(); ++c) row[static_cast<std::size_t>(c)] = t.centroids(r, c);
    centroids.push_back(row);
  }
  std::vector<int> absent;
  for (int c = 0; c < t.num_classes; ++c)
    if (t.absent_class[static_cast<std::size_t>(c)]) absent.push_back(c);
  return {{"num_classes", t.num_classes},
          {"num_subclasses", t.num_subclasses},
          {"parent_of", t.parent_of},
          {"children_of", t.children_of},
          {"cluster_size_target", t.cluster_size_target},
          {"absent_classes", absent},
          {"centroids", centroids},
          {"counts", {{"class", report.class_counts}, {"subclass", report.subclass_counts}}},
          {"cbr", {{"class", report.class_cbr}, {"subclass", report.subclass_cbr}}}};
}

SubclassTaxonomy taxonomy_from_json(const nlohmann::json& j) {
  try {
    SubclassTaxonomy t;
    t.num_classes = j.at("num_classes").get<int>();
    t.num_subclasses = j.at("num_subclasses").get<int>();
    t.parent_of = j.at("parent_of").get<std::vector<int>>();
    t.children_of = j.at("children_of").get<std::vector<std::vector<int>>>();
    t.cluster_size_target = j.value("cluster_size_target", 0L);
    t.absent_class.assign(static_cast<std::size_t>(t.num_classes), false);
    for (int c : j.value("absent_classes", std::vector<int>{}))
      if (c >= 0 && c < t.num_classes) t.absent_class[static_cast<std::size_t>(c)] = true;
    const auto rows = j.value("centroids", std::vector<std::vector<double>>{});
    const auto dim = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size());
    t.centroids = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), dim);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (Eigen::Index c = 0; c < dim; ++c) t.centroids(static_cast<Eigen::Index>(r), c) = rows[r].at(static_cast<std::size_t>(c));
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed taxonomy JSON: ") + e.what());
  }
}

}  // namespace usrn
