#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "usrn/grid.hpp"
#include "usrn/netcore.hpp"
#include "usrn/synthdata.hpp"

namespace usrn {

/// Capacity-constrained assignment solver used inside balanced k-means.
enum class AssignmentBackend {
  greedy,  // ascending-distance pair sweep under remaining capacities
  exact,   // min-cost assignment over cluster slots
};

enum class ClusteringMethod { balanced, plain };

std::string to_string(ClusteringMethod m);
ClusteringMethod clustering_method_from_string(const std::string& s);

struct KMeansOptions {
  int max_iter = 50;
  /// Independent k-means++ initializations; the lowest objective wins.
  int restarts = 4;
  AssignmentBackend backend = AssignmentBackend::greedy;
};

struct KMeansResult {
  std::vector<int> assignments;
  Matrix centroids;  // k x d
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Sum of squared distances to cluster means recomputed from assignments.
double partition_objective(const Matrix& points, std::span<const int> assignments, int k);

/// Seeded k-means++ initial centroids.
Matrix kmeanspp_init(const Matrix& points, int k, std::uint64_t seed);

/// Cluster sizes of a balanced partition of n points into k clusters lie in
/// [floor(n/k), ceil(n/k)].
KMeansResult balanced_kmeans(const Matrix& points, int k, std::uint64_t seed, const KMeansOptions& options = {});

/// Unconstrained Lloyd iteration; empty clusters are reseeded at the point
/// farthest from its centroid.
KMeansResult plain_kmeans(const Matrix& points, int k, std::uint64_t seed, const KMeansOptions& options = {});

/// One capacity-constrained assignment step given fixed centroids.
std::vector<int> balanced_assign(const Matrix& points, const Matrix& centroids, AssignmentBackend backend);

struct SubclassPlan {
  long n_min = 0;
  std::vector<int> per_class;  // k_c
  int total = 0;               // C_sub
};

/// k_c = max(1, round_half_up(n_c / n_min)) with n_min the smallest count.
SubclassPlan subclass_counts(std::span<const long> class_pixel_counts);

struct SubclassTaxonomy {
  int num_classes = 0;
  int num_subclasses = 0;
  std::vector<int> parent_of;                 // subclass -> class
  std::vector<std::vector<int>> children_of;  // class -> contiguous sorted subclasses
  Matrix centroids;                           // C_sub x D'
  long cluster_size_target = 0;               // n_min
  std::vector<bool> absent_class;             // no labelled pixels, zero-centroid placeholder

  /// C_sub x C indicator of parent_of; M(p) = p * mapping_matrix().
  Matrix mapping_matrix() const;
  /// One subclass per class, parent_of = identity.
  static SubclassTaxonomy identity(int num_classes, int feature_dim = 0);
  /// Builds parent/children maps from per-class subclass counts.
  static SubclassTaxonomy from_counts(std::span<const int> per_class);
  /// Throws DataError if the maps are inconsistent.
  void validate() const;
};

/// Per-class pixel features with their provenance.
struct ClassFeatures {
  struct Origin {
    int image;
    int pixel;
  };
  std::vector<Matrix> features;             // one matrix per class
  std::vector<std::vector<Origin>> origin;  // parallel to the rows of features[c]
  int feature_dim = 0;

  long total() const;
};

/// Last class-path trunk activations of every labelled pixel, grouped by
/// ground-truth class. Throws if params contain non-finite values.
ClassFeatures extract_features(const ModelParams& params, std::span<const LabeledSample> samples);

struct TaxonomyOptions {
  ClusteringMethod method = ClusteringMethod::balanced;
  KMeansOptions kmeans;
  /// Uniform subsample cap per class before clustering; unsampled points go
  /// to the nearest centroid. Off when empty.
  std::optional<int> max_points;
};

struct TaxonomyReport {
  std::vector<long> class_counts;
  std::vector<long> subclass_counts;
  double class_cbr = 0.0;
  double subclass_cbr = 0.0;
};

struct TaxonomyBuild {
  SubclassTaxonomy taxonomy;
  std::vector<LabelGrid> sublabels;  // one per labelled sample
  TaxonomyReport report;
};

TaxonomyBuild build_taxonomy(const ModelParams& params, std::span<const LabeledSample> samples, std::uint64_t seed,
                             const TaxonomyOptions& options = {});
/// Same, over features that were already extracted.
TaxonomyBuild build_taxonomy(const ClassFeatures& features, std::span<const LabeledSample> samples,
                             std::uint64_t seed, const TaxonomyOptions& options = {});

nlohmann::json taxonomy_to_json(const SubclassTaxonomy& t, const TaxonomyReport& report);
SubclassTaxonomy taxonomy_from_json(const nlohmann::json& j);

}  // namespace usrn
