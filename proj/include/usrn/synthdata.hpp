#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "usrn/grid.hpp"

namespace usrn {

/// Generative description of a class-imbalanced synthetic scene.
///
/// Every class owns one or more latent modes; a pixel's feature is its
/// mode center plus isotropic Gaussian noise. Modes are chosen per
/// mode_block x mode_block tile so that subclass structure is spatially
/// coherent, as object parts are in real images.
struct SceneSpec {
  int num_classes = 5;
  std::vector<double> class_frequencies{0.70, 0.15, 0.08, 0.05, 0.02};
  std::vector<int> modes_per_class{3, 3, 3, 3, 3};
  int feature_dim = 8;
  /// One center per mode, modes ordered class by class. Generated from
  /// seed and center_scale when left empty.
  std::vector<std::vector<double>> mode_centers;
  double center_scale = 1.0;
  double mode_noise = 0.5;
  /// Per-image, per-channel gain in [1 - j, 1 + j] and offset in
  /// [-j, j] * center_scale applied to every pixel of the image.
  double image_jitter = 0.5;
  int height = 32;
  int width = 32;
  int mode_block = 4;
  std::uint64_t seed = 7;

  static SceneSpec default_spec();

  int num_modes() const;
  int first_mode(int cls) const;
  int mode_class(int mode) const;
  int background_class() const;

  /// Fills mode_centers from the seed if they are absent.
  void ensure_centers();
  /// Throws ConfigError when any invariant is violated.
  void validate() const;
};

void to_json(nlohmann::json& j, const SceneSpec& spec);
void from_json(const nlohmann::json& j, SceneSpec& spec);

struct LabeledSample {
  FeatureGrid features;
  LabelGrid labels;
  /// Hidden generative mode per pixel; evaluation only.
  std::vector<int> latent_modes;
};

struct DatasetSplit {
  std::vector<LabeledSample> labelled;
  /// Labels here exist for evaluation; training code receives features only.
  std::vector<LabeledSample> unlabelled;
  std::vector<LabeledSample> eval;
  double labelled_fraction = 0.0;

  /// Content hash over all three pools.
  std::uint64_t hash() const;
};

/// Generates num_images samples. Image i uses a seed derived from
/// spec.seed, stream and i, so any subset can be regenerated independently.
std::vector<LabeledSample> generate(const SceneSpec& spec, int num_images, std::uint64_t stream = 0);

/// Seeded shuffle, then the first round(n * fraction) samples become labelled.
DatasetSplit split(std::vector<LabeledSample> samples, double labelled_fraction, std::uint64_t seed);

/// generate + split, with the eval pool drawn from an independent stream.
DatasetSplit make_dataset(const SceneSpec& spec, int num_train, int num_eval, double labelled_fraction,
                          std::uint64_t split_seed);

struct WeakAugmentOptions {
  double min_scale = 0.8;
  double max_scale = 1.0;
  double flip_probability = 0.5;
};

/// Crop-and-resize with optional horizontal flip. Output pixel (y, x)
/// reads input pixel source(y, x) (nearest neighbor).
struct WeakTransform {
  int height = 0;
  int width = 0;
  int crop_y = 0;
  int crop_x = 0;
  int crop_h = 0;
  int crop_w = 0;
  bool flip = false;

  static WeakTransform identity(int h, int w);
  static WeakTransform draw(int h, int w, std::uint64_t seed, const WeakAugmentOptions& options = {});

  int source(int y, int x) const;
  FeatureGrid apply(const FeatureGrid& in) const;
  LabelGrid apply(const LabelGrid& in) const;
  std::vector<int> apply(const std::vector<int>& per_pixel) const;
};

FeatureGrid augment_weak(const FeatureGrid& features, std::uint64_t seed, const WeakAugmentOptions& options = {});

struct StrongAugmentOptions {
  double gain_min = 0.7;
  double gain_max = 1.3;
  double bias_range = 0.2;
  double noise_sigma = 1.0;  // set to 2 x mode_noise by the trainer
  bool blur = true;

  static StrongAugmentOptions for_spec(const SceneSpec& spec);
  static StrongAugmentOptions none();
};

/// Per-channel gain/bias jitter, additive Gaussian noise, then a 3x3 box
/// blur (edge-replicated). Geometry is unchanged.
FeatureGrid augment_strong(const FeatureGrid& features, std::uint64_t seed,
                           const StrongAugmentOptions& options = {});

FeatureGrid box_blur3(const FeatureGrid& in);

// "USRNDS1", u32 image count, u32 num_classes, u32 (height, width, dim) per
// image, then every image's f64 features, then every image's i32 labels
// followed by its i32 latent modes. Little-endian throughout.
void write_samples(std::ostream& os, const std::vector<LabeledSample>& samples, int num_classes);
std::vector<LabeledSample> read_samples(std::istream& is);
void save_samples(const std::string& path, const std::vector<LabeledSample>& samples, int num_classes);
std::vector<LabeledSample> load_samples(const std::string& path);

std::uint64_t hash_samples(const std::vector<LabeledSample>& samples);

}  // namespace usrn
