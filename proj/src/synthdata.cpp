#include "usrn/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "usrn/binary_io.hpp"
#include "usrn/error.hpp"
#include "usrn/seeding.hpp"

namespace usrn {

namespace {

constexpr std::string_view kDatasetMagic = "USRNDS1";

int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

}  // namespace

SceneSpec SceneSpec::default_spec() {
  SceneSpec spec;
  spec.ensure_centers();
  return spec;
}

int SceneSpec::num_modes() const {
  return std::accumulate(modes_per_class.begin(), modes_per_class.end(), 0);
}

int SceneSpec::first_mode(int cls) const {
  return std::accumulate(modes_per_class.begin(), modes_per_class.begin() + cls, 0);
}

int SceneSpec::mode_class(int mode) const {
  int acc = 0;
  for (int c = 0; c < num_classes; ++c) {
    acc += modes_per_class[static_cast<std::size_t>(c)];
    if (mode < acc) return c;
  }
  throw DataError("mode index out of range");
}

int SceneSpec::background_class() const {
  return static_cast<int>(std::max_element(class_frequencies.begin(), class_frequencies.end()) -
                          class_frequencies.begin());
}

void SceneSpec::ensure_centers() {
  if (!mode_centers.empty()) return;
  std::mt19937_64 rng(derive_seed(seed, 0xC3A7E5u));
  std::normal_distribution<double> normal(0.0, center_scale);
  mode_centers.assign(static_cast<std::size_t>(num_modes()), std::vector<double>(static_cast<std::size_t>(feature_dim)));
  for (auto& c : mode_centers)
    for (auto& v : c) v = normal(rng);
}

void SceneSpec::validate() const {
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  if (static_cast<int>(class_frequencies.size()) != num_classes)
    throw ConfigError("class_frequencies must have num_classes entries");
  if (static_cast<int>(modes_per_class.size()) != num_classes)
    throw ConfigError("modes_per_class must have num_classes entries");
  double sum = 0.0;
  for (double f : class_frequencies) {
    if (!(f >= 0.0)) throw ConfigError("class frequencies must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("class frequencies must sum to 1");
  const double lo = *std::min_element(class_frequencies.begin(), class_frequencies.end());
  const double hi = *std::max_element(class_frequencies.begin(), class_frequencies.end());
  if (num_classes > 1 && hi < 3.0 * lo)
    throw ConfigError("class frequencies must be imbalanced (max >= 3 x min)");
  for (int m : modes_per_class)
    if (m < 1) throw ConfigError("every class needs at least one mode");
  if (feature_dim < 1) throw ConfigError("feature_dim must be positive");
  if (height < 1 || width < 1) throw ConfigError("image size must be positive");
  if (mode_block < 1) throw ConfigError("mode_block must be positive");
  if (!(mode_noise >= 0.0)) throw ConfigError("mode_noise must be non-negative");
  if (!(image_jitter >= 0.0 && image_jitter < 1.0)) throw ConfigError("image_jitter must be in [0, 1)");
  if (!mode_centers.empty()) {
    if (static_cast<int>(mode_centers.size()) != num_modes())
      throw ConfigError("mode_centers must have one entry per mode");
    for (const auto& c : mode_centers) {
      if (static_cast<int>(c.size()) != feature_dim) throw ConfigError("mode center has wrong dimension");
      for (double v : c)
        if (!std::isfinite(v)) throw ConfigError("mode centers must be finite");
    }
  }
  const double area = static_cast<double>(height) * width;
  for (int c = 0; c < num_classes; ++c) {
    const double f = class_frequencies[static_cast<std::size_t>(c)];
    if (c != background_class() && f > 0.0 && f * area < 1.0)
      throw ConfigError("class " + std::to_string(c) + " frequency is below one pixel per image");
  }
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = nlohmann::json{{"num_classes", s.num_classes},
                     {"class_frequencies", s.class_frequencies},
                     {"modes_per_class", s.modes_per_class},
                     {"feature_dim", s.feature_dim},
                     {"center_scale", s.center_scale},
                     {"mode_noise", s.mode_noise},
                     {"image_jitter", s.image_jitter},
                     {"height", s.height},
                     {"width", s.width},
                     {"mode_block", s.mode_block},
                     {"seed", s.seed}};
  if (!s.mode_centers.empty()) j["mode_centers"] = s.mode_centers;
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
  static const std::vector<std::string> known{"num_classes", "class_frequencies", "modes_per_class",
                                              "feature_dim", "mode_centers",      "center_scale",
                                              "mode_noise",  "image_jitter",      "height",
                                              "width",       "mode_block",        "seed"};
  if (!j.is_object()) throw ConfigError("scene spec must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown scene spec key '" + key + "'");
  try {
    s = SceneSpec{};
    s.num_classes = j.value("num_classes", s.num_classes);
    if (j.contains("class_frequencies")) {
      s.class_frequencies = j.at("class_frequencies").get<std::vector<double>>();
    } else if (s.num_classes != 5) {
      throw ConfigError("class_frequencies is required when num_classes differs from the default");
    }
    if (j.contains("modes_per_class")) {
      const auto& m = j.at("modes_per_class");
      s.modes_per_class = m.is_array() ? m.get<std::vector<int>>()
                                       : std::vector<int>(static_cast<std::size_t>(s.num_classes), m.get<int>());
    } else {
      s.modes_per_class.assign(static_cast<std::size_t>(s.num_classes), 3);
    }
    s.feature_dim = j.value("feature_dim", s.feature_dim);
    s.center_scale = j.value("center_scale", s.center_scale);
    s.mode_noise = j.value("mode_noise", s.mode_noise);
    s.image_jitter = j.value("image_jitter", s.image_jitter);
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.mode_block = j.value("mode_block", s.mode_block);
    s.seed = j.value("seed", s.seed);
    if (j.contains("mode_centers")) s.mode_centers = j.at("mode_centers").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed scene spec: ") + e.what());
  }
}

namespace {

LabeledSample generate_image(const SceneSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int h = spec.height, w = spec.width;
  const int bg = spec.background_class();

  LabelGrid labels(h, w, spec.num_classes, bg);

  // Foreground classes, most frequent first so the rarest land on top of
  // free space last; each is one rectangle painted only over background.
  std::vector<int> order;
  for (int c = 0; c < spec.num_classes; ++c)
    if (c != bg && spec.class_frequencies[static_cast<std::size_t>(c)] > 0.0) order.push_back(c);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return spec.class_frequencies[static_cast<std::size_t>(a)] > spec.class_frequencies[static_cast<std::size_t>(b)];
  });

  for (int c : order) {
    const double target =
        spec.class_frequencies[static_cast<std::size_t>(c)] * h * w * (0.6 + 0.8 * unit(rng));
    const double aspect = std::exp(std::log(0.5) + unit(rng) * (std::log(2.0) - std::log(0.5)));
    const int rh = std::clamp(round_half_up(std::sqrt(std::max(target, 1.0) * aspect)), 1, h);
    const int rw = std::clamp(round_half_up(std::max(target, 1.0) / rh), 1, w);
    int best_y = 0, best_x = 0, best_overlap = -1;
    for (int attempt = 0; attempt < 24; ++attempt) {
      const int y0 = static_cast<int>(unit(rng) * (h - rh + 1));
      const int x0 = static_cast<int>(unit(rng) * (w - rw + 1));
      int overlap = 0;
      for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) overlap += labels.at(y * w + x) != bg;
      if (best_overlap < 0 || overlap < best_overlap) {
        best_overlap = overlap;
        best_y = y0;
        best_x = x0;
      }
      if (overlap == 0) break;
    }
    for (int y = best_y; y < best_y + rh; ++y)
      for (int x = best_x; x < best_x + rw; ++x)
        if (labels.at(y * w + x) == bg) labels.at(y * w + x) = c;
  }

  // Mode per (tile, class): pixels of one class inside a tile share a mode.
  const int block = spec.mode_block;
  const int tiles_y = (h + block - 1) / block, tiles_x = (w + block - 1) / block;
  std::vector<int> tile_mode(static_cast<std::size_t>(tiles_y * tiles_x * spec.num_classes));
  for (int t = 0; t < tiles_y * tiles_x; ++t)
    for (int c = 0; c < spec.num_classes; ++c) {
      const int k = spec.modes_per_class[static_cast<std::size_t>(c)];
      tile_mode[static_cast<std::size_t>(t * spec.num_classes + c)] =
          spec.first_mode(c) + std::min(k - 1, static_cast<int>(unit(rng) * k));
    }

  // Per-image channel gain and offset, drawn from their own stream so the
  // label layout does not depend on the jitter setting.
  std::vector<double> gain(static_cast<std::size_t>(spec.feature_dim), 1.0);
  std::vector<double> offset(static_cast<std::size_t>(spec.feature_dim), 0.0);
  if (spec.image_jitter > 0.0) {
    std::mt19937_64 jrng(derive_seed(seed, 0x6a));
    for (int d = 0; d < spec.feature_dim; ++d) {
      gain[static_cast<std::size_t>(d)] = 1.0 + spec.image_jitter * (2.0 * unit(jrng) - 1.0);
      offset[static_cast<std::size_t>(d)] = spec.image_jitter * spec.center_scale * (2.0 * unit(jrng) - 1.0);
    }
  }

  LabeledSample out;
  out.features = FeatureGrid(h, w, spec.feature_dim);
  out.latent_modes.resize(static_cast<std::size_t>(h * w));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      const int c = labels.at(p);
      const int t = (y / block) * tiles_x + (x / block);
      const int mode = tile_mode[static_cast<std::size_t>(t * spec.num_classes + c)];
      out.latent_modes[static_cast<std::size_t>(p)] = mode;
      const auto& center = spec.mode_centers[static_cast<std::size_t>(mode)];
      for (int d = 0; d < spec.feature_dim; ++d) {
        const auto k = static_cast<std::size_t>(d);
        const double v = center[k] + (spec.mode_noise > 0.0 ? spec.mode_noise * noise(rng) : 0.0);
        out.features.values(p, d) = gain[k] * v + offset[k];
      }
    }
  out.labels = std::move(labels);
  return out;
}

}  // namespace

std::vector<LabeledSample> generate(const SceneSpec& spec_in, int num_images, std::uint64_t stream) {
  SceneSpec spec = spec_in;
  spec.ensure_centers();
  spec.validate();
  if (num_images < 0) throw ConfigError("num_images must be non-negative");
  std::vector<LabeledSample> out;
  out.reserve(static_cast<std::size_t>(num_images));
  for (int i = 0; i < num_images; ++i)
    out.push_back(generate_image(spec, derive_seed(spec.seed, stream, static_cast<std::uint64_t>(i))));
  return out;
}

DatasetSplit split(std::vector<LabeledSample> samples, double labelled_fraction, std::uint64_t seed) {
  if (!(labelled_fraction > 0.0 && labelled_fraction < 1.0))
    throw ConfigError("labelled fraction must be in (0, 1)");
  const int n = static_cast<int>(samples.size());
  const int n_labelled = round_half_up(n * labelled_fraction);
  if (n_labelled < 1) throw ConfigError("labelled fraction leaves no labelled image");
  if (n_labelled >= n) throw ConfigError("labelled fraction leaves no unlabelled image");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
  }
  DatasetSplit s;
  s.labelled_fraction = labelled_fraction;
  for (int i = 0; i < n; ++i) {
    auto& dst = i < n_labelled ? s.labelled : s.unlabelled;
    dst.push_back(std::move(samples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]));
  }
  return s;
}

DatasetSplit make_dataset(const SceneSpec& spec, int num_train, int num_eval, double labelled_fraction,
                          std::uint64_t split_seed) {
  DatasetSplit s = split(generate(spec, num_train, 0), labelled_fraction, split_seed);
  s.eval = generate(spec, num_eval, 1);
  return s;
}

std::uint64_t hash_samples(const std::vector<LabeledSample>& samples) {
  io::Fnv1a h;
  for (const auto& s : samples) {
    const std::int32_t geom[3] = {s.features.height, s.features.width, s.features.dim()};
    h.update(geom, sizeof geom);
    for (Eigen::Index r = 0; r < s.features.values.rows(); ++r)
      for (Eigen::Index c = 0; c < s.features.values.cols(); ++c) {
        const double v = s.features.values(r, c);
        h.update(&v, sizeof v);
      }
    h.update(s.labels.labels.data(), s.labels.labels.size() * sizeof(int));
    h.update(s.latent_modes.data(), s.latent_modes.size() * sizeof(int));
  }
  return h.digest();
}

std::uint64_t DatasetSplit::hash() const {
  io::Fnv1a h;
  for (const auto* pool : {&labelled, &unlabelled, &eval}) {
    const std::uint64_t v = hash_samples(*pool);
    h.update(&v, sizeof v);
  }
  return h.digest();
}

WeakTransform WeakTransform::identity(int h, int w) { return WeakTransform{h, w, 0, 0, h, w, false}; }

WeakTransform WeakTransform::draw(int h, int w, std::uint64_t seed, const WeakAugmentOptions& options) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  WeakTransform t = identity(h, w);
  t.flip = unit(rng) < options.flip_probability;
  const double scale = options.min_scale + (options.max_scale - options.min_scale) * unit(rng);
  t.crop_h = std::clamp(round_half_up(scale * h), 1, h);
  t.crop_w = std::clamp(round_half_up(scale * w), 1, w);
  t.crop_y = std::min(h - t.crop_h, static_cast<int>(unit(rng) * (h - t.crop_h + 1)));
  t.crop_x = std::min(w - t.crop_w, static_cast<int>(unit(rng) * (w - t.crop_w + 1)));
  return t;
}

int WeakTransform::source(int y, int x) const {
  const int xo = flip ? width - 1 - x : x;
  const int sy = crop_y + std::min(crop_h - 1, static_cast<int>((y + 0.5) * crop_h / height));
  const int sx = crop_x + std::min(crop_w - 1, static_cast<int>((xo + 0.5) * crop_w / width));
  return sy * width + sx;
}

FeatureGrid WeakTransform::apply(const FeatureGrid& in) const {
  if (in.height != height || in.width != width) throw DataError("transform geometry mismatch");
  FeatureGrid out(height, width, in.dim());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out.values.row(y * width + x) = in.values.row(source(y, x));
  return out;
}

LabelGrid WeakTransform::apply(const LabelGrid& in) const {
  if (in.height != height || in.width != width) throw DataError("transform geometry mismatch");
  LabelGrid out(height, width, in.num_labels, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out.at(y * width + x) = in.at(source(y, x));
  return out;
}

std::vector<int> WeakTransform::apply(const std::vector<int>& in) const {
  if (in.size() != static_cast<std::size_t>(height * width)) throw DataError("transform geometry mismatch");
  std::vector<int> out(in.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      out[static_cast<std::size_t>(y * width + x)] = in[static_cast<std::size_t>(source(y, x))];
  return out;
}

FeatureGrid augment_weak(const FeatureGrid& features, std::uint64_t seed, const WeakAugmentOptions& options) {
  return WeakTransform::draw(features.height, features.width, seed, options).apply(features);
}

StrongAugmentOptions StrongAugmentOptions::for_spec(const SceneSpec& spec) {
  StrongAugmentOptions o;
  o.noise_sigma = 2.0 * spec.mode_noise;
  return o;
}

StrongAugmentOptions StrongAugmentOptions::none() {
  StrongAugmentOptions o;
  o.gain_min = o.gain_max = 1.0;
  o.bias_range = 0.0;
  o.noise_sigma = 0.0;
  o.blur = false;
  return o;
}

FeatureGrid box_blur3(const FeatureGrid& in) {
  FeatureGrid out(in.height, in.width, in.dim());
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      auto acc = out.values.row(in.index(y, x));
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = std::clamp(y + dy, 0, in.height - 1);
          const int xx = std::clamp(x + dx, 0, in.width - 1);
          acc += in.values.row(in.index(yy, xx));
        }
      acc /= 9.0;
    }
  return out;
}

FeatureGrid augment_strong(const FeatureGrid& features, std::uint64_t seed, const StrongAugmentOptions& o) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  FeatureGrid out = features;
  for (int d = 0; d < features.dim(); ++d) {
    const double gain = o.gain_min + (o.gain_max - o.gain_min) * unit(rng);
    const double bias = o.bias_range * (2.0 * unit(rng) - 1.0);
    out.values.col(d) = (gain * out.values.col(d).array() + bias).matrix();
  }
  if (o.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, o.noise_sigma);
    for (Eigen::Index r = 0; r < out.values.rows(); ++r)
      for (Eigen::Index c = 0; c < out.values.cols(); ++c) out.values(r, c) += noise(rng);
  }
  if (o.blur) out = box_blur3(out);
  return out;
}

void write_samples(std::ostream& os, const std::vector<LabeledSample>& samples, int num_classes) {
  io::write_magic(os, kDatasetMagic);
  io::write_u32(os, static_cast<std::uint32_t>(samples.size()));
  io::write_u32(os, static_cast<std::uint32_t>(num_classes));
  for (const auto& s : samples) {
    io::write_u32(os, static_cast<std::uint32_t>(s.features.height));
    io::write_u32(os, static_cast<std::uint32_t>(s.features.width));
    io::write_u32(os, static_cast<std::uint32_t>(s.features.dim()));
  }
  for (const auto& s : samples)
    for (Eigen::Index r = 0; r < s.features.values.rows(); ++r)
      for (Eigen::Index c = 0; c < s.features.values.cols(); ++c) io::write_f64(os, s.features.values(r, c));
  for (const auto& s : samples) {
    for (int v : s.labels.labels) io::write_i32(os, v);
    for (int v : s.latent_modes) io::write_i32(os, v);
  }
}

std::vector<LabeledSample> read_samples(std::istream& is) {
  io::expect_magic(is, kDatasetMagic);
  const std::uint32_t count = io::read_u32(is);
  const auto num_classes = static_cast<int>(io::read_u32(is));
  std::vector<LabeledSample> out(count);
  for (auto& s : out) {
    const auto h = static_cast<int>(io::read_u32(is));
    const auto w = static_cast<int>(io::read_u32(is));
    const auto d = static_cast<int>(io::read_u32(is));
    if (h < 1 || w < 1 || d < 1 || h > 4096 || w > 4096 || d > 4096) throw DataError("implausible image header");
    s.features = FeatureGrid(h, w, d);
    s.labels = LabelGrid(h, w, num_classes, 0);
    s.latent_modes.resize(static_cast<std::size_t>(h * w));
  }
  for (auto& s : out)
    for (Eigen::Index r = 0; r < s.features.values.rows(); ++r)
      for (Eigen::Index c = 0; c < s.features.values.cols(); ++c) s.features.values(r, c) = io::read_f64(is);
  for (auto& s : out) {
    for (auto& v : s.labels.labels) v = io::read_i32(is);
    for (auto& v : s.latent_modes) v = io::read_i32(is);
    s.features.validate();
    for (int v : s.labels.labels)
      if (v < 0 || v >= num_classes) throw DataError("stored label outside [0, num_classes)");
  }
  return out;
}

void save_samples(const std::string& path, const std::vector<LabeledSample>& samples, int num_classes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_samples(os, samples, num_classes);
}

std::vector<LabeledSample> load_samples(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_samples(is);
}

}  // namespace usrn
