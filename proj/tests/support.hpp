#pragma once

#include <random>
#include <vector>

#include "usrn/grid.hpp"
#include "usrn/netcore.hpp"
#include "usrn/synthdata.hpp"

namespace usrn::test {

inline FeatureGrid random_features(int h, int w, int d, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  FeatureGrid g(h, w, d);
  for (Eigen::Index r = 0; r < g.values.rows(); ++r)
    for (Eigen::Index c = 0; c < g.values.cols(); ++c) g.values(r, c) = n(rng);
  return g;
}

/// Random labels in [0, k), with roughly `ignore_rate` of pixels ignored.
inline LabelGrid random_labels(int h, int w, int k, std::uint64_t seed, double ignore_rate = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, k - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  LabelGrid g(h, w, k, 0);
  for (int p = 0; p < g.pixels(); ++p) g.at(p) = unit(rng) < ignore_rate ? k : pick(rng);
  return g;
}

inline ModelParams random_model(int d, int hidden, int c, int c_sub, ShareMode share, std::uint64_t seed) {
  ModelParams m = ModelParams::initialize({d, hidden, c, c_sub, share}, seed);
  // Non-zero biases so the gradient check exercises them.
  std::mt19937_64 rng(seed ^ 0x9e37u);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& l : m.layers())
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = n(rng);
  return m;
}

/// A ProbGrid from explicit rows.
inline ProbGrid probs(int h, int w, std::vector<std::vector<double>> rows) {
  ProbGrid g{h, w, Matrix(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()))};
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      g.probs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return g;
}

/// Small, fast scene used by trainer and CLI tests.
inline SceneSpec small_spec() {
  SceneSpec s = SceneSpec::default_spec();
  s.height = 16;
  s.width = 16;
  s.class_frequencies = {0.70, 0.15, 0.15};
  s.num_classes = 3;
  s.modes_per_class = {2, 2, 2};
  s.mode_centers.clear();
  return s;
}

}  // namespace usrn::test
