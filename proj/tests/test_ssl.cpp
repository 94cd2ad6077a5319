#include <doctest.h>

#include <cmath>
#include <random>

#include "gradient_suite.hpp"
#include "instances.hpp"
#include "support.hpp"
#include "usrn/error.hpp"
#include "usrn/ssl.hpp"

using namespace usrn;
using test::probs;

namespace {

double ent(std::initializer_list<double> p) {
  double e = 0.0;
  for (double v : p)
    if (v > 0.0) e -= v * std::log(v);
  return e;
}

/// Symmetric distribution [a, 1 - 2a, a] with the given entropy, by bisection.
double symmetric_with_entropy(double target) {
  double lo = 1e-9, hi = 1.0 / 3.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (ent({mid, 1 - 2 * mid, mid}) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

ProbGrid random_probs(int pixels, int k, std::mt19937_64& rng, double sharpness) {
  std::normal_distribution<double> n(0.0, sharpness);
  ProbGrid g{1, pixels, Matrix(pixels, k)};
  for (int p = 0; p < pixels; ++p) {
    double s = 0.0;
    for (int c = 0; c < k; ++c) s += g.probs(p, c) = std::exp(n(rng));
    g.probs.row(p) /= s;
  }
  return g;
}

}  // namespace

TEST_CASE("select keeps the argmax only above the threshold") {
  const ProbGrid p = probs(1, 3, {{0.8, 0.15, 0.05}, {0.5, 0.3, 0.2}, {0.1, 0.1, 0.8}});
  const LabelGrid s = select(p, 0.75);
  CHECK(s.labels == std::vector<int>{0, 3, 2});
  CHECK(select(p, 0.8).at(0) == 3);  // strict
  CHECK(select(p, 0.0).labels == std::vector<int>{0, 0, 2});
}

TEST_CASE("map_to_class sums children") {
  const SubclassTaxonomy t = SubclassTaxonomy::from_counts(std::vector<int>{2, 1});
  const ProbGrid sub = probs(1, 2, {{0.1, 0.3, 0.6}, {0.5, 0.4, 0.1}});
  const ProbGrid m = map_to_class(sub, t);
  CHECK(m.probs(0, 0) == doctest::Approx(0.4));
  CHECK(m.probs(0, 1) == doctest::Approx(0.6));
  CHECK(m.probs(1, 0) == doctest::Approx(0.9));
  CHECK(m.is_normalized());
  CHECK_THROWS_AS(map_to_class(probs(1, 1, {{0.5, 0.5}}), t), DataError);
}

TEST_CASE("entropy of reference distributions") {
  const ProbGrid p = probs(1, 3, {{1, 0, 0}, {1.0 / 3, 1.0 / 3, 1.0 / 3}, {0.8, 0.15, 0.05}});
  const Vector e = entropy(p);
  CHECK(e(0) == doctest::Approx(0.0));
  CHECK(e(1) == doctest::Approx(std::log(3.0)));
  CHECK(e(2) == doctest::Approx(0.6128694).epsilon(1e-6));
}

TEST_CASE("masked selection uses the mask class probability, unrenormalized") {
  const ProbGrid cls = probs(1, 2, {{0.15, 0.85}, {0.2, 0.8}});
  // Mask says class 0 at pixel 0: its probability 0.15 is below gamma.
  const LabelGrid m = masked_select({0, 1}, cls, 0.75);
  CHECK(m.labels == std::vector<int>{2, 1});
  CHECK(masked_select({0, 1}, cls, 0.1).labels == std::vector<int>{0, 1});
}

TEST_CASE("subclass masked selection picks the parent of the subclass argmax") {
  const SubclassTaxonomy t = SubclassTaxonomy::from_counts(std::vector<int>{1, 2});
  // The subclass argmax (index 0, class 0) wins even though mapped mass favours class 1.
  const ProbGrid sub = probs(1, 1, {{0.4, 0.3, 0.3}});
  CHECK(subclass_masked_select(sub, probs(1, 1, {{0.9, 0.1}}), t, 0.75).at(0) == 0);
  CHECK(subclass_masked_select(sub, probs(1, 1, {{0.1, 0.9}}), t, 0.75).at(0) == 2);
}

TEST_CASE("gate: confident subclass view opens and labels") {
  const double a = symmetric_with_entropy(0.3);
  const ProbGrid mapped = probs(1, 1, {{a, 1 - 2 * a, a}});
  const ProbGrid cls = probs(1, 1, {{0.8, 0.15, 0.05}});
  CHECK(entropy(mapped)(0) == doctest::Approx(0.3));
  const GatedSelection g = gated_select(mapped, cls, 0.75);
  CHECK(g.gate_open[0]);
  CHECK(g.open_fraction == 1.0);
  // Mask class 1 carries 0.15 of the class mass: below gamma.
  CHECK(g.labels.at(0) == 3);
  CHECK(gated_select(mapped, cls, 0.1).labels.at(0) == 1);
}

TEST_CASE("gate: unsure subclass view closes; fallback decides the label") {
  const ProbGrid mapped = probs(1, 1, {{1.0 / 3, 1.0 / 3, 1.0 / 3}});
  const ProbGrid cls = probs(1, 1, {{1, 0, 0}});
  const GatedSelection lit = gated_select(mapped, cls, 0.75);
  CHECK_FALSE(lit.gate_open[0]);
  CHECK(lit.labels.at(0) == 3);
  const GatedSelection orig = gated_select(mapped, cls, 0.75, GateFallback::original);
  CHECK_FALSE(orig.gate_open[0]);
  CHECK(orig.labels.at(0) == 0);
}

TEST_CASE("gate: equal entropy keeps the gate closed") {
  const ProbGrid p = probs(1, 2, {{0.9, 0.05, 0.05}, {0.2, 0.3, 0.5}});
  const GatedSelection g = gated_select(p, p, 0.0);
  CHECK_FALSE(g.gate_open[0]);
  CHECK_FALSE(g.gate_open[1]);
  CHECK(g.labels.valid_count() == 0);
  CHECK(g.open_fraction == 0.0);
}

TEST_CASE("gate geometry mismatch throws") {
  CHECK_THROWS_AS(gated_select(probs(1, 1, {{0.5, 0.5}}), probs(1, 1, {{0.2, 0.3, 0.5}}), 0.5), DataError);
}

TEST_CASE("property: gated labels are a subset of the mapped-mask selection") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + trial % 4;
    const ProbGrid mapped = random_probs(40, k, rng, 1.0 + trial % 3);
    const ProbGrid cls = random_probs(40, k, rng, 1.0 + trial % 2);
    const double gamma = 0.1 * (trial % 8);
    std::vector<int> mask(40);
    for (int p = 0; p < 40; ++p) mask[static_cast<std::size_t>(p)] = argmax_row(mapped.probs, p);
    const LabelGrid full = masked_select(mask, cls, gamma);
    const GatedSelection g = gated_select(mapped, cls, gamma);
    const LabelGrid plain = select(cls, gamma);
    const GatedSelection orig = gated_select(mapped, cls, gamma, GateFallback::original);
    for (int p = 0; p < 40; ++p) {
      if (!g.labels.is_ignored(p)) CHECK(g.labels.at(p) == full.at(p));
      if (!g.gate_open[static_cast<std::size_t>(p)]) {
        CHECK(g.labels.is_ignored(p));
        CHECK(orig.labels.at(p) == plain.at(p));
      } else {
        CHECK(g.labels.at(p) == full.at(p));
        CHECK(orig.labels.at(p) == full.at(p));
      }
    }
  }
}

TEST_CASE("gated term: hand example on two pixels") {
  // Strong-view class predictions with known probabilities.
  const ProbGrid strong = probs(1, 2, {{0.6, 0.4}, {0.3, 0.7}});
  const ProbGrid mapped = probs(1, 2, {{0.95, 0.05}, {0.5, 0.5}});
  const ProbGrid weak = probs(1, 2, {{0.8, 0.2}, {0.1, 0.9}});
  const GatedSelection g = gated_select(mapped, weak, 0.75);
  CHECK(g.gate_open == std::vector<bool>{true, false});
  CHECK(g.labels.labels == std::vector<int>{0, 2});
  const CrossEntropy ce = cross_entropy(strong, g.labels);
  CHECK(ce.counted == 1);
  CHECK(ce.loss == doctest::Approx(-std::log(0.6)));
  const GatedSelection o = gated_select(mapped, weak, 0.75, GateFallback::original);
  CHECK(o.labels.labels == std::vector<int>{0, 1});
  CHECK(cross_entropy(strong, o.labels).loss == doctest::Approx(-(std::log(0.6) + std::log(0.7)) / 2));
}

TEST_CASE("gated term equals the masked term where every gate is open") {
  // Subclass head that is one-hot confident makes the mapped entropy ~0.
  test::ObjectiveInstance in = test::objective_instance(3);
  ModelParams& m = in.params;
  auto& hs = m.layer(m.head_layer(Head::sub));
  hs.weight.setZero();
  hs.bias.setZero();
  hs.bias(1) = 60.0;  // everything maps to subclass 1, parent class 0
  const SelfTrainingLoss gated = loss_st_entropy(m, in.unlabelled, in.taxonomy, in.weights);
  const SelfTrainingLoss masked = loss_st(m, in.unlabelled, in.taxonomy, in.weights);
  CHECK(gated.open_fraction == 1.0);
  CHECK(gated.targets.labels == masked.targets.labels);
  CHECK(gated.value == doctest::Approx(masked.value));
}

TEST_CASE("gated term is zero where every gate is closed") {
  test::ObjectiveInstance in = test::objective_instance(4);
  ModelParams& m = in.params;
  auto& hs = m.layer(m.head_layer(Head::sub));
  hs.weight.setZero();
  hs.bias.setZero();  // uniform subclass view against a one-hot class view
  auto& hc = m.layer(m.head_layer(Head::cls));
  hc.weight.setZero();
  hc.bias.setZero();
  hc.bias(2) = 60.0;
  const SelfTrainingLoss t = loss_st_entropy(m, in.unlabelled, in.taxonomy, in.weights);
  CHECK(t.open_fraction == 0.0);
  CHECK(t.ce.empty);
  CHECK(t.value == 0.0);
  CHECK(t.grad.max_abs() == 0.0);
}

TEST_CASE("supervised loss combines both heads") {
  const test::ObjectiveInstance in = test::objective_instance(5);
  const SupervisedLoss s = loss_supervised_md(in.params, in.labelled, in.weights);
  const double cls = cross_entropy(forward(in.params, in.labelled.features, Head::cls), in.labelled.labels).loss;
  const double sub = cross_entropy(forward(in.params, in.labelled.features, Head::sub), in.labelled.sublabels).loss;
  CHECK(s.value == doctest::Approx(cls + in.weights.lambda_sub * sub));
  LabelledBatch missing = in.labelled;
  missing.sublabels = LabelGrid();
  CHECK_THROWS_AS(loss_supervised_md(in.params, missing, in.weights), DataError);
}

TEST_CASE("objective total is the weighted sum of its logged terms") {
  const test::ObjectiveInstance in = test::objective_instance(6);
  const AblationFlags all;
  const ObjectiveValue v = total_objective(in.params, in.labelled, in.unlabelled, in.taxonomy, in.weights, all);
  CHECK(v.total == doctest::Approx(v.supervised + in.weights.lambda_u * (v.self_training + in.weights.lambda_sub * v.subclass)));
  AblationFlags none{false, false, false, false, false};
  const ObjectiveValue s = total_objective(in.params, in.labelled, in.unlabelled, in.taxonomy, in.weights, none);
  CHECK(s.self_training == 0.0);
  CHECK(s.subclass == 0.0);
  CHECK(s.total == doctest::Approx(
                       cross_entropy(forward(in.params, in.labelled.features, Head::cls), in.labelled.labels).loss));
}

TEST_CASE("objective with frozen targets rejects mismatched targets") {
  const test::ObjectiveInstance in = test::objective_instance(7);
  const AblationFlags all;
  ObjectiveTargets t;
  CHECK_THROWS_AS(evaluate_objective(in.params, in.labelled, in.unlabelled, t, in.weights, all), DataError);
}

TEST_CASE("gradient of every objective term matches finite differences") {
  for (ShareMode share : {ShareMode::all, ShareMode::low, ShareMode::none})
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto checks = test::check_objective_terms(test::objective_instance(seed, share));
      for (const auto& c : checks) {
        INFO(c.term << " share " << to_string(share) << " seed " << seed);
        CHECK(c.rel_error < 1e-4);
      }
    }
}

TEST_CASE("ablation flag dependencies") {
  CHECK_NOTHROW(AblationFlags{}.validate());
  CHECK_NOTHROW((AblationFlags{false, false, false, false, false}.validate()));
  CHECK_NOTHROW((AblationFlags{true, true, false, false, false}.validate()));
  CHECK_NOTHROW((AblationFlags{true, false, true, false, false}.validate()));
  CHECK_THROWS_AS((AblationFlags{false, false, true, false, false}.validate()), ConfigError);
  CHECK_THROWS_AS((AblationFlags{true, true, false, true, false}.validate()), ConfigError);
  CHECK_THROWS_AS((AblationFlags{true, true, true, false, true}.validate()), ConfigError);
}

TEST_CASE("loss weights and fallback names") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.gamma = 1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = LossWeights{};
  w.lambda_u = -1;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  CHECK(gate_fallback_from_string(to_string(GateFallback::original)) == GateFallback::original);
  CHECK_THROWS_AS(gate_fallback_from_string("maybe"), ConfigError);
}
