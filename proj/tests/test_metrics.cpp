#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "usrn/error.hpp"
#include "usrn/metrics.hpp"

using namespace usrn;

namespace {

/// ARI from explicit pair enumeration: n11 pairs together in both,
/// n10 together only in a, n01 together only in b, n00 apart in both.
double ari_by_pairs(const std::vector<int>& a, const std::vector<int>& b) {
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      n11 += sa && sb;
      n10 += sa && !sb;
      n01 += !sa && sb;
      n00 += !sa && !sb;
    }
  const double den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
  return den == 0.0 ? 1.0 : 2.0 * (n00 * n11 - n01 * n10) / den;
}

ConfusionMatrix from_rows(const std::vector<std::vector<long>>& rows) {
  ConfusionMatrix cm(static_cast<int>(rows.size()));
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t p = 0; p < rows.size(); ++p) cm.add(static_cast<int>(t), static_cast<int>(p), rows[t][p]);
  return cm;
}

}  // namespace

TEST_CASE("miou of a diagonal matrix is 1") {
  const IoUReport r = miou(from_rows({{4, 0, 0}, {0, 7, 0}, {0, 0, 1}}));
  for (double v : r.per_class) CHECK(v == 1.0);
  CHECK(r.mean == 1.0);
  CHECK(r.min == 1.0);
}

TEST_CASE("miou two-class hand example") {
  const IoUReport r = miou(from_rows({{5, 5}, {0, 10}}));
  CHECK(r.per_class[0] == doctest::Approx(0.5));
  CHECK(r.per_class[1] == doctest::Approx(10.0 / 15.0));
  CHECK(r.mean == doctest::Approx(0.5833333333).epsilon(1e-9));
  CHECK(r.min == doctest::Approx(0.5));
}

TEST_CASE("classes with an empty row and column are excluded from the mean") {
  const IoUReport r = miou(from_rows({{5, 0, 5}, {0, 0, 0}, {0, 0, 10}}));
  CHECK_FALSE(r.defined[1]);
  CHECK(std::isnan(r.per_class[1]));
  CHECK(r.mean == doctest::Approx((0.5 + 10.0 / 15.0) / 2.0));
}

TEST_CASE("miou is invariant under consistent class permutation") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<long> count(0, 20);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<long>> rows(4, std::vector<long>(4));
    for (auto& r : rows)
      for (auto& v : r) v = count(rng);
    std::vector<int> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<long>> permuted(4, std::vector<long>(4));
    for (int t = 0; t < 4; ++t)
      for (int p = 0; p < 4; ++p) permuted[perm[t]][perm[p]] = rows[t][p];
    const IoUReport a = miou(from_rows(rows)), b = miou(from_rows(permuted));
    CHECK(a.mean == doctest::Approx(b.mean));
    for (int c = 0; c < 4; ++c) CHECK(a.per_class[c] == doctest::Approx(b.per_class[perm[c]]));
    CHECK(a.mean >= 0.0);
    CHECK(a.mean <= 1.0);
  }
}

TEST_CASE("confusion accumulation skips ignored pixels and merges") {
  LabelGrid truth(1, 4, 2, 0), pred(1, 4, 2, 0);
  truth.labels = {0, 1, 2, 1};  // 2 = ignore
  pred.labels = {0, 0, 1, 2};
  ConfusionMatrix cm(2);
  cm.accumulate(truth, pred);
  CHECK(cm.total() == 2);
  CHECK(cm(0, 0) == 1);
  CHECK(cm(1, 0) == 1);
  ConfusionMatrix other(2);
  other.add(1, 1, 3);
  cm.merge(other);
  CHECK(cm.total() == 5);
  CHECK(cm(1, 1) == 3);
}

TEST_CASE("cbr reference points") {
  const std::vector<long> equal{10, 10, 10}, single{30, 0, 0}, skew{8, 1, 1};
  CHECK(cbr(equal) == doctest::Approx(100.0));
  CHECK(cbr(single) == doctest::Approx(0.0));
  CHECK(cbr(skew) == doctest::Approx(30.0).epsilon(1e-9));
}

TEST_CASE("cbr errors") {
  const std::vector<long> one{5}, zeros{0, 0}, negative{3, -1};
  CHECK_THROWS_AS(cbr(one), DataError);
  CHECK_THROWS_AS(cbr(zeros), DataError);
  CHECK_THROWS_AS(cbr(negative), DataError);
}

TEST_CASE("cbr properties: scale invariance and bounds") {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<long> count(0, 50);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<long> c(5);
    for (auto& v : c) v = count(rng);
    if (std::accumulate(c.begin(), c.end(), 0L) == 0) c[0] = 1;
    std::vector<long> scaled(c);
    for (auto& v : scaled) v *= 7;
    CHECK(cbr(c) == doctest::Approx(cbr(scaled)));
    CHECK(cbr(c) >= -1e-9);
    CHECK(cbr(c) <= 100.0 + 1e-9);
    const int nonzero = static_cast<int>(std::count_if(c.begin(), c.end(), [](long v) { return v > 0; }));
    if (nonzero == 1) CHECK(cbr(c) == doctest::Approx(0.0));
    if (nonzero > 1) CHECK(cbr(c) > 0.0);
    const bool all_equal = std::all_of(c.begin(), c.end(), [&](long v) { return v == c[0]; });
    CHECK((std::abs(cbr(c) - 100.0) < 1e-9) == all_equal);
  }
}

TEST_CASE("ari: identity, renaming and the six-element case") {
  const std::vector<int> a{0, 0, 1, 1, 2, 2}, renamed{5, 5, 3, 3, 9, 9};
  CHECK(adjusted_rand_index(a, a) == doctest::Approx(1.0));
  CHECK(adjusted_rand_index(a, renamed) == doctest::Approx(1.0));

  // 15 pairs: n11 = 2, n10 = 4, n01 = 1, n00 = 8, so ARI = 24 / 99.
  const std::vector<int> x{0, 0, 0, 1, 1, 1}, y{0, 0, 1, 1, 2, 2};
  CHECK(adjusted_rand_index(x, y) == doctest::Approx(24.0 / 99.0).epsilon(1e-12));
  CHECK(ari_by_pairs(x, y) == doctest::Approx(24.0 / 99.0).epsilon(1e-12));
}

TEST_CASE("ari agrees with pair enumeration on random labelings") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> pick(0, 1 + trial % 4);
    std::vector<int> a(12), b(12);
    for (auto& v : a) v = pick(rng);
    for (auto& v : b) v = pick(rng);
    CHECK(adjusted_rand_index(a, b) == doctest::Approx(ari_by_pairs(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("ari length mismatch is an error") {
  const std::vector<int> a{0, 1}, b{0};
  CHECK_THROWS_AS(adjusted_rand_index(a, b), DataError);
}
