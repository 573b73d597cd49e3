#include <gtest/gtest.h>

#include <chrono>
#include <map>

#include "enas4d/evo.hpp"
#include "enas4d/pipeline.hpp"
#include "test_util.hpp"

namespace enas4d {
namespace {

SearchSpaceConfig tiny_space() {
  SearchSpaceConfig c;
  c.stages = 2;
  c.num_classes = 4;
  c.stem_channels = 4;
  c.resolution_pool = {8, 12};
  c.depth_pool = {1, 2};
  c.kernel_pool = {3, 5};
  c.ratio_pool = {0.5, 1.0};
  c.groups = {{2, 4, 8, 1}};
  return c;
}

// Fitness that is a sum of per-gene value scores. Sorted tuples share one
// table per tuple, so the all-best-value assignment is valid and optimal.
struct SeparableFitness {
  std::map<int, double> res;
  std::vector<std::map<int, double>> depth, kernel;
  std::vector<std::map<double, double>> ratio;

  SeparableFitness(const SearchSpaceConfig& c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    for (int r : c.resolution_pool) res[r] = u(rng);
    for (std::size_t g = 0; g < c.groups.size(); ++g) {
      depth.emplace_back();
      for (int d : c.depth_pool) depth.back()[d] = u(rng);
      for (int i = 0; i < c.groups[g].blocks; ++i) {
        kernel.emplace_back();
        for (int k : c.kernel_pool) kernel.back()[k] = u(rng);
        ratio.emplace_back();
        for (double r : c.ratio_pool) ratio.back()[r] = u(rng);
      }
    }
  }
  double operator()(const MultiStageArch& a) const {
    double f = res.at(a.resolution);
    std::size_t b = 0;
    for (std::size_t g = 0; g < a.depths.size(); ++g) {
      for (int d : a.depths[g]) f += depth[g].at(d);
      for (std::size_t i = 0; i < a.kernels[g].size(); ++i, ++b) {
        f += kernel[b].at(a.kernels[g][i]);
        for (double r : a.cum_ratios[g][i]) f += ratio[b].at(r);
      }
    }
    return f;
  }
  double optimum(const SearchSpaceConfig& c) const {
    auto best = [](const auto& m) {
      double v = -1;
      for (const auto& [k, s] : m) v = std::max(v, s);
      return v;
    };
    double f = best(res);
    for (const auto& m : depth) f += c.stages * best(m);
    for (const auto& m : kernel) f += best(m);
    for (const auto& m : ratio) f += c.stages * best(m);
    return f;
  }
};

TEST(Mutate, ZeroProbabilityIsIdentityAndOutputsAreValid) {
  const auto c = desk_search_space();
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto a = sample_arch(c, rng);
    EXPECT_EQ(mutate(a, c, 0.0, rng), a);
    EXPECT_TRUE(is_valid_arch(mutate(a, c, 0.5, rng), c));
    EXPECT_TRUE(is_valid_arch(mutate(a, c, 1.0, rng), c));
  }
}

TEST(Mutate, PerGeneChangeFrequencyIsBinomial) {
  // Resolution and kernels are never re-sorted, so a change there is a flip
  // that drew a different value: p = 0.1 * (1 - 1/|pool|).
  const auto c = desk_search_space();
  std::mt19937_64 rng(2);
  const auto a = sample_arch(c, rng);
  const int n = 10000;
  const double p = 0.1 * (1.0 - 1.0 / 3.0);
  const double sigma = std::sqrt(n * p * (1 - p));
  std::vector<int> changed(1 + 6, 0);
  for (int t = 0; t < n; ++t) {
    const auto m = mutate(a, c, 0.1, rng);
    changed[0] += m.resolution != a.resolution;
    int k = 1;
    for (std::size_t g = 0; g < a.kernels.size(); ++g) {
      for (std::size_t i = 0; i < a.kernels[g].size(); ++i) changed[k++] += m.kernels[g][i] != a.kernels[g][i];
    }
  }
  for (std::size_t k = 0; k < changed.size(); ++k) EXPECT_NEAR(changed[k], n * p, 3 * sigma) << "gene " << k;
}

TEST(Crossover, ChildGenesComeFromAParent) {
  const auto c = desk_search_space();
  std::mt19937_64 rng(3);
  for (int t = 0; t < 1000; ++t) {
    const auto a = sample_arch(c, rng), b = sample_arch(c, rng);
    EXPECT_EQ(crossover(a, a, rng), a);
    const auto x = crossover(a, b, rng);
    ASSERT_TRUE(is_valid_arch(x, c));
    EXPECT_TRUE(x.resolution == a.resolution || x.resolution == b.resolution);
    for (std::size_t g = 0; g < x.kernels.size(); ++g) {
      for (std::size_t i = 0; i < x.kernels[g].size(); ++i) {
        EXPECT_TRUE(x.kernels[g][i] == a.kernels[g][i] || x.kernels[g][i] == b.kernels[g][i]);
      }
      // Sorted genes: every value present came from one of the parents.
      for (int d : x.depths[g]) {
        EXPECT_TRUE(std::count(a.depths[g].begin(), a.depths[g].end(), d) ||
                    std::count(b.depths[g].begin(), b.depths[g].end(), d));
      }
    }
  }
  EXPECT_THROW(crossover(sample_arch(c, rng), sample_arch(tiny_space(), rng), rng), std::invalid_argument);
}

TEST(Evolve, ConstantFitnessKeepsHistoryFlat) {
  const auto c = desk_search_space();
  EvoConfig e;
  e.population_size = 10;
  e.parent_sample_size = 3;
  e.total_evaluations = 200;
  const auto r = evolve([](const MultiStageArch&) { return 0.5; }, c, e);
  ASSERT_EQ(r.history.size(), 200u);
  for (double h : r.history) EXPECT_EQ(h, 0.5);
  EXPECT_TRUE(is_valid_arch(r.best, c));
}

TEST(Evolve, HistoryMonotoneAllValidAndAging) {
  const auto c = desk_search_space();
  const SeparableFitness f(c, 4);
  EvoConfig e;
  e.population_size = 20;
  e.parent_sample_size = 5;
  e.total_evaluations = 500;
  e.seed = 9;
  const auto r = evolve(std::cref(f), c, e);
  ASSERT_EQ(r.evaluated.size(), 500u);
  for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_GE(r.history[i], r.history[i - 1]);
  for (const auto& x : r.evaluated) EXPECT_TRUE(is_valid_arch(x.arch, c));
  EXPECT_EQ(r.history.back(), r.best_fitness);
  EXPECT_EQ(f(r.best), r.best_fitness);
  // Survivors are exactly the most recent population_size evaluations.
  ASSERT_EQ(r.population.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(r.population[i].arch, r.evaluated[480 + i].arch);
}

TEST(Evolve, DeterministicUnderSeed) {
  const auto c = desk_search_space();
  const SeparableFitness f(c, 5);
  EvoConfig e;
  e.population_size = 20;
  e.parent_sample_size = 5;
  e.total_evaluations = 300;
  e.seed = 1;
  const auto a = evolve(std::cref(f), c, e), b = evolve(std::cref(f), c, e);
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.history, b.history);
  e.seed = 2;
  EXPECT_NE(evolve(std::cref(f), c, e).history, a.history);
}

TEST(Evolve, SeparableFitnessOptimumWithinBudget) {
  // Mutation only, about one resampled gene per child.
  const auto c = desk_search_space();
  int hits = 0;
  for (int run = 0; run < 10; ++run) {
    const SeparableFitness f(c, 100 + run);
    EvoConfig e;
    e.total_evaluations = 1500;
    e.crossover_fraction = 0.0;
    e.mutation_prob = 0.05;
    e.seed = static_cast<std::uint64_t>(run);
    const auto r = evolve(std::cref(f), c, e);
    hits += std::abs(r.best_fitness - f.optimum(c)) < 1e-9;
  }
  EXPECT_GE(hits, 9);
}

TEST(Evolve, EnumerableSpaceOptimum) {
  const auto c = tiny_space();
  const auto all = testing::enumerate_archs(c);
  ASSERT_LE(all.size(), 256u);
  std::map<MultiStageArch, double> table;
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  double best = -1;
  for (const auto& a : all) best = std::max(best, table[a] = u(rng));
  int hits = 0;
  // Uncorrelated table: weak selection and heavy resampling.
  for (int run = 0; run < 10; ++run) {
    EvoConfig e;
    e.total_evaluations = 2000;
    e.parent_sample_size = 5;
    e.mutation_prob = 0.5;
    e.crossover_fraction = 0.0;
    e.seed = static_cast<std::uint64_t>(run);
    hits += evolve([&](const MultiStageArch& a) { return table.at(a); }, c, e).best_fitness == best;
  }
  EXPECT_GE(hits, 9);
}

TEST(Evolve, PredictorFitnessAndWidthCheck) {
  const auto c = desk_search_space();
  MetricPredictor m(encoding_layout(c).length, {}, 1);
  EvoConfig e;
  e.total_evaluations = 10000;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = evolve(m, c, e);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 180.0);
  EXPECT_EQ(r.best_fitness, m.predict(encode_arch(r.best, c)));
  EXPECT_THROW(evolve(MetricPredictor(5, {}, 1), c, e), std::invalid_argument);
}

TEST(EvoConfigValidation, Errors) {
  EvoConfig e;
  e.population_size = 1;
  EXPECT_THROW(e.validate(), std::invalid_argument);
  e = {};
  e.parent_sample_size = 101;
  EXPECT_THROW(e.validate(), std::invalid_argument);
  e = {};
  e.mutation_prob = 0;
  EXPECT_THROW(e.validate(), std::invalid_argument);
  const json j = EvoConfig{};
  EXPECT_EQ(j.get<EvoConfig>().total_evaluations, 10000);
}

}  // namespace
}  // namespace enas4d
