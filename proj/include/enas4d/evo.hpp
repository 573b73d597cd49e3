#pragma once

#include <deque>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "enas4d/predictor.hpp"
#include "enas4d/search_space.hpp"

namespace enas4d {

struct EvoConfig {
  int population_size = 100;
  int total_evaluations = 10000;
  int parent_sample_size = 25;
  double mutation_prob = 0.1;
  double crossover_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (population_size < 2) throw std::invalid_argument("EvoConfig: population_size must be >= 2");
    if (parent_sample_size < 1 || parent_sample_size > population_size) {
      throw std::invalid_argument("EvoConfig: parent_sample_size must lie in [1, population_size]");
    }
    if (!(mutation_prob > 0.0 && mutation_prob <= 1.0)) throw std::invalid_argument("EvoConfig: mutation_prob in (0,1]");
    if (crossover_fraction < 0.0 || crossover_fraction > 1.0) {
      throw std::invalid_argument("EvoConfig: crossover_fraction in [0,1]");
    }
    if (total_evaluations < population_size) {
      throw std::invalid_argument("EvoConfig: total_evaluations must cover the initial population");
    }
  }
};

inline void to_json(json& j, const EvoConfig& c) {
  j = {{"population_size", c.population_size},       {"total_evaluations", c.total_evaluations},
       {"parent_sample_size", c.parent_sample_size}, {"mutation_prob", c.mutation_prob},
       {"crossover_fraction", c.crossover_fraction}, {"seed", c.seed}};
}
inline void from_json(const json& j, EvoConfig& c) {
  EvoConfig d;
  c.population_size = j.value("population_size", d.population_size);
  c.total_evaluations = j.value("total_evaluations", d.total_evaluations);
  c.parent_sample_size = j.value("parent_sample_size", d.parent_sample_size);
  c.mutation_prob = j.value("mutation_prob", d.mutation_prob);
  c.crossover_fraction = j.value("crossover_fraction", d.crossover_fraction);
  c.seed = j.value("seed", d.seed);
}

// Resamples each gene from its pool with probability p, then restores the
// ordering constraints.
template <typename Rng>
MultiStageArch mutate(const MultiStageArch& arch, const SearchSpaceConfig& cfg, double p, Rng& rng) {
  std::bernoulli_distribution flip(p);
  MultiStageArch a = arch;
  if (flip(rng)) a.resolution = cfg.resolution_pool[uniform_index(rng, cfg.resolution_pool.size())];
  for (auto& d : a.depths) {
    for (auto& v : d) {
      if (flip(rng)) v = cfg.depth_pool[uniform_index(rng, cfg.depth_pool.size())];
    }
  }
  for (auto& k : a.kernels) {
    for (auto& v : k) {
      if (flip(rng)) v = cfg.kernel_pool[uniform_index(rng, cfg.kernel_pool.size())];
    }
  }
  for (auto& g : a.cum_ratios) {
    for (auto& b : g) {
      for (auto& v : b) {
        if (flip(rng)) v = cfg.ratio_pool[uniform_index(rng, cfg.ratio_pool.size())];
      }
    }
  }
  enforce_monotonic(a);
  return a;
}

// Uniform per-gene crossover.
template <typename Rng>
MultiStageArch crossover(const MultiStageArch& a, const MultiStageArch& b, Rng& rng) {
  auto same_shape = [](const MultiStageArch& x, const MultiStageArch& y) {
    if (x.depths.size() != y.depths.size() || x.kernels.size() != y.kernels.size() ||
        x.cum_ratios.size() != y.cum_ratios.size()) {
      return false;
    }
    for (std::size_t g = 0; g < x.depths.size(); ++g) {
      if (x.depths[g].size() != y.depths[g].size() || x.kernels[g].size() != y.kernels[g].size() ||
          x.cum_ratios[g].size() != y.cum_ratios[g].size()) {
        return false;
      }
      for (std::size_t i = 0; i < x.cum_ratios[g].size(); ++i) {
        if (x.cum_ratios[g][i].size() != y.cum_ratios[g][i].size()) return false;
      }
    }
    return true;
  };
  if (!same_shape(a, b)) throw std::invalid_argument("crossover: parents come from different search spaces");
  std::bernoulli_distribution coin(0.5);
  MultiStageArch c = a;
  if (coin(rng)) c.resolution = b.resolution;
  for (std::size_t g = 0; g < c.depths.size(); ++g) {
    for (std::size_t s = 0; s < c.depths[g].size(); ++s) {
      if (coin(rng)) c.depths[g][s] = b.depths[g][s];
    }
    for (std::size_t i = 0; i < c.kernels[g].size(); ++i) {
      if (coin(rng)) c.kernels[g][i] = b.kernels[g][i];
    }
    for (std::size_t i = 0; i < c.cum_ratios[g].size(); ++i) {
      for (std::size_t s = 0; s < c.cum_ratios[g][i].size(); ++s) {
        if (coin(rng)) c.cum_ratios[g][i][s] = b.cum_ratios[g][i][s];
      }
    }
  }
  enforce_monotonic(c);
  return c;
}

using FitnessFn = std::function<double(const MultiStageArch&)>;

struct EvoCandidate {
  MultiStageArch arch;
  double fitness = 0.0;
};

struct EvoResult {
  MultiStageArch best;
  double best_fitness = 0.0;
  std::vector<double> history;        // best-so-far after each evaluation
  std::vector<EvoCandidate> evaluated;  // every evaluation, in order
  std::vector<EvoCandidate> population; // survivors at the end, oldest first
};

// Regularized (aging) evolution.
inline EvoResult evolve(const FitnessFn& fitness, const SearchSpaceConfig& cfg, const EvoConfig& evo) {
  cfg.validate();
  evo.validate();
  std::mt19937_64 rng(evo.seed);
  EvoResult res;
  std::deque<EvoCandidate> population;
  auto evaluate = [&](MultiStageArch a) {
    validate_arch(a, cfg);
    const double f = fitness(a);
    if (res.evaluated.empty() || f > res.best_fitness) {
      res.best = a;
      res.best_fitness = f;
    }
    res.history.push_back(res.best_fitness);
    res.evaluated.push_back({a, f});
    return EvoCandidate{std::move(a), f};
  };
  while (static_cast<int>(population.size()) < evo.population_size) population.push_back(evaluate(sample_arch(cfg, rng)));
  auto tournament = [&]() -> const EvoCandidate& {
    const EvoCandidate* best = nullptr;
    for (int i = 0; i < evo.parent_sample_size; ++i) {
      const auto& c = population[uniform_index(rng, population.size())];
      if (!best || c.fitness > best->fitness) best = &c;
    }
    return *best;
  };
  std::bernoulli_distribution use_crossover(evo.crossover_fraction);
  while (static_cast<int>(res.evaluated.size()) < evo.total_evaluations) {
    const MultiStageArch parent = tournament().arch;
    MultiStageArch child;
    if (use_crossover(rng)) {
      child = crossover(parent, tournament().arch, rng);
    } else {
      child = mutate(parent, cfg, evo.mutation_prob, rng);
    }
    population.push_back(evaluate(std::move(child)));
    population.pop_front();
  }
  res.population.assign(population.begin(), population.end());
  return res;
}

// Fitness = predicted R; refuses a model whose input width differs from the
// space's encoding.
inline EvoResult evolve(const MetricPredictor& model, const SearchSpaceConfig& cfg, const EvoConfig& evo) {
  if (model.inputs() != encoding_layout(cfg).length) {
    throw std::invalid_argument("evolve: predictor input width does not match the search space encoding");
  }
  return evolve([&](const MultiStageArch& a) { return model.predict(encode_arch(a, cfg)); }, cfg, evo);
}

}  // namespace enas4d
