#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace enas4d {

struct GroupConfig {
  int blocks = 1;         // N: maximal number of blocks
  int out_channels = 16;  // external (block output) width
  int mid_channels = 48;  // maximal intermediate width
  int stride = 1;         // stride of the group's first block

  bool operator==(const GroupConfig&) const = default;
};

struct SearchSpaceConfig {
  int stages = 3;
  int input_channels = 3;
  int num_classes = 10;
  int stem_channels = 16;
  int stem_kernel = 3;
  int stem_stride = 2;
  std::vector<int> resolution_pool;
  std::vector<int> depth_pool;
  std::vector<int> kernel_pool;
  std::vector<double> ratio_pool;  // cumulative width ratios in (0, 1]
  std::vector<GroupConfig> groups;

  bool operator==(const SearchSpaceConfig&) const = default;

  int total_blocks() const {
    int n = 0;
    for (const auto& g : groups) n += g.blocks;
    return n;
  }
  int max_kernel() const { return kernel_pool.back(); }
  int max_resolution() const { return resolution_pool.back(); }
  int max_depth() const { return depth_pool.back(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("SearchSpaceConfig: " + m); };
    if (stages < 1) fail("stages must be >= 1");
    if (input_channels < 1 || num_classes < 2 || stem_channels < 1) fail("channel/class counts");
    if (stem_kernel < 1 || stem_kernel % 2 == 0 || stem_stride < 1) fail("stem geometry");
    if (resolution_pool.empty() || depth_pool.empty() || kernel_pool.empty() || ratio_pool.empty()) {
      fail("pools must be non-empty");
    }
    auto strictly_sorted = [](const auto& v) {
      return std::adjacent_find(v.begin(), v.end(), [](auto a, auto b) { return !(a < b); }) == v.end();
    };
    if (!strictly_sorted(resolution_pool) || !strictly_sorted(depth_pool) || !strictly_sorted(kernel_pool) ||
        !strictly_sorted(ratio_pool)) {
      fail("pools must be sorted ascending without duplicates");
    }
    if (resolution_pool.front() < 1) fail("resolutions must be positive");
    if (depth_pool.front() < 1) fail("depth pool values must be >= 1 (the first block of a group is always run)");
    for (int k : kernel_pool) {
      if (k < 1 || k % 2 == 0) fail("kernel sizes must be odd");
    }
    if (ratio_pool.front() <= 0.0 || std::abs(ratio_pool.back() - 1.0) > 1e-12) {
      fail("ratio pool must lie in (0,1] with maximum 1");
    }
    if (groups.empty()) fail("at least one block group");
    for (const auto& g : groups) {
      if (g.blocks < 1 || g.out_channels < 1 || g.mid_channels < 1 || g.stride < 1) fail("group geometry");
      if (depth_pool.back() > g.blocks) fail("max(depth_pool) exceeds the group's block count");
    }
  }
};

// A point of the search space. Stage and block indices are 0-based.
struct MultiStageArch {
  int resolution = 0;
  std::vector<std::vector<int>> depths;                   // [group][stage]
  std::vector<std::vector<int>> kernels;                  // [group][block]
  std::vector<std::vector<std::vector<double>>> cum_ratios;  // [group][block][stage]

  bool operator==(const MultiStageArch&) const = default;
  auto operator<=>(const MultiStageArch&) const = default;
};

namespace detail {
inline int pool_index(const std::vector<double>& pool, double v) {
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (std::abs(pool[i] - v) <= 1e-9) return static_cast<int>(i);
  }
  return -1;
}
inline int pool_index(const std::vector<int>& pool, int v) {
  auto it = std::find(pool.begin(), pool.end(), v);
  return it == pool.end() ? -1 : static_cast<int>(it - pool.begin());
}
}  // namespace detail

// Throws std::invalid_argument naming the first violated invariant.
inline void validate_arch(const MultiStageArch& a, const SearchSpaceConfig& cfg) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("MultiStageArch: " + m); };
  const int S = cfg.stages;
  if (detail::pool_index(cfg.resolution_pool, a.resolution) < 0) fail("resolution not in pool");
  const std::size_t G = cfg.groups.size();
  if (a.depths.size() != G || a.kernels.size() != G || a.cum_ratios.size() != G) fail("group count");
  for (std::size_t g = 0; g < G; ++g) {
    const int N = cfg.groups[g].blocks;
    if (static_cast<int>(a.depths[g].size()) != S) fail("depth list length");
    for (int s = 0; s < S; ++s) {
      if (detail::pool_index(cfg.depth_pool, a.depths[g][s]) < 0) fail("depth not in pool");
      if (s > 0 && a.depths[g][s - 1] > a.depths[g][s]) fail("depths must be non-decreasing across stages");
    }
    if (static_cast<int>(a.kernels[g].size()) != N || static_cast<int>(a.cum_ratios[g].size()) != N) {
      fail("per-block list length");
    }
    for (int b = 0; b < N; ++b) {
      if (detail::pool_index(cfg.kernel_pool, a.kernels[g][b]) < 0) fail("kernel not in pool");
      const auto& r = a.cum_ratios[g][b];
      if (static_cast<int>(r.size()) != S) fail("ratio list length");
      for (int s = 0; s < S; ++s) {
        if (detail::pool_index(cfg.ratio_pool, r[s]) < 0) fail("ratio not in pool");
        if (s > 0 && r[s - 1] > r[s] + 1e-12) fail("cumulative ratios must be non-decreasing");
      }
    }
  }
}

inline bool is_valid_arch(const MultiStageArch& a, const SearchSpaceConfig& cfg) {
  try {
    validate_arch(a, cfg);
    return true;
  } catch (const std::invalid_argument&) {
    return false;
  }
}

inline MultiStageArch maximal_arch(const SearchSpaceConfig& cfg) {
  MultiStageArch a;
  a.resolution = cfg.max_resolution();
  for (const auto& g : cfg.groups) {
    a.depths.emplace_back(cfg.stages, cfg.max_depth());
    a.kernels.emplace_back(g.blocks, cfg.max_kernel());
    a.cum_ratios.emplace_back(g.blocks, std::vector<double>(cfg.stages, 1.0));
  }
  return a;
}

// Restores the monotonicity invariants by sorting across stages.
inline void enforce_monotonic(MultiStageArch& a) {
  for (auto& d : a.depths) std::sort(d.begin(), d.end());
  for (auto& group : a.cum_ratios) {
    for (auto& r : group) std::sort(r.begin(), r.end());
  }
}

template <typename Rng>
std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Uniform draw of every free choice, then ascending sort across stages.
template <typename Rng>
MultiStageArch sample_arch(const SearchSpaceConfig& cfg, Rng& rng) {
  MultiStageArch a;
  a.resolution = cfg.resolution_pool[uniform_index(rng, cfg.resolution_pool.size())];
  for (const auto& g : cfg.groups) {
    std::vector<int> d(cfg.stages);
    for (auto& v : d) v = cfg.depth_pool[uniform_index(rng, cfg.depth_pool.size())];
    a.depths.push_back(std::move(d));
    std::vector<int> k(g.blocks);
    for (auto& v : k) v = cfg.kernel_pool[uniform_index(rng, cfg.kernel_pool.size())];
    a.kernels.push_back(std::move(k));
    std::vector<std::vector<double>> r(g.blocks, std::vector<double>(cfg.stages));
    for (auto& blk : r) {
      for (auto& v : blk) v = cfg.ratio_pool[uniform_index(rng, cfg.ratio_pool.size())];
    }
    a.cum_ratios.push_back(std::move(r));
  }
  enforce_monotonic(a);
  return a;
}

// Channel range [begin, end) of the L1-sorted order owned by one stage of a
// block, before absorption: end = round(c_s · C_max), begin = previous end.
struct ChannelRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
};

inline std::vector<ChannelRange> stage_channel_ranges(const std::vector<double>& cum_ratios, int max_channels,
                                                      int first_active) {
  const int S = static_cast<int>(cum_ratios.size());
  std::vector<ChannelRange> out(S);
  int prev = 0;
  for (int s = 0; s < S; ++s) {
    const int end = std::min(max_channels, static_cast<int>(std::lround(cum_ratios[s] * max_channels)));
    out[s] = {prev, std::max(prev, end)};
    prev = out[s].end;
  }
  // Absorption: the first active stage takes over the slices of skipped stages.
  for (int s = 0; s < first_active; ++s) out[s] = {0, 0};
  if (first_active < S) out[first_active].begin = 0;
  return out;
}

// Stage s runs block b (0-based) of a group iff b < D_s. Returns the lowest
// active stage, or S when no stage runs the block.
inline int first_active_stage(const std::vector<int>& group_depths, int block) {
  const int S = static_cast<int>(group_depths.size());
  for (int s = 0; s < S; ++s) {
    if (block < group_depths[s]) return s;
  }
  return S;
}

// Number of distinct architectures (depths and ratios are sorted multisets).
inline double search_space_size(const SearchSpaceConfig& cfg) {
  auto multisets = [](int n, int k) {
    // C(n + k - 1, k)
    double r = 1;
    for (int i = 1; i <= k; ++i) r = r * (n + i - 1) / i;
    return r;
  };
  const int S = cfg.stages;
  double total = static_cast<double>(cfg.resolution_pool.size());
  for (const auto& g : cfg.groups) {
    total *= multisets(static_cast<int>(cfg.depth_pool.size()), S);
    for (int b = 0; b < g.blocks; ++b) {
      total *= static_cast<double>(cfg.kernel_pool.size()) * multisets(static_cast<int>(cfg.ratio_pool.size()), S);
    }
  }
  return total;
}

// Spatial size entering each block, given the input resolution.
inline int stem_output_size(const SearchSpaceConfig& cfg, int resolution) {
  return (resolution + 2 * (cfg.stem_kernel / 2) - cfg.stem_kernel) / cfg.stem_stride + 1;
}

inline int strided_size(int in, int stride) { return (in + stride - 1) / stride; }

}  // namespace enas4d
