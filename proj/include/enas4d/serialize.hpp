#pragma once

// JSON documents for search spaces, architectures, cost profiles and latency
// tables, plus small file helpers shared by the pipeline.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "enas4d/dyninfer.hpp"
#include "enas4d/errors.hpp"
#include "enas4d/search_space.hpp"
#include "json.hpp"

namespace enas4d {

using json = nlohmann::json;

inline void to_json(json& j, const GroupConfig& g) {
  j = {{"blocks", g.blocks}, {"out_channels", g.out_channels}, {"mid_channels", g.mid_channels}, {"stride", g.stride}};
}
inline void from_json(const json& j, GroupConfig& g) {
  g.blocks = j.at("blocks").get<int>();
  g.out_channels = j.at("out_channels").get<int>();
  g.mid_channels = j.at("mid_channels").get<int>();
  g.stride = j.value("stride", 1);
}

inline void to_json(json& j, const SearchSpaceConfig& c) {
  j = {{"stages", c.stages},
       {"input_channels", c.input_channels},
       {"num_classes", c.num_classes},
       {"stem_channels", c.stem_channels},
       {"stem_kernel", c.stem_kernel},
       {"stem_stride", c.stem_stride},
       {"resolution_pool", c.resolution_pool},
       {"depth_pool", c.depth_pool},
       {"kernel_pool", c.kernel_pool},
       {"ratio_pool", c.ratio_pool},
       {"groups", c.groups}};
}
inline void from_json(const json& j, SearchSpaceConfig& c) {
  SearchSpaceConfig d;
  c.stages = j.value("stages", d.stages);
  c.input_channels = j.value("input_channels", d.input_channels);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.stem_channels = j.value("stem_channels", d.stem_channels);
  c.stem_kernel = j.value("stem_kernel", d.stem_kernel);
  c.stem_stride = j.value("stem_stride", d.stem_stride);
  c.resolution_pool = j.at("resolution_pool").get<std::vector<int>>();
  c.depth_pool = j.at("depth_pool").get<std::vector<int>>();
  c.kernel_pool = j.at("kernel_pool").get<std::vector<int>>();
  c.ratio_pool = j.at("ratio_pool").get<std::vector<double>>();
  c.groups = j.at("groups").get<std::vector<GroupConfig>>();
}

inline void to_json(json& j, const MultiStageArch& a) {
  j = {{"resolution", a.resolution}, {"depths", a.depths}, {"kernels", a.kernels}, {"cum_ratios", a.cum_ratios}};
}
inline void from_json(const json& j, MultiStageArch& a) {
  a.resolution = j.at("resolution").get<int>();
  a.depths = j.at("depths").get<std::vector<std::vector<int>>>();
  a.kernels = j.at("kernels").get<std::vector<std::vector<int>>>();
  a.cum_ratios = j.at("cum_ratios").get<std::vector<std::vector<std::vector<double>>>>();
}

// Snaps ratios read from text onto the exact pool values.
inline MultiStageArch canonicalize_arch(MultiStageArch a, const SearchSpaceConfig& cfg) {
  for (auto& g : a.cum_ratios) {
    for (auto& b : g) {
      for (auto& r : b) {
        const int i = detail::pool_index(cfg.ratio_pool, r);
        if (i >= 0) r = cfg.ratio_pool[i];
      }
    }
  }
  return a;
}

inline void to_json(json& j, const CostProfile& p) {
  j = {{"kind", to_string(p.kind)}, {"cumulative", p.cumulative}};
}
inline void from_json(const json& j, CostProfile& p) {
  p.kind = parse_cost_kind(j.at("kind").get<std::string>());
  p.cumulative = j.at("cumulative").get<std::vector<double>>();
}

inline void to_json(json& j, const OpSignature& s) {
  j = {{"op", to_string(s.kind)}, {"in_channels", s.in_channels}, {"out_channels", s.out_channels},
       {"kernel", s.kernel},      {"stride", s.stride},            {"resolution", s.resolution}};
}
inline void from_json(const json& j, OpSignature& s) {
  s.kind = parse_op_kind(j.at("op").get<std::string>());
  s.in_channels = j.at("in_channels").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.kernel = j.at("kernel").get<int>();
  s.stride = j.at("stride").get<int>();
  s.resolution = j.at("resolution").get<int>();
}

inline void to_json(json& j, const LatencyTable& t) {
  json entries = json::array();
  for (const auto& [sig, ms] : t.entries) {
    json e = sig;
    e["ms"] = ms;
    entries.push_back(std::move(e));
  }
  j = {{"device", t.device}, {"repeats", t.repeats}, {"warmups", t.warmups}, {"entries", std::move(entries)}};
}
inline void from_json(const json& j, LatencyTable& t) {
  t.device = j.value("device", std::string());
  t.repeats = j.value("repeats", 0);
  t.warmups = j.value("warmups", 0);
  t.entries.clear();
  for (const auto& e : j.at("entries")) {
    const auto sig = e.get<OpSignature>();
    if (!t.entries.emplace(sig, e.at("ms").get<double>()).second) {
      throw std::invalid_argument("LatencyTable: duplicate entry " + sig.to_string());
    }
  }
  t.validate();
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes through a temporary file and renames, so readers never see partial output.
inline void write_text_file(const std::filesystem::path& p, const std::string& content) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out << content;
    if (!out.flush()) throw DataError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, p);
}

inline json read_json_file(const std::filesystem::path& p) {
  try {
    return json::parse(read_text_file(p));
  } catch (const json::parse_error& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& p, const json& j) { write_text_file(p, j.dump(2) + "\n"); }

}  // namespace enas4d
