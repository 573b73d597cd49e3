#include <gtest/gtest.h>

#include <chrono>
#include <set>

#include "enas4d/pipeline.hpp"
#include "enas4d/predictor.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace enas4d {
namespace {

using testing::linear_pairs;

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

RecordSet random_records(std::mt19937_64& rng, int arch_id, int n, int S) {
  std::uniform_real_distribution<float> u(0.25f, 1.0f);
  std::bernoulli_distribution b(0.6);
  RecordSet r(arch_id, S);
  for (int i = 0; i < n; ++i) {
    EvalRecord rec{arch_id, i, {}, {}};
    for (int s = 0; s < S; ++s) {
      rec.conf.push_back(u(rng));
      rec.correct.push_back(b(rng));
    }
    r.add(rec);
  }
  return r;
}

EvalDatabase synthetic_db(const SearchSpaceConfig& cfg, int archs, std::uint64_t seed) {
  EvalDatabase db;
  db.config = cfg;
  std::mt19937_64 rng(seed);
  for (int i = 0; i < archs; ++i) {
    const auto a = sample_arch(cfg, rng);
    db.add({i, a, count_macs(a, cfg), std::nullopt}, random_records(rng, i, 30, cfg.stages));
  }
  return db;
}

TEST(Encoding, SingletonPoolsGiveAllOnes) {
  auto c = tiny_space();
  c.resolution_pool = {8};
  c.depth_pool = {2};
  c.kernel_pool = {3};
  c.ratio_pool = {1.0};
  std::mt19937_64 rng(1);
  const auto e = encode_arch(sample_arch(c, rng), c);
  // 1 resolution + S depths + N kernels + N*S ratios.
  ASSERT_EQ(e.size(), static_cast<std::size_t>(1 + 2 + 2 + 4));
  for (float v : e) EXPECT_EQ(v, 1.0f);
}

TEST(Encoding, ResolutionBlock) {
  auto c = desk_search_space();
  c.resolution_pool = {128, 160, 192};
  auto a = maximal_arch(c);
  a.resolution = 160;
  const auto e = encode_arch(a, c);
  const auto& b = encoding_layout(c).blocks[0];
  EXPECT_EQ(b.offset, 0);
  EXPECT_EQ(b.size, 3);
  EXPECT_EQ(std::vector<float>(e.begin(), e.begin() + 3), (std::vector<float>{0, 1, 0}));
}

TEST(Encoding, OneHotBlocksAndLayout) {
  const auto c = desk_search_space();
  const auto layout = encoding_layout(c);
  // 3 + 2 groups*(3 depths*3) + 6 blocks*3 kernels + 6 blocks*3 stages*3 ratios
  EXPECT_EQ(layout.length, 3 + 18 + 18 + 54);
  int expect_offset = 0;
  for (const auto& b : layout.blocks) {
    EXPECT_EQ(b.offset, expect_offset);
    expect_offset += b.size;
  }
  EXPECT_EQ(expect_offset, layout.length);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto e = encode_arch(sample_arch(c, rng), c);
    for (const auto& b : layout.blocks) {
      float sum = 0;
      for (int k = 0; k < b.size; ++k) sum += e[b.offset + k];
      EXPECT_EQ(sum, 1.0f) << b.name;
    }
  }
}

TEST(Encoding, RoundTripAndInjectiveOnEnumerableSpace) {
  const auto c = tiny_space();
  const auto all = testing::enumerate_archs(c);
  ASSERT_EQ(static_cast<double>(all.size()), search_space_size(c));
  std::set<ArchEncoding> seen;
  for (const auto& a : all) {
    ASSERT_TRUE(is_valid_arch(a, c));
    const auto e = encode_arch(a, c);
    EXPECT_EQ(decode_arch(e, c), a);
    seen.insert(e);
  }
  EXPECT_EQ(seen.size(), all.size());
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto a = sample_arch(c, rng);
    EXPECT_EQ(decode_arch(encode_arch(a, c), c), a);
  }
}

TEST(Encoding, RejectsValuesOutsideThePools) {
  const auto c = tiny_space();
  auto a = maximal_arch(c);
  a.kernels[0][1] = 7;
  EXPECT_THROW(encode_arch(a, c), std::invalid_argument);
  EXPECT_THROW(decode_arch(ArchEncoding(3, 0.0f), c), std::invalid_argument);
}

TEST(TrainingSet, LabelsReproduceGridSearch) {
  const auto c = desk_search_space();
  const auto db = synthetic_db(c, 40, 5);
  const MetricConfig m{0.09, 3e6, CostKind::macs};
  const auto grid = default_threshold_grid();
  const auto pairs = build_training_set(db, m, grid);
  ASSERT_EQ(pairs.size(), 40u);
  for (const auto& p : pairs) {
    const auto g = grid_search_thresholds(db.records.at(p.arch_id), count_macs(db.entry(p.arch_id).arch, c), m, grid);
    EXPECT_EQ(p.R, g.R);
    EXPECT_EQ(p.encoding, encode_arch(db.entry(p.arch_id).arch, c));
  }
  const auto other = build_training_set(db, {0.09, 1e6, CostKind::macs}, grid);
  bool changed = false;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(other[i].encoding, pairs[i].encoding);
    changed = changed || other[i].R != pairs[i].R;
  }
  EXPECT_TRUE(changed);
  EXPECT_EQ(build_training_set(synthetic_db(c, 1, 6), m, grid).size(), 1u);
  EXPECT_THROW(build_training_set(db, {0.09, 1.0, CostKind::latency}, grid), std::invalid_argument);
}

TEST(KendallTau, HandValues) {
  EXPECT_DOUBLE_EQ(kendall_tau({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(kendall_tau({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  // 5 concordant, 1 discordant of 6 pairs.
  EXPECT_NEAR(kendall_tau({1, 2, 3, 4}, {1, 3, 2, 4}), 4.0 / 6.0, 1e-12);
  EXPECT_DOUBLE_EQ(rmse({1, 2}, {1, 4}), std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(top_fraction_overlap({5, 4, 3, 2, 1, 0, 0, 0, 0, 0}, {9, 0, 0, 0, 0, 0, 0, 0, 0, 0}, 0.1), 1.0);
}

TEST(FitPredictor, ConstantLabels) {
  auto pairs = linear_pairs(200, 7);
  for (auto& p : pairs) p.R = 0.7;
  std::ostringstream log;
  const auto fit = fit_predictor(pairs, {}, 1, &log);
  EXPECT_TRUE(fit.report.degenerate_labels);
  EXPECT_NE(log.str().find("identical"), std::string::npos);
  EXPECT_LT(fit.report.validation_rmse, 0.01);
  std::mt19937_64 rng(8);
  const auto c = desk_search_space();
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(predict_R(fit.model, encode_arch(sample_arch(c, rng), c)), 0.7, 0.01);
}

TEST(FitPredictor, LinearFunctionOfThreeBlocks) {
  const auto pairs = linear_pairs(1000, 9);
  const auto fit = fit_predictor(pairs, {}, 2, nullptr);
  EXPECT_EQ(fit.report.validation_size, 100u);
  EXPECT_LT(fit.report.validation_rmse, 0.01);
  EXPECT_GT(fit.report.kendall_tau, 0.6);
}

TEST(FitPredictor, DeterministicUnderSeedAndRejectsSmallSets) {
  const auto pairs = linear_pairs(60, 10);
  PredictorConfig cfg;
  cfg.epochs = 3;
  const auto a = fit_predictor(pairs, cfg, 4, nullptr);
  const auto b = fit_predictor(pairs, cfg, 4, nullptr);
  EXPECT_EQ(a.report.validation_arch_ids, b.report.validation_arch_ids);
  EXPECT_EQ(predict_R(a.model, pairs[0].encoding), predict_R(b.model, pairs[0].encoding));
  const auto c = fit_predictor(pairs, cfg, 5, nullptr);
  EXPECT_NE(predict_R(a.model, pairs[0].encoding), predict_R(c.model, pairs[0].encoding));
  EXPECT_THROW(fit_predictor(std::vector<TrainingPair>(pairs.begin(), pairs.begin() + 19), cfg, 1, nullptr),
               std::invalid_argument);
  cfg.hidden_units = 0;
  EXPECT_THROW(fit_predictor(pairs, cfg, 1, nullptr), std::invalid_argument);
}

TEST(PredictR, PureDimensionCheckedAndFast) {
  const auto c = desk_search_space();
  const int D = encoding_layout(c).length;
  MetricPredictor m(D, {}, 3);
  std::mt19937_64 rng(11);
  const auto e = encode_arch(sample_arch(c, rng), c);
  EXPECT_EQ(predict_R(m, e), predict_R(m, e));
  EXPECT_THROW(predict_R(m, ArchEncoding(D - 1, 0.0f)), std::invalid_argument);
  std::vector<ArchEncoding> encs;
  for (int i = 0; i < 1000; ++i) encs.push_back(encode_arch(sample_arch(c, rng), c));
  const auto t0 = std::chrono::steady_clock::now();
  double sink = 0;
  for (const auto& x : encs) sink += predict_R(m, x);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1.0);
  const auto batch = m.predict_batch(encs);
  EXPECT_NEAR(batch[17], predict_R(m, encs[17]), 1e-12);
  EXPECT_TRUE(std::isfinite(sink));
}

TEST(PredictorCheckpoint, RoundTripAndCompatibility) {
  const auto c = desk_search_space();
  const auto layout = encoding_layout(c);
  const MetricConfig metric{0.09, 3e6, CostKind::macs};
  PredictorConfig cfg;
  cfg.hidden_units = 16;
  MetricPredictor m(layout.length, cfg, 4);
  m.set_label_standardization(0.6, 0.05);
  const auto back = predictor_from_json(json::parse(predictor_json(m, layout, metric).dump()));
  std::mt19937_64 rng(12);
  for (int i = 0; i < 10; ++i) {
    const auto e = encode_arch(sample_arch(c, rng), c);
    EXPECT_EQ(predict_R(back.model, e), predict_R(m, e));
  }
  EXPECT_NO_THROW(check_predictor_compatible(back, layout, metric));
  EXPECT_THROW(check_predictor_compatible(back, layout, {0.09, 2e6, CostKind::macs}), std::invalid_argument);
  EXPECT_THROW(check_predictor_compatible(back, encoding_layout(tiny_space()), metric), std::invalid_argument);
  EXPECT_THROW(predictor_from_json(json{{"format", "other"}}), DataError);
}

}  // namespace
}  // namespace enas4d
