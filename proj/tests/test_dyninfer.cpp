#include <gtest/gtest.h>

#include <set>

#include "enas4d/dyninfer.hpp"
#include "enas4d/pipeline.hpp"
#include "enas4d/serialize.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace enas4d {
namespace {

using testing::instrumented_stage_macs;

using testing::random_tensor;

SearchSpaceConfig small_space() {
  SearchSpaceConfig c;
  c.stages = 3;
  c.num_classes = 4;
  c.stem_channels = 4;
  c.resolution_pool = {8, 12};
  c.depth_pool = {1, 2};
  c.kernel_pool = {3, 5};
  c.ratio_pool = {0.5, 1.0};
  c.groups = {{2, 4, 8, 1}, {2, 6, 12, 2}};
  return c;
}

TEST(ExitRule, StrictComparison) {
  const std::vector<double> conf = {0.4, 0.7, 0.9};
  EXPECT_EQ(exit_stage_for(conf, std::vector<double>{0.6, 0.6}), 1);
  EXPECT_EQ(exit_stage_for(conf, std::vector<double>{0.4, 0.7}), 2);
  EXPECT_EQ(exit_stage_for(conf, std::vector<double>{0.0, 0.0}), 0);
  EXPECT_EQ(exit_stage_for(conf, std::vector<double>{1.1, 1.1}), 2);
}

TEST(ExitRule, RaisingAThresholdNeverExitsEarlier) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.25, 1.0);
  const auto grid = default_threshold_grid();
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> conf = {u(rng), u(rng), u(rng)};
    std::vector<double> t = {grid[rng() % grid.size()], grid[rng() % grid.size()]};
    const int e = exit_stage_for(conf, t);
    const int s = static_cast<int>(rng() % 2);
    for (double v : grid) {
      if (v < t[s]) continue;
      auto t2 = t;
      t2[s] = v;
      EXPECT_GE(exit_stage_for(conf, t2), e);
    }
  }
}

TEST(InferDynamic, MatchesFullForwardAndExitsWhereTheRuleSays) {
  const auto cfg = small_space();
  auto net = build_supernet<float>(cfg, 4);
  std::mt19937_64 rng(7);
  const auto a = sample_arch(cfg, rng);
  auto view = net.materialize(a);
  view.set_mode(NormMode::eval);
  for (int i = 0; i < 5; ++i) {
    const auto img = random_tensor<float>({1, 3, a.resolution, a.resolution}, rng);
    NoGradGuard guard;
    const auto all = view.forward_all(Var<float>::constant(img));
    std::vector<double> conf;
    for (const auto& l : all) conf.push_back(to_predictions(l.value())[0].confidence);

    const auto zero = infer_dynamic(view, img, {0.0, 0.0});
    EXPECT_EQ(zero.exit_stage, 0);
    EXPECT_EQ(zero.stages.size(), 1u);
    const auto never = infer_dynamic(view, img, {1.1, 1.1});
    EXPECT_EQ(never.exit_stage, 2);
    ASSERT_EQ(never.stages.size(), 3u);
    for (int s = 0; s < 3; ++s) EXPECT_NEAR(never.stages[s].confidence, conf[s], 1e-6);
    EXPECT_EQ(never.predicted_class, to_predictions(all[2].value())[0].predicted_class);
    const ThresholdVector mid = {conf[0] + 1e-3, conf[1] - 1e-3};
    EXPECT_EQ(infer_dynamic(view, img, mid).exit_stage, 1);
  }
  EXPECT_THROW(infer_dynamic(view, random_tensor<float>({1, 3, a.resolution, a.resolution}, rng), {0.5}),
               std::invalid_argument);
}

TEST(CountMacs, SingleConvolutionHandCount) {
  OpSignature conv{OpKind::stem_conv, 3, 8, 3, 1, 16};
  EXPECT_EQ(conv.macs(), 3u * 8 * 9 * 256);
  OpSignature dw{OpKind::depthwise_conv, 6, 6, 5, 2, 16};
  EXPECT_EQ(dw.macs(), 6u * 25 * 64);
  OpSignature fc{OpKind::linear, 32, 10, 1, 1, 1};
  EXPECT_EQ(fc.macs(), 320u);
  EXPECT_EQ((OpSignature{OpKind::batch_norm, 6, 6, 1, 1, 16}).macs(), 0u);
}

TEST(CountMacs, EqualsInstrumentedForwardOnSmallSpace) {
  const auto cfg = small_space();
  auto net = build_supernet<float>(cfg, 2);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 30; ++i) {
    const auto a = sample_arch(cfg, rng);
    EXPECT_EQ(stage_macs(a, cfg), instrumented_stage_macs(net, a));
  }
}

TEST(CountMacs, CumulativeIsStrictlyIncreasingAndAdditive) {
  const auto cfg = desk_search_space();
  std::mt19937_64 rng(10);
  for (int i = 0; i < 200; ++i) {
    const auto a = sample_arch(cfg, rng);
    const auto p = count_macs(a, cfg);
    EXPECT_TRUE(p.strictly_increasing());
    const auto inc = stage_macs(a, cfg);
    double sum = 0;
    for (std::size_t s = 0; s < inc.size(); ++s) {
      sum += static_cast<double>(inc[s]);
      EXPECT_EQ(p.cumulative[s], sum);
    }
  }
}

TEST(CountMacs, ZeroIncrementalChannelsAddNoLayerWork) {
  auto cfg = small_space();
  MultiStageArch a = maximal_arch(cfg);
  // All width in stage 0: later stages only re-run the heads (plus the
  // output-reuse projections of zero new channels).
  const auto ops = enumerate_stage_ops(a, cfg);
  for (int s = 1; s < 3; ++s) {
    for (const auto& op : ops[s]) {
      if (op.kind == OpKind::pointwise_conv || op.kind == OpKind::depthwise_conv) {
        ADD_FAILURE() << "stage " << s << " runs " << op.to_string();
      }
    }
  }
  const auto inc = stage_macs(a, cfg);
  EXPECT_EQ(inc[1], static_cast<std::uint64_t>(6 * 4));
  EXPECT_EQ(inc[2], static_cast<std::uint64_t>(6 * 4));
}

TEST(ProfileLatency, AllOnesTableCountsOps) {
  const auto cfg = desk_search_space();
  LatencyTable ones;
  ones.device = "ones";
  for (const auto& sig : enumerate_space_signatures(cfg)) ones.entries[sig] = 1.0;
  std::mt19937_64 rng(12);
  for (int i = 0; i < 50; ++i) {
    const auto a = sample_arch(cfg, rng);
    const auto p = profile_latency(a, cfg, ones);
    const auto ops = enumerate_stage_ops(a, cfg);
    double n = 0;
    for (std::size_t s = 0; s < ops.size(); ++s) {
      n += static_cast<double>(ops[s].size());
      EXPECT_EQ(p.cumulative[s], n);
    }
    EXPECT_TRUE(p.strictly_increasing());
  }
}

TEST(ProfileLatency, MissingSignatureNamesIt) {
  const auto cfg = small_space();
  std::mt19937_64 rng(1);
  try {
    profile_latency(sample_arch(cfg, rng), cfg, LatencyTable{});
    FAIL() << "expected a missing-signature error";
  } catch (const std::out_of_range& e) {
    EXPECT_NE(std::string(e.what()).find("stem_conv"), std::string::npos) << e.what();
  }
}

TEST(ProfileLatency, HandSum) {
  // Two ops in stage 0 (2.5 + 1.5 ms), one op in stage 1 (3.0 ms).
  LatencyTable t;
  const OpSignature a{OpKind::pointwise_conv, 2, 2, 1, 1, 4}, b{OpKind::relu, 2, 2, 1, 1, 4},
      c{OpKind::linear, 2, 3, 1, 1, 1};
  t.entries = {{a, 2.5}, {b, 1.5}, {c, 3.0}};
  const std::vector<std::vector<OpSignature>> stages = {{a, b}, {c}};
  double total = 0;
  std::vector<double> cum;
  for (const auto& s : stages) {
    for (const auto& op : s) total += t.lookup(op);
    cum.push_back(total);
  }
  EXPECT_EQ(cum, (std::vector<double>{4.0, 7.0}));
}

TEST(BenchLatency, MeanOfRepeatsAfterWarmups) {
  const OpSignature sig{OpKind::relu, 4, 4, 1, 1, 8};
  EXPECT_EQ(bench_latency({sig}, [](const OpSignature&) { return 2.0; }, 1, 0, "fake").entries.at(sig), 2.0);
  std::vector<double> times = {100.0, 3.0, 1.0, 2.0};  // first is a warmup
  std::size_t k = 0;
  auto t = bench_latency({sig}, [&](const OpSignature&) { return times[k++]; }, 3, 1, "fake");
  EXPECT_DOUBLE_EQ(t.entries.at(sig), 2.0);
  EXPECT_EQ(t.repeats, 3);
  EXPECT_EQ(t.warmups, 1);
}

TEST(BenchLatency, FailingSignaturesAreSkippedWithAWarning) {
  const OpSignature good{OpKind::relu, 4, 4, 1, 1, 8}, bad{OpKind::add, 4, 4, 1, 1, 8};
  std::ostringstream log;
  auto t = bench_latency(
      {good, bad},
      [&](const OpSignature& s) -> double {
        if (s == bad) throw std::runtime_error("device refused");
        return 1.0;
      },
      2, 0, "fake", &log);
  EXPECT_EQ(t.entries.size(), 1u);
  EXPECT_TRUE(t.entries.count(good));
  EXPECT_NE(log.str().find("device refused"), std::string::npos);
}

TEST(BenchLatency, SpaceSignaturesCoverEverySampledArch) {
  const auto cfg = desk_search_space();
  const auto sigs = enumerate_space_signatures(cfg);
  const std::set<OpSignature> all(sigs.begin(), sigs.end());
  std::mt19937_64 rng(13);
  for (int i = 0; i < 300; ++i) {
    for (const auto& stage : enumerate_stage_ops(sample_arch(cfg, rng), cfg)) {
      for (const auto& op : stage) EXPECT_TRUE(all.count(op)) << op.to_string();
    }
  }
}

TEST(BenchLatency, CpuRunnerTimesPositive) {
  auto run = cpu_op_runner<float>();
  for (const auto& sig : enumerate_space_signatures(small_space())) {
    EXPECT_GT(run(sig), 0.0) << sig.to_string();
  }
}

TEST(LatencyTableJson, RoundTripAndValidation) {
  LatencyTable t;
  t.device = "cpu";
  t.repeats = 5;
  t.warmups = 1;
  t.entries[{OpKind::relu, 4, 4, 1, 1, 8}] = 0.25;
  t.entries[{OpKind::pointwise_conv, 4, 8, 1, 1, 8}] = 1.5;
  const json j = t;
  const auto back = json::parse(j.dump()).get<LatencyTable>();
  EXPECT_EQ(back.entries, t.entries);
  EXPECT_EQ(back.device, "cpu");
  json bad = j;
  bad["entries"][0]["ms"] = 0.0;
  EXPECT_THROW(bad.get<LatencyTable>(), std::invalid_argument);
}

}  // namespace
}  // namespace enas4d
