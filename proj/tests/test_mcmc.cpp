#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "nmaborrow/distributions.hpp"
#include "nmaborrow/mcmc.hpp"

using namespace nmaborrow;
using namespace nmaborrow::mcmc;

namespace {

SamplerConfig quick(int iterations = 20000, int burn_in = 4000) {
  SamplerConfig c;
  c.iterations = iterations;
  c.burn_in = burn_in;
  return c;
}

PosteriorSamples from_chains(const std::vector<std::vector<double>>& chains) {
  SamplerConfig c;
  c.n_chains = static_cast<int>(chains.size());
  PosteriorSamples s(c, chains.size(), chains.front().size());
  std::vector<double> all;
  for (const auto& ch : chains) all.insert(all.end(), ch.begin(), ch.end());
  s.add("x", all);
  return s;
}

}  // namespace

TEST(Support, RoundTripsAndJacobian) {
  for (const auto sup : {Support::unbounded(), Support::positive(), Support::interval(0.2, 0.9)}) {
    for (double u : {-3.0, -0.4, 0.0, 1.7}) {
      const double x = sup.from_unconstrained(u);
      EXPECT_TRUE(sup.contains(x));
      EXPECT_NEAR(sup.to_unconstrained(x), u, 1e-12);
      const double h = 1e-6;
      const double dxdu = (sup.from_unconstrained(u + h) - sup.from_unconstrained(u - h)) / (2 * h);
      EXPECT_NEAR(sup.log_jacobian(u), std::log(dxdu), 1e-7);
    }
  }
  EXPECT_TRUE(std::isfinite(Support::unit_interval().log_jacobian(800.0)));
}

TEST(SamplerConfig, Validation) {
  SamplerConfig c;
  c.burn_in = c.iterations;
  EXPECT_THROW(c.validate(), Error);
  c = SamplerConfig{};
  c.thin = 0;
  EXPECT_THROW(c.validate(), Error);
  c = SamplerConfig{};
  EXPECT_EQ(c.retained(), 40000);
  c.thin = 3;
  EXPECT_EQ(c.retained(), 13334);
}

TEST(Sampler, StandardNormalTarget) {
  std::vector<ParameterBlock> blocks{{"x", 1, Support::unbounded(), {0.0}, {}, {}, true}};
  auto s = run_chains([](std::span<const double> x) { return -0.5 * x[0] * x[0]; }, blocks, quick());
  const auto sum = summarize(s, "x");
  EXPECT_NEAR(sum.mean, 0.0, 4 * monte_carlo_se(s, "x"));
  EXPECT_NEAR(sum.sd, 1.0, 4 * monte_carlo_se_sd(s, "x"));
  EXPECT_LT(gelman_rubin(s, "x"), 1.01);
}

TEST(Sampler, PositiveSupportExponentialTarget) {
  std::vector<ParameterBlock> blocks{{"r", 1, Support::positive(), {1.0}, {}, {}, true}};
  auto s = run_chains([](std::span<const double> x) { return -x[0]; }, blocks, quick());
  EXPECT_NEAR(summarize(s, "r").mean, 1.0, 4 * monte_carlo_se(s, "r"));
  for (double v : s.pooled("r")) ASSERT_GT(v, 0.0);
}

TEST(Sampler, IntervalSupportBetaTarget) {
  const auto prior = ScalePrior::beta(3.0, 3.0);
  std::vector<ParameterBlock> blocks{{"w", 1, Support::unit_interval(), {0.5}, {}, {}, true}};
  auto s = run_chains([&](std::span<const double> x) { return prior.log_density(x[0]); }, blocks, quick());
  const auto sum = summarize(s, "w");
  EXPECT_NEAR(sum.mean, 0.5, 4 * monte_carlo_se(s, "w"));
  EXPECT_NEAR(sum.sd, std::sqrt(9.0 / (36.0 * 7.0)), 4 * monte_carlo_se_sd(s, "w"));
}

TEST(Sampler, DeterministicAndParallelInvariant) {
  std::vector<ParameterBlock> blocks{{"x", 2, Support::unbounded(), {0.0, 1.0}, {}, {"a", "b"}, true}};
  auto target = [](std::span<const double> x) { return -0.5 * (x[0] * x[0] + (x[1] - x[0]) * (x[1] - x[0])); };
  auto cfg = quick(3000, 1000);
  const auto a = run_chains(target, blocks, cfg);
  const auto b = run_chains(target, blocks, cfg);
  cfg.parallel = false;
  const auto c = run_chains(target, blocks, cfg);
  for (const auto& name : {"a", "b"}) {
    const auto pa = a.pooled(name), pb = b.pooled(name), pc = c.pooled(name);
    EXPECT_TRUE(std::equal(pa.begin(), pa.end(), pb.begin()));
    EXPECT_TRUE(std::equal(pa.begin(), pa.end(), pc.begin()));
  }
  cfg.seed += 1;
  const auto d = run_chains(target, blocks, cfg);
  EXPECT_NE(d.pooled("a")[0], a.pooled("a")[0]);
}

TEST(Sampler, ChainsUseDistinctStreams) {
  std::vector<ParameterBlock> blocks{{"x", 1, Support::unbounded(), {0.0}, {}, {}, true}};
  const auto s = run_chains([](std::span<const double> x) { return -0.5 * x[0] * x[0]; }, blocks, quick(2000, 500));
  EXPECT_NE(s.chain("x", 0)[0], s.chain("x", 1)[0]);
  EXPECT_EQ(chain_seed(10, 3), 10u ^ 3u);
}

TEST(Sampler, UnmonitoredBlocksAreDropped) {
  std::vector<ParameterBlock> blocks{{"h", 1, Support::unbounded(), {0.0}, {}, {}, false},
                                     {"x", 1, Support::unbounded(), {0.0}, {}, {}, true}};
  const auto s = run_chains([](std::span<const double> x) { return -0.5 * (x[0] * x[0] + x[1] * x[1]); }, blocks,
                            quick(2000, 500));
  EXPECT_FALSE(s.has("h"));
  EXPECT_TRUE(s.has("x"));
  EXPECT_EQ(s.acceptance().size(), 4u);
}

TEST(Sampler, NonFiniteStartNamesChainAndBlock) {
  std::vector<ParameterBlock> blocks{{"bad", 1, Support::unbounded(), {0.0}, {}, {}, true}};
  try {
    run_chains([](std::span<const double>) { return -INFINITY; }, blocks, quick(100, 10));
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("chain 0"), std::string::npos);
    EXPECT_NE(msg.find("'bad'"), std::string::npos);
  }
}

TEST(Sampler, InitialOutsideSupportRejected) {
  std::vector<ParameterBlock> blocks{{"t", 1, Support::positive(), {-1.0}, {}, {}, true}};
  EXPECT_THROW(run_chains([](std::span<const double>) { return 0.0; }, blocks, quick(100, 10)), Error);
}

TEST(Samples, DeriveAndPooled) {
  auto s = from_chains({{1, 2, 3}, {4, 5, 6}});
  s.derive("y", {"x"}, [](std::span<const double> v) { return 2 * v[0]; });
  const auto y = s.pooled("y");
  EXPECT_EQ(std::vector<double>(y.begin(), y.end()), (std::vector<double>{2, 4, 6, 8, 10, 12}));
  EXPECT_EQ(s.chain("y", 1)[0], 8.0);
  EXPECT_THROW(s.pooled("nope"), Error);
}

TEST(Quantile, Type7Interpolation) {
  const std::vector<double> v{1.0, 2.0, 4.0, 8.0};
  // h = (n - 1) p; x[floor h] + frac * (x[floor h + 1] - x[floor h])
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.025), 1.0 + 0.075 * 1.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.975), 4.0 + 0.925 * 4.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 1.0), 8.0);
}

TEST(Summarize, MeanSdAndMedian) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  const auto s = summarize(v);
  EXPECT_DOUBLE_EQ(s.mean, 5.0);
  EXPECT_DOUBLE_EQ(s.sd, std::sqrt(32.0 / 7.0));
  EXPECT_DOUBLE_EQ(s.median, 4.5);
  EXPECT_THROW(summarize(std::vector<double>{}), Error);
}

TEST(Rhat, IdenticalChainsAtMostOne) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  std::vector<double> half(500);
  for (auto& v : half) v = z(rng);
  std::vector<double> chain = half;
  std::vector<double> rev(half.rbegin(), half.rend());
  chain.insert(chain.end(), rev.begin(), rev.end());
  const auto s = from_chains({chain, chain});
  EXPECT_LE(gelman_rubin(s, "x", RhatVariant::split), 1.0);
  EXPECT_LE(gelman_rubin(s, "x", RhatVariant::classic), 1.0);
}

TEST(Rhat, ConstantChainsGiveOne) {
  const auto s = from_chains({std::vector<double>(20, 3.0), std::vector<double>(20, 3.0)});
  EXPECT_EQ(gelman_rubin(s, "x"), 1.0);
}

TEST(Rhat, DisjointChainsFlagged) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z;
  std::vector<double> a(1000), b(1000);
  for (auto& v : a) v = z(rng);
  for (auto& v : b) v = 10.0 + z(rng);
  const auto s = from_chains({a, b});
  EXPECT_GT(gelman_rubin(s, "x"), 1.5);
  EXPECT_GT(gelman_rubin(s, "x", RhatVariant::classic), 1.5);
}

TEST(Rhat, TrendWithinChainCaughtBySplit) {
  std::vector<double> a(1000), b(1000);
  for (int i = 0; i < 1000; ++i) a[i] = b[i] = i / 100.0;
  const auto s = from_chains({a, b});
  EXPECT_LT(gelman_rubin(s, "x", RhatVariant::classic), 1.01);
  EXPECT_GT(gelman_rubin(s, "x", RhatVariant::split), 1.5);
}

TEST(Rhat, Preconditions) {
  EXPECT_THROW(gelman_rubin(from_chains({std::vector<double>(100, 0.0)}), "x"), Error);
  EXPECT_THROW(gelman_rubin(from_chains({std::vector<double>(5, 0.0), std::vector<double>(5, 0.0)}), "x"), Error);
}

TEST(MonteCarloSe, IidDrawsMatchSigmaOverRootN) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  std::vector<double> a(10000), b(10000);
  for (auto& v : a) v = z(rng);
  for (auto& v : b) v = z(rng);
  const auto s = from_chains({a, b});
  EXPECT_NEAR(monte_carlo_se(s, "x"), 1.0 / std::sqrt(20000.0), 0.25 / std::sqrt(20000.0));
  // sd of the sample sd of iid normals: sigma / sqrt(2 n)
  EXPECT_NEAR(monte_carlo_se_sd(s, "x"), 1.0 / std::sqrt(40000.0), 0.3 / std::sqrt(40000.0));
}

TEST(Traces, FileNamesAndExport) {
  EXPECT_EQ(trace_file_name("mu[A B]"), "mu.A_B.csv");
  EXPECT_EQ(trace_file_name("tau"), "tau.csv");
  auto s = from_chains({{1.5, 2.5}, {3.5, 4.5}});
  const auto dir = std::filesystem::temp_directory_path() / "nmab_trace_test";
  std::filesystem::remove_all(dir);
  export_traces(s, dir);
  std::ifstream in(dir / "x.csv");
  std::string header, first, second, third;
  std::getline(in, header);
  std::getline(in, first);
  std::getline(in, second);
  std::getline(in, third);
  EXPECT_EQ(header, "chain,iteration,value");
  EXPECT_EQ(first, "0,10001,1.5");
  EXPECT_EQ(second, "0,10002,2.5");
  EXPECT_EQ(third, "1,10001,3.5");
  EXPECT_TRUE(std::filesystem::exists(dir / "index.csv"));
  std::filesystem::remove_all(dir);
}
