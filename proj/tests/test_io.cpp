#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <unistd.h>

#include "nmaborrow/io.hpp"
#include "nmaborrow/nmaborrow.hpp"
#include "synthetic.hpp"

using namespace nmaborrow;
namespace fs = std::filesystem;

namespace {

const fs::path kData = NMAB_TEST_DATA;

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("nmab_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter.fetch_add(1)));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path write(const std::string& name, const std::string& text) const {
    const auto p = path_ / name;
    write_text(p, text);
    return p;
  }

 private:
  fs::path path_;
};

std::string studies_header() { return "study_id,subgroup,treatment,n,mean,sd,high_rob\n"; }

std::string expect_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected an error";
  return {};
}

/// Arm rows for a network of two-arm studies.
std::string rows_of(const Network& net) {
  std::string out;
  for (const auto& s : net.studies())
    for (const auto& a : s.arms)
      out += csv::join({s.id, s.subgroup, a.treatment, std::to_string(a.n), format_number(a.mean, -1),
                        format_number(a.sd, -1), "0"});
  return out;
}

std::string small_two_subgroup_file(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const nmab_test::Truth t1{{{"A", -0.5}, {"B", -0.3}}, 0.1};
  const nmab_test::Truth t2{{{"A", -0.3}, {"B", -0.2}, {"C", -0.1}}, 0.1};
  auto d1 = nmab_test::star("Pbo", {"A", "B"}, 1, 60);
  d1.push_back({{"A", "B"}, 60});
  const auto p1 = nmab_test::simulate("P1", d1, t1, "Pbo", rng, true, "p");
  const auto p2 = nmab_test::simulate("P2", nmab_test::star("Pbo", {"A", "B", "C"}, 3, 100), t2, "Pbo", rng, true, "d");
  return studies_header() + rows_of(p1) + rows_of(p2);
}

AnalysisConfig quick(const fs::path& studies, const std::string& model, const fs::path& out) {
  AnalysisConfig c;
  c.model = ModelChoice::parse(model);
  c.studies = studies.string();
  c.reference = "Pbo";
  c.sampler.iterations = 6000;
  c.sampler.burn_in = 2000;
  c.sampler.seed = 99;
  c.allow_unconverged = true;
  c.out = out.string();
  return c;
}

std::map<std::string, std::string> report_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::istringstream in(csv::read_file(e.path()));
    std::string line, kept;
    while (std::getline(in, line))
      if (line.rfind("# timing.", 0) != 0) kept += line + "\n";
    out[fs::relative(e.path(), dir).string()] = kept;
  }
  return out;
}

}  // namespace

TEST(Csv, QuotingAndLineTracking) {
  const auto r = csv::parse("a,\"b,c\",\"say \"\"hi\"\"\"\r\n\n\"multi\nline\",x\nlast");
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[0].fields, (std::vector<std::string>{"a", "b,c", "say \"hi\""}));
  EXPECT_TRUE(r[1].blank());
  EXPECT_EQ(r[2].line, 3u);
  EXPECT_EQ(r[2].fields[0], "multi\nline");
  EXPECT_EQ(r[3].line, 5u);
  EXPECT_EQ(r[3].fields, (std::vector<std::string>{"last"}));
}

TEST(Csv, MalformedInput) {
  EXPECT_NE(expect_error([] { csv::parse("a,\"open\n", "f.csv"); }).find("f.csv:1: unterminated"), std::string::npos);
  EXPECT_NE(expect_error([] { csv::parse("a\nb\"c\n", "f.csv"); }).find("f.csv:2: stray quote"), std::string::npos);
  EXPECT_THROW(csv::parse("\"a\"b\n"), Error);
}

TEST(Csv, JoinQuotesWhenNeeded) {
  EXPECT_EQ(csv::join({"a", "b,c", "d\"e", ""}), "a,\"b,c\",\"d\"\"e\",\n");
  const auto back = csv::parse(csv::join({"x,y", "q\"", "z"}));
  EXPECT_EQ(back[0].fields, (std::vector<std::string>{"x,y", "q\"", "z"}));
}

TEST(LoadStudies, CaShapedNetwork) {
  const auto studies = load_studies(kData / "ca_shaped.csv", {"P1"});
  EXPECT_EQ(studies.size(), 19u);
  const auto net = network_for(studies, "P1", "Placebo");
  EXPECT_EQ(net.treatments().size(), 15u);
  EXPECT_EQ(direct_comparisons(net).size(), 21u);
  EXPECT_NO_THROW(require_connected(net));
  EXPECT_EQ(studies[0].arms[0].treatment, "Placebo");
  EXPECT_EQ(studies[1].high_rob, std::optional<bool>(true));
}

TEST(LoadStudies, ErrorsNameFileAndLine) {
  TempDir dir;
  const std::string h = studies_header();
  auto err = [&](const std::string& body, const std::set<std::string>& labels = {}) {
    const auto p = dir.write("s.csv", h + body);
    return expect_error([&] { load_studies(p, labels); });
  };
  EXPECT_NE(err("1,P1,A,10,0,1,0\n1,P1,A,10,0,1,0\n").find("s.csv:3: duplicate (study_id, treatment)"), std::string::npos);
  EXPECT_NE(err("1,P1,A,1,0,1,0\n1,P1,B,10,0,1,0\n").find(":2: n < 2"), std::string::npos);
  EXPECT_NE(err("1,P1,A,10,0,0,0\n1,P1,B,10,0,1,0\n").find(":2: sd <= 0"), std::string::npos);
  EXPECT_NE(err("1,P1,A,10,0,1,0\n1,P1,B,10,0,1,0\n", {"P2"}).find("unknown subgroup label 'P1'"), std::string::npos);
  EXPECT_NE(err("1,P1,A,10,0,1,0\n1,P2,B,10,0,1,0\n").find(":3: study '1' changes subgroup"), std::string::npos);
  EXPECT_NE(err("1,P1,A,10,0,1,0\n1,P1,B,10,0,1,1\n").find("inconsistent high_rob"), std::string::npos);
  EXPECT_NE(err("1,P1,A,10,0,1,0\n2,P1,B,10,0,1,0\n2,P1,C,10,0,1,0\n").find(":2: study '1' has fewer than 2 arms"),
            std::string::npos);
  EXPECT_NE(err("1,P1,A,ten,0,1,0\n").find("'n' is not a number"), std::string::npos);
  EXPECT_NE(err("1,P1,A,10.5,0,1,0\n").find("'n' must be an integer"), std::string::npos);
  EXPECT_NE(err("1,P1,A,10,0,1,maybe\n").find("high_rob must be"), std::string::npos);
  const auto p = dir.write("m.csv", "study_id,subgroup,treatment,n,mean,sd\n");
  EXPECT_NE(expect_error([&] { load_studies(p); }).find("m.csv:1: missing column 'high_rob'"), std::string::npos);
}

TEST(LoadStudies, EmptyRobColumnIsUnknown) {
  TempDir dir;
  const auto p = dir.write("s.csv", studies_header() + "1,P1,A,10,0,1,\n1,P1,B,10,0,1,\n\n");
  const auto s = load_studies(p);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_FALSE(s[0].high_rob.has_value());
}

TEST(LoadExperts, SkipsBlankAndUnansweredRows) {
  TempDir dir;
  const auto p = dir.write("e.csv",
                           "expert_id,treatment,expected_change,sd,confidence\n"
                           "E1,Placebo,-10,5,8\n"
                           "\n"
                           "E1,Clozapine,,,\n"
                           "E2,Placebo,-9,4,10\n");
  const auto e = load_experts(p);
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e[1].expert_id, "E2");
  EXPECT_EQ(e[0].confidence, 8);
  const auto bad = dir.write("b.csv", "expert_id,treatment,expected_change,sd,confidence\nE1,Placebo,-10,5,11\n");
  EXPECT_NE(expect_error([&] { load_experts(bad); }).find("b.csv:2: confidence"), std::string::npos);
}

TEST(LoadExperts, AnchorValuesRoundTrip) {
  const std::vector<std::pair<std::string, double>> anchor{
      {"Clozapine", -27.8},    {"Olanzapine", -21.2},   {"Risperidone", -21.0}, {"Paliperidone", -19.8},
      {"Haloperidol", -19.4},  {"Loxapine", -19.0},     {"Quetiapine", -18.4},  {"Molindone", -18.4},
      {"Aripiprazole", -18.2}, {"Ziprasidone", -18.2},  {"Asenapine", -17.8},   {"Lurasidone", -17.2},
      {"Fluphenazine", -14.8}, {"Trifluoperazine", -14.8}, {"Placebo", -10.0}};
  const auto e = load_experts(kData / "appendix1_anchor.csv");
  ASSERT_EQ(e.size(), anchor.size());
  TempDir dir;
  std::string text = "expert_id,treatment,expected_change,sd,confidence\n";
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_EQ(e[i].treatment, anchor[i].first);
    EXPECT_EQ(e[i].expected_change, anchor[i].second);
    text += csv::join({e[i].expert_id, e[i].treatment, format_number(e[i].expected_change, -1),
                       format_number(e[i].sd, -1), std::to_string(e[i].confidence)});
  }
  const auto back = load_experts(dir.write("rt.csv", text));
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(back[i].expected_change, anchor[i].second);
}

TEST(FormatNumber, FixedAndFull) {
  EXPECT_EQ(format_number(0.1234567, 3), "0.123");
  EXPECT_EQ(format_number(-0.0004, 3), "0.000");
  EXPECT_EQ(format_number(-0.431, 3), "-0.431");
  EXPECT_EQ(format_number(bayes_p(0.94), 2), "0.12");
  EXPECT_EQ(format_number(0.1, -1), "0.10000000000000001");
  for (double v : {0.1, -27.8, 1.0 / 3.0, 6.02e23, -1e-300}) EXPECT_EQ(std::stod(format_number(v, -1)), v);
}

TEST(ModelChoice, NineVariantsRoundTrip) {
  const auto all = ModelChoice::all();
  ASSERT_EQ(all.size(), 9u);
  std::set<std::string> names;
  for (const auto& m : all) {
    names.insert(m.name());
    EXPECT_EQ(ModelChoice::parse(m.name()).name(), m.name());
  }
  EXPECT_EQ(names.size(), 9u);
  EXPECT_TRUE(names.count("borrow:expert:nct_dw"));
  EXPECT_THROW(ModelChoice::parse("borrow:guess:no_dw"), Error);
}

TEST(ScalePriorText, ParseAndDescribe) {
  EXPECT_EQ(parse_scale_prior("beta(3,3)"), ScalePrior::beta(3, 3));
  EXPECT_EQ(parse_scale_prior("uniform(0.2, 1)"), ScalePrior::uniform(0.2, 1.0));
  EXPECT_EQ(parse_scale_prior("fixed(1e-6)"), ScalePrior::fixed(1e-6));
  for (const auto& p : {ScalePrior::beta(2, 5), ScalePrior::uniform(0.1, 0.9), ScalePrior::fixed(0.5)})
    EXPECT_EQ(parse_scale_prior(p.describe()), p);
  EXPECT_THROW(parse_scale_prior("gamma(1,1)"), Error);
  EXPECT_THROW(parse_scale_prior("beta(x,1)"), Error);
}

TEST(AnalysisConfig, TextRoundTrip) {
  AnalysisConfig c;
  c.model = ModelChoice::parse("borrow:expert:rob_dw");
  c.studies = "a.csv";
  c.experts = "e.csv";
  c.reference = "Placebo";
  c.weight_prior = ScalePrior::uniform(0.2, 1.0);
  c.tau_scale = 0.5;
  c.direction = Direction::higher_better;
  c.rounding = Rounding::full;
  c.sampler.seed = 18446744073709551615ull;
  c.sampler.iterations = 1234;
  c.sampler.burn_in = 234;
  c.node_split = true;
  const auto text = c.to_text();
  const auto back = AnalysisConfig::parse(text);
  EXPECT_EQ(back.to_text(), text);
  EXPECT_EQ(back.sampler.seed, c.sampler.seed);
  EXPECT_EQ(back.weight_prior, c.weight_prior);
}

TEST(AnalysisConfig, Errors) {
  EXPECT_NE(expect_error([] { AnalysisConfig::parse("model = standard\ncolour = red\n", "x.cfg"); })
                .find("x.cfg:2: unknown key 'colour'"),
            std::string::npos);
  EXPECT_NE(expect_error([] { AnalysisConfig::parse("seed = 1\nseed = 2\n", "x.cfg"); }).find("x.cfg:2: duplicate key"),
            std::string::npos);
  EXPECT_NE(expect_error([] { AnalysisConfig::parse("chains = two\n", "x.cfg"); }).find("x.cfg:1:"), std::string::npos);
  EXPECT_NE(expect_error([] { AnalysisConfig::parse("model = fancy\n", "x.cfg"); }).find("x.cfg:1: unknown model"),
            std::string::npos);
  EXPECT_THROW(AnalysisConfig::parse("just text\n"), Error);
  AnalysisConfig c;
  EXPECT_THROW(c.validate(), Error);
  c.studies = "s.csv";
  c.reference = "Pbo";
  EXPECT_NO_THROW(c.validate());
  c.model = ModelChoice::parse("borrow:expert:no_dw");
  EXPECT_THROW(c.validate(), Error);
}

TEST(AnalysisConfig, RelativePathsResolveAgainstConfig) {
  TempDir dir;
  fs::create_directories(dir.path() / "cfg");
  const auto p = dir.write("cfg/a.cfg", "studies = data/s.csv\nexperts = /abs/e.csv\nreference = Pbo\n");
  const auto c = AnalysisConfig::load(p);
  EXPECT_EQ(c.studies, (dir.path() / "cfg" / "data" / "s.csv").string());
  EXPECT_EQ(c.experts, "/abs/e.csv");
}

TEST(PriorCsv, RoundTripAtFullPrecision) {
  std::map<std::string, PredictivePrior> pp{{"A", {-0.123456789012345, 0.0456, PriorSource::data}},
                                            {"B", {0.0, 10000.0, PriorSource::fallback}}};
  TempDir dir;
  const auto p = dir.write("pp.csv", predictive_priors_csv(pp, "Pbo"));
  const auto back = load_prior_csv(p, "Pbo");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.at("A").mean, pp.at("A").mean);
  EXPECT_EQ(back.at("A").variance, pp.at("A").variance);
  EXPECT_EQ(back.at("B").source, PriorSource::fallback);
  EXPECT_THROW(load_prior_csv(p, "Placebo"), Error);

  BetaPriorSet set;
  set.reference = "Pbo";
  set.priors["A"] = {NormalPrior{0.2, 0.01}, PriorSource::expert};
  EXPECT_EQ(beta_priors_csv(set), "comparison,mean,variance,source\nA vs Pbo,0.20000000000000001,0.01,expert\n");
}

TEST(RunAnalysis, StandardOnSingleStudy) {
  TempDir dir;
  const auto s = dir.write("s.csv", studies_header() + "1,P1,Pbo,40,0,1,0\n1,P1,A,40,-0.5,1,0\n");
  const auto b = run_analysis(quick(s, "standard", dir.path() / "out"));
  ASSERT_TRUE(b.league.has_value());
  EXPECT_EQ(b.league->cells.size(), 2u);
  ASSERT_EQ(b.sucra.size(), 2u);
  EXPECT_NEAR(b.sucra[0].second + b.sucra[1].second, 1.0, 1e-12);
}

TEST(RunAnalysis, MissingSubgroupIsAnError) {
  TempDir dir;
  const auto s = dir.write("s.csv", studies_header() + "1,P1,Pbo,40,0,1,0\n1,P1,A,40,-0.5,1,0\n");
  EXPECT_NE(expect_error([&] { run_analysis(quick(s, "naive", dir.path() / "out")); }).find("'P2'"), std::string::npos);
}

TEST(EmitReport, CaShapedStandardFit) {
  TempDir dir;
  auto cfg = quick(kData / "ca_shaped.csv", "standard", dir.path() / "out");
  cfg.reference = "Placebo";
  const auto b = run_analysis(cfg);
  emit_report(b, dir.path() / "out");
  const auto league = csv::parse(csv::read_file(dir.path() / "out" / "league_table.csv"));
  ASSERT_EQ(league.size(), 16u);
  for (std::size_t r = 0; r < league.size(); ++r) {
    ASSERT_EQ(league[r].fields.size(), 16u);
    if (r > 0) {
      EXPECT_EQ(league[r].fields[r], "");
      for (std::size_t c = 1; c < 16; ++c)
        if (c != r) {
          EXPECT_FALSE(league[r].fields[c].empty());
        }
    }
  }
  EXPECT_EQ(csv::read_file(dir.path() / "out" / "consistency.csv"), "comparison,direct,indirect,difference,P,p_value\n");
  const auto sucra = csv::parse(csv::read_file(dir.path() / "out" / "sucra.csv"));
  EXPECT_EQ(sucra.size(), 16u);
  for (const auto* f : {"summaries.csv", "rank_probabilities.csv", "convergence.csv", "warnings.txt", "manifest.cfg"})
    EXPECT_TRUE(fs::exists(dir.path() / "out" / f)) << f;
  EXPECT_FALSE(fs::exists(dir.path() / "out" / "beta_priors.csv"));
}

TEST(EmitReport, DeterministicAndReplayable) {
  TempDir dir;
  const auto s = dir.write("s.csv", small_two_subgroup_file(8));
  auto cfg = quick(s, "borrow:data:no_dw", dir.path() / "a");
  cfg.node_split = true;
  emit_report(run_analysis(cfg), dir.path() / "a");
  emit_report(run_analysis(cfg), dir.path() / "b");
  const auto a = report_files(dir.path() / "a");
  EXPECT_EQ(a, report_files(dir.path() / "b"));
  EXPECT_TRUE(a.count("beta_priors.csv"));
  EXPECT_TRUE(a.count("predictive_priors.csv"));
  EXPECT_GE(csv::parse(a.at("consistency.csv")).size(), 2u);

  const auto replay = AnalysisConfig::load(dir.path() / "a" / "manifest.cfg");
  EXPECT_EQ(replay.to_text(), cfg.to_text());
  emit_report(run_analysis(replay), dir.path() / "c");
  EXPECT_EQ(a, report_files(dir.path() / "c"));
}

TEST(EmitReport, ConvergenceGateWritesDiagnosticsOnly) {
  ReportBundle b;
  b.config.reference = "Pbo";
  PosteriorSamples s(SamplerConfig{}, 2, 100);
  std::vector<double> v(200);
  for (std::size_t i = 0; i < 200; ++i) v[i] = i < 100 ? 0.001 * static_cast<double>(i % 7) : 5.0 + 0.001 * (i % 5);
  s.add("mu[A]", v);
  detail::collect(b, "fit", std::move(s));
  EXPECT_FALSE(b.converged);
  EXPECT_GT(b.max_rhat, 1.5);
  TempDir dir;
  emit_report(b, dir.path());
  const auto files = report_files(dir.path());
  EXPECT_EQ(files.size(), 3u);
  EXPECT_TRUE(files.count("convergence.csv"));
  EXPECT_NE(files.at("convergence.csv").find("not converged"), std::string::npos);
  EXPECT_NE(files.at("manifest.cfg").find("# converged = false"), std::string::npos);

  b.config.allow_unconverged = true;
  TempDir dir2;
  emit_report(b, dir2.path());
  EXPECT_TRUE(fs::exists(dir2.path() / "summaries.csv"));
}

TEST(RunAnalysis, SelfBorrowingGivesNullShift) {
  // the sparse network borrows from itself: every data-based shift centres on zero
  TempDir dir;
  std::mt19937_64 rng(12);
  auto d = nmab_test::star("Pbo", {"A", "B"}, 2, 80);
  d.push_back({{"A", "B"}, 80});
  const auto net = nmab_test::simulate("P1", d, nmab_test::Truth{{{"A", -0.4}, {"B", -0.2}}, 0.1}, "Pbo", rng);
  const auto s = dir.write("s.csv", studies_header() + rows_of(net));
  auto cfg = quick(s, "borrow:data:no_dw", dir.path() / "out");
  cfg.dense_label = "P1";
  cfg.sampler.iterations = 20000;
  cfg.sampler.burn_in = 5000;
  const auto b = run_analysis(cfg);
  ASSERT_TRUE(b.beta_priors.has_value());
  ASSERT_EQ(b.beta_priors->priors.size(), 2u);
  for (const auto& [t, p] : b.beta_priors->priors) {
    EXPECT_EQ(p.source, PriorSource::data);
    EXPECT_LT(std::abs(p.prior.mean), 0.15 * std::sqrt(p.prior.variance)) << t;
  }
}

TEST(Hex64, Padded) { EXPECT_EQ(hex64(0xabcull), "0000000000000abc"); }

TEST(ComparisonFileStem, SafeCharacters) { EXPECT_EQ(comparison_file_stem("B vs A/x"), "B_vs_A_x"); }
