// nmab: command-line front end.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "nmaborrow/io.hpp"

namespace fs = std::filesystem;
using namespace nmaborrow;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<int> chains;
  std::optional<int> iterations;
  std::optional<int> burn_in;
  std::optional<std::string> out;
  bool allow_unconverged = false;
};

AnalysisConfig load_config(const std::string& path, const std::string& model, const Globals& g) {
  auto cfg = AnalysisConfig::load(path);
  if (!model.empty()) cfg.model = ModelChoice::parse(model);
  if (g.seed) cfg.sampler.seed = *g.seed;
  if (g.chains) cfg.sampler.n_chains = *g.chains;
  if (g.iterations) cfg.sampler.iterations = *g.iterations;
  if (g.burn_in) cfg.sampler.burn_in = *g.burn_in;
  if (g.out) cfg.out = *g.out;
  if (g.allow_unconverged) cfg.allow_unconverged = true;
  return cfg;
}

int report(const ReportBundle& b) {
  emit_report(b, b.config.out);
  for (const auto& w : b.warnings) std::cerr << "warning: " << w << "\n";
  if (!b.converged && !b.config.allow_unconverged) {
    std::cerr << "error: not converged (max split R-hat " << b.max_rhat
              << "); only the convergence report was written to " << b.config.out
              << ". Rerun with more iterations or --allow-unconverged.\n";
    return 3;
  }
  std::cout << "wrote " << b.config.out << "\n";
  return 0;
}

void describe(const Network& net) {
  const auto comps = connectivity(net);
  std::cout << "subgroup " << net.subgroup() << ": " << net.studies().size() << " studies, " << net.treatments().size()
            << " treatments, " << direct_comparisons(net).size() << " direct comparisons, "
            << (comps.size() == 1 ? std::string("connected") : "disconnected: " + describe_components(comps)) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian network meta-analysis with borrowing from a dense network"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Sampler seed");
  app.add_option("--chains", g.chains, "Number of chains");
  app.add_option("--iters", g.iterations, "Iterations per chain, burn-in included");
  app.add_option("--burn-in", g.burn_in, "Burn-in iterations");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--allow-unconverged", g.allow_unconverged, "Write results even when R-hat >= 1.1");

  std::string config, model;
  auto* fit = app.add_subcommand("fit", "Fit one model and write the full report");
  fit->add_option("--config,-c", config, "Analysis config file")->required();
  fit->add_option("--model", model, "Override the config's model");

  auto* split = app.add_subcommand("node-split", "Node-splitting consistency table");
  std::string subgroup, comparison;
  split->add_option("--config,-c", config, "Analysis config file")->required();
  split->add_option("--subgroup", subgroup, "Subgroup to analyse (default: the sparse one)");
  split->add_option("--comparison", comparison, "Only this comparison, as 'T vs V'");

  auto* priors = app.add_subcommand("priors", "Beta priors and stage-2 predictive priors of a borrowing model");
  priors->add_option("--config,-c", config, "Analysis config file")->required();
  priors->add_option("--model", model, "Override the config's model");

  auto* rank = app.add_subcommand("rank", "Rank probabilities, SUCRA and league table");
  rank->add_option("--config,-c", config, "Analysis config file")->required();
  rank->add_option("--model", model, "Override the config's model");

  auto* validate = app.add_subcommand("validate", "Check input files and describe the networks");
  std::string studies, experts, reference;
  validate->add_option("--config,-c", config, "Analysis config file");
  validate->add_option("--studies", studies, "Arm-level study CSV");
  validate->add_option("--experts", experts, "Expert response CSV");
  validate->add_option("--reference", reference, "Reference treatment");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fit->parsed()) return report(run_analysis(load_config(config, model, g)));

    if (rank->parsed()) {
      auto cfg = load_config(config, model, g);
      if (cfg.model.kind == ModelChoice::Kind::pairwise) throw Error("ranking needs a network model, not pairwise");
      auto b = run_analysis(cfg);
      const auto p = Precision::of(cfg.rounding);
      fs::create_directories(cfg.out);
      write_text(fs::path(cfg.out) / "convergence.csv", convergence_csv(b));
      if (!b.converged && !cfg.allow_unconverged) return report(b);
      write_text(fs::path(cfg.out) / "sucra.csv", sucra_csv(b, p.sucra));
      write_text(fs::path(cfg.out) / "rank_probabilities.csv", rank_csv(b, p.sucra));
      write_text(fs::path(cfg.out) / "league_table.csv", league_csv(b, p.league));
      for (const auto& [t, s] : b.sucra) std::printf("%-24s %s\n", t.c_str(), format_number(s, 3).c_str());
      return 0;
    }

    if (priors->parsed()) {
      auto cfg = load_config(config, model, g);
      if (cfg.model.kind != ModelChoice::Kind::borrow) throw Error("'priors' needs a borrow:<source>:<scheme> model");
      cfg.validate();
      const auto in = load_inputs(cfg);
      const auto sets = treatment_sets(in.dense, in.sparse);
      const auto betas = build_beta_priors(cfg, in, sets);
      const auto weighted = assign_weights(in.dense, sets, {cfg.model.scheme, cfg.weight_prior});
      const auto stage1 = fit_stage1(weighted, betas, TauPrior{cfg.tau_scale}, cfg.sampler);
      const auto pp = predictive_priors(stage1, betas, in.sparse);
      fs::create_directories(cfg.out);
      write_text(fs::path(cfg.out) / "beta_priors.csv", beta_priors_csv(betas));
      write_text(fs::path(cfg.out) / "predictive_priors.csv", predictive_priors_csv(pp, cfg.reference));
      for (const auto& n : betas.notes) std::cerr << "note: " << n << "\n";
      std::cout << "wrote " << cfg.out << "\n";
      return 0;
    }

    if (split->parsed()) {
      auto cfg = load_config(config, "", g);
      cfg.validate();
      const auto label = subgroup.empty() ? cfg.sparse_label : subgroup;
      const auto net = network_for(load_studies(cfg.studies), label, cfg.reference);
      std::vector<NodeSplitResult> rows;
      const TauPrior tp{cfg.tau_scale};
      if (!comparison.empty()) {
        const auto at = comparison.find(" vs ");
        if (at == std::string::npos) throw Error("--comparison must look like 'T vs V'");
        const auto t = comparison.substr(0, at), v = comparison.substr(at + 4);
        rows.push_back(node_split(net, t, v, MuPrior{}, tp, with_stream(cfg.sampler, "split:" + t + ":" + v)));
      } else {
        for (const auto& [t, v] : splittable_comparisons(net))
          rows.push_back(node_split(net, t, v, MuPrior{}, tp, with_stream(cfg.sampler, "split:" + t + ":" + v)));
      }
      const auto p = Precision::of(cfg.rounding);
      fs::create_directories(fs::path(cfg.out) / "consistency_draws");
      write_text(fs::path(cfg.out) / "consistency.csv", consistency_csv(rows, p.consistency));
      for (const auto& r : rows)
        write_text(fs::path(cfg.out) / "consistency_draws" / (comparison_file_stem(r.label()) + ".csv"),
                   density_pairs_csv(r));
      std::cout << consistency_csv(rows, p.consistency);
      return 0;
    }

    if (validate->parsed()) {
      if (!config.empty()) {
        const auto cfg = AnalysisConfig::load(config);
        cfg.validate();
        const auto in = load_inputs(cfg);
        describe(in.sparse);
        if (!in.dense.empty()) describe(in.dense);
        if (!cfg.experts.empty()) std::cout << in.experts.size() << " expert responses\n";
        std::cout << "config ok: model " << cfg.model.name() << "\n";
        return 0;
      }
      if (studies.empty()) throw Error("validate needs --config or --studies");
      const auto all = load_studies(studies);
      std::set<std::string> labels;
      for (const auto& s : all) labels.insert(s.subgroup);
      for (const auto& l : labels) {
        std::string ref = reference;
        if (ref.empty())
          for (const auto& s : all)
            if (s.subgroup == l) {
              ref = s.arms[0].treatment;
              break;
            }
        describe(network_for(all, l, ref));
      }
      if (!experts.empty()) std::cout << load_experts(experts).size() << " expert responses\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
