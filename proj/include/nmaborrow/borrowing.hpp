// Two-stage borrowing from a dense network into a sparse one.
//
// Stage 1 fits the dense network with per-study variance inflation w_i and
// extrapolates its summary effects through location shifts beta:
// mu* = mu_dense - beta. Predictive draws mu_new ~ N(mu*, tau_dense^2) are
// moment-matched into normal priors for the basic parameters of stage 2, a
// standard NMA of the sparse network.
#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "nmaborrow/core.hpp"
#include "nmaborrow/distributions.hpp"
#include "nmaborrow/nma.hpp"

namespace nmaborrow {

struct WeightScheme {
  enum class Kind { none, rob, non_common_treatment };
  Kind kind = Kind::none;
  ScalePrior prior = ScalePrior::beta(3.0, 3.0);
};

/// Dense network as used at stage 1 and the scale prior of each of its studies.
struct WeightedNetwork {
  Network network;
  std::vector<ScalePrior> weights;  // aligned with network.studies()
};

/// Applies a downweighting scheme.
///
/// none: keep studies whose treatments are all common, weights fixed(1).
/// rob: as none, but high risk-of-bias studies get the scheme prior.
/// non_common_treatment: keep every study; those with a treatment outside the
/// common set get the scheme prior.
inline WeightedNetwork assign_weights(const Network& dense, const TreatmentSets& sets, const WeightScheme& scheme) {
  auto all_common = [&](const Study& s) {
    return std::all_of(s.arms.begin(), s.arms.end(), [&](const Arm& a) { return sets.common(a.treatment); });
  };
  if (scheme.kind == WeightScheme::Kind::rob)
    for (const auto& s : dense.studies())
      if (!s.high_rob) throw Error("risk-of-bias downweighting: study '" + s.id + "' has no risk-of-bias flag");

  WeightedNetwork out;
  out.network = scheme.kind == WeightScheme::Kind::non_common_treatment ? dense : dense.filtered(all_common);
  for (const auto& s : out.network.studies()) {
    bool down = false;
    switch (scheme.kind) {
      case WeightScheme::Kind::none: break;
      case WeightScheme::Kind::rob: down = *s.high_rob; break;
      case WeightScheme::Kind::non_common_treatment: down = !all_common(s); break;
    }
    out.weights.push_back(down ? scheme.prior : ScalePrior::fixed(1.0));
  }
  return out;
}

enum class PriorSource { data, expert, fallback };

inline const char* to_string(PriorSource s) {
  switch (s) {
    case PriorSource::data: return "data";
    case PriorSource::expert: return "expert";
    case PriorSource::fallback: return "fallback";
  }
  return "";
}

inline PriorSource parse_prior_source(const std::string& s) {
  if (s == "data") return PriorSource::data;
  if (s == "expert") return PriorSource::expert;
  if (s == "fallback") return PriorSource::fallback;
  throw Error("unknown prior source '" + s + "'");
}

struct BetaPrior {
  NormalPrior prior;
  PriorSource source = PriorSource::fallback;
};

/// Priors on the location shifts beta_1j, keyed by treatment j.
struct BetaPriorSet {
  std::string reference;
  std::map<std::string, BetaPrior> priors;
  std::vector<std::string> notes;
};

struct PredictivePrior {
  double mean = 0.0;
  double variance = kNonInformativeVariance;
  PriorSource source = PriorSource::fallback;
};

inline std::string mu_star_name(const std::string& t) { return "mu_star[" + t + "]"; }
inline std::string beta_name(const std::string& t) { return "beta[" + t + "]"; }

/// Stage 1: weighted NMA of the dense network. Returns mu[t] (dense-network
/// effects), tau, beta[t], mu_star[t] = mu[t] - beta[t] for every treatment
/// with a beta prior, and w[study] for sampled weights.
inline PosteriorSamples fit_stage1(const WeightedNetwork& dense, const BetaPriorSet& beta_priors,
                                   const TauPrior& tau_prior, const SamplerConfig& config) {
  require_connected(dense.network);
  ModelSpec spec;
  spec.tau_prior = tau_prior;
  spec.weights = dense.weights;
  std::vector<std::string> shifted;
  for (const auto& [t, bp] : beta_priors.priors) {
    if (!dense.network.contains(t) || t == dense.network.reference()) continue;
    spec.shifts[t] = bp.prior;
    shifted.push_back(t);
  }
  auto samples = NmaModel(dense.network, spec).sample(config);
  for (const auto& t : shifted) {
    const auto& p = spec.shifts.at(t);
    if (p.degenerate()) {
      samples.add(beta_name(t), std::vector<double>(samples.n_chains() * samples.n_draws(), p.mean));
      const double b = p.mean;
      samples.derive(mu_star_name(t), {mu_name(t)}, [b](std::span<const double> v) { return v[0] - b; });
    } else {
      samples.derive(mu_star_name(t), {mu_name(t), beta_name(t)},
                     [](std::span<const double> v) { return v[0] - v[1]; });
    }
  }
  return samples;
}

/// Moment-matched normal for mu_new = mu* + tau * eps, simulated once per
/// retained stage-1 draw. The eps stream is derived from the stage-1 seed
/// and the treatment name, so results are reproducible per comparison.
inline PredictivePrior predictive_prior(const PosteriorSamples& stage1, const std::string& treatment,
                                        PriorSource source = PriorSource::data) {
  const auto name = mu_star_name(treatment);
  if (!stage1.has(name)) throw Error("stage-1 samples have no extrapolated effect for '" + treatment + "'");
  const auto mu_star = stage1.pooled(name);
  const auto tau = stage1.pooled("tau");
  std::mt19937_64 rng(fnv1a(treatment, stage1.config().seed ^ 0x9e3779b97f4a7c15ull));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> draws(mu_star.size());
  for (std::size_t s = 0; s < draws.size(); ++s) draws[s] = mu_star[s] + tau[s] * normal(rng);
  const auto sum = mcmc::summarize(draws);
  PredictivePrior p{sum.mean, sum.sd * sum.sd, source};
  if (!(p.variance > 0.0)) throw Error("degenerate predictive prior for '" + treatment + "'");
  return p;
}

/// Stage-2 priors for every basic parameter of the sparse network: the
/// predictive prior where stage 1 extrapolated the comparison from a data or
/// expert beta prior, N(0, 10000) otherwise.
inline std::map<std::string, PredictivePrior> predictive_priors(const PosteriorSamples& stage1,
                                                                const BetaPriorSet& beta_priors,
                                                                const Network& sparse) {
  std::map<std::string, PredictivePrior> out;
  for (const auto& t : sparse.basic_treatments()) {
    const auto it = beta_priors.priors.find(t);
    if (it == beta_priors.priors.end() || it->second.source == PriorSource::fallback || !stage1.has(mu_star_name(t))) {
      out[t] = PredictivePrior{};
      continue;
    }
    auto p = predictive_prior(stage1, t, it->second.source);
    out[t] = p;
  }
  return out;
}

/// Stage 2: NMA of the sparse network with the given priors; basic
/// parameters without an entry get N(0, 10000).
inline PosteriorSamples fit_stage2(const Network& sparse, const std::map<std::string, PredictivePrior>& priors,
                                   const TauPrior& tau_prior, const SamplerConfig& config) {
  MuPrior mp;
  for (const auto& t : sparse.basic_treatments()) {
    const auto it = priors.find(t);
    if (it != priors.end()) mp.priors[t] = NormalPrior{it->second.mean, it->second.variance};
  }
  return fit_standard_nma(sparse, mp, tau_prior, config);
}

}  // namespace nmaborrow
