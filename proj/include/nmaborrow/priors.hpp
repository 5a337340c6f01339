// Priors for the location shifts beta_1j, from data or from expert opinion.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "nmaborrow/borrowing.hpp"
#include "nmaborrow/core.hpp"
#include "nmaborrow/distributions.hpp"
#include "nmaborrow/mcmc.hpp"

namespace nmaborrow {

/// SMD of `treatment` versus `versus` in one study, with the large-sample
/// variance (n1 + n2)/(n1 n2) + smd^2 / (2 (n1 + n2)).
struct StudySmd {
  double smd = 0.0;
  double variance = 0.0;
};

inline StudySmd study_smd(const Study& s, const std::string& versus, const std::string& treatment) {
  const auto a = s.arm_index(versus);
  const auto b = s.arm_index(treatment);
  if (!a || !b) throw Error("study '" + s.id + "' does not compare " + treatment + " and " + versus);
  const auto& x = s.arms[*a];
  const auto& y = s.arms[*b];
  const double smd = (y.mean - x.mean) / pooled_sd(s);
  const double n1 = x.n, n2 = y.n;
  return {smd, (n1 + n2) / (n1 * n2) + smd * smd / (2.0 * (n1 + n2))};
}

/// Normal-normal model over groups sharing one heterogeneity SD:
/// obs ~ N(scale * u_g, v + scale^2 sigma^2), u_g ~ N(0, 10000),
/// sigma ~ HN(tau_prior.scale).
class SharedHeterogeneityModel {
 public:
  struct Observation {
    double value;
    double variance;
  };
  struct Group {
    std::string label;  // parameter name of u_g
    std::vector<Observation> obs;
  };

  SharedHeterogeneityModel(std::vector<Group> groups, double scale, TauPrior tau_prior, std::string sigma_name = "sigma")
      : groups_(std::move(groups)), scale_(scale), tau_prior_(tau_prior) {
    const std::size_t g = groups_.size();
    mcmc::ParameterBlock u{"u", g, mcmc::Support::unbounded(), {}, {}, {}, true};
    for (const auto& grp : groups_) {
      if (grp.obs.empty()) throw Error("group '" + grp.label + "' has no observations");
      double sum = 0.0, var = 0.0;
      for (const auto& o : grp.obs) {
        if (!(o.variance > 0.0)) throw Error("group '" + grp.label + "': observation variance must be positive");
        sum += o.value;
        var += o.variance;
      }
      const double n = static_cast<double>(grp.obs.size());
      u.initial.push_back(sum / n / scale_);
      u.scale.push_back(std::sqrt(var / n) / scale_);
      u.labels.push_back(grp.label);
    }
    blocks_.push_back(std::move(u));
    blocks_.push_back({"sigma", 1, mcmc::Support::positive(), {std::min(0.1, tau_prior_.scale)}, {0.5}, {sigma_name}, true});
    // factors: groups [0, g), u priors [g, 2g), sigma prior 2g
    deps_.resize(g + 1);
    for (std::size_t i = 0; i < g; ++i) {
      deps_[i] = {i, g + i};
      deps_[g].push_back(i);
    }
    deps_[g].push_back(2 * g);
  }

  const std::vector<mcmc::ParameterBlock>& blocks() const { return blocks_; }
  std::size_t factor_count() const { return 2 * groups_.size() + 1; }
  std::span<const std::size_t> factors_of(std::size_t c) const { return deps_[c]; }

  double factor_log_density(std::size_t f, std::span<const double> x) const {
    const std::size_t g = groups_.size();
    const double sigma = x[g];
    if (f < g) {
      const double mean = scale_ * x[f];
      const double extra = scale_ * scale_ * sigma * sigma;
      double lp = 0.0;
      for (const auto& o : groups_[f].obs) lp += log_normal_pdf(o.value, mean, o.variance + extra);
      return lp;
    }
    if (f < 2 * g) return NormalPrior{}.log_density(x[f - g]);
    return tau_prior_.log_density(sigma);
  }

  PosteriorSamples sample(const SamplerConfig& config) const { return mcmc::run_chains(*this, blocks_, config); }

 private:
  std::vector<Group> groups_;
  double scale_;
  TauPrior tau_prior_;
  std::vector<mcmc::ParameterBlock> blocks_;
  std::vector<std::vector<std::size_t>> deps_;
};

static_assert(mcmc::FactorTarget<SharedHeterogeneityModel>);

inline std::vector<SharedHeterogeneityModel::Observation> comparison_smds(const Network& net, const std::string& versus,
                                                                           const std::string& treatment) {
  std::vector<SharedHeterogeneityModel::Observation> out;
  for (const auto& s : net.studies())
    if (s.has(versus) && s.has(treatment)) {
      const auto e = study_smd(s, versus, treatment);
      out.push_back({e.smd, e.variance});
    }
  return out;
}

inline SamplerConfig with_stream(SamplerConfig config, const std::string& key) {
  config.seed = fnv1a(key, config.seed);
  return config;
}

/// Random-effects pairwise meta-analysis of `treatment` vs `versus`.
/// Parameters: "u" (pooled SMD) and "sigma".
inline PosteriorSamples pairwise_meta_analysis(const Network& net, const std::string& versus,
                                               const std::string& treatment, const TauPrior& tau_prior,
                                               const SamplerConfig& config) {
  auto obs = comparison_smds(net, versus, treatment);
  if (obs.empty()) throw Error("no studies compare " + treatment + " and " + versus);
  SharedHeterogeneityModel model({{"u", std::move(obs)}}, 1.0, tau_prior);
  return model.sample(config);
}

/// N(mean, var) of u2 - u1 draw by draw.
inline NormalPrior difference_prior(std::span<const double> u2, std::span<const double> u1) {
  const std::size_t n = std::min(u1.size(), u2.size());
  if (n < 2) throw Error("difference_prior: need at least 2 draws");
  std::vector<double> d(n);
  for (std::size_t s = 0; s < n; ++s) d[s] = u2[s] - u1[s];
  const auto sum = mcmc::summarize(d);
  return NormalPrior{sum.mean, sum.sd * sum.sd};
}

struct PairwiseResult {
  std::string reference;
  std::string treatment;
  double u_p1 = 0.0;
  double u_p2 = 0.0;
  double var_u_p1 = 0.0;
  double var_u_p2 = 0.0;
  double sigma = 0.0;
  double d_mean = 0.0;  // posterior mean of u_p2 - u_p1
  double d_var = 0.0;
  PosteriorSamples samples;  // u_p1, u_p2, sigma, d
};

/// Joint pairwise meta-analysis of comparison {reference, treatment} in both
/// subgroups with one shared heterogeneity SD.
inline PairwiseResult pairwise_ma_shared_het(const Network& sparse, const Network& dense, const std::string& reference,
                                             const std::string& treatment, const TauPrior& tau_prior,
                                             const SamplerConfig& config) {
  auto p1 = comparison_smds(sparse, reference, treatment);
  auto p2 = comparison_smds(dense, reference, treatment);
  if (p1.empty() || p2.empty())
    throw Error("comparison " + treatment + " vs " + reference + " lacks evidence in " +
                (p1.empty() ? sparse.subgroup() : dense.subgroup()) + ": fallback to non-informative");
  SharedHeterogeneityModel model({{"u_p1", std::move(p1)}, {"u_p2", std::move(p2)}}, 1.0, tau_prior);
  PairwiseResult r;
  r.reference = reference;
  r.treatment = treatment;
  r.samples = model.sample(config);
  r.samples.derive("d", {"u_p2", "u_p1"}, [](std::span<const double> v) { return v[0] - v[1]; });
  const auto s1 = mcmc::summarize(r.samples, "u_p1");
  const auto s2 = mcmc::summarize(r.samples, "u_p2");
  const auto sd = mcmc::summarize(r.samples, "d");
  r.u_p1 = s1.mean;
  r.u_p2 = s2.mean;
  r.var_u_p1 = s1.sd * s1.sd;
  r.var_u_p2 = s2.sd * s2.sd;
  r.sigma = mcmc::summarize(r.samples, "sigma").mean;
  r.d_mean = sd.mean;
  r.d_var = sd.sd * sd.sd;
  return r;
}

/// beta_1j ~ N(d, var(d)) with d = u_p2 - u_p1 from the joint pairwise
/// model, for every common treatment j; N(0, 10000) where either subgroup
/// lacks direct evidence on {1, j}.
inline BetaPriorSet data_based_beta_priors(const Network& sparse, const Network& dense, const TreatmentSets& sets,
                                           const TauPrior& tau_prior, const SamplerConfig& config) {
  BetaPriorSet out;
  out.reference = sparse.reference();
  for (const auto& t : sets.t_c) {
    if (t == out.reference) continue;
    const bool in_p1 = !comparison_smds(sparse, out.reference, t).empty();
    const bool in_p2 = !comparison_smds(dense, out.reference, t).empty();
    if (!in_p1 || !in_p2) {
      out.priors[t] = {NormalPrior{}, PriorSource::fallback};
      out.notes.push_back(t + " vs " + out.reference + ": no direct evidence in " +
                          (in_p2 ? sparse.subgroup() : dense.subgroup()) + ", non-informative beta prior");
      continue;
    }
    const auto r = pairwise_ma_shared_het(sparse, dense, out.reference, t, tau_prior, with_stream(config, t));
    out.priors[t] = {NormalPrior{r.d_mean, r.d_var}, PriorSource::data};
  }
  return out;
}

struct ExpertResponse {
  std::string expert_id;
  std::string treatment;
  double expected_change = 0.0;  // outcome units
  double sd = 0.0;
  int confidence = 10;  // 1..10

  /// Weight of the expert's opinion: confidence / 10.
  double gamma() const { return confidence / 10.0; }
};

struct ExpertPoolResult {
  std::string reference;
  std::vector<std::string> treatments;  // covered treatments, lexicographic
  PosteriorSamples samples;             // xi[t], sigma, u[t] = xi[t] - xi[reference]
  std::vector<std::string> warnings;

  bool covers(const std::string& t) const { return std::find(treatments.begin(), treatments.end(), t) != treatments.end(); }
};

inline std::string xi_name(const std::string& t) { return "xi[" + t + "]"; }
inline std::string u_name(const std::string& t) { return "u[" + t + "]"; }

/// Median of the studies' pooled SDs.
inline double median_pooled_sd(const Network& net) {
  std::vector<double> v;
  for (const auto& s : net.studies()) v.push_back(pooled_sd(s));
  if (v.empty()) throw Error("median pooled SD of an empty network");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Pools elicited change scores: x_hj ~ N(c_hj, sd_hj^2 / gamma_h),
/// c_hj / med_pooled_sd ~ N(xi_j, sigma^2). Rows repeating an
/// (expert, treatment) pair are repeated measurements of the same c_hj.
inline ExpertPoolResult pool_experts(const std::vector<ExpertResponse>& responses, const std::string& reference,
                                     double med_pooled_sd, const SamplerConfig& config,
                                     const TauPrior& sigma_prior = TauPrior{1.0}) {
  if (!(med_pooled_sd > 0.0)) throw Error("median pooled SD must be positive");
  // (treatment -> expert -> (precision, precision-weighted sum))
  std::map<std::string, std::map<std::string, std::pair<double, double>>> acc;
  for (const auto& r : responses) {
    if (!(r.sd > 0.0)) throw Error("expert '" + r.expert_id + "': sd must be positive for " + r.treatment);
    if (r.confidence < 1 || r.confidence > 10)
      throw Error("expert '" + r.expert_id + "': confidence must lie in 1..10");
    const double prec = r.gamma() / (r.sd * r.sd);
    auto& cell = acc[r.treatment][r.expert_id];
    cell.first += prec;
    cell.second += prec * r.expected_change;
  }
  if (!acc.count(reference)) throw Error("no expert responses for the reference treatment '" + reference + "'");

  ExpertPoolResult out;
  out.reference = reference;
  std::vector<SharedHeterogeneityModel::Group> groups;
  for (const auto& [t, experts] : acc) {
    SharedHeterogeneityModel::Group g{xi_name(t), {}};
    for (const auto& [id, cell] : experts) g.obs.push_back({cell.second / cell.first, 1.0 / cell.first});
    groups.push_back(std::move(g));
    out.treatments.push_back(t);
  }
  SharedHeterogeneityModel model(std::move(groups), med_pooled_sd, sigma_prior);
  out.samples = model.sample(config);
  for (const auto& t : out.treatments)
    out.samples.derive(u_name(t), {xi_name(t), xi_name(reference)},
                       [](std::span<const double> v) { return v[0] - v[1]; });
  return out;
}

/// Same as pool_experts, reporting treatments in `expected` that no expert
/// rated (they are left out of the pool).
inline ExpertPoolResult pool_experts(const std::vector<ExpertResponse>& responses, const std::string& reference,
                                     double med_pooled_sd, const std::vector<std::string>& expected,
                                     const SamplerConfig& config, const TauPrior& sigma_prior = TauPrior{1.0}) {
  auto out = pool_experts(responses, reference, med_pooled_sd, config, sigma_prior);
  for (const auto& t : expected)
    if (!out.covers(t)) out.warnings.push_back("no expert responses for '" + t + "': excluded from the pool");
  return out;
}

/// beta_1j ~ N(mean, var) of u_p2 - u_p1(expert), where u_p2 comes from a
/// pairwise meta-analysis of the dense network. N(0, 10000) where experts or
/// the dense network give no information on {1, j}.
inline BetaPriorSet expert_beta_priors(const ExpertPoolResult& pool, const Network& dense, const TreatmentSets& sets,
                                       const TauPrior& tau_prior, const SamplerConfig& config) {
  BetaPriorSet out;
  out.reference = pool.reference;
  for (const auto& t : sets.t_c) {
    if (t == out.reference) continue;
    const bool dense_direct = !comparison_smds(dense, out.reference, t).empty();
    if (!pool.covers(t) || !dense_direct) {
      out.priors[t] = {NormalPrior{}, PriorSource::fallback};
      out.notes.push_back(t + " vs " + out.reference + ": " +
                          (pool.covers(t) ? "no direct evidence in " + dense.subgroup() : std::string("no expert responses")) +
                          ", non-informative beta prior");
      continue;
    }
    const auto ma = pairwise_meta_analysis(dense, out.reference, t, tau_prior, with_stream(config, t));
    out.priors[t] = {difference_prior(ma.pooled("u"), pool.samples.pooled(u_name(t))), PriorSource::expert};
  }
  return out;
}

}  // namespace nmaborrow
