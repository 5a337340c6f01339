// Arm-level random-effects network meta-analysis on the SMD scale.
//
// Observed arm means y_ik ~ N(theta_ik, sd_ik^2 / (n_ik w_i)). Relative to the
// study baseline arm, theta_ik = theta_i1 + sd_i^pooled * delta_ik, and the
// study contrasts delta_i ~ N(mu contrasts, Sigma) where Sigma has tau^2 on
// the diagonal and tau^2/2 off it. Basic parameters mu are effects of every
// treatment against the network reference; every other contrast follows by
// transitivity.
#pragma once

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nmaborrow/core.hpp"
#include "nmaborrow/distributions.hpp"
#include "nmaborrow/mcmc.hpp"

namespace nmaborrow {

using mcmc::PosteriorSamples;
using mcmc::PosteriorSummary;
using mcmc::SamplerConfig;

/// Normal priors on the basic parameters, keyed by treatment. Missing
/// treatments get N(0, 10000).
struct MuPrior {
  std::map<std::string, NormalPrior> priors;

  NormalPrior of(const std::string& treatment) const {
    const auto it = priors.find(treatment);
    return it == priors.end() ? NormalPrior{} : it->second;
  }
};

/// Centered view of the model state.
struct NmaState {
  std::vector<double> mu;                  // per basic treatment, in Network::basic_treatments() order
  double tau = 0.1;
  std::vector<std::vector<double>> theta;  // per study, per arm
  std::vector<std::vector<double>> delta;  // per study, per non-baseline arm
};

inline std::string mu_name(const std::string& treatment) { return "mu[" + treatment + "]"; }

namespace detail {

/// mu_{1t} for a treatment given the basic-parameter vector (0 for the reference).
inline double basic_effect(const Network& net, std::span<const double> mu, const std::string& t) {
  if (t == net.reference()) return 0.0;
  const auto& tr = net.treatments();
  std::size_t pos = 0;
  for (const auto& x : tr) {
    if (x == t) return mu[pos];
    if (x != net.reference()) ++pos;
  }
  throw Error("unknown treatment '" + t + "'");
}

/// Compound-symmetric correlation structure 0.5 I + 0.5 J of size m: its
/// symmetric square root is sqrt(0.5) I + c J.
inline double cs_sqrt_offdiag(std::size_t m) {
  const double md = static_cast<double>(m);
  return (std::sqrt(0.5 + 0.5 * md) - std::sqrt(0.5)) / md;
}

}  // namespace detail

/// Arm-level log-likelihood. `weights` (one per study, in (0, 1]) divide the
/// sampling variance; empty means every weight is 1.
inline double log_likelihood(const Network& network, const NmaState& state,
                             std::span<const double> weights = {}) {
  const auto& studies = network.studies();
  if (state.theta.size() != studies.size()) throw Error("log_likelihood: state does not match network");
  if (!weights.empty() && weights.size() != studies.size())
    throw Error("log_likelihood: one weight per study required");
  double total = 0.0;
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const auto& s = studies[i];
    const double w = weights.empty() ? 1.0 : weights[i];
    if (state.theta[i].size() != s.arms.size()) throw Error("log_likelihood: state does not match network");
    for (std::size_t k = 0; k < s.arms.size(); ++k) {
      const double var = s.arms[k].se2() / w;
      if (!(var > 0.0) || !std::isfinite(var)) throw Error("log_likelihood: non-positive variance");
      total += log_normal_pdf(s.arms[k].mean, state.theta[i][k], var);
    }
  }
  return total;
}

/// Log-density of N_m(0, tau^2 (0.5 I + 0.5 J)) at r, using the closed-form
/// inverse (I - J/(m+1)) * 2/tau^2 and determinant tau^(2m) (m+1)/2^m.
inline double log_cs_normal(std::span<const double> r, double tau) {
  if (!(tau > 0.0)) {
    for (double v : r)
      if (v != 0.0) return -INFINITY;
    return INFINITY;
  }
  const auto m = static_cast<double>(r.size());
  double ss = 0.0, sum = 0.0;
  for (double v : r) {
    ss += v * v;
    sum += v;
  }
  const double quad = 2.0 / (tau * tau) * (ss - sum * sum / (m + 1.0));
  const double log_det = 2.0 * m * std::log(tau) + std::log(m + 1.0) - m * std::log(2.0);
  return -0.5 * (m * std::log(2.0 * std::numbers::pi) + log_det + quad);
}

/// Sum over studies of the multivariate normal log-density of the study
/// contrasts around the basic-parameter contrasts.
inline double log_random_effects(const Network& network, const NmaState& state) {
  const auto& studies = network.studies();
  if (state.delta.size() != studies.size()) throw Error("log_random_effects: state does not match network");
  if (!(state.tau > 0.0)) throw Error("log_random_effects: tau must be positive");
  double total = 0.0;
  std::vector<double> r;
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const auto& s = studies[i];
    r.clear();
    const double base = detail::basic_effect(network, state.mu, s.arms[0].treatment);
    for (std::size_t k = 1; k < s.arms.size(); ++k)
      r.push_back(state.delta[i][k - 1] - (detail::basic_effect(network, state.mu, s.arms[k].treatment) - base));
    total += log_cs_normal(r, state.tau);
  }
  return total;
}

/// Study contrasts implied by arm means: delta_1k = (theta_k - theta_1) / sd_pooled.
inline std::vector<std::vector<double>> contrasts_from_theta(const Network& network,
                                                              const std::vector<std::vector<double>>& theta) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < network.studies().size(); ++i) {
    const double sp = pooled_sd(network.studies()[i]);
    std::vector<double> d;
    for (std::size_t k = 1; k < theta[i].size(); ++k) d.push_back((theta[i][k] - theta[i][0]) / sp);
    out.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Relative effects

/// Per-draw effects of every treatment against the reference.
///
/// Draws are stored on a dyadic grid (multiples of 2^-36, magnitudes below
/// 2^14), which makes contrast arithmetic exact: mu_jl + mu_lm == mu_jm and
/// mu_jl == -mu_lj hold bit for bit. The grid step is ~1.5e-11.
class EffectDraws {
 public:
  static double snap(double x) {
    if (!(std::abs(x) < 16384.0)) return x;
    return std::ldexp(std::nearbyint(std::ldexp(x, 36)), -36);
  }

  EffectDraws(std::string reference, std::vector<std::string> others,
              std::vector<std::vector<double>> draws)
      : treatments_{std::move(reference)} {
    if (others.size() != draws.size()) throw Error("EffectDraws: one draw vector per treatment");
    n_draws_ = draws.empty() ? 0 : draws.front().size();
    values_.push_back(std::vector<double>(n_draws_, 0.0));
    for (std::size_t t = 0; t < others.size(); ++t) {
      if (draws[t].size() != n_draws_) throw Error("EffectDraws: unequal draw counts");
      for (double& v : draws[t]) v = snap(v);
      treatments_.push_back(std::move(others[t]));
      values_.push_back(std::move(draws[t]));
    }
  }

  /// Draws of `prefix[t]` for every basic treatment of the network.
  static EffectDraws from_samples(const PosteriorSamples& samples, const Network& network,
                                  const std::string& prefix = "mu") {
    return from_samples(samples, network.reference(), network.basic_treatments(), prefix);
  }

  static EffectDraws from_samples(const PosteriorSamples& samples, const std::string& reference,
                                  const std::vector<std::string>& basic, const std::string& prefix = "mu") {
    std::vector<std::vector<double>> d;
    for (const auto& t : basic) {
      const auto p = samples.pooled(prefix + "[" + t + "]");
      d.emplace_back(p.begin(), p.end());
    }
    return EffectDraws(reference, basic, std::move(d));
  }

  const std::string& reference() const { return treatments_.front(); }
  const std::vector<std::string>& treatments() const { return treatments_; }  // reference first
  std::size_t n_draws() const { return n_draws_; }

  std::span<const double> effect(const std::string& t) const { return values_[position(t)]; }
  std::span<const double> effect(std::size_t t) const { return values_[t]; }

  std::size_t position(const std::string& t) const {
    for (std::size_t i = 0; i < treatments_.size(); ++i)
      if (treatments_[i] == t) return i;
    throw Error("unknown treatment '" + t + "'");
  }

 private:
  std::vector<std::string> treatments_;
  std::size_t n_draws_ = 0;
  std::vector<std::vector<double>> values_;
};

/// mu_jl = mu_1l - mu_1j per draw: the effect of l relative to j.
inline std::vector<double> relative_effect(const EffectDraws& draws, const std::string& j, const std::string& l) {
  const auto a = draws.effect(j);
  const auto b = draws.effect(l);
  std::vector<double> out(draws.n_draws());
  for (std::size_t s = 0; s < out.size(); ++s) out[s] = b[s] - a[s];
  return out;
}

// ---------------------------------------------------------------------------
// Sampler target

/// Options shared by every model variant built on the NMA likelihood.
struct ModelSpec {
  MuPrior mu_prior;
  TauPrior tau_prior;
  std::vector<ScalePrior> weights;            // per study; empty: all fixed(1)
  std::map<std::string, NormalPrior> shifts;  // location shifts beta per basic treatment
  /// Node split (treatment, versus): studies containing both estimate their
  /// treatment-vs-versus contrast through a separate direct parameter.
  std::optional<std::pair<std::string, std::string>> split;
};

/// Factorized log posterior in non-centered form: delta_i = mu contrasts +
/// tau * S z_i with z_i ~ N(0, I) and S the symmetric square root of
/// 0.5 I + 0.5 J. Study baselines theta_i1 carry flat priors.
class NmaModel {
 public:
  NmaModel(const Network& network, ModelSpec spec) : network_(network), spec_(std::move(spec)) {
    if (network_.empty()) throw Error("network '" + network_.subgroup() + "' has no studies");
    if (!spec_.weights.empty() && spec_.weights.size() != network_.studies().size())
      throw Error("one scale prior per study required");
    build();
  }

  const std::vector<mcmc::ParameterBlock>& blocks() const { return blocks_; }
  std::size_t factor_count() const { return factor_count_; }
  std::span<const std::size_t> factors_of(std::size_t coord) const { return deps_[coord]; }

  double factor_log_density(std::size_t f, std::span<const double> x) const {
    if (f < studies_.size()) return study_term(studies_[f], x);
    const auto& p = priors_[f - studies_.size()];
    const double v = x[p.coord];
    switch (p.kind) {
      case PriorTerm::Kind::normal: return p.normal.log_density(v);
      case PriorTerm::Kind::half_normal: return spec_.tau_prior.log_density(v);
    }
    return 0.0;
  }

  /// Initial state as a flat vector in block order.
  std::vector<double> initial_state() const {
    std::vector<double> x;
    for (const auto& b : blocks_) x.insert(x.end(), b.initial.begin(), b.initial.end());
    return x;
  }

  double log_posterior(std::span<const double> x) const {
    double s = 0.0;
    for (std::size_t f = 0; f < factor_count_; ++f) s += factor_log_density(f, x);
    return s;
  }

  /// Coordinate indices of the named blocks, for tests and diagnostics.
  std::size_t tau_coordinate() const { return tau_; }
  std::size_t theta_coordinate(std::size_t study) const { return studies_[study].theta; }
  std::size_t z_coordinate(std::size_t study) const { return studies_[study].z; }
  const std::vector<std::size_t>& mu_coordinates() const { return mu_; }

  PosteriorSamples sample(const SamplerConfig& config) const { return mcmc::run_chains(*this, blocks_, config); }

 private:
  struct ArmTerm {
    double y;
    double se2;
    double log_norm;  // log(2 pi se2)
  };
  struct Coef {
    std::size_t coord;
    double sign;
  };
  struct StudyTerm {
    std::size_t theta = 0;
    std::size_t z = 0;
    std::size_t m = 0;  // K - 1
    double sp = 1.0;
    double cs_diag = std::sqrt(0.5);
    double cs_off = 0.0;
    std::vector<ArmTerm> arms;               // model order, baseline first
    std::vector<std::vector<Coef>> contrast;  // per non-baseline arm
    std::optional<std::size_t> w;             // sampled weight coordinate
    double w_fixed = 1.0;
    ScalePrior w_prior;
  };
  struct PriorTerm {
    enum class Kind { normal, half_normal } kind;
    std::size_t coord;
    NormalPrior normal;
  };

  double study_term(const StudyTerm& s, std::span<const double> x) const {
    const double theta1 = x[s.theta];
    const double tau = x[tau_];
    const double w = s.w ? x[*s.w] : s.w_fixed;
    double zsum = 0.0, zss = 0.0;
    for (std::size_t k = 0; k < s.m; ++k) {
      zsum += x[s.z + k];
      zss += x[s.z + k] * x[s.z + k];
    }
    auto arm = [w](const ArmTerm& a, double theta) {
      const double r = a.y - theta;
      return -0.5 * (a.log_norm - std::log(w)) - 0.5 * w * r * r / a.se2;
    };
    double lp = arm(s.arms[0], theta1);
    for (std::size_t k = 0; k < s.m; ++k) {
      double mean = 0.0;
      for (const auto& c : s.contrast[k]) mean += c.sign * x[c.coord];
      const double dev = tau * (s.cs_diag * x[s.z + k] + s.cs_off * zsum);
      lp += arm(s.arms[k + 1], theta1 + s.sp * (mean + dev));
    }
    lp += -0.5 * zss - 0.5 * static_cast<double>(s.m) * std::log(2.0 * std::numbers::pi);
    if (s.w) lp += s.w_prior.log_density(w);
    return lp;
  }

  void build() {
    const auto& studies = network_.studies();
    const auto basic = network_.basic_treatments();
    const std::size_t n_studies = studies.size();

    // Arm order per study: the split comparator (versus) leads when the study
    // holds the split pair, otherwise file order.
    std::vector<std::vector<std::size_t>> order(n_studies);
    std::vector<bool> is_split(n_studies, false);
    for (std::size_t i = 0; i < n_studies; ++i) {
      const auto& s = studies[i];
      std::vector<std::size_t> o(s.arms.size());
      std::iota(o.begin(), o.end(), 0);
      if (spec_.split && s.has(spec_.split->first) && s.has(spec_.split->second)) {
        is_split[i] = true;
        const auto v = *s.arm_index(spec_.split->second);
        o.erase(o.begin() + static_cast<std::ptrdiff_t>(v));
        o.insert(o.begin(), v);
      }
      order[i] = std::move(o);
    }
    if (spec_.split && std::none_of(is_split.begin(), is_split.end(), [](bool b) { return b; }))
      throw Error("no direct evidence for " + spec_.split->first + " vs " + spec_.split->second);

    // Coordinates: theta, z, w..., mu, d_direct, tau, beta.
    std::size_t next = 0;
    studies_.resize(n_studies);
    mcmc::ParameterBlock theta{"theta", n_studies, mcmc::Support::unbounded(), {}, {}, {}, false};
    for (std::size_t i = 0; i < n_studies; ++i) {
      const auto& a = studies[i].arms[order[i][0]];
      studies_[i].theta = next++;
      theta.initial.push_back(a.mean);
      theta.scale.push_back(std::sqrt(a.se2()));
      theta.labels.push_back("theta[" + studies[i].id + "]");
    }
    blocks_.push_back(std::move(theta));

    mcmc::ParameterBlock z{"z", 0, mcmc::Support::unbounded(), {}, {}, {}, false};
    for (std::size_t i = 0; i < n_studies; ++i) {
      const std::size_t m = studies[i].arms.size() - 1;
      studies_[i].z = next;
      for (std::size_t k = 0; k < m; ++k) {
        z.initial.push_back(0.0);
        z.labels.push_back("z[" + studies[i].id + "," + std::to_string(k + 1) + "]");
      }
      next += m;
      z.dimension += m;
    }
    blocks_.push_back(std::move(z));

    // Sampled weights, one block per distinct prior.
    if (!spec_.weights.empty()) {
      std::vector<ScalePrior> kinds;
      for (const auto& p : spec_.weights)
        if (!p.is_fixed() && std::find(kinds.begin(), kinds.end(), p) == kinds.end()) kinds.push_back(p);
      for (const auto& kind : kinds) {
        mcmc::ParameterBlock wb{kinds.size() == 1 ? "w" : "w:" + kind.describe(), 0,
                                mcmc::Support::interval(kind.lower(), kind.upper()), {}, {}, {}, true};
        for (std::size_t i = 0; i < n_studies; ++i) {
          if (!(spec_.weights[i] == kind)) continue;
          studies_[i].w = next++;
          studies_[i].w_prior = kind;
          wb.initial.push_back(kind.mean());
          wb.labels.push_back("w[" + studies[i].id + "]");
          ++wb.dimension;
        }
        blocks_.push_back(std::move(wb));
      }
      for (std::size_t i = 0; i < n_studies; ++i)
        if (spec_.weights[i].is_fixed()) studies_[i].w_fixed = spec_.weights[i].a;
    }

    mcmc::ParameterBlock mu{"mu", basic.size(), mcmc::Support::unbounded(), {}, {}, {}, true};
    for (const auto& t : basic) {
      mu_.push_back(next++);
      mu.initial.push_back(0.0);
      mu.scale.push_back(0.2);
      mu.labels.push_back(mu_name(t));
    }
    if (!basic.empty()) blocks_.push_back(std::move(mu));

    std::optional<std::size_t> direct;
    if (spec_.split) {
      direct = next++;
      blocks_.push_back({"d_direct", 1, mcmc::Support::unbounded(), {0.0}, {0.2}, {"d_direct"}, true});
    }

    tau_ = next++;
    const double tau0 = std::min(0.1, spec_.tau_prior.scale);
    blocks_.push_back({"tau", 1, mcmc::Support::positive(), {tau0}, {0.5}, {"tau"}, true});

    std::vector<std::pair<std::string, std::size_t>> beta_coords;
    {
      mcmc::ParameterBlock beta{"beta", 0, mcmc::Support::unbounded(), {}, {}, {}, true};
      for (const auto& [t, prior] : spec_.shifts) {
        if (prior.degenerate()) continue;
        if (!network_.contains(t) || t == network_.reference())
          throw Error("location shift for treatment '" + t + "' outside the network's basic parameters");
        beta_coords.emplace_back(t, next++);
        beta.initial.push_back(prior.mean);
        beta.scale.push_back(std::sqrt(prior.variance));
        beta.labels.push_back("beta[" + t + "]");
        ++beta.dimension;
      }
      if (beta.dimension > 0) blocks_.push_back(std::move(beta));
    }

    auto mu_coord = [&](const std::string& t) -> std::optional<std::size_t> {
      if (t == network_.reference()) return std::nullopt;
      const auto it = std::find(basic.begin(), basic.end(), t);
      return mu_[static_cast<std::size_t>(it - basic.begin())];
    };

    for (std::size_t i = 0; i < n_studies; ++i) {
      auto& st = studies_[i];
      const auto& s = studies[i];
      st.m = s.arms.size() - 1;
      st.sp = pooled_sd(s);
      st.cs_off = detail::cs_sqrt_offdiag(st.m);
      for (auto k : order[i]) {
        const auto& a = s.arms[k];
        st.arms.push_back({a.mean, a.se2(), std::log(2.0 * std::numbers::pi * a.se2())});
      }
      const auto& base = s.arms[order[i][0]].treatment;
      for (std::size_t k = 1; k < order[i].size(); ++k) {
        const auto& t = s.arms[order[i][k]].treatment;
        std::vector<Coef> c;
        if (is_split[i] && t == spec_.split->first) {
          c.push_back({*direct, 1.0});
        } else {
          if (auto m = mu_coord(t)) c.push_back({*m, 1.0});
          if (auto m = mu_coord(base)) c.push_back({*m, -1.0});
        }
        st.contrast.push_back(std::move(c));
      }
    }

    // Factors: studies first, then priors.
    const std::size_t dim = next;
    deps_.assign(dim, {});
    for (std::size_t i = 0; i < n_studies; ++i) {
      const auto& st = studies_[i];
      deps_[st.theta].push_back(i);
      for (std::size_t k = 0; k < st.m; ++k) deps_[st.z + k].push_back(i);
      if (st.w) deps_[*st.w].push_back(i);
      deps_[tau_].push_back(i);
      for (const auto& row : st.contrast)
        for (const auto& c : row)
          if (std::find(deps_[c.coord].begin(), deps_[c.coord].end(), i) == deps_[c.coord].end())
            deps_[c.coord].push_back(i);
    }
    auto add_prior = [&](PriorTerm p) {
      deps_[p.coord].push_back(n_studies + priors_.size());
      priors_.push_back(p);
    };
    for (std::size_t j = 0; j < basic.size(); ++j)
      add_prior({PriorTerm::Kind::normal, mu_[j], spec_.mu_prior.of(basic[j])});
    if (direct) add_prior({PriorTerm::Kind::normal, *direct, NormalPrior{}});
    add_prior({PriorTerm::Kind::half_normal, tau_, {}});
    for (const auto& [t, coord] : beta_coords) add_prior({PriorTerm::Kind::normal, coord, spec_.shifts.at(t)});
    factor_count_ = n_studies + priors_.size();
  }

  Network network_;
  ModelSpec spec_;
  std::vector<mcmc::ParameterBlock> blocks_;
  std::vector<StudyTerm> studies_;
  std::vector<PriorTerm> priors_;
  std::vector<std::vector<std::size_t>> deps_;
  std::vector<std::size_t> mu_;
  std::size_t tau_ = 0;
  std::size_t factor_count_ = 0;
};

static_assert(mcmc::FactorTarget<NmaModel>);

/// Standard NMA of one network.
inline PosteriorSamples fit_standard_nma(const Network& network, const MuPrior& mu_prior, const TauPrior& tau_prior,
                                         const SamplerConfig& config) {
  require_connected(network);
  ModelSpec spec;
  spec.mu_prior = mu_prior;
  spec.tau_prior = tau_prior;
  return NmaModel(network, std::move(spec)).sample(config);
}

/// Both subgroups pooled as if they were one population.
inline PosteriorSamples fit_naive_synthesis(const Network& dense, const Network& sparse, const MuPrior& mu_prior,
                                            const TauPrior& tau_prior, const SamplerConfig& config) {
  return fit_standard_nma(merge(dense, sparse, dense.subgroup() + "+" + sparse.subgroup()), mu_prior, tau_prior,
                          config);
}

}  // namespace nmaborrow
