// Adaptive random-walk Metropolis-within-Gibbs, diagnostics and summaries.
//
// Targets are factorized log densities: the sampler caches every factor and,
// when it proposes a move for one coordinate, re-evaluates only the factors
// that coordinate touches. A plain callable over the whole state is wrapped
// as a single factor.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "nmaborrow/core.hpp"

namespace nmaborrow::mcmc {

struct SamplerConfig {
  int n_chains = 2;
  int iterations = 50000;  // including burn-in
  int burn_in = 10000;
  int thin = 1;
  std::uint64_t seed = 20240521;
  int adapt_window = -1;  // < 0: whole burn-in
  bool parallel = true;

  int adaptation_iterations() const { return adapt_window < 0 ? burn_in : std::min(adapt_window, burn_in); }
  int retained() const { return (iterations - burn_in + thin - 1) / thin; }

  void validate() const {
    if (n_chains < 1) throw Error("sampler: n_chains must be >= 1");
    if (thin < 1) throw Error("sampler: thin must be >= 1");
    if (burn_in < 0 || burn_in >= iterations) throw Error("sampler: need 0 <= burn_in < iterations");
  }
};

/// Stream for chain c. Every chain owns an independent mt19937_64 seeded with seed ^ c.
inline std::uint64_t chain_seed(std::uint64_t seed, int chain) {
  return seed ^ static_cast<std::uint64_t>(chain);
}

struct Support {
  enum class Kind { unbounded, positive, interval };
  Kind kind = Kind::unbounded;
  double lo = 0.0;
  double hi = 1.0;

  static Support unbounded() { return {}; }
  static Support positive() { return {Kind::positive, 0.0, 0.0}; }
  static Support unit_interval() { return {Kind::interval, 0.0, 1.0}; }
  static Support interval(double lo, double hi) {
    if (!(lo < hi)) throw Error("interval support needs lo < hi");
    return {Kind::interval, lo, hi};
  }

  bool contains(double x) const {
    switch (kind) {
      case Kind::unbounded: return std::isfinite(x);
      case Kind::positive: return x > 0.0 && std::isfinite(x);
      case Kind::interval: return x > lo && x < hi;
    }
    return false;
  }

  double to_unconstrained(double x) const {
    switch (kind) {
      case Kind::unbounded: return x;
      case Kind::positive: return std::log(x);
      case Kind::interval: {
        const double p = (x - lo) / (hi - lo);
        return std::log(p) - std::log1p(-p);
      }
    }
    return x;
  }

  double from_unconstrained(double u) const {
    switch (kind) {
      case Kind::unbounded: return u;
      case Kind::positive: return std::exp(u);
      case Kind::interval: return lo + (hi - lo) / (1.0 + std::exp(-u));
    }
    return u;
  }

  /// log |dx/du| at unconstrained value u.
  double log_jacobian(double u) const {
    switch (kind) {
      case Kind::unbounded: return 0.0;
      case Kind::positive: return u;
      case Kind::interval: {
        // log sigmoid(u) + log sigmoid(-u), written to stay finite for large |u|
        const double a = -std::abs(u);
        return std::log(hi - lo) + a - 2.0 * std::log1p(std::exp(a));
      }
    }
    return 0.0;
  }
};

struct ParameterBlock {
  std::string name;
  std::size_t dimension = 1;
  Support support;
  std::vector<double> initial;
  std::vector<double> scale;          // initial proposal sd on the unconstrained scale; empty: 1
  std::vector<std::string> labels;    // per-coordinate output names; empty: name or name[i]
  bool monitored = true;              // retained in PosteriorSamples

  std::string label(std::size_t i) const {
    if (!labels.empty()) return labels.at(i);
    return dimension == 1 ? name : name + "[" + std::to_string(i) + "]";
  }
};

struct BlockAcceptance {
  std::string block;
  int chain = 0;
  double rate = 0.0;
};

struct PosteriorSummary {
  double mean = 0.0;
  double sd = 0.0;
  double q025 = 0.0;
  double median = 0.0;
  double q975 = 0.0;
};

/// Retained draws, indexed (parameter, chain, iteration).
class PosteriorSamples {
 public:
  PosteriorSamples() = default;
  PosteriorSamples(SamplerConfig config, std::size_t n_chains, std::size_t n_draws)
      : config_(config), n_chains_(n_chains), n_draws_(n_draws) {}

  const SamplerConfig& config() const { return config_; }
  std::size_t n_chains() const { return n_chains_; }
  std::size_t n_draws() const { return n_draws_; }  // per chain
  const std::vector<std::string>& names() const { return names_; }

  bool has(const std::string& name) const { return find(name) != names_.size(); }

  std::size_t index(const std::string& name) const {
    const auto i = find(name);
    if (i == names_.size()) throw Error("unknown parameter '" + name + "'");
    return i;
  }

  std::span<const double> chain(std::size_t param, std::size_t c) const {
    return {data_[param].data() + c * n_draws_, n_draws_};
  }
  std::span<const double> chain(const std::string& name, std::size_t c) const {
    return chain(index(name), c);
  }

  /// Draws of all chains, concatenated in chain order.
  std::span<const double> pooled(const std::string& name) const {
    const auto& v = data_[index(name)];
    return {v.data(), v.size()};
  }

  /// Appends a parameter; `values` holds n_chains * n_draws draws in chain order.
  void add(const std::string& name, std::vector<double> values) {
    if (values.size() != n_chains_ * n_draws_)
      throw Error("parameter '" + name + "': draw count mismatch");
    if (has(name)) throw Error("duplicate parameter '" + name + "'");
    names_.push_back(name);
    data_.push_back(std::move(values));
  }

  /// Appends a parameter computed per draw from existing ones.
  template <class F>
  void derive(const std::string& name, const std::vector<std::string>& inputs, F&& f) {
    std::vector<std::span<const double>> in;
    for (const auto& n : inputs) in.push_back(pooled(n));
    std::vector<double> out(n_chains_ * n_draws_);
    std::vector<double> args(inputs.size());
    for (std::size_t s = 0; s < out.size(); ++s) {
      for (std::size_t a = 0; a < in.size(); ++a) args[a] = in[a][s];
      out[s] = f(std::span<const double>(args));
    }
    add(name, std::move(out));
  }

  std::vector<BlockAcceptance>& acceptance() { return acceptance_; }
  const std::vector<BlockAcceptance>& acceptance() const { return acceptance_; }
  std::vector<std::string>& warnings() { return warnings_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  std::vector<double>& raw(std::size_t param) { return data_[param]; }

 private:
  std::size_t find(const std::string& name) const {
    return static_cast<std::size_t>(std::find(names_.begin(), names_.end(), name) - names_.begin());
  }

  SamplerConfig config_;
  std::size_t n_chains_ = 0;
  std::size_t n_draws_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> data_;
  std::vector<BlockAcceptance> acceptance_;
  std::vector<std::string> warnings_;
};

// clang-format off
template <class T>
concept FactorTarget = requires(const T& t, std::size_t i, std::span<const double> x) {
  { t.factor_count() } -> std::convertible_to<std::size_t>;
  { t.factor_log_density(i, x) } -> std::convertible_to<double>;
  { t.factors_of(i) } -> std::convertible_to<std::span<const std::size_t>>;
};
// clang-format on

/// A log posterior over the whole state, seen as one factor.
template <class F>
class WholeStateTarget {
 public:
  explicit WholeStateTarget(F f) : f_(std::move(f)) {}
  std::size_t factor_count() const { return 1; }
  double factor_log_density(std::size_t, std::span<const double> x) const { return f_(x); }
  std::span<const std::size_t> factors_of(std::size_t) const { return {&zero_, 1}; }

 private:
  F f_;
  std::size_t zero_ = 0;
};

namespace detail {

struct Layout {
  std::vector<std::size_t> block_of;   // coordinate -> block
  std::vector<std::size_t> monitored;  // coordinates kept
  std::vector<std::string> monitored_names;
  std::size_t dimension = 0;
};

inline Layout make_layout(std::span<const ParameterBlock> blocks) {
  Layout l;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    if (blk.initial.size() != blk.dimension)
      throw Error("block '" + blk.name + "': initial value count != dimension");
    if (!blk.scale.empty() && blk.scale.size() != blk.dimension)
      throw Error("block '" + blk.name + "': scale count != dimension");
    for (std::size_t i = 0; i < blk.dimension; ++i) {
      if (!blk.support.contains(blk.initial[i]))
        throw Error("block '" + blk.name + "': initial value outside support");
      if (blk.monitored) {
        l.monitored.push_back(l.dimension);
        l.monitored_names.push_back(blk.label(i));
      }
      l.block_of.push_back(b);
      ++l.dimension;
    }
  }
  return l;
}

struct ChainResult {
  std::vector<double> draws;  // [monitored][draw]
  std::vector<long> accepted;  // per block, post burn-in
  std::vector<long> attempted;
};

template <FactorTarget Target>
ChainResult run_one_chain(const Target& target, std::span<const ParameterBlock> blocks,
                          const Layout& layout, const SamplerConfig& cfg, int chain) {
  std::mt19937_64 rng(chain_seed(cfg.seed, chain));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  const std::size_t dim = layout.dimension;
  std::vector<double> x(dim), log_scale(dim);
  std::vector<const Support*> support(dim);
  {
    std::size_t c = 0;
    for (const auto& blk : blocks)
      for (std::size_t i = 0; i < blk.dimension; ++i, ++c) {
        const double s = blk.scale.empty() ? 1.0 : blk.scale[i];
        support[c] = &blk.support;
        log_scale[c] = std::log(s);
        // overdispersed start: +-0.5 scale units on the unconstrained scale
        const double u = blk.support.to_unconstrained(blk.initial[i]) + (uniform(rng) - 0.5) * s;
        x[c] = blk.support.from_unconstrained(u);
        if (!blk.support.contains(x[c])) x[c] = blk.initial[i];
      }
  }

  const std::size_t n_factors = target.factor_count();
  std::vector<double> cache(n_factors);
  for (std::size_t f = 0; f < n_factors; ++f) {
    cache[f] = target.factor_log_density(f, std::span<const double>(x));
    if (!std::isfinite(cache[f])) {
      std::string names;
      for (std::size_t c = 0; c < dim; ++c) {
        const auto fs = target.factors_of(c);
        if (std::find(fs.begin(), fs.end(), f) == fs.end()) continue;
        const auto& nm = blocks[layout.block_of[c]].name;
        if (names.find("'" + nm + "'") == std::string::npos) names += (names.empty() ? "" : ", ") + ("'" + nm + "'");
      }
      throw Error("non-finite log posterior at initial state of chain " + std::to_string(chain) +
                  " (blocks " + names + ")");
    }
  }

  const int n_retained = cfg.retained();
  const int adapt_until = cfg.adaptation_iterations();
  ChainResult res;
  res.draws.assign(layout.monitored.size() * static_cast<std::size_t>(n_retained), 0.0);
  res.accepted.assign(blocks.size(), 0);
  res.attempted.assign(blocks.size(), 0);
  std::vector<double> fresh;
  constexpr double target_rate = 0.44;

  for (int t = 0; t < cfg.iterations; ++t) {
    const bool adapting = t < adapt_until;
    const double gain = adapting ? std::pow(t + 1.0, -0.6) : 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const Support& sup = *support[c];
      const double old_x = x[c];
      const double u = sup.to_unconstrained(old_x);
      const double u_new = u + std::exp(log_scale[c]) * normal(rng);
      const double new_x = sup.from_unconstrained(u_new);
      double log_alpha = -std::numeric_limits<double>::infinity();
      const auto deps = target.factors_of(c);
      fresh.resize(deps.size());
      if (sup.contains(new_x)) {
        x[c] = new_x;
        double delta = 0.0;
        for (std::size_t k = 0; k < deps.size(); ++k) {
          fresh[k] = target.factor_log_density(deps[k], std::span<const double>(x));
          delta += fresh[k] - cache[deps[k]];
        }
        log_alpha = delta + sup.log_jacobian(u_new) - sup.log_jacobian(u);
      }
      const bool accept = log_alpha >= 0.0 || std::log(uniform(rng)) < log_alpha;
      if (accept) {
        for (std::size_t k = 0; k < deps.size(); ++k) cache[deps[k]] = fresh[k];
      } else {
        x[c] = old_x;
      }
      if (adapting) {
        const double alpha = std::isnan(log_alpha) ? 0.0 : std::exp(std::min(0.0, log_alpha));
        log_scale[c] = std::clamp(log_scale[c] + gain * (alpha - target_rate), -30.0, 10.0);
      }
      if (t >= cfg.burn_in) {
        const auto b = layout.block_of[c];
        ++res.attempted[b];
        if (accept) ++res.accepted[b];
      }
    }
    if (t >= cfg.burn_in && (t - cfg.burn_in) % cfg.thin == 0) {
      const auto s = static_cast<std::size_t>((t - cfg.burn_in) / cfg.thin);
      for (std::size_t m = 0; m < layout.monitored.size(); ++m)
        res.draws[m * static_cast<std::size_t>(n_retained) + s] = x[layout.monitored[m]];
    }
  }
  return res;
}

}  // namespace detail

/// Runs `config.n_chains` independent chains. Chain c draws from its own
/// stream (see chain_seed), so parallel and sequential runs are identical.
template <FactorTarget Target>
PosteriorSamples run_chains(const Target& target, std::span<const ParameterBlock> blocks,
                            const SamplerConfig& config) {
  config.validate();
  const auto layout = detail::make_layout(blocks);
  const auto n_chains = static_cast<std::size_t>(config.n_chains);
  std::vector<detail::ChainResult> results(n_chains);
  std::vector<std::exception_ptr> errors(n_chains);

  auto work = [&](std::size_t c) {
    try {
      results[c] = detail::run_one_chain(target, blocks, layout, config, static_cast<int>(c));
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  if (config.parallel && n_chains > 1) {
    std::vector<std::jthread> threads;
    for (std::size_t c = 0; c < n_chains; ++c) threads.emplace_back(work, c);
  } else {
    for (std::size_t c = 0; c < n_chains; ++c) work(c);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  const auto n_draws = static_cast<std::size_t>(config.retained());
  PosteriorSamples out(config, n_chains, n_draws);
  for (std::size_t m = 0; m < layout.monitored.size(); ++m) {
    std::vector<double> v;
    v.reserve(n_chains * n_draws);
    for (const auto& r : results)
      v.insert(v.end(), r.draws.begin() + static_cast<std::ptrdiff_t>(m * n_draws),
               r.draws.begin() + static_cast<std::ptrdiff_t>((m + 1) * n_draws));
    out.add(layout.monitored_names[m], std::move(v));
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t c = 0; c < n_chains; ++c) {
      const auto& r = results[c];
      const double rate = r.attempted[b] ? static_cast<double>(r.accepted[b]) / r.attempted[b] : 0.0;
      out.acceptance().push_back({blocks[b].name, static_cast<int>(c), rate});
      if (r.attempted[b] > 0 && r.accepted[b] == 0)
        out.warnings().push_back("block '" + blocks[b].name + "' rejected every proposal after adaptation in chain " +
                                 std::to_string(c));
    }
  }
  return out;
}

template <FactorTarget Target>
PosteriorSamples run_chains(const Target& target, const std::vector<ParameterBlock>& blocks,
                            const SamplerConfig& config) {
  return run_chains(target, std::span<const ParameterBlock>(blocks), config);
}

/// Overload for a plain log posterior over the full state.
template <class F>
  requires std::is_invocable_r_v<double, const F&, std::span<const double>>
PosteriorSamples run_chains(F log_posterior, const std::vector<ParameterBlock>& blocks,
                            const SamplerConfig& config) {
  WholeStateTarget<F> target(std::move(log_posterior));
  return run_chains(target, std::span<const ParameterBlock>(blocks), config);
}

// ---------------------------------------------------------------------------
// Summaries and diagnostics

/// Linear interpolation between order statistics (R type 7).
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw Error("quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline PosteriorSummary summarize(std::span<const double> draws) {
  if (draws.empty()) throw Error("cannot summarize an empty sample");
  PosteriorSummary s;
  const double n = static_cast<double>(draws.size());
  s.mean = std::accumulate(draws.begin(), draws.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : draws) ss += (d - s.mean) * (d - s.mean);
  s.sd = draws.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  std::vector<double> sorted(draws.begin(), draws.end());
  std::sort(sorted.begin(), sorted.end());
  s.q025 = quantile_sorted(sorted, 0.025);
  s.median = quantile_sorted(sorted, 0.5);
  s.q975 = quantile_sorted(sorted, 0.975);
  return s;
}

inline PosteriorSummary summarize(const PosteriorSamples& samples, const std::string& parameter) {
  return summarize(samples.pooled(parameter));
}

enum class RhatVariant { split, classic };

/// Potential scale reduction factor over a set of equally long chains.
inline double potential_scale_reduction(const std::vector<std::span<const double>>& chains) {
  const double m = static_cast<double>(chains.size());
  const double n = static_cast<double>(chains.front().size());
  std::vector<double> means, vars;
  for (const auto& c : chains) {
    const double mu = std::accumulate(c.begin(), c.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : c) ss += (v - mu) * (v - mu);
    means.push_back(mu);
    vars.push_back(ss / (n - 1.0));
  }
  const double grand = std::accumulate(means.begin(), means.end(), 0.0) / m;
  double b = 0.0;
  for (double mu : means) b += (mu - grand) * (mu - grand);
  b *= n / (m - 1.0);
  const double w = std::accumulate(vars.begin(), vars.end(), 0.0) / m;
  if (w == 0.0) return b == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  const double var_plus = (n - 1.0) / n * w + b / n;
  return std::sqrt(var_plus / w);
}

/// Gelman-Rubin R-hat. The split variant halves every chain first (an odd
/// middle draw is dropped).
inline double gelman_rubin(const PosteriorSamples& samples, const std::string& parameter,
                           RhatVariant variant = RhatVariant::split) {
  if (samples.n_chains() < 2) throw Error("diagnostic requires >=2 chains");
  if (samples.n_draws() < 10) throw Error("diagnostic requires >=10 retained draws per chain");
  const auto p = samples.index(parameter);
  std::vector<std::span<const double>> parts;
  for (std::size_t c = 0; c < samples.n_chains(); ++c) {
    auto ch = samples.chain(p, c);
    if (variant == RhatVariant::classic) {
      parts.push_back(ch);
    } else {
      const std::size_t half = ch.size() / 2;
      parts.push_back(ch.subspan(0, half));
      parts.push_back(ch.subspan(ch.size() - half, half));
    }
  }
  return potential_scale_reduction(parts);
}

/// Monte-Carlo standard error of the posterior mean by non-overlapping batch
/// means (about sqrt(n) batches per chain).
inline double monte_carlo_se(const PosteriorSamples& samples, const std::string& parameter) {
  const auto p = samples.index(parameter);
  const std::size_t n = samples.n_draws();
  const std::size_t n_batches = std::max<std::size_t>(2, static_cast<std::size_t>(std::sqrt(static_cast<double>(n))));
  const std::size_t size = n / n_batches;
  if (size == 0) throw Error("too few draws for batch means");
  std::vector<double> batch_means;
  for (std::size_t c = 0; c < samples.n_chains(); ++c) {
    const auto ch = samples.chain(p, c);
    for (std::size_t b = 0; b < n_batches; ++b) {
      const auto seg = ch.subspan(b * size, size);
      batch_means.push_back(std::accumulate(seg.begin(), seg.end(), 0.0) / static_cast<double>(size));
    }
  }
  const double k = static_cast<double>(batch_means.size());
  const double mu = std::accumulate(batch_means.begin(), batch_means.end(), 0.0) / k;
  double ss = 0.0;
  for (double v : batch_means) ss += (v - mu) * (v - mu);
  return std::sqrt(ss / (k - 1.0) / k);
}

/// Monte-Carlo standard error of the posterior sd, by batch means of the
/// squared deviations and the delta method.
inline double monte_carlo_se_sd(const PosteriorSamples& samples, const std::string& parameter) {
  const auto all = samples.pooled(parameter);
  const double mu = std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
  PosteriorSamples sq(samples.config(), samples.n_chains(), samples.n_draws());
  std::vector<double> dev(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) dev[i] = (all[i] - mu) * (all[i] - mu);
  sq.add("sq", std::move(dev));
  const double sd = summarize(all).sd;
  return monte_carlo_se(sq, "sq") / (2.0 * sd);
}

/// File name used for a parameter's trace: "mu[A B]" -> "mu.A_B.csv".
inline std::string trace_file_name(const std::string& parameter) {
  std::string out;
  for (char ch : parameter) {
    if (ch == '[') out += '.';
    else if (ch == ']') continue;
    else if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.') out += ch;
    else out += '_';
  }
  return out + ".csv";
}

/// One CSV per monitored parameter (chain, iteration, value) plus index.csv.
inline void export_traces(const PosteriorSamples& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.csv");
  if (!index) throw Error("cannot write " + (dir / "index.csv").string());
  index << "parameter,file\n";
  const auto& cfg = samples.config();
  for (const auto& name : samples.names()) {
    const auto file = trace_file_name(name);
    index << '"' << name << "\"," << file << '\n';
    std::ofstream out(dir / file);
    if (!out) throw Error("cannot write " + (dir / file).string());
    out << "chain,iteration,value\n";
    char buf[64];
    for (std::size_t c = 0; c < samples.n_chains(); ++c) {
      const auto ch = samples.chain(name, c);
      for (std::size_t s = 0; s < ch.size(); ++s) {
        const long iter = cfg.burn_in + static_cast<long>(s) * cfg.thin + 1;
        std::snprintf(buf, sizeof buf, "%.17g", ch[s]);
        out << c << ',' << iter << ',' << buf << '\n';
      }
    }
  }
}

}  // namespace nmaborrow::mcmc
