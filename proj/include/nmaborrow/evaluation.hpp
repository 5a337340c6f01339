// Node splitting, rankings and league tables.
#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "nmaborrow/core.hpp"
#include "nmaborrow/mcmc.hpp"
#include "nmaborrow/nma.hpp"

namespace nmaborrow {

/// Two-sided Bayesian p-value 2 min(P, 1 - P).
inline double bayes_p(double p_gt0) {
  if (!(p_gt0 >= 0.0 && p_gt0 <= 1.0)) throw Error("bayes_p: probability outside [0, 1]");
  return 2.0 * std::min(p_gt0, 1.0 - p_gt0);
}

struct NodeSplitResult {
  std::string treatment;
  std::string versus;
  PosteriorSummary direct;
  PosteriorSummary indirect;
  PosteriorSummary difference;  // direct - indirect
  double p_gt0 = 0.0;
  double p_value = 1.0;
  std::vector<double> direct_draws;
  std::vector<double> indirect_draws;

  std::string label() const { return treatment + " vs " + versus; }
};

/// True when treatment and versus stay connected once the studies comparing
/// them directly stop linking them. In such a study only the versus arm and
/// arms outside the pair keep linking the network.
inline bool splittable(const Network& net, const std::string& treatment, const std::string& versus) {
  std::vector<std::pair<std::string, std::string>> edges;
  bool direct = false;
  for (const auto& s : net.studies()) {
    const bool split = s.has(treatment) && s.has(versus);
    direct = direct || split;
    if (split) {
      for (const auto& a : s.arms)
        if (a.treatment != treatment && a.treatment != versus) edges.emplace_back(versus, a.treatment);
    } else {
      for (std::size_t k = 1; k < s.arms.size(); ++k) edges.emplace_back(s.arms[0].treatment, s.arms[k].treatment);
    }
  }
  if (!direct) return false;
  for (const auto& comp : detail::components(net.treatments(), edges)) {
    const bool a = std::binary_search(comp.begin(), comp.end(), treatment);
    const bool b = std::binary_search(comp.begin(), comp.end(), versus);
    if (a || b) return a && b;
  }
  return false;
}

/// Separates the direct evidence on treatment vs versus from the rest of the
/// network. The direct parameter replaces the network contrast in the
/// treatment arm of every study holding both treatments; those studies'
/// other arms keep informing the network through versus.
inline NodeSplitResult node_split(const Network& net, const std::string& treatment, const std::string& versus,
                                  const MuPrior& mu_prior, const TauPrior& tau_prior, const SamplerConfig& config) {
  if (!net.contains(treatment) || !net.contains(versus) || treatment == versus)
    throw Error("node split needs two distinct treatments of the network");
  if (!direct_comparisons(net).count(Comparison(treatment, versus)))
    throw Error("no direct evidence for " + treatment + " vs " + versus);
  if (!splittable(net, treatment, versus))
    throw Error("comparison not splittable: " + treatment + " vs " + versus + " has no indirect path");
  require_connected(net);

  ModelSpec spec;
  spec.mu_prior = mu_prior;
  spec.tau_prior = tau_prior;
  spec.split = std::make_pair(treatment, versus);
  const auto samples = NmaModel(net, std::move(spec)).sample(config);

  NodeSplitResult r;
  r.treatment = treatment;
  r.versus = versus;
  const auto d = samples.pooled("d_direct");
  r.direct_draws.assign(d.begin(), d.end());
  const auto draws = EffectDraws::from_samples(samples, net);
  r.indirect_draws = relative_effect(draws, versus, treatment);
  std::vector<double> diff(d.size());
  std::size_t positive = 0;
  for (std::size_t s = 0; s < diff.size(); ++s) {
    diff[s] = r.direct_draws[s] - r.indirect_draws[s];
    positive += diff[s] > 0.0;
  }
  r.direct = mcmc::summarize(r.direct_draws);
  r.indirect = mcmc::summarize(r.indirect_draws);
  r.difference = mcmc::summarize(diff);
  r.p_gt0 = static_cast<double>(positive) / static_cast<double>(diff.size());
  r.p_value = bayes_p(r.p_gt0);
  return r;
}

/// Direct comparisons that can be split, oriented as (treatment, versus):
/// versus is the reference when the pair holds it, else the first name.
inline std::vector<std::pair<std::string, std::string>> splittable_comparisons(const Network& net) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [c, count] : direct_comparisons(net)) {
    auto p = c.second == net.reference() ? std::make_pair(c.first, c.second) : std::make_pair(c.second, c.first);
    if (splittable(net, p.first, p.second)) out.push_back(p);
  }
  return out;
}

enum class Direction { lower_better, higher_better };

inline const char* to_string(Direction d) { return d == Direction::lower_better ? "lower-better" : "higher-better"; }

inline Direction parse_direction(const std::string& s) {
  if (s == "lower-better") return Direction::lower_better;
  if (s == "higher-better") return Direction::higher_better;
  throw Error("unknown ranking direction '" + s + "'");
}

struct RankMatrix {
  std::vector<std::string> treatments;
  std::vector<std::vector<double>> p;  // p[j][r]: treatment j at rank r + 1
  Direction direction = Direction::lower_better;
  std::size_t tied_draws = 0;
  std::vector<std::string> warnings;

  std::size_t index(const std::string& t) const {
    const auto it = std::find(treatments.begin(), treatments.end(), t);
    if (it == treatments.end()) throw Error("unknown treatment '" + t + "'");
    return static_cast<std::size_t>(it - treatments.begin());
  }
};

/// Rank probabilities from the per-draw effects against the reference.
/// Equal effects within a draw are ordered by treatment position.
inline RankMatrix rank_probabilities(const EffectDraws& draws, Direction direction = Direction::lower_better) {
  RankMatrix m;
  m.treatments = draws.treatments();
  m.direction = direction;
  const std::size_t t_count = m.treatments.size();
  const std::size_t n = draws.n_draws();
  if (n == 0) throw Error("rank_probabilities: no draws");
  std::vector<std::vector<long>> counts(t_count, std::vector<long>(t_count, 0));
  std::vector<std::size_t> order(t_count);
  std::vector<double> v(t_count);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < t_count; ++j) {
      const double e = draws.effect(j)[s];
      v[j] = direction == Direction::lower_better ? e : -e;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    bool tie = false;
    for (std::size_t r = 0; r < t_count; ++r) {
      ++counts[order[r]][r];
      if (r > 0 && v[order[r]] == v[order[r - 1]]) tie = true;
    }
    m.tied_draws += tie;
  }
  m.p.assign(t_count, std::vector<double>(t_count, 0.0));
  for (std::size_t j = 0; j < t_count; ++j)
    for (std::size_t r = 0; r < t_count; ++r) m.p[j][r] = static_cast<double>(counts[j][r]) / static_cast<double>(n);
  if (m.tied_draws > 0)
    m.warnings.push_back(std::to_string(m.tied_draws) + " draw(s) with tied effects ranked by treatment order");
  return m;
}

/// Surface under the cumulative ranking curve.
inline double sucra(const RankMatrix& m, const std::string& treatment) {
  const std::size_t t_count = m.treatments.size();
  if (t_count < 2) throw Error("SUCRA is undefined for a single treatment");
  const auto& row = m.p[m.index(treatment)];
  double cum = 0.0, total = 0.0;
  for (std::size_t r = 0; r + 1 < t_count; ++r) {
    cum += row[r];
    total += cum;
  }
  return total / static_cast<double>(t_count - 1);
}

/// Cell (row, col) holds the effect of row against col, mu_1row - mu_1col.
class LeagueTable {
 public:
  explicit LeagueTable(const EffectDraws& draws) : treatments_(draws.treatments()) {
    const std::size_t t = treatments_.size();
    cells_.assign(t * t, PosteriorSummary{});
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = r + 1; c < t; ++c) {
        const auto s = mcmc::summarize(relative_effect(draws, treatments_[c], treatments_[r]));
        cells_[r * t + c] = s;
        cells_[c * t + r] = PosteriorSummary{-s.mean, s.sd, -s.q975, -s.median, -s.q025};
      }
  }

  const std::vector<std::string>& treatments() const { return treatments_; }
  std::size_t size() const { return treatments_.size(); }
  std::size_t entry_count() const { return size() * (size() - 1); }

  const PosteriorSummary& entry(std::size_t row, std::size_t col) const {
    if (row == col) throw Error("league table has no diagonal entries");
    return cells_.at(row * size() + col);
  }
  const PosteriorSummary& entry(const std::string& row, const std::string& col) const {
    return entry(index(row), index(col));
  }

  std::size_t index(const std::string& t) const {
    const auto it = std::find(treatments_.begin(), treatments_.end(), t);
    if (it == treatments_.end()) throw Error("unknown treatment '" + t + "'");
    return static_cast<std::size_t>(it - treatments_.begin());
  }

 private:
  std::vector<std::string> treatments_;
  std::vector<PosteriorSummary> cells_;
};

inline LeagueTable league_table(const EffectDraws& draws) { return LeagueTable(draws); }

}  // namespace nmaborrow
