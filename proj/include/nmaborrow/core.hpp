// Domain types for arm-level continuous-outcome evidence networks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace nmaborrow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a, used for stable stream derivation and run fingerprints.
inline std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

struct Arm {
  std::string treatment;
  int n = 0;
  double mean = 0.0;
  double sd = 0.0;

  /// Sampling variance of the arm mean.
  double se2() const { return sd * sd / static_cast<double>(n); }
};

struct Study {
  std::string id;
  std::string subgroup;
  std::vector<Arm> arms;  // arms[0] is the study baseline
  std::optional<bool> high_rob;

  std::size_t size() const { return arms.size(); }

  bool has(const std::string& treatment) const {
    return std::any_of(arms.begin(), arms.end(),
                       [&](const Arm& a) { return a.treatment == treatment; });
  }

  std::optional<std::size_t> arm_index(const std::string& treatment) const {
    for (std::size_t k = 0; k < arms.size(); ++k)
      if (arms[k].treatment == treatment) return k;
    return std::nullopt;
  }
};

inline void validate_study(const Study& s) {
  if (s.arms.size() < 2)
    throw Error("study '" + s.id + "': needs at least 2 arms");
  std::set<std::string> seen;
  for (const auto& a : s.arms) {
    if (a.n < 2) throw Error("study '" + s.id + "': arm '" + a.treatment + "' has n < 2");
    if (!(a.sd > 0.0) || !std::isfinite(a.sd))
      throw Error("study '" + s.id + "': arm '" + a.treatment + "' has sd <= 0");
    if (!std::isfinite(a.mean))
      throw Error("study '" + s.id + "': arm '" + a.treatment + "' has non-finite mean");
    if (!seen.insert(a.treatment).second)
      throw Error("study '" + s.id + "': treatment '" + a.treatment + "' appears twice");
  }
}

/// Unordered treatment pair, stored with first < second.
struct Comparison {
  std::string first;
  std::string second;

  Comparison(std::string a, std::string b) : first(std::move(a)), second(std::move(b)) {
    if (second < first) std::swap(first, second);
  }
  auto operator<=>(const Comparison&) const = default;
  std::string label() const { return first + ":" + second; }
};

/// Studies of one subgroup plus the treatment universe and reference.
///
/// Treatments are kept in lexicographic order. The reference plays the role
/// of treatment 1: basic parameters are effects of every other treatment
/// relative to it.
class Network {
 public:
  Network() = default;

  Network(std::string subgroup, std::vector<Study> studies, std::string reference)
      : subgroup_(std::move(subgroup)), studies_(std::move(studies)), reference_(std::move(reference)) {
    std::set<std::string> t;
    for (const auto& s : studies_) {
      validate_study(s);
      for (const auto& a : s.arms) t.insert(a.treatment);
    }
    treatments_.assign(t.begin(), t.end());
    if (!studies_.empty() && !t.count(reference_))
      throw Error("reference treatment '" + reference_ + "' does not appear in network '" +
                  subgroup_ + "'");
    if (studies_.empty()) treatments_ = {reference_};
  }

  const std::string& subgroup() const { return subgroup_; }
  const std::vector<Study>& studies() const { return studies_; }
  const std::vector<std::string>& treatments() const { return treatments_; }
  const std::string& reference() const { return reference_; }
  bool empty() const { return studies_.empty(); }

  bool contains(const std::string& t) const {
    return std::binary_search(treatments_.begin(), treatments_.end(), t);
  }

  /// Non-reference treatments, in the order of the basic parameters.
  std::vector<std::string> basic_treatments() const {
    std::vector<std::string> out;
    for (const auto& t : treatments_)
      if (t != reference_) out.push_back(t);
    return out;
  }

  /// Network restricted to studies accepted by the predicate.
  template <class Pred>
  Network filtered(Pred&& keep) const {
    std::vector<Study> kept;
    for (const auto& s : studies_)
      if (keep(s)) kept.push_back(s);
    return Network(subgroup_, std::move(kept), reference_);
  }

 private:
  std::string subgroup_;
  std::vector<Study> studies_;
  std::vector<std::string> treatments_;
  std::string reference_;
};

/// Studies of both networks pooled as one population.
inline Network merge(const Network& a, const Network& b, const std::string& label) {
  if (a.reference() != b.reference())
    throw Error("cannot merge networks with different references ('" + a.reference() + "' vs '" +
                b.reference() + "')");
  std::vector<Study> all = a.studies();
  all.insert(all.end(), b.studies().begin(), b.studies().end());
  return Network(label, std::move(all), a.reference());
}

struct TreatmentSets {
  std::vector<std::string> t_a;  // union
  std::vector<std::string> t_c;  // intersection

  bool common(const std::string& t) const { return std::binary_search(t_c.begin(), t_c.end(), t); }
};

/// Standard pooled SD across all arms of a study:
/// sqrt(sum (n_k - 1) sd_k^2 / (sum n_k - K)).
inline double pooled_sd(const Study& study) {
  if (study.arms.size() < 2)
    throw Error("study '" + study.id + "': pooled SD needs at least 2 arms");
  double num = 0.0;
  long total_n = 0;
  for (const auto& a : study.arms) {
    if (a.n < 1 || !(a.sd > 0.0))
      throw Error("study '" + study.id + "': arm '" + a.treatment + "' violates n >= 2, sd > 0");
    num += (a.n - 1) * a.sd * a.sd;
    total_n += a.n;
  }
  const long df = total_n - static_cast<long>(study.arms.size());
  if (df <= 0) throw Error("study '" + study.id + "': insufficient sample for pooled SD");
  return std::sqrt(num / static_cast<double>(df));
}

inline TreatmentSets treatment_sets(const Network& dense, const Network& sparse) {
  if (dense.empty() || sparse.empty()) throw Error("treatment_sets: both networks must be non-empty");
  TreatmentSets s;
  const auto& a = dense.treatments();
  const auto& b = sparse.treatments();
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(s.t_a));
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(s.t_c));
  if (!s.common(sparse.reference()) || !s.common(dense.reference()))
    throw Error("reference treatment must be common to both networks");
  if (s.t_c.size() < 2) throw Error("no borrowable comparisons: only the reference is common");
  return s;
}

/// Number of studies informing each directly compared pair.
inline std::map<Comparison, int> direct_comparisons(const Network& network) {
  std::map<Comparison, int> out;
  for (const auto& s : network.studies())
    for (std::size_t i = 0; i < s.arms.size(); ++i)
      for (std::size_t j = i + 1; j < s.arms.size(); ++j)
        ++out[Comparison(s.arms[i].treatment, s.arms[j].treatment)];
  return out;
}

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

/// Components of a graph over `nodes` (sorted) given by `edges`.
inline std::vector<std::vector<std::string>> components(
    const std::vector<std::string>& nodes,
    const std::vector<std::pair<std::string, std::string>>& edges) {
  auto idx = [&](const std::string& t) {
    return static_cast<std::size_t>(std::lower_bound(nodes.begin(), nodes.end(), t) - nodes.begin());
  };
  DisjointSets ds(nodes.size());
  for (const auto& [a, b] : edges) ds.unite(idx(a), idx(b));
  std::map<std::size_t, std::vector<std::string>> groups;
  for (std::size_t i = 0; i < nodes.size(); ++i) groups[ds.find(i)].push_back(nodes[i]);
  std::vector<std::vector<std::string>> out;
  for (auto& [root, members] : groups) out.push_back(std::move(members));
  return out;
}

}  // namespace detail

/// Connected components of the comparison graph. Empty network: none.
inline std::vector<std::vector<std::string>> connectivity(const Network& network) {
  if (network.empty()) return {};
  std::vector<std::pair<std::string, std::string>> edges;
  for (const auto& s : network.studies())
    for (std::size_t k = 1; k < s.arms.size(); ++k)
      edges.emplace_back(s.arms[0].treatment, s.arms[k].treatment);
  return detail::components(network.treatments(), edges);
}

inline std::string describe_components(const std::vector<std::vector<std::string>>& comps) {
  std::string out;
  for (std::size_t c = 0; c < comps.size(); ++c) {
    out += (c ? "; " : "") + std::string("{");
    for (std::size_t i = 0; i < comps[c].size(); ++i) out += (i ? ", " : "") + comps[c][i];
    out += "}";
  }
  return out;
}

inline void require_connected(const Network& network) {
  if (network.empty()) throw Error("network '" + network.subgroup() + "' has no studies");
  auto comps = connectivity(network);
  if (comps.size() != 1)
    throw Error("network '" + network.subgroup() + "' is disconnected: " + describe_components(comps));
}

}  // namespace nmaborrow
