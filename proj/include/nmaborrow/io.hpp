// CSV ingestion, analysis configuration, pipelines and report files.
#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nmaborrow/borrowing.hpp"
#include "nmaborrow/core.hpp"
#include "nmaborrow/evaluation.hpp"
#include "nmaborrow/mcmc.hpp"
#include "nmaborrow/nma.hpp"
#include "nmaborrow/priors.hpp"

namespace nmaborrow {

namespace csv {

struct Record {
  std::size_t line = 0;  // 1-based line where the record starts
  std::vector<std::string> fields;

  bool blank() const {
    for (const auto& f : fields)
      if (f.find_first_not_of(" \t\r") != std::string::npos) return false;
    return true;
  }
};

/// RFC-4180 parser: quoted fields may hold commas, doubled quotes and line
/// breaks; CRLF and LF line ends are accepted.
inline std::vector<Record> parse(const std::string& text, const std::string& source = "<input>") {
  std::vector<Record> out;
  Record rec;
  std::string field;
  std::size_t line = 1;
  rec.line = 1;
  bool quoted = false, after_quote = false, any = false;
  auto end_field = [&] {
    rec.fields.push_back(std::move(field));
    field.clear();
    after_quote = false;
  };
  auto end_record = [&] {
    end_field();
    out.push_back(std::move(rec));
    rec = Record{};
    any = false;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
          after_quote = true;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"') {
      if (after_quote || field.find_first_not_of(" \t") != std::string::npos)
        throw Error(source + ":" + std::to_string(line) + ": stray quote in field");
      field.clear();
      quoted = true;
      any = true;
    } else if (c == ',') {
      end_field();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) end_record();
      else {
        out.push_back(Record{line, {""}});
        rec = Record{};
      }
      ++line;
      rec.line = line;
    } else {
      if (after_quote) throw Error(source + ":" + std::to_string(line) + ": text after closing quote");
      field += c;
      any = true;
    }
  }
  if (quoted) throw Error(source + ":" + std::to_string(rec.line) + ": unterminated quoted field");
  if (any || !field.empty()) end_record();
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<Record> read(const std::filesystem::path& path) { return parse(read_file(path), path.string()); }

inline std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string join(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) out += (i ? "," : "") + quote(fields[i]);
  return out + "\n";
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

/// Header-indexed view of a CSV file with line-numbered errors.
class Table {
 public:
  Table(std::vector<Record> records, std::string source, const std::vector<std::string>& required)
      : source_(std::move(source)) {
    std::size_t h = 0;
    while (h < records.size() && records[h].blank()) ++h;
    if (h == records.size()) throw Error(source_ + ": empty file, expected a header");
    const auto& header = records[h];
    for (std::size_t i = 0; i < header.fields.size(); ++i) {
      const auto name = trim(header.fields[i]);
      if (!columns_.emplace(name, i).second) fail(header.line, "duplicate column '" + name + "'");
    }
    for (const auto& r : required)
      if (!columns_.count(r)) fail(header.line, "missing column '" + r + "'");
    rows_.assign(records.begin() + static_cast<std::ptrdiff_t>(h + 1), records.end());
  }

  const std::vector<Record>& rows() const { return rows_; }
  bool has(const std::string& column) const { return columns_.count(column) > 0; }

  std::string get(const Record& r, const std::string& column) const {
    const auto i = columns_.at(column);
    return i < r.fields.size() ? trim(r.fields[i]) : std::string{};
  }

  [[noreturn]] void fail(std::size_t line, const std::string& what) const {
    throw Error(source_ + ":" + std::to_string(line) + ": " + what);
  }

  double number(const Record& r, const std::string& column) const {
    const auto s = get(r, column);
    if (s.empty()) fail(r.line, "missing value for '" + column + "'");
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      fail(r.line, "'" + column + "' is not a number: '" + s + "'");
    }
    if (used != s.size() || !std::isfinite(v)) fail(r.line, "'" + column + "' is not a finite number: '" + s + "'");
    return v;
  }

  long integer(const Record& r, const std::string& column) const {
    const double v = number(r, column);
    if (v != std::floor(v) || std::abs(v) > 1e15) fail(r.line, "'" + column + "' must be an integer");
    return static_cast<long>(v);
  }

  const std::string& source() const { return source_; }

 private:
  std::string source_;
  std::map<std::string, std::size_t> columns_;
  std::vector<Record> rows_;
};

}  // namespace csv

inline std::optional<bool> parse_flag(const std::string& s) {
  std::string v;
  for (char c : s) v += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (v == "1" || v == "true" || v == "yes" || v == "high") return true;
  if (v == "0" || v == "false" || v == "no" || v == "low") return false;
  return std::nullopt;
}

/// Studies from an arm-level CSV (study_id, subgroup, treatment, n, mean,
/// sd, high_rob), one row per arm. Arms keep file order; the first row of a
/// study is its baseline. An empty `subgroups` accepts any label.
inline std::vector<Study> load_studies(const std::filesystem::path& path, const std::set<std::string>& subgroups = {}) {
  const csv::Table table(csv::read(path), path.string(),
                         {"study_id", "subgroup", "treatment", "n", "mean", "sd", "high_rob"});
  std::vector<Study> studies;
  std::map<std::string, std::size_t> index;
  std::map<std::string, std::size_t> first_line;
  for (const auto& r : table.rows()) {
    if (r.blank()) continue;
    const auto id = table.get(r, "study_id");
    const auto subgroup = table.get(r, "subgroup");
    const auto treatment = table.get(r, "treatment");
    if (id.empty()) table.fail(r.line, "empty study_id");
    if (treatment.empty()) table.fail(r.line, "empty treatment");
    if (!subgroups.empty() && !subgroups.count(subgroup)) table.fail(r.line, "unknown subgroup label '" + subgroup + "'");
    const long n = table.integer(r, "n");
    if (n < 2) table.fail(r.line, "n < 2 (n = " + std::to_string(n) + ")");
    const double mean = table.number(r, "mean");
    const double sd = table.number(r, "sd");
    if (!(sd > 0.0)) table.fail(r.line, "sd <= 0");
    const auto rob_text = table.get(r, "high_rob");
    std::optional<bool> rob;
    if (!rob_text.empty()) {
      rob = parse_flag(rob_text);
      if (!rob) table.fail(r.line, "high_rob must be 0/1/true/false, got '" + rob_text + "'");
    }

    auto [it, fresh] = index.emplace(id, studies.size());
    if (fresh) {
      studies.push_back(Study{id, subgroup, {}, rob});
      first_line[id] = r.line;
    }
    auto& s = studies[it->second];
    if (s.subgroup != subgroup) table.fail(r.line, "study '" + id + "' changes subgroup");
    if (s.high_rob != rob) table.fail(r.line, "study '" + id + "' has inconsistent high_rob");
    if (s.has(treatment)) table.fail(r.line, "duplicate (study_id, treatment) = (" + id + ", " + treatment + ")");
    s.arms.push_back(Arm{treatment, static_cast<int>(n), mean, sd});
  }
  for (const auto& s : studies) {
    if (s.arms.size() < 2) table.fail(first_line[s.id], "study '" + s.id + "' has fewer than 2 arms");
    try {
      validate_study(s);
      pooled_sd(s);
    } catch (const Error& e) {
      table.fail(first_line[s.id], e.what());
    }
  }
  return studies;
}

inline Network network_for(const std::vector<Study>& studies, const std::string& subgroup, const std::string& reference) {
  std::vector<Study> kept;
  for (const auto& s : studies)
    if (s.subgroup == subgroup) kept.push_back(s);
  return Network(subgroup, std::move(kept), reference);
}

/// Expert responses (expert_id, treatment, expected_change, sd, confidence).
/// Blank rows, and rows whose value columns are all empty (a skipped drug),
/// are ignored.
inline std::vector<ExpertResponse> load_experts(const std::filesystem::path& path) {
  const csv::Table table(csv::read(path), path.string(), {"expert_id", "treatment", "expected_change", "sd", "confidence"});
  std::vector<ExpertResponse> out;
  for (const auto& r : table.rows()) {
    if (r.blank()) continue;
    if (table.get(r, "expected_change").empty() && table.get(r, "sd").empty() && table.get(r, "confidence").empty())
      continue;
    ExpertResponse e;
    e.expert_id = table.get(r, "expert_id");
    e.treatment = table.get(r, "treatment");
    if (e.expert_id.empty()) table.fail(r.line, "empty expert_id");
    if (e.treatment.empty()) table.fail(r.line, "empty treatment");
    e.expected_change = table.number(r, "expected_change");
    e.sd = table.number(r, "sd");
    if (!(e.sd > 0.0)) table.fail(r.line, "sd <= 0");
    const long c = table.integer(r, "confidence");
    if (c < 1 || c > 10) table.fail(r.line, "confidence must lie in 1..10");
    e.confidence = static_cast<int>(c);
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Number formatting

inline std::string format_number(double v, int decimals) {
  char buf[64];
  if (decimals < 0) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s[0] == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

enum class Rounding { appendix, full };

struct Precision {
  int summaries = 3;
  int league = 3;
  int consistency = 2;
  int sucra = 3;
  int priors = -1;

  static Precision of(Rounding r) {
    if (r == Rounding::full) return {-1, -1, -1, -1, -1};
    return {};
  }
};

/// Prior CSV: comparison "j vs reference", mean, variance, source.
inline std::string beta_priors_csv(const BetaPriorSet& set, int decimals = -1) {
  std::string out = csv::join({"comparison", "mean", "variance", "source"});
  for (const auto& [t, p] : set.priors)
    out += csv::join({t + " vs " + set.reference, format_number(p.prior.mean, decimals),
                      format_number(p.prior.variance, decimals), to_string(p.source)});
  return out;
}

inline std::string predictive_priors_csv(const std::map<std::string, PredictivePrior>& priors,
                                         const std::string& reference, int decimals = -1) {
  std::string out = csv::join({"comparison", "mean", "variance", "source"});
  for (const auto& [t, p] : priors)
    out += csv::join({t + " vs " + reference, format_number(p.mean, decimals), format_number(p.variance, decimals),
                      to_string(p.source)});
  return out;
}

/// Reads a prior CSV; every comparison must be "<treatment> vs <reference>".
inline std::map<std::string, PredictivePrior> load_prior_csv(const std::filesystem::path& path,
                                                             const std::string& reference) {
  const csv::Table table(csv::read(path), path.string(), {"comparison", "mean", "variance", "source"});
  std::map<std::string, PredictivePrior> out;
  const std::string suffix = " vs " + reference;
  for (const auto& r : table.rows()) {
    if (r.blank()) continue;
    const auto c = table.get(r, "comparison");
    if (c.size() <= suffix.size() || c.compare(c.size() - suffix.size(), suffix.size(), suffix) != 0)
      table.fail(r.line, "comparison '" + c + "' is not of the form '<treatment> vs " + reference + "'");
    PredictivePrior p;
    p.mean = table.number(r, "mean");
    p.variance = table.number(r, "variance");
    if (p.variance < 0.0) table.fail(r.line, "negative variance");
    try {
      p.source = parse_prior_source(table.get(r, "source"));
    } catch (const Error& e) {
      table.fail(r.line, e.what());
    }
    if (!out.emplace(c.substr(0, c.size() - suffix.size()), p).second) table.fail(r.line, "duplicate comparison");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct ModelChoice {
  enum class Kind { naive, standard, pairwise, borrow };
  Kind kind = Kind::standard;
  PriorSource beta_source = PriorSource::data;  // borrow only
  WeightScheme::Kind scheme = WeightScheme::Kind::none;

  std::string name() const {
    switch (kind) {
      case Kind::naive: return "naive";
      case Kind::standard: return "standard";
      case Kind::pairwise: return "pairwise";
      case Kind::borrow: break;
    }
    const char* s = scheme == WeightScheme::Kind::none ? "no_dw" : scheme == WeightScheme::Kind::rob ? "rob_dw" : "nct_dw";
    return std::string("borrow:") + to_string(beta_source) + ":" + s;
  }

  static ModelChoice parse(const std::string& text) {
    for (const auto& m : all())
      if (m.name() == text) return m;
    throw Error("unknown model '" + text + "' (expected naive, standard, pairwise or borrow:<data|expert>:<no_dw|rob_dw|nct_dw>)");
  }

  /// The nine analysis variants.
  static std::vector<ModelChoice> all() {
    std::vector<ModelChoice> out{{Kind::naive}};
    for (auto src : {PriorSource::data, PriorSource::expert})
      for (auto sch : {WeightScheme::Kind::none, WeightScheme::Kind::rob, WeightScheme::Kind::non_common_treatment})
        out.push_back({Kind::borrow, src, sch});
    out.push_back({Kind::standard});
    out.push_back({Kind::pairwise});
    return out;
  }
};

inline ScalePrior parse_scale_prior(const std::string& text) {
  auto args = [&](const std::string& head) -> std::vector<double> {
    if (text.rfind(head + "(", 0) != 0 || text.back() != ')') return {};
    std::vector<double> v;
    std::stringstream ss(text.substr(head.size() + 1, text.size() - head.size() - 2));
    std::string part;
    while (std::getline(ss, part, ',')) {
      try {
        v.push_back(std::stod(csv::trim(part)));
      } catch (const std::exception&) {
        throw Error("bad number in scale prior '" + text + "'");
      }
    }
    return v;
  };
  if (auto v = args("beta"); v.size() == 2) return ScalePrior::beta(v[0], v[1]);
  if (auto v = args("uniform"); v.size() == 2) return ScalePrior::uniform(v[0], v[1]);
  if (auto v = args("fixed"); v.size() == 1) return ScalePrior::fixed(v[0]);
  throw Error("unknown scale prior '" + text + "' (expected beta(a,b), uniform(lo,hi) or fixed(w))");
}

struct AnalysisConfig {
  ModelChoice model;
  std::string studies;        // arm-level CSV for both subgroups
  std::string dense_studies;  // optional separate file for the dense subgroup
  std::string experts;
  std::string sparse_label = "P1";
  std::string dense_label = "P2";
  std::string reference;
  ScalePrior weight_prior = ScalePrior::beta(3.0, 3.0);
  double tau_scale = 1.0;
  Direction direction = Direction::lower_better;
  Rounding rounding = Rounding::appendix;
  SamplerConfig sampler;
  bool allow_unconverged = false;
  bool node_split = false;
  bool export_traces = false;
  std::string out = "nmab_out";

  void validate() const {
    if (studies.empty()) throw Error("config: 'studies' is required");
    if (reference.empty()) throw Error("config: 'reference' is required");
    if (model.kind == ModelChoice::Kind::borrow && model.beta_source == PriorSource::expert && experts.empty())
      throw Error("config: model " + model.name() + " requires an 'experts' file");
    if (!(tau_scale > 0.0)) throw Error("config: tau_scale must be positive");
    sampler.validate();
  }

  /// Canonical key = value text; parse(to_text()) reproduces the config.
  std::string to_text() const {
    std::string t;
    auto kv = [&](const std::string& k, const std::string& v) { t += k + " = " + v + "\n"; };
    kv("model", model.name());
    kv("studies", studies);
    if (!dense_studies.empty()) kv("dense_studies", dense_studies);
    if (!experts.empty()) kv("experts", experts);
    kv("sparse_label", sparse_label);
    kv("dense_label", dense_label);
    kv("reference", reference);
    kv("weight_prior", weight_prior.describe());
    kv("tau_scale", format_number(tau_scale, -1));
    kv("direction", to_string(direction));
    kv("rounding", rounding == Rounding::appendix ? "appendix" : "full");
    kv("seed", std::to_string(sampler.seed));
    kv("chains", std::to_string(sampler.n_chains));
    kv("iterations", std::to_string(sampler.iterations));
    kv("burn_in", std::to_string(sampler.burn_in));
    kv("thin", std::to_string(sampler.thin));
    kv("allow_unconverged", allow_unconverged ? "true" : "false");
    kv("node_split", node_split ? "true" : "false");
    kv("export_traces", export_traces ? "true" : "false");
    kv("out", out);
    return t;
  }

  static AnalysisConfig parse(const std::string& text, const std::string& source = "<config>") {
    AnalysisConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t no = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
      ++no;
      const auto body = csv::trim(line.substr(0, line.find('#')));
      if (body.empty()) continue;
      const auto eq = body.find('=');
      auto fail = [&](const std::string& what) { throw Error(source + ":" + std::to_string(no) + ": " + what); };
      if (eq == std::string::npos) fail("expected 'key = value'");
      const auto key = csv::trim(body.substr(0, eq));
      const auto value = csv::trim(body.substr(eq + 1));
      if (!seen.insert(key).second) fail("duplicate key '" + key + "'");
      auto boolean = [&] {
        const auto b = parse_flag(value);
        if (!b) fail("'" + key + "' must be true or false");
        return *b;
      };
      auto integer = [&] {
        try {
          std::size_t used = 0;
          const long long v = std::stoll(value, &used);
          if (used != value.size()) fail("'" + key + "' must be an integer");
          return v;
        } catch (const std::logic_error&) {
        }
        fail("'" + key + "' must be an integer");
        return 0LL;
      };
      try {
        if (key == "model") c.model = ModelChoice::parse(value);
        else if (key == "studies") c.studies = value;
        else if (key == "dense_studies") c.dense_studies = value;
        else if (key == "experts") c.experts = value;
        else if (key == "sparse_label") c.sparse_label = value;
        else if (key == "dense_label") c.dense_label = value;
        else if (key == "reference") c.reference = value;
        else if (key == "weight_prior") c.weight_prior = parse_scale_prior(value);
        else if (key == "tau_scale") c.tau_scale = std::stod(value);
        else if (key == "direction") c.direction = parse_direction(value);
        else if (key == "rounding") {
          if (value == "appendix") c.rounding = Rounding::appendix;
          else if (value == "full") c.rounding = Rounding::full;
          else fail("rounding must be 'appendix' or 'full'");
        } else if (key == "seed") c.sampler.seed = static_cast<std::uint64_t>(std::stoull(value));
        else if (key == "chains") c.sampler.n_chains = static_cast<int>(integer());
        else if (key == "iterations") c.sampler.iterations = static_cast<int>(integer());
        else if (key == "burn_in") c.sampler.burn_in = static_cast<int>(integer());
        else if (key == "thin") c.sampler.thin = static_cast<int>(integer());
        else if (key == "allow_unconverged") c.allow_unconverged = boolean();
        else if (key == "node_split") c.node_split = boolean();
        else if (key == "export_traces") c.export_traces = boolean();
        else if (key == "out") c.out = value;
        else fail("unknown key '" + key + "'");
      } catch (const std::logic_error&) {
        fail("bad value for '" + key + "': '" + value + "'");
      } catch (const Error& e) {
        const std::string what = e.what();
        if (what.rfind(source + ":", 0) == 0) throw;
        fail(what);
      }
    }
    return c;
  }

  static AnalysisConfig load(const std::filesystem::path& path) {
    auto c = parse(csv::read_file(path), path.string());
    // relative data paths resolve against the config's directory
    const auto base = path.parent_path();
    auto resolve = [&](std::string& p) {
      if (!p.empty() && std::filesystem::path(p).is_relative() && !base.empty()) p = (base / p).lexically_normal().string();
    };
    resolve(c.studies);
    resolve(c.dense_studies);
    resolve(c.experts);
    return c;
  }
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Pipelines

struct SummaryRow {
  std::string fit;
  std::string parameter;
  PosteriorSummary summary;
  double mcse = 0.0;
  double rhat = 1.0;
};

struct ConvergenceRow {
  std::string fit;
  std::string parameter;
  double rhat_split = 1.0;
  double rhat_classic = 1.0;
};

struct LeagueGrid {
  std::vector<std::string> treatments;
  std::map<std::pair<std::size_t, std::size_t>, PosteriorSummary> cells;  // (row, col)

  static LeagueGrid from(const LeagueTable& t) {
    LeagueGrid g;
    g.treatments = t.treatments();
    for (std::size_t r = 0; r < t.size(); ++r)
      for (std::size_t c = 0; c < t.size(); ++c)
        if (r != c) g.cells[{r, c}] = t.entry(r, c);
    return g;
  }
};

struct ReportBundle {
  AnalysisConfig config;
  std::string inputs_hash;
  std::vector<std::pair<std::string, PosteriorSamples>> fits;  // name, samples
  std::vector<SummaryRow> summaries;
  std::vector<ConvergenceRow> convergence;
  std::optional<LeagueGrid> league;
  std::optional<RankMatrix> ranks;
  std::vector<std::pair<std::string, double>> sucra;
  std::vector<NodeSplitResult> consistency;
  std::optional<BetaPriorSet> beta_priors;
  std::optional<std::map<std::string, PredictivePrior>> predictive_priors;
  std::string analysis_reference;
  std::vector<std::string> warnings;
  std::vector<std::pair<std::string, double>> timings;  // seconds
  bool converged = true;
  double max_rhat = 1.0;
};

struct Inputs {
  Network sparse;
  Network dense;
  std::vector<ExpertResponse> experts;
  std::string hash;
};

inline bool needs_dense(const ModelChoice& m) {
  return m.kind == ModelChoice::Kind::naive || m.kind == ModelChoice::Kind::borrow;
}

inline Inputs load_inputs(const AnalysisConfig& cfg) {
  Inputs in;
  const std::set<std::string> labels{cfg.sparse_label, cfg.dense_label};
  std::uint64_t h = fnv1a(csv::read_file(cfg.studies));
  auto studies = load_studies(cfg.studies, labels);
  if (!cfg.dense_studies.empty()) {
    h = fnv1a(csv::read_file(cfg.dense_studies), h);
    std::set<std::string> ids;
    for (const auto& s : studies) ids.insert(s.id);
    for (auto& s : load_studies(cfg.dense_studies, labels)) {
      if (!ids.insert(s.id).second) throw Error("study id '" + s.id + "' appears in both study files");
      studies.push_back(std::move(s));
    }
  }
  in.sparse = network_for(studies, cfg.sparse_label, cfg.reference);
  if (in.sparse.empty()) throw Error("no studies with subgroup '" + cfg.sparse_label + "'");
  if (needs_dense(cfg.model)) {
    in.dense = network_for(studies, cfg.dense_label, cfg.reference);
    if (in.dense.empty()) throw Error("no studies with subgroup '" + cfg.dense_label + "'");
  }
  if (!cfg.experts.empty()) {
    h = fnv1a(csv::read_file(cfg.experts), h);
    in.experts = load_experts(cfg.experts);
  }
  in.hash = hex64(h);
  return in;
}

namespace detail {

inline void collect(ReportBundle& b, const std::string& fit, PosteriorSamples samples) {
  for (const auto& name : samples.names()) {
    SummaryRow row{fit, name, mcmc::summarize(samples, name), 0.0, 1.0};
    ConvergenceRow conv{fit, name, 1.0, 1.0};
    if (samples.n_chains() >= 2 && samples.n_draws() >= 10) {
      conv.rhat_split = mcmc::gelman_rubin(samples, name, mcmc::RhatVariant::split);
      conv.rhat_classic = mcmc::gelman_rubin(samples, name, mcmc::RhatVariant::classic);
      row.rhat = conv.rhat_split;
      b.max_rhat = std::max(b.max_rhat, conv.rhat_split);
      if (!(conv.rhat_split < 1.1)) b.converged = false;
    }
    row.mcse = samples.n_draws() >= 4 ? mcmc::monte_carlo_se(samples, name) : 0.0;
    b.summaries.push_back(std::move(row));
    b.convergence.push_back(conv);
  }
  for (const auto& w : samples.warnings()) b.warnings.push_back(fit + ": " + w);
  b.fits.emplace_back(fit, std::move(samples));
}

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

inline void rank_and_tabulate(ReportBundle& b, const EffectDraws& draws, Direction direction) {
  b.league = LeagueGrid::from(league_table(draws));
  b.ranks = rank_probabilities(draws, direction);
  for (const auto& w : b.ranks->warnings) b.warnings.push_back("ranking: " + w);
  if (draws.treatments().size() >= 2)
    for (const auto& t : draws.treatments()) b.sucra.emplace_back(t, sucra(*b.ranks, t));
}

inline void split_all(ReportBundle& b, const Network& net, const MuPrior& mp, const TauPrior& tp,
                      const SamplerConfig& cfg) {
  for (const auto& [t, v] : splittable_comparisons(net))
    b.consistency.push_back(node_split(net, t, v, mp, tp, with_stream(cfg, "split:" + t + ":" + v)));
}

}  // namespace detail

/// Beta priors for a borrowing model.
inline BetaPriorSet build_beta_priors(const AnalysisConfig& cfg, const Inputs& in, const TreatmentSets& sets) {
  const TauPrior tp{cfg.tau_scale};
  if (cfg.model.beta_source == PriorSource::data)
    return data_based_beta_priors(in.sparse, in.dense, sets, tp, cfg.sampler);
  if (in.experts.empty()) throw Error("expert-based priors need at least one expert response");
  auto pool = pool_experts(in.experts, cfg.reference, median_pooled_sd(in.sparse), sets.t_c,
                           with_stream(cfg.sampler, "experts"), TauPrior{1.0});
  auto set = expert_beta_priors(pool, in.dense, sets, tp, cfg.sampler);
  for (const auto& w : pool.warnings) set.notes.push_back(w);
  return set;
}

/// Runs one of the nine analysis variants.
inline ReportBundle run_analysis(const AnalysisConfig& cfg) {
  cfg.validate();
  ReportBundle b;
  b.config = cfg;
  detail::Stopwatch clock;
  const auto in = load_inputs(cfg);
  b.inputs_hash = in.hash;
  b.timings.emplace_back("load", clock.lap());
  const TauPrior tp{cfg.tau_scale};
  b.analysis_reference = cfg.reference;

  switch (cfg.model.kind) {
    case ModelChoice::Kind::standard:
    case ModelChoice::Kind::naive: {
      const Network net = cfg.model.kind == ModelChoice::Kind::standard
                              ? in.sparse
                              : merge(in.dense, in.sparse, cfg.dense_label + "+" + cfg.sparse_label);
      auto samples = fit_standard_nma(net, MuPrior{}, tp, cfg.sampler);
      b.timings.emplace_back("fit", clock.lap());
      detail::rank_and_tabulate(b, EffectDraws::from_samples(samples, net), cfg.direction);
      detail::collect(b, cfg.model.name(), std::move(samples));
      if (cfg.node_split) {
        detail::split_all(b, net, MuPrior{}, tp, cfg.sampler);
        b.timings.emplace_back("node_split", clock.lap());
      }
      break;
    }
    case ModelChoice::Kind::pairwise: {
      LeagueGrid grid;
      grid.treatments = in.sparse.treatments();
      auto pos = [&](const std::string& t) {
        return static_cast<std::size_t>(std::find(grid.treatments.begin(), grid.treatments.end(), t) -
                                        grid.treatments.begin());
      };
      for (const auto& [c, count] : direct_comparisons(in.sparse)) {
        const auto& versus = c.second == cfg.reference ? c.second : c.first;
        const auto& treatment = c.second == cfg.reference ? c.first : c.second;
        auto samples =
            pairwise_meta_analysis(in.sparse, versus, treatment, tp, with_stream(cfg.sampler, treatment + ":" + versus));
        const auto s = mcmc::summarize(samples, "u");
        grid.cells[{pos(treatment), pos(versus)}] = s;
        grid.cells[{pos(versus), pos(treatment)}] = PosteriorSummary{-s.mean, s.sd, -s.q975, -s.median, -s.q025};
        detail::collect(b, "pairwise:" + treatment + " vs " + versus, std::move(samples));
      }
      b.league = std::move(grid);
      b.timings.emplace_back("fit", clock.lap());
      break;
    }
    case ModelChoice::Kind::borrow: {
      const auto sets = treatment_sets(in.dense, in.sparse);
      const auto betas = build_beta_priors(cfg, in, sets);
      for (const auto& n : betas.notes) b.warnings.push_back("priors: " + n);
      b.timings.emplace_back("beta_priors", clock.lap());
      const auto weighted = assign_weights(in.dense, sets, {cfg.model.scheme, cfg.weight_prior});
      auto stage1 = fit_stage1(weighted, betas, tp, cfg.sampler);
      b.timings.emplace_back("stage1", clock.lap());
      const auto pp = predictive_priors(stage1, betas, in.sparse);
      auto stage2 = fit_stage2(in.sparse, pp, tp, cfg.sampler);
      b.timings.emplace_back("stage2", clock.lap());
      detail::rank_and_tabulate(b, EffectDraws::from_samples(stage2, in.sparse), cfg.direction);
      detail::collect(b, "stage1", std::move(stage1));
      detail::collect(b, "stage2", std::move(stage2));
      if (cfg.node_split) {
        MuPrior mp;
        for (const auto& [t, p] : pp) mp.priors[t] = NormalPrior{p.mean, p.variance};
        detail::split_all(b, in.sparse, mp, tp, cfg.sampler);
        b.timings.emplace_back("node_split", clock.lap());
      }
      b.beta_priors = betas;
      b.predictive_priors = pp;
      break;
    }
  }
  if (!b.converged) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "convergence failure: max split R-hat %.4f >= 1.1", b.max_rhat);
    b.warnings.push_back(buf);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Report files

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline std::string interval(const PosteriorSummary& s, int decimals, char open = '(', char close = ')') {
  return format_number(s.mean, decimals) + " " + open + format_number(s.q025, decimals) + ", " +
         format_number(s.q975, decimals) + close;
}

inline std::string summaries_csv(const ReportBundle& b, int d) {
  std::string out = csv::join({"fit", "parameter", "mean", "sd", "q2.5", "median", "q97.5", "mcse", "rhat"});
  for (const auto& r : b.summaries)
    out += csv::join({r.fit, r.parameter, format_number(r.summary.mean, d), format_number(r.summary.sd, d),
                      format_number(r.summary.q025, d), format_number(r.summary.median, d),
                      format_number(r.summary.q975, d), format_number(r.mcse, d < 0 ? d : d + 1),
                      format_number(r.rhat, d < 0 ? d : 3)});
  return out;
}

inline std::string convergence_csv(const ReportBundle& b) {
  std::string out = csv::join({"fit", "parameter", "rhat_split", "rhat_classic", "status"});
  for (const auto& r : b.convergence)
    out += csv::join({r.fit, r.parameter, format_number(r.rhat_split, 4), format_number(r.rhat_classic, 4),
                      r.rhat_split < 1.1 ? "ok" : "not converged"});
  out += "\n" + csv::join({"fit", "block", "chain", "acceptance_rate"});
  for (const auto& [fit, samples] : b.fits)
    for (const auto& a : samples.acceptance())
      out += csv::join({fit, a.block, std::to_string(a.chain), format_number(a.rate, 4)});
  return out;
}

inline std::string league_csv(const ReportBundle& b, int d) {
  std::vector<std::string> header{""};
  if (!b.league) return csv::join(header);
  const auto& g = *b.league;
  header.insert(header.end(), g.treatments.begin(), g.treatments.end());
  std::string out = csv::join(header);
  for (std::size_t r = 0; r < g.treatments.size(); ++r) {
    std::vector<std::string> row{g.treatments[r]};
    for (std::size_t c = 0; c < g.treatments.size(); ++c) {
      const auto it = g.cells.find({r, c});
      row.push_back(r == c || it == g.cells.end() ? "" : interval(it->second, d));
    }
    out += csv::join(row);
  }
  return out;
}

inline std::string sucra_csv(const ReportBundle& b, int d) {
  std::string out = csv::join({"treatment", "sucra", "mean_rank"});
  if (!b.ranks) return out;
  for (const auto& [t, s] : b.sucra) {
    const auto& row = b.ranks->p[b.ranks->index(t)];
    double mean_rank = 0.0;
    for (std::size_t r = 0; r < row.size(); ++r) mean_rank += (r + 1.0) * row[r];
    out += csv::join({t, format_number(s, d), format_number(mean_rank, d)});
  }
  return out;
}

inline std::string rank_csv(const ReportBundle& b, int d) {
  std::vector<std::string> header{"treatment"};
  if (!b.ranks) return csv::join(header);
  for (std::size_t r = 0; r < b.ranks->treatments.size(); ++r) header.push_back("rank" + std::to_string(r + 1));
  std::string out = csv::join(header);
  for (std::size_t j = 0; j < b.ranks->treatments.size(); ++j) {
    std::vector<std::string> row{b.ranks->treatments[j]};
    for (double p : b.ranks->p[j]) row.push_back(format_number(p, d));
    out += csv::join(row);
  }
  return out;
}

inline std::string consistency_csv(const std::vector<NodeSplitResult>& rows, int d) {
  std::string out = csv::join({"comparison", "direct", "indirect", "difference", "P", "p_value"});
  for (const auto& r : rows)
    out += csv::join({r.label(), interval(r.direct, d, '[', ']'), interval(r.indirect, d, '[', ']'),
                      interval(r.difference, d, '[', ']'), format_number(r.p_gt0, d), format_number(r.p_value, d)});
  return out;
}

/// Direct and indirect draws of one split comparison, for density plots.
inline std::string density_pairs_csv(const NodeSplitResult& r) {
  std::string out = csv::join({"draw", "direct", "indirect"});
  for (std::size_t s = 0; s < r.direct_draws.size(); ++s)
    out += csv::join({std::to_string(s + 1), format_number(r.direct_draws[s], -1), format_number(r.indirect_draws[s], -1)});
  return out;
}

inline std::string manifest_text(const ReportBundle& b) {
  const auto cfg_text = b.config.to_text();
  std::string t = "# nmab run manifest; replay with: nmab fit --config manifest.cfg\n";
  t += "# config_hash = " + hex64(fnv1a(cfg_text)) + "\n";
  t += "# inputs_hash = " + b.inputs_hash + "\n";
  t += "# seed = " + std::to_string(b.config.sampler.seed) + "\n";
  t += "# converged = " + std::string(b.converged ? "true" : "false") + "\n";
  t += cfg_text;
  for (const auto& [stage, secs] : b.timings) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "# timing.%s = %.3f s\n", stage.c_str(), secs);
    t += buf;
  }
  return t;
}

inline std::string comparison_file_stem(const std::string& label) {
  std::string out;
  for (char c : label) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' ? c : '_';
  return out;
}

/// Writes the report. With a failed convergence gate (and no override) only
/// convergence.csv, warnings.txt and the manifest are written.
inline void emit_report(const ReportBundle& b, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  const auto p = Precision::of(b.config.rounding);
  std::string warnings;
  for (const auto& w : b.warnings) warnings += w + "\n";
  write_text(dir / "warnings.txt", warnings);
  write_text(dir / "convergence.csv", convergence_csv(b));
  write_text(dir / "manifest.cfg", manifest_text(b));
  if (!b.converged && !b.config.allow_unconverged) return;

  write_text(dir / "summaries.csv", summaries_csv(b, p.summaries));
  write_text(dir / "league_table.csv", league_csv(b, p.league));
  write_text(dir / "sucra.csv", sucra_csv(b, p.sucra));
  write_text(dir / "rank_probabilities.csv", rank_csv(b, p.sucra));
  write_text(dir / "consistency.csv", consistency_csv(b.consistency, p.consistency));
  if (!b.consistency.empty()) {
    std::filesystem::create_directories(dir / "consistency_draws");
    for (const auto& r : b.consistency)
      write_text(dir / "consistency_draws" / (comparison_file_stem(r.label()) + ".csv"), density_pairs_csv(r));
  }
  if (b.beta_priors) write_text(dir / "beta_priors.csv", beta_priors_csv(*b.beta_priors, p.priors));
  if (b.predictive_priors)
    write_text(dir / "predictive_priors.csv", predictive_priors_csv(*b.predictive_priors, b.analysis_reference, p.priors));
  if (b.config.export_traces)
    for (const auto& [fit, samples] : b.fits) mcmc::export_traces(samples, dir / "traces" / comparison_file_stem(fit));
}

}  // namespace nmaborrow
