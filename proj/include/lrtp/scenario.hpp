// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "toml.hpp"

#include "lrtp/ckpt.hpp"
#include "lrtp/cost_model.hpp"
#include "lrtp/model.hpp"
#include "lrtp/norm.hpp"
#include "lrtp/plan.hpp"
#include "lrtp/sim.hpp"

namespace lrtp::scenario {

using json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;
inline constexpr double kOracleTolerance = 1e-9;
inline constexpr double kIdentityTolerance = 1e-12;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kPlanError = 3, kCheckFailed = 4 };

/// Toggles named after the framework's configuration switches.
struct Flags {
  std::optional<std::string> lowrank_architecture_type;
  std::optional<bool> enable_btp;
  std::optional<bool> enable_online_rmsnorm;
  std::optional<bool> enable_grouping;
  std::optional<bool> enable_lowrank_ckpt;
};

struct Scenario {
  std::string name;
  std::string source;  // file name the scenario was read from
  std::optional<std::string> preset;
  ModelConfig cfg;
  Variant variant = Variant::FullRank;
  std::optional<Strategy> strategy;
  RunShape shape;
  bool enable_btp = false;
  bool enable_online_rmsnorm = false;
  bool enable_grouping = false;
  bool enable_lowrank_ckpt = false;
  std::uint64_t seed = 0;
  int element_bytes = 2;
  std::size_t exec_cap = 256;
  std::optional<std::string> plan_fault;
};

/// Command-line values that take precedence over the scenario file.
struct Overrides {
  Flags flags;
  std::optional<std::uint64_t> seed;
  std::optional<int> element_bytes;
  std::optional<std::size_t> exec_cap;
};

namespace detail {

// Locates the line declaring `key` so configuration errors can point at it.
inline std::size_t key_line(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const std::string_view rest = std::string_view(line).substr(first);
    if (line.find('"' + key + '"') != std::string::npos) return n;
    if (rest.starts_with(key) && rest.substr(key.size()).find_first_not_of(" \t") != std::string::npos &&
        rest.substr(key.size())[rest.substr(key.size()).find_first_not_of(" \t")] == '=') {
      return n;
    }
    if (rest == "[" + key + "]") return n;
  }
  return 1;
}

inline std::size_t offset_line(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

class Reader {
 public:
  Reader(std::string source, std::string text) : source_(std::move(source)), text_(std::move(text)) {}

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(source_ + ":" + std::to_string(key_line(text_, key)) + ": " + msg);
  }

  void only(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) const {
    if (!obj.is_object()) fail(where, "'" + where + "' must be a table");
    for (const auto& [k, v] : obj.items()) {
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
        fail(k, "unknown key '" + k + "' in " + where);
      }
    }
  }

  std::uint64_t uint(const json& obj, const std::string& key, std::uint64_t fallback, bool positive = true) const {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) fail(key, "'" + key + "' must be a non-negative integer");
    const auto n = v.get<std::uint64_t>();
    if (positive && n == 0) fail(key, "'" + key + "' must be positive");
    return n;
  }

  bool boolean(const json& obj, const std::string& key, bool fallback) const {
    if (!obj.contains(key)) return fallback;
    if (!obj.at(key).is_boolean()) fail(key, "'" + key + "' must be true or false");
    return obj.at(key).get<bool>();
  }

  std::optional<std::string> string(const json& obj, const std::string& key) const {
    if (!obj.contains(key)) return std::nullopt;
    if (!obj.at(key).is_string()) fail(key, "'" + key + "' must be a string");
    return obj.at(key).get<std::string>();
  }

  double number(const json& obj, const std::string& key, double fallback) const {
    if (!obj.contains(key)) return fallback;
    if (!obj.at(key).is_number()) fail(key, "'" + key + "' must be a number");
    return obj.at(key).get<double>();
  }

  const std::string& text() const { return text_; }
  const std::string& source() const { return source_; }

 private:
  std::string source_;
  std::string text_;
};

inline json parse_document(const std::string& source, const std::string& text, bool toml_syntax) {
  if (toml_syntax) {
    try {
      toml::table tbl = toml::parse(text, source);
      std::ostringstream os;
      os << toml::json_formatter{tbl};
      return json::parse(os.str());
    } catch (const toml::parse_error& e) {
      throw ConfigError(source + ":" + std::to_string(e.source().begin.line) + ": " +
                        std::string(e.description()));
    }
  }
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ":" + std::to_string(offset_line(text, e.byte)) + ": malformed json");
  }
}

}  // namespace detail

/// Parses a scenario from JSON or TOML text. Errors carry "file:line: message".
inline Scenario parse_scenario(const std::string& text, const std::string& source, bool toml_syntax) {
  const json doc = detail::parse_document(source, text, toml_syntax);
  const detail::Reader rd(source, text);
  rd.only(doc, "scenario",
          {"name", "model", "variant", "lowrank-architecture-type", "strategy", "shape", "flags", "seed",
           "element_bytes", "exec_cap", "plan_fault"});

  Scenario sc;
  sc.source = std::filesystem::path(source).filename().string();
  sc.name = rd.string(doc, "name").value_or(std::filesystem::path(source).stem().string());

  if (!doc.contains("model")) rd.fail("model", "missing 'model' table");
  const json& model = doc.at("model");
  rd.only(model, "model", {"preset", "layers", "heads", "d", "d_ff", "r", "eps"});
  if (auto p = rd.string(model, "preset")) {
    try {
      sc.cfg = preset(*p);
    } catch (const ConfigError& e) {
      rd.fail("preset", e.what());
    }
    sc.preset = p;
  } else {
    for (const char* k : {"heads", "d", "d_ff", "r"})
      if (!model.contains(k)) rd.fail("model", std::string("model needs '") + k + "' or a preset");
  }
  sc.cfg.layers = rd.uint(model, "layers", sc.cfg.layers);
  sc.cfg.heads = rd.uint(model, "heads", sc.cfg.heads);
  sc.cfg.d = rd.uint(model, "d", sc.cfg.d);
  sc.cfg.d_ff = rd.uint(model, "d_ff", sc.cfg.d_ff);
  sc.cfg.r = rd.uint(model, "r", sc.cfg.r);
  sc.cfg.eps = rd.number(model, "eps", sc.cfg.eps);
  try {
    sc.cfg.validate();
  } catch (const ConfigError& e) {
    rd.fail("model", e.what());
  }

  json flags = doc.value("flags", json::object());
  rd.only(flags, "flags",
          {"lowrank-architecture-type", "enable-btp", "enable-online-rmsnorm", "enable-grouping",
           "enable-lowrank-ckpt"});
  std::optional<std::string> variant = rd.string(doc, "variant");
  for (const json* src : std::initializer_list<const json*>{&doc, &flags})
    if (auto v = rd.string(*src, "lowrank-architecture-type")) variant = v;
  if (!variant) rd.fail("variant", "missing 'variant' (or lowrank-architecture-type)");
  try {
    sc.variant = parse_variant(*variant);
  } catch (const ConfigError& e) {
    rd.fail(doc.contains("variant") ? "variant" : "lowrank-architecture-type", e.what());
  }
  if (auto s = rd.string(doc, "strategy")) {
    try {
      sc.strategy = parse_strategy(*s);
    } catch (const ConfigError& e) {
      rd.fail("strategy", e.what());
    }
  }
  sc.enable_btp = rd.boolean(flags, "enable-btp", false);
  sc.enable_online_rmsnorm = rd.boolean(flags, "enable-online-rmsnorm", false);
  sc.enable_grouping = rd.boolean(flags, "enable-grouping", false);
  sc.enable_lowrank_ckpt = rd.boolean(flags, "enable-lowrank-ckpt", false);

  json shape = doc.value("shape", json::object());
  rd.only(shape, "shape", {"b", "s", "tp", "p"});
  sc.shape.b = rd.uint(shape, "b", 1);
  sc.shape.s = rd.uint(shape, "s", 1);
  sc.shape.tp = rd.uint(shape, "tp", 1);
  sc.shape.p = rd.uint(shape, "p", 1);

  sc.seed = rd.uint(doc, "seed", 0, false);
  sc.element_bytes = static_cast<int>(rd.uint(doc, "element_bytes", 2));
  if (sc.element_bytes != 1 && sc.element_bytes != 2 && sc.element_bytes != 4 && sc.element_bytes != 8) {
    rd.fail("element_bytes", "'element_bytes' must be one of 1, 2, 4, 8");
  }
  sc.exec_cap = rd.uint(doc, "exec_cap", 256);
  sc.plan_fault = rd.string(doc, "plan_fault");
  return sc;
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ":1: cannot read scenario file");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext != ".json" && ext != ".toml") throw ConfigError(path + ":1: scenario must be a .json or .toml file");
  return parse_scenario(buf.str(), path, ext == ".toml");
}

inline void apply_overrides(Scenario& sc, const Overrides& o) {
  if (o.flags.lowrank_architecture_type) sc.variant = parse_variant(*o.flags.lowrank_architecture_type);
  if (o.flags.enable_btp) sc.enable_btp = *o.flags.enable_btp;
  if (o.flags.enable_online_rmsnorm) sc.enable_online_rmsnorm = *o.flags.enable_online_rmsnorm;
  if (o.flags.enable_grouping) sc.enable_grouping = *o.flags.enable_grouping;
  if (o.flags.enable_lowrank_ckpt) sc.enable_lowrank_ckpt = *o.flags.enable_lowrank_ckpt;
  if (o.seed) sc.seed = *o.seed;
  if (o.element_bytes) {
    if (*o.element_bytes != 1 && *o.element_bytes != 2 && *o.element_bytes != 4 && *o.element_bytes != 8) {
      throw ConfigError("--element-bytes must be one of 1, 2, 4, 8");
    }
    sc.element_bytes = *o.element_bytes;
  }
  if (o.exec_cap) sc.exec_cap = *o.exec_cap;
}

struct Resolved {
  Strategy strategy = Strategy::FullRankTP;
  PlanOptions options;
  std::vector<std::string> warnings;
};

/// Derives the strategy from the toggles unless the scenario names one, and
/// downgrades toggles that do not apply, with a warning for each.
inline Resolved resolve(const Scenario& sc) {
  Resolved r;
  const bool low_rank = is_low_rank(sc.variant);
  if (sc.strategy) {
    r.strategy = *sc.strategy;
  } else if (!low_rank) {
    r.strategy = Strategy::FullRankTP;
    if (sc.enable_btp) r.warnings.push_back("enable-btp ignored: full-rank blocks use full-rank tp");
  } else {
    r.strategy = sc.enable_btp ? Strategy::BTP : Strategy::VanillaTP;
  }
  r.options.grouping = sc.enable_grouping;
  r.options.online_norm = sc.enable_online_rmsnorm;
  r.options.lowrank_ckpt = sc.enable_lowrank_ckpt;
  r.options.element_bytes = sc.element_bytes;
  if (r.options.online_norm && r.strategy != Strategy::BTP) {
    r.warnings.push_back("enable-online-rmsnorm needs btp; falling back to sync rmsnorm");
    r.options.online_norm = false;
  }
  if (r.options.lowrank_ckpt && !low_rank) {
    r.warnings.push_back("enable-lowrank-ckpt needs a low-rank architecture; checkpointing disabled");
    r.options.lowrank_ckpt = false;
  }
  return r;
}

inline Tensor scenario_input(const Scenario& sc) {
  return seeded_fill({sc.shape.b, sc.shape.s, sc.cfg.d}, lrtp::detail::derive_seed(sc.seed, 1000));
}

inline bool executable(const Scenario& sc) { return sc.cfg.d <= sc.exec_cap; }

inline std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

inline json volume_json(const VolumeSummary& v) {
  json j;
  j["elements"] = v.elements;
  j["bytes"] = v.bytes;
  j["calls"] = v.calls;
  return j;
}

/// Result of one `run`: the report, the trace CSV and the process exit code.
struct Outcome {
  int exit_code = kOk;
  std::string message;
  json report;
  std::string trace_csv;
  // Figures used by compare.
  std::optional<std::uint64_t> traced_block_elements;
  std::optional<std::uint64_t> traced_block_calls;
  std::optional<std::uint64_t> norm_stat_calls;
  std::optional<std::uint64_t> fused_stat_elements;
  std::optional<Ratio> eff_sim;
  std::uint64_t formula_block_elements = 0;
  double mlp_ai = 0.0;
  Strategy strategy = Strategy::FullRankTP;
};

inline json metadata_json(const Scenario& sc, const Resolved& res) {
  json m;
  m["lowrank-architecture-type"] = to_string(sc.variant);
  m["enable-btp"] = sc.enable_btp;
  m["enable-online-rmsnorm"] = sc.enable_online_rmsnorm;
  m["enable-grouping"] = sc.enable_grouping;
  m["enable-lowrank-ckpt"] = sc.enable_lowrank_ckpt;
  m["strategy"] = to_string(res.strategy);
  m["seed"] = sc.seed;
  m["element_bytes"] = sc.element_bytes;
  m["exec_cap"] = sc.exec_cap;
  if (sc.plan_fault) m["plan_fault"] = *sc.plan_fault;
  return m;
}

inline Outcome run_scenario(const Scenario& sc) {
  Outcome out;
  const Resolved res = resolve(sc);
  out.strategy = res.strategy;
  json rep;
  rep["schema_version"] = kSchemaVersion;
  rep["scenario"] = {{"name", sc.name}, {"source", sc.source}};
  rep["metadata"] = metadata_json(sc, res);
  json model = {{"layers", sc.cfg.layers}, {"heads", sc.cfg.heads}, {"d", sc.cfg.d},
                {"d_ff", sc.cfg.d_ff},     {"r", sc.cfg.r},         {"eps", sc.cfg.eps}};
  if (sc.preset) model["preset"] = *sc.preset;
  rep["model"] = model;
  rep["shape"] = {{"b", sc.shape.b}, {"s", sc.shape.s}, {"tp", sc.shape.tp}, {"p", sc.shape.p}};

  std::vector<std::string> warnings = res.warnings;
  const cost::CostReport cr = cost::ratio_report(sc.cfg, sc.shape, sc.element_bytes);
  out.formula_block_elements = cr.at(res.strategy).block_volume;
  out.mlp_ai = cr.at(res.strategy).mlp_ai;

  std::optional<ShardPlan> pl;
  try {
    pl = plan(res.strategy, sc.variant, sc.cfg, sc.shape, res.options);
  } catch (const PlanError& e) {
    out.exit_code = kPlanError;
    out.message = std::string("plan error: ") + e.what();
    rep["warnings"] = warnings;
    rep["cost_model"] = cost::to_json(cr);
    rep["simulation"] = {{"status", out.message}};
    out.report = std::move(rep);
    out.trace_csv = "chunk_id,kind,tag,elements,bytes,pass\n";
    return out;
  }
  for (const auto& w : pl->warnings)
    if (std::find(warnings.begin(), warnings.end(), w) == warnings.end()) warnings.push_back(w);
  if (sc.plan_fault) *pl = inject_fault(*pl, *sc.plan_fault);
  rep["warnings"] = warnings;
  rep["cost_model"] = cost::to_json(cr);

  json simj;
  if (!executable(sc)) {
    simj["status"] = "simulation skipped: dims exceed cap";
    rep["simulation"] = simj;
    out.report = std::move(rep);
    out.trace_csv = "chunk_id,kind,tag,elements,bytes,pass\n";
    return out;
  }

  const auto block = build_block(sc.cfg, sc.variant, sc.seed);
  const Tensor x = scenario_input(sc);
  const auto policy = res.options.lowrank_ckpt ? ckpt::Policy::LowRankBoundary : ckpt::Policy::None;
  const auto run = ckpt::run_with_ckpt(*pl, block, x, policy);
  const auto ref = reference_forward(block, x);
  const double diff = max_abs_diff(run.sim.y, ref.y);
  const Trace& tr = run.sim.trace;
  const auto block_vol = trace_volume(tr, Tag::Block, Pass::Forward);
  const auto norm_stat = trace_volume(tr, Tag::NormStat, Pass::Forward);
  const auto fused = trace_volume(tr, Tag::FusedStat, Pass::Forward);

  simj["status"] = "executed";
  simj["plan"] = to_text(*pl);
  json vols;
  vols["block"] = volume_json(block_vol);
  vols["fused-stat"] = volume_json(fused);
  vols["norm-stat"] = volume_json(norm_stat);
  vols["boundary"] = volume_json(trace_volume(tr, Tag::Boundary, Pass::Forward));
  vols["reforward"] = volume_json(trace_volume(tr, Tag::Block, Pass::Reforward));
  simj["volumes"] = vols;
  simj["formula_block_elements"] = out.formula_block_elements;
  simj["trace_matches_formula"] = block_vol.elements == out.formula_block_elements;
  simj["oracle_max_abs_diff"] = diff;
  simj["oracle_tolerance"] = kOracleTolerance;
  simj["gemm_launches"] = tr.gemm_launches;
  simj["gemm_flops"] = tr.gemm_flops;
  simj["attention_flops"] = tr.attention_flops;
  simj["stored_activation_elements"] = tr.stored_activation_elements;

  const auto& cr_ = run.report;
  json ck;
  ck["policy"] = ckpt::to_string(cr_.policy);
  ck["stored_with"] = cr_.stored_with;
  ck["stored_without"] = cr_.stored_without;
  ck["delta_mem"] = cr_.delta_mem;
  ck["recompute_flops"] = cr_.recompute_flops;
  ck["reforward_collectives"] = cr_.reforward_collectives;
  if (cr_.recompute_flops > 0) {
    out.eff_sim = ckpt::eff_ckpt(cr_);
    ck["eff_sim"] = cost::ratio_json(*out.eff_sim);
  }
  simj["checkpoint"] = ck;
  rep["simulation"] = simj;

  std::ostringstream csv;
  write_trace_csv(csv, tr);
  out.trace_csv = csv.str();
  out.traced_block_elements = block_vol.elements;
  out.traced_block_calls = block_vol.calls;
  out.norm_stat_calls = norm_stat.calls;
  out.fused_stat_elements = fused.elements;
  out.report = std::move(rep);
  if (!(diff <= kOracleTolerance)) {
    out.exit_code = kCheckFailed;
    out.message = "oracle mismatch: max abs diff " + sci(diff) + " exceeds tolerance";
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

inline void write_run(const Outcome& out, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", out.report.dump(2) + "\n");
  write_text(dir / "trace.csv", out.trace_csv);
}

// ---- validate ----------------------------------------------------------------

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

using RecordKey = std::tuple<std::string, int, int, std::uint64_t, std::uint64_t, int, std::uint64_t>;

inline std::vector<RecordKey> record_keys(const std::vector<CollectiveRecord>& recs) {
  std::vector<RecordKey> keys;
  for (const auto& r : recs) {
    if (r.pass != Pass::Forward) continue;
    keys.emplace_back(r.chunk_id, static_cast<int>(r.kind), static_cast<int>(r.main.tag), r.main.elements,
                      r.main.bytes, r.extra ? static_cast<int>(r.extra->tag) : -1,
                      r.extra ? r.extra->elements : 0);
  }
  std::sort(keys.begin(), keys.end());
  return keys;
}

// Per-rank recovery identity at eps = 0 on one random instance:
// (x_i / rms(x)) W_i == ((x_i / rms(x_i)) W_i) * rms(x_i) / rms(x)
inline double recovery_identity_error(const Scenario& sc, std::uint64_t seed) {
  const std::size_t tp = sc.shape.tp, rows = sc.shape.b * sc.shape.s;
  const Tensor x = seeded_fill({rows, sc.cfg.d}, seed);
  const Tensor w = seeded_fill({sc.cfg.d, sc.cfg.r}, seed + 1);
  const Tensor ones({sc.cfg.d / tp}, 1.0);
  const Tensor rms_global = norm::rms_from_sum_sq(norm::sum_of_squares(x), sc.cfg.d, 0.0);
  const auto xs = split_axis(x, 1, tp);
  const auto ws = split_axis(w, 0, tp);
  double worst = 0.0;
  for (std::size_t i = 0; i < tp; ++i) {
    const Tensor lhs = matmul(norm::normalize(xs[i], ones, rms_global), ws[i]).out;
    const auto local = norm::online_local(xs[i], ones, 0.0);
    Tensor rhs = matmul(local.normalized, ws[i]).out;
    std::vector<double> corr(rows);
    for (std::size_t row = 0; row < rows; ++row) corr[row] = local.rms_local[row] / rms_global[row];
    rhs = scale_rows(rhs, corr);
    worst = std::max(worst, max_abs_diff(lhs, rhs));
  }
  return worst;
}

}  // namespace detail

/// Runs the property suite for one scenario.
inline std::vector<Check> validate_checks(const Scenario& sc) {
  const Resolved res = resolve(sc);
  ShardPlan pl = plan(res.strategy, sc.variant, sc.cfg, sc.shape, res.options);
  if (sc.plan_fault) pl = inject_fault(pl, *sc.plan_fault);
  const auto block = build_block(sc.cfg, sc.variant, sc.seed);
  const Tensor x = scenario_input(sc);
  const auto ref = reference_forward(block, x);
  const auto run = sim::execute_forward(pl, block, x);
  const auto formula = cost::tp_block_volume(res.strategy, sc.cfg, sc.shape);
  const auto traced = trace_volume(run.trace, Tag::Block, Pass::Forward);
  std::vector<Check> checks;
  auto add = [&](std::string name, bool pass, std::string detail = {}) {
    checks.push_back({std::move(name), pass, std::move(detail)});
  };

  const double diff = max_abs_diff(run.y, ref.y);
  add("oracle equivalence", diff <= kOracleTolerance, "max abs diff " + sci(diff));
  add(traced.elements == formula ? "trace==formula" : "trace≠formula", traced.elements == formula,
      std::to_string(traced.elements) + " traced vs " + std::to_string(formula) + " predicted");
  add("plan==trace", detail::record_keys(enumerate_collectives(pl)) == detail::record_keys(run.trace.records));
  {
    std::map<std::string, int> per_chunk;
    for (const auto& r : run.trace.records)
      if (r.kind != CollectiveKind::AllGather && r.main.tag == Tag::Block) ++per_chunk[r.chunk_id];
    bool ok = per_chunk.size() == pl.chunks.size();
    for (const auto& c : pl.chunks) ok = ok && per_chunk[c.id] == 1;
    for (const auto& r : run.trace.records)
      ok = ok && !(r.kind == CollectiveKind::AllGather && r.main.tag == Tag::Block);
    add("one all-reduce per chunk", ok);
  }
  add("iteration volume == 2 x layers x traced",
      cost::iter_volume(cost::Parallelism::TP, res.strategy, sc.cfg, sc.shape) ==
          2 * sc.cfg.layers * traced.elements);
  {
    const auto again = sim::execute_forward(pl, block, x);
    add("determinism", again.trace == run.trace && again.y == run.y);
  }
  {
    PlanOptions other = res.options;
    other.grouping = !other.grouping;
    ShardPlan alt = plan(res.strategy, sc.variant, sc.cfg, sc.shape, other);
    const auto alt_run = sim::execute_forward(alt, block, x);
    const auto& grouped = other.grouping ? alt_run : run;
    const auto& plain = other.grouping ? run : alt_run;
    const auto gv = trace_volume(grouped.trace, Tag::Block, Pass::Forward);
    const auto pv = trace_volume(plain.trace, Tag::Block, Pass::Forward);
    const bool fewer_calls = res.strategy == Strategy::FullRankTP ? gv.calls == pv.calls : gv.calls < pv.calls;
    const double gdiff = max_abs_diff(grouped.y, plain.y);
    add("grouping equivalence",
        gdiff <= kOracleTolerance && gv.elements == pv.elements && fewer_calls &&
            grouped.trace.gemm_launches < plain.trace.gemm_launches,
        "max abs diff " + sci(gdiff));
  }
  const cost::CostReport cr = cost::ratio_report(sc.cfg, sc.shape, sc.element_bytes);
  add("cost-model ratio identities", cr.ratio_identities_hold);

  if (res.strategy == Strategy::BTP) {
    double worst = 0.0;
    for (std::uint64_t i = 0; i < 8; ++i) worst = std::max(worst, detail::recovery_identity_error(sc, sc.seed + 17 * i));
    add("online-norm recovery identity", worst <= kIdentityTolerance, "max abs error " + sci(worst));
    PlanOptions other = res.options;
    other.online_norm = !other.online_norm;
    const auto alt = sim::execute_forward(plan(res.strategy, sc.variant, sc.cfg, sc.shape, other), block, x);
    add("sync/online agreement", max_abs_diff(alt.y, run.y) <= kOracleTolerance);
    const auto& online_trace = res.options.online_norm ? run.trace : alt.trace;
    const auto& sync_trace = res.options.online_norm ? alt.trace : run.trace;
    add("standalone stat collectives (online 0, sync 1 per norm)",
        trace_volume(online_trace, Tag::NormStat).calls == 0 && trace_volume(sync_trace, Tag::NormStat).calls == 2);
  }

  if (res.options.lowrank_ckpt) {
    const auto ck = ckpt::run_with_ckpt(pl, block, x, ckpt::Policy::LowRankBoundary);
    add("checkpointed output bit-identical", ck.sim.y == run.y);
    add("checkpoint stores fewer activations", ck.report.stored_with < ck.report.stored_without);
    if (res.strategy == Strategy::BTP) {
      add("reforward collectives == 0", ck.report.reforward_collectives == 0,
          std::to_string(ck.report.reforward_collectives) + " re-forward collectives");
    } else {
      add("reforward collectives >= 1", ck.report.reforward_collectives >= 1,
          std::to_string(ck.report.reforward_collectives) + " re-forward collectives");
    }
  }
  return checks;
}

inline int validate_scenario(const Scenario& sc, std::ostream& out, std::ostream& err) {
  if (!executable(sc)) {
    err << "validate needs toy-scale dims: d=" << sc.cfg.d << " exceeds exec cap " << sc.exec_cap << "\n";
    return kConfigError;
  }
  std::vector<Check> checks;
  try {
    checks = validate_checks(sc);
  } catch (const PlanError& e) {
    err << "plan error: " << e.what() << "\n";
    return kPlanError;
  }
  for (const auto& w : resolve(sc).warnings) err << "warning: " << w << "\n";
  std::vector<std::string> failed;
  out << "validate " << sc.name << "\n";
  for (const auto& c : checks) {
    out << "  " << c.name << ": " << (c.pass ? "PASS" : "FAIL");
    if (!c.detail.empty()) out << "  (" << c.detail << ")";
    out << "\n";
    if (!c.pass) failed.push_back(c.name);
  }
  if (failed.empty()) return kOk;
  err << "failed invariants:";
  for (const auto& f : failed) err << " [" << f << "]";
  err << "\n";
  return kCheckFailed;
}

// ---- compare -----------------------------------------------------------------

struct Comparison {
  json report;
  std::string csv;
  std::vector<std::string> incompatible;
  int exit_code = kOk;
};

inline std::string ratio_cell(const std::optional<Ratio>& r) {
  return r ? nlohmann::json(boost::rational_cast<double>(*r)).dump() : "";
}

/// Runs scenarios concurrently (each with its own simulator) and assembles the
/// side-by-side report in input order.
inline Comparison compare_scenarios(const std::vector<Scenario>& scenarios) {
  if (scenarios.size() < 2) throw ConfigError("compare needs at least two scenarios");
  std::vector<std::future<Outcome>> futures;
  for (const auto& sc : scenarios) futures.push_back(std::async(std::launch::async, [&sc] { return run_scenario(sc); }));
  std::vector<Outcome> outs;
  for (auto& f : futures) outs.push_back(f.get());

  Comparison cmp;
  const auto& base = scenarios.front();
  json rows = json::array();
  std::ostringstream csv;
  csv << "name,strategy,variant,b,s,tp,d,d_ff,r,formula_block_elements,traced_block_elements,block_calls,"
         "norm_stat_calls,fused_stat_elements,mlp_ai,eff_sim,volume_ratio_to_first,compatible\n";
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    const auto& sc = scenarios[i];
    const auto& o = outs[i];
    const bool compatible = sc.cfg == base.cfg && sc.shape == base.shape;
    if (!compatible) cmp.incompatible.push_back(sc.name + " differs in model or shape from " + base.name);
    if (o.exit_code != kOk) cmp.exit_code = std::max(cmp.exit_code, o.exit_code);
    const Ratio to_first(static_cast<std::int64_t>(o.formula_block_elements),
                         static_cast<std::int64_t>(outs.front().formula_block_elements));
    json row;
    row["name"] = sc.name;
    row["strategy"] = to_string(o.strategy);
    row["variant"] = to_string(sc.variant);
    row["shape"] = {{"b", sc.shape.b}, {"s", sc.shape.s}, {"tp", sc.shape.tp}, {"p", sc.shape.p}};
    row["formula_block_elements"] = o.formula_block_elements;
    row["traced_block_elements"] = o.traced_block_elements ? json(*o.traced_block_elements) : json();
    row["block_calls"] = o.traced_block_calls ? json(*o.traced_block_calls) : json();
    row["norm_stat_calls"] = o.norm_stat_calls ? json(*o.norm_stat_calls) : json();
    row["fused_stat_elements"] = o.fused_stat_elements ? json(*o.fused_stat_elements) : json();
    row["mlp_ai"] = o.mlp_ai;
    row["eff_sim"] = o.eff_sim ? cost::ratio_json(*o.eff_sim) : json();
    row["volume_ratio_to_first"] = cost::ratio_json(to_first);
    row["compatible"] = compatible;
    row["status"] = o.exit_code == kOk ? "ok" : o.message;
    rows.push_back(std::move(row));

    auto cell = [](const std::optional<std::uint64_t>& v) { return v ? std::to_string(*v) : std::string(); };
    csv << sc.name << ',' << to_string(o.strategy) << ',' << to_string(sc.variant) << ',' << sc.shape.b << ','
        << sc.shape.s << ',' << sc.shape.tp << ',' << sc.cfg.d << ',' << sc.cfg.d_ff << ',' << sc.cfg.r << ','
        << o.formula_block_elements << ',' << cell(o.traced_block_elements) << ',' << cell(o.traced_block_calls)
        << ',' << cell(o.norm_stat_calls) << ',' << cell(o.fused_stat_elements) << ','
        << nlohmann::json(o.mlp_ai).dump() << ',' << ratio_cell(o.eff_sim) << ','
        << nlohmann::json(boost::rational_cast<double>(to_first)).dump() << ',' << (compatible ? "true" : "false")
        << '\n';
  }
  cmp.report["schema_version"] = kSchemaVersion;
  cmp.report["scenarios"] = std::move(rows);
  cmp.report["incompatible"] = cmp.incompatible;
  cmp.csv = csv.str();
  return cmp;
}

}  // namespace lrtp::scenario
