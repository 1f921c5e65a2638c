#include "flowsense/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "flowsense/classical.hpp"
#include "flowsense/csv.hpp"
#include "flowsense/featurize.hpp"
#include "flowsense/probe.hpp"
#include "flowsense/timeutil.hpp"

namespace flowsense::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- config helpers ---------------------------------------------------------------------

json without(json j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) j.erase(k);
  return j;
}

json paths_json(const Paths& p) {
  return {{"flows", p.flows}, {"surveys", p.surveys}, {"hosts", p.hosts}, {"apps", p.apps},
          {"out_dir", p.out_dir}};
}

json grids_json() {
  return {{"verdict_delta_rmse_pct", stats::kGridDelta},
          {"verdict_sign_pct", stats::kGridSign},
          {"label_high", interpret::kSweepHi},
          {"label_low", interpret::kSweepLo}};
}

json hyper_json(const RunConfig& c) {
  return {
      {"model", c.model.to_json()},
      {"train", without(c.train.to_json(), {"seed"})},
      {"sae", without(c.sae.to_json(), {"seed"})},
      {"category_selection",
       {{"min_coverage", c.selection.min_coverage},
        {"min_share", c.selection.min_share},
        {"min_week_fraction", c.selection.min_week_fraction}}},
      {"featurize", {{"min_windows", c.featurize.min_windows}}},
      {"interpret",
       {{"generality_top_n", c.interpret.generality_top_n},
        {"generality_fraction", c.interpret.generality_fraction},
        {"label_high", c.interpret.label_high},
        {"label_low", c.interpret.label_low},
        {"label_top_n", c.interpret.label_top_n},
        {"reference_codes", c.interpret.reference_codes},
        {"perturbation_multiplier", c.interpret.perturbation_multiplier}}},
      {"stats",
       {{"fdr_alpha", c.stats.fdr_alpha},
        {"sign_rule", c.stats.sign_rule},
        {"delta_rmse_pct", c.stats.delta_rmse_pct},
        {"sign_pct", c.stats.sign_pct},
        {"gee_tol", c.stats.gee_tol},
        {"gee_max_iter", c.stats.gee_max_iter},
        {"min_pre_survey_hours", c.stats.min_pre_survey_hours}}},
      {"grids", grids_json()},
  };
}

// Keys present in `j` but absent from the reference layout. Arrays are not descended.
void unknown_keys(const json& j, const json& ref, const std::string& prefix,
                  std::vector<std::string>& errors) {
  if (!j.is_object() || !ref.is_object()) return;
  for (const auto& [k, v] : j.items()) {
    if (!ref.contains(k)) {
      errors.push_back("unknown key " + prefix + "/" + k);
    } else {
      unknown_keys(v, ref.at(k), prefix + "/" + k, errors);
    }
  }
}

template <typename F>
void collect(std::vector<std::string>& errors, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    errors.emplace_back(e.what());
  } catch (const json::exception& e) {
    errors.emplace_back(e.what());
  }
}

std::string resolve(const std::string& p, const fs::path& base) {
  if (p.empty() || base.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

// ---- file helpers -----------------------------------------------------------------------

std::ifstream open_input(const fs::path& path, std::string_view producer) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("missing input " + path.string() +
                      (producer.empty() ? std::string()
                                        : " (run the '" + std::string(producer) + "' stage first)"));
  }
  return in;
}

std::ofstream open_output(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  return out;
}

template <typename F>
void write_file(const fs::path& path, F&& f) {
  auto out = open_output(path);
  f(out);
  out.close();
  if (!out) throw RuntimeError("failed writing " + path.string());
}

void require_file(const fs::path& path, std::string_view producer) {
  open_input(path, producer);
}

json checksums(const std::vector<fs::path>& files) {
  json out = json::array();
  for (const auto& f : files) out.push_back({{"path", f.string()}, {"sha256", sha256_file(f.string())}});
  return out;
}

StageReport finish(const RunConfig& cfg, std::string_view stage, const std::vector<fs::path>& inputs,
                   const std::vector<fs::path>& outputs, json summary, bool nonconverged = false) {
  const json effective = cfg.to_json();
  json manifest = {{"stage", stage},
                   {"flowsense_version", kVersion},
                   {"checkpoint_format", checkpoint::kFormatVersion},
                   {"synth_manifest_format", synth::kManifestVersion},
                   {"seed", cfg.seed},
                   {"threads", cfg.threads},
                   {"config_sha256", sha256_text(effective.dump())},
                   {"config", effective},
                   {"overrides", overrides(effective)},
                   {"inputs", checksums(inputs)},
                   {"outputs", checksums(outputs)},
                   {"summary", summary}};
  write_file(stage_dir(cfg, stage) / kRunManifest,
             [&](std::ostream& out) { out << manifest.dump(1) << "\n"; });
  StageReport r;
  r.stage = stage;
  for (const auto& o : outputs) r.outputs.push_back(o.string());
  r.nonconverged = nonconverged;
  r.summary = std::move(summary);
  return r;
}

// With no flow file configured, the synthetic cohort stands in for real input.
std::string flows_path(const RunConfig& cfg) {
  return cfg.paths.flows.empty() ? artifact(cfg, "synth", "flows.csv").string() : cfg.paths.flows;
}

std::string surveys_path(const RunConfig& cfg) {
  if (!cfg.paths.flows.empty()) return cfg.paths.surveys;
  return cfg.paths.surveys.empty() ? artifact(cfg, "synth", "surveys.csv").string() : cfg.paths.surveys;
}

fs::path dict_hosts(const RunConfig& cfg) { return cfg.paths.hosts; }
fs::path dict_apps(const RunConfig& cfg) { return cfg.paths.apps; }

ingest::Dictionary load_dictionary(const RunConfig& cfg) {
  require_file(dict_hosts(cfg), "");
  require_file(dict_apps(cfg), "");
  return ingest::Dictionary::load(cfg.paths.hosts, cfg.paths.apps);
}

std::vector<featurize::HourlyFeature> load_features(const RunConfig& cfg) {
  auto in = open_input(artifact(cfg, "featurize", "features.csv"), "featurize");
  return featurize::read_features(in);
}

std::vector<stats::SurveyResponse> load_surveys(const RunConfig& cfg) {
  const auto path = surveys_path(cfg);
  if (path.empty()) return {};
  auto in = open_input(path, cfg.paths.flows.empty() ? "synth" : "");
  auto rows = stats::read_surveys(in);
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.user_id, a.survey_ts_ms) < std::tie(b.user_id, b.survey_ts_ms);
  });
  return rows;
}

// Eligible users' windows split chronologically; shared by featurize and train.
featurize::SplitPlan build_plan(const std::map<std::string, std::vector<featurize::HourlyFeature>>& by_user,
                                const RunConfig& cfg, std::vector<std::string>* excluded) {
  std::map<std::string, std::vector<featurize::Window>> windows;
  std::map<std::string, std::size_t> counts;
  for (const auto& [user, rows] : by_user) {
    windows[user] = featurize::build_windows(rows);
    counts[user] = windows[user].size();
  }
  const auto eligible = featurize::eligibility_filter(counts, cfg.featurize.min_windows);
  const std::set<std::string> keep(eligible.begin(), eligible.end());
  featurize::SplitPlan plan;
  for (auto& [user, w] : windows) {
    if (keep.contains(user)) {
      plan[user] = featurize::chronological_split(std::move(w), cfg.train.train_frac);
    } else if (excluded) {
      excluded->push_back(user);
    }
  }
  return plan;
}

// One analysis week: a survey's 7-day window, or a calendar week when no surveys exist.
struct WeekRef {
  std::string user;
  std::optional<std::int64_t> survey_ts;
  const stats::SurveyResponse* survey = nullptr;
  stats::WeekWindow window;
};

std::vector<WeekRef> analysis_weeks(
    const RunConfig& cfg, const std::map<std::string, std::vector<featurize::HourlyFeature>>& by_user,
    const std::vector<stats::SurveyResponse>& surveys) {
  std::vector<WeekRef> out;
  if (!surveys.empty()) {
    for (const auto& s : surveys) {
      out.push_back({s.user_id, s.survey_ts_ms, &s, stats::week_window(s.survey_ts_ms, cfg.tz_offset_minutes)});
    }
    return out;
  }
  for (const auto& [user, rows] : by_user) {
    if (rows.empty()) continue;
    const std::int64_t first = timeutil::floor_div(rows.front().hour.index, 24) * 24;
    for (std::int64_t start = first; start <= rows.back().hour.index; start += 168) {
      out.push_back({user, std::nullopt, nullptr, {start, start + 168}});
    }
  }
  return out;
}

struct WeekSeries {
  std::vector<LocalHour> hours;
  std::vector<double> activity;
};

WeekSeries week_series(const std::vector<featurize::HourlyFeature>& rows, const stats::WeekWindow& w) {
  WeekSeries s;
  auto it = std::lower_bound(rows.begin(), rows.end(), w.first_hour,
                             [](const auto& r, std::int64_t h) { return r.hour.index < h; });
  for (; it != rows.end() && w.contains(it->hour); ++it) {
    s.hours.push_back(it->hour);
    s.activity.push_back(it->activity_pct());
  }
  return s;
}

std::array<MaybeReal, classical::kMetricNames.size()> week_metrics(const WeekSeries& s) {
  if (s.hours.empty()) return {};
  return classical::as_array(
      classical::compute_metrics(classical::HourlySeries::from_hours(s.hours, s.activity)));
}

const std::vector<featurize::HourlyFeature>& rows_of(
    const std::map<std::string, std::vector<featurize::HourlyFeature>>& by_user, const std::string& u) {
  static const std::vector<featurize::HourlyFeature> empty;
  auto it = by_user.find(u);
  return it == by_user.end() ? empty : it->second;
}

std::string week_label(const WeekRef& w) {
  return w.user + "@" + (w.survey_ts ? std::to_string(*w.survey_ts)
                                     : timeutil::format_hour(LocalHour{w.window.first_hour}));
}

sae::Corpus corpus_from_latents(const std::vector<train::HourLatent>& latents) {
  if (latents.empty()) throw ConfigError("latent file is empty");
  sae::Corpus c;
  const auto dim = static_cast<Eigen::Index>(latents.front().z.size());
  c.x.resize(static_cast<Eigen::Index>(latents.size()), dim);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    c.users.push_back(latents[i].user_id);
    c.hours.push_back(latents[i].hour);
    for (Eigen::Index d = 0; d < dim; ++d) c.x(static_cast<Eigen::Index>(i), d) = latents[i].z[d];
  }
  return c;
}

std::vector<int> read_retained(const fs::path& path) {
  auto in = open_input(path, "interpret");
  const auto t = csv::Table::read(in);
  const auto col = t.require_columns({"feature_id"})[0];
  std::vector<int> ids;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto v = csv::parse_int(t.row(i)[col]);
    if (!v) throw ConfigError(path.string() + ": bad feature_id on line " + std::to_string(t.line_number(i)));
    ids.push_back(static_cast<int>(*v));
  }
  return ids;
}

}  // namespace

// ---- config -----------------------------------------------------------------------------

nlohmann::json RunConfig::to_json() const {
  return {{"paths", paths_json(paths)},
          {"tz_offset_minutes", tz_offset_minutes},
          {"seed", seed},
          {"threads", threads},
          {"hyperparameters", hyper_json(*this)},
          {"synth", without(synth.to_json(), {"seed", "tz_offset_minutes"})}};
}

nlohmann::json default_config_json() { return RunConfig{}.to_json(); }

std::vector<std::string> overrides(const nlohmann::json& effective) {
  const json diff = json::diff(default_config_json(), effective);
  std::set<std::string> paths;
  for (const auto& op : diff) paths.insert(op.at("path").get<std::string>());
  return {paths.begin(), paths.end()};
}

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  sae.seed = s;
  synth.seed = s;
}

void RunConfig::validate() const {
  std::vector<std::string> errors;
  collect(errors, [&] { timeutil::validate_tz_offset(tz_offset_minutes); });
  if (threads < 1) errors.push_back("threads must be >= 1");
  if (paths.hosts.empty()) errors.push_back("paths.hosts is required");
  if (paths.apps.empty()) errors.push_back("paths.apps is required");
  if (paths.out_dir.empty()) errors.push_back("paths.out_dir is required");
  collect(errors, [&] { model.validate(); });
  collect(errors, [&] { train.validate(); });
  collect(errors, [&] { sae.validate(); });
  collect(errors, [&] {
    // The synth offset mirrors the top-level one, which is already checked above.
    auto sc = synth;
    if (sc.tz_offset_minutes == tz_offset_minutes) sc.tz_offset_minutes = 0;
    sc.validate();
  });
  const auto& s = selection;
  if (!(s.min_coverage >= 0 && s.min_coverage <= 1)) errors.push_back("category_selection.min_coverage must be in [0, 1]");
  if (!(s.min_share >= 0 && s.min_share <= 1)) errors.push_back("category_selection.min_share must be in [0, 1]");
  if (!(s.min_week_fraction >= 0 && s.min_week_fraction <= 1)) {
    errors.push_back("category_selection.min_week_fraction must be in [0, 1]");
  }
  if (featurize.min_windows < 1) errors.push_back("featurize.min_windows must be >= 1");
  const auto& ip = interpret;
  if (ip.generality_top_n < 1) errors.push_back("interpret.generality_top_n must be >= 1");
  if (!(ip.generality_fraction > 0 && ip.generality_fraction <= 1)) {
    errors.push_back("interpret.generality_fraction must be in (0, 1]");
  }
  if (!(ip.label_low > 0 && ip.label_low < 1 && ip.label_high > 1)) {
    errors.push_back("interpret labels need 0 < label_low < 1 < label_high");
  }
  if (ip.label_top_n < 1) errors.push_back("interpret.label_top_n must be >= 1");
  if (ip.reference_codes < 1) errors.push_back("interpret.reference_codes must be >= 1");
  if (!(ip.perturbation_multiplier > 0)) errors.push_back("interpret.perturbation_multiplier must be positive");
  const auto& sp = stats;
  if (!(sp.fdr_alpha > 0 && sp.fdr_alpha < 1)) errors.push_back("stats.fdr_alpha must be in (0, 1)");
  if (sp.sign_rule != "outcome_agreement" && sp.sign_rule != "prediction_majority") {
    errors.push_back("stats.sign_rule must be outcome_agreement or prediction_majority");
  }
  if (!(sp.delta_rmse_pct >= 0)) errors.push_back("stats.delta_rmse_pct must be >= 0");
  if (!(sp.sign_pct >= 0 && sp.sign_pct <= 100)) errors.push_back("stats.sign_pct must be in [0, 100]");
  if (!(sp.gee_tol > 0)) errors.push_back("stats.gee_tol must be positive");
  if (sp.gee_max_iter < 1) errors.push_back("stats.gee_max_iter must be >= 1");
  if (!errors.empty()) {
    std::string msg = "invalid config (" + std::to_string(errors.size()) + " problem(s)):";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  RunConfig c;
  std::vector<std::string> errors;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  json ref = default_config_json();
  ref["synth"]["patterns"] = json::array();
  unknown_keys(j, ref, "", errors);

  collect(errors, [&] {
    const json p = j.value("paths", json::object());
    c.paths.flows = p.value("flows", c.paths.flows);
    c.paths.surveys = p.value("surveys", c.paths.surveys);
    c.paths.hosts = p.value("hosts", c.paths.hosts);
    c.paths.apps = p.value("apps", c.paths.apps);
    c.paths.out_dir = p.value("out_dir", c.paths.out_dir);
  });
  collect(errors, [&] { c.tz_offset_minutes = j.value("tz_offset_minutes", c.tz_offset_minutes); });
  collect(errors, [&] { c.seed = j.value("seed", c.seed); });
  collect(errors, [&] { c.threads = j.value("threads", c.threads); });

  const json h = j.value("hyperparameters", json::object());
  collect(errors, [&] { c.model = backbone::ModelShape::from_json(h.value("model", json::object())); });
  collect(errors, [&] { c.train = train::TrainConfig::from_json(h.value("train", json::object())); });
  collect(errors, [&] { c.sae = sae::SaeConfig::from_json(h.value("sae", json::object())); });
  collect(errors, [&] {
    const json s = h.value("category_selection", json::object());
    c.selection.min_coverage = s.value("min_coverage", c.selection.min_coverage);
    c.selection.min_share = s.value("min_share", c.selection.min_share);
    c.selection.min_week_fraction = s.value("min_week_fraction", c.selection.min_week_fraction);
  });
  collect(errors, [&] {
    const json s = h.value("featurize", json::object());
    c.featurize.min_windows = s.value("min_windows", c.featurize.min_windows);
  });
  collect(errors, [&] {
    const json s = h.value("interpret", json::object());
    auto& ip = c.interpret;
    ip.generality_top_n = s.value("generality_top_n", ip.generality_top_n);
    ip.generality_fraction = s.value("generality_fraction", ip.generality_fraction);
    ip.label_high = s.value("label_high", ip.label_high);
    ip.label_low = s.value("label_low", ip.label_low);
    ip.label_top_n = s.value("label_top_n", ip.label_top_n);
    ip.reference_codes = s.value("reference_codes", ip.reference_codes);
    ip.perturbation_multiplier = s.value("perturbation_multiplier", ip.perturbation_multiplier);
  });
  collect(errors, [&] {
    const json s = h.value("stats", json::object());
    auto& sp = c.stats;
    sp.fdr_alpha = s.value("fdr_alpha", sp.fdr_alpha);
    sp.sign_rule = s.value("sign_rule", sp.sign_rule);
    sp.delta_rmse_pct = s.value("delta_rmse_pct", sp.delta_rmse_pct);
    sp.sign_pct = s.value("sign_pct", sp.sign_pct);
    sp.gee_tol = s.value("gee_tol", sp.gee_tol);
    sp.gee_max_iter = s.value("gee_max_iter", sp.gee_max_iter);
    sp.min_pre_survey_hours = s.value("min_pre_survey_hours", sp.min_pre_survey_hours);
  });
  if (h.contains("grids") && h.at("grids") != grids_json()) {
    errors.push_back("hyperparameters/grids are fixed by the sweep protocol and cannot be changed");
  }
  collect(errors, [&] {
    if (j.contains("synth")) {
      json s = j.at("synth");
      if (!s.contains("patterns")) s["patterns"] = c.synth.to_json().at("patterns");
      c.synth = synth::SynthConfig::from_json(s);
    }
  });

  c.paths.flows = resolve(c.paths.flows, base_dir);
  c.paths.surveys = resolve(c.paths.surveys, base_dir);
  c.paths.hosts = resolve(c.paths.hosts, base_dir);
  c.paths.apps = resolve(c.paths.apps, base_dir);
  c.paths.out_dir = resolve(c.paths.out_dir, base_dir);
  c.apply_seed(c.seed);
  c.synth.tz_offset_minutes = c.tz_offset_minutes;

  try {
    c.validate();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    const auto nl = msg.find('\n');
    std::istringstream lines(nl == std::string::npos ? "" : msg.substr(nl + 1));
    for (std::string line; std::getline(lines, line);) {
      const std::string item = line.substr(std::min<std::size_t>(4, line.size()));
      if (std::find(errors.begin(), errors.end(), item) == errors.end()) errors.push_back(item);
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid config (" + std::to_string(errors.size()) + " problem(s)):";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j, fs::absolute(path).parent_path());
}

interpret::InterpretConfig RunConfig::interpret_config() const {
  interpret::InterpretConfig c;
  c.generality.top_n = interpret.generality_top_n;
  c.generality.min_participant_fraction = interpret.generality_fraction;
  c.thresholds = {interpret.label_high, interpret.label_low};
  c.top_n_label = interpret.label_top_n;
  c.reference_codes = interpret.reference_codes;
  c.perturbation_multiplier = interpret.perturbation_multiplier;
  c.seed = seed;
  return c;
}

stats::StatsConfig RunConfig::stats_config() const {
  stats::StatsConfig c;
  c.fdr_alpha = stats.fdr_alpha;
  c.sign_rule = stats.sign_rule == "prediction_majority" ? stats::SignRule::prediction_majority
                                                         : stats::SignRule::outcome_agreement;
  c.thresholds = {stats.delta_rmse_pct, stats.sign_pct};
  c.gee.tol = stats.gee_tol;
  c.gee.max_iter = stats.gee_max_iter;
  c.threads = threads;
  return c;
}

// ---- hashing ----------------------------------------------------------------------------

namespace {
std::string digest_hex(const unsigned char* md, unsigned len) {
  std::ostringstream s;
  for (unsigned i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return s.str();
}

template <typename Feed>
std::string sha256(Feed&& feed) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw RuntimeError("sha256 initialization failed");
  }
  feed([&](const void* data, std::size_t n) { EVP_DigestUpdate(ctx.get(), data, n); });
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  return digest_hex(md, len);
}
}  // namespace

std::string sha256_text(const std::string& text) {
  return sha256([&](auto update) { update(text.data(), text.size()); });
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  return sha256([&](auto update) {
    std::vector<char> buf(1 << 16);
    while (in.read(buf.data(), static_cast<std::streamsize>(buf.size())) || in.gcount() > 0) {
      update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  });
}

fs::path stage_dir(const RunConfig& cfg, std::string_view stage) {
  return fs::path(cfg.paths.out_dir) / stage;
}

fs::path artifact(const RunConfig& cfg, std::string_view stage, std::string_view file) {
  return stage_dir(cfg, stage) / file;
}

// ---- stages -----------------------------------------------------------------------------

StageReport run_synth(const RunConfig& cfg) {
  const auto dict = load_dictionary(cfg);
  const auto cohort = synth::generate_cohort(cfg.synth, dict);
  const auto dir = stage_dir(cfg, "synth");
  synth::write_cohort(dir.string(), cohort);
  return finish(cfg, "synth", {dict_hosts(cfg), dict_apps(cfg)},
                {dir / "flows.csv", dir / "surveys.csv", dir / "ground_truth.json"},
                {{"users", cfg.synth.n_users},
                 {"weeks", cfg.synth.weeks},
                 {"flows", cohort.flows.size()},
                 {"surveys", cohort.surveys.size()}});
}

StageReport run_ingest(const RunConfig& cfg) {
  const auto dict = load_dictionary(cfg);
  const auto flows = flows_path(cfg);
  auto in = open_input(flows, cfg.paths.flows.empty() ? "synth" : "");
  const auto parsed = ingest::parse_flow_records(in);
  const auto hourly = ingest::aggregate_hourly(parsed.records, dict, cfg.tz_offset_minutes);
  const auto selection = ingest::category_selection_report(hourly, dict.categories(), cfg.selection);

  const auto out_hourly = artifact(cfg, "ingest", "hourly.csv");
  const auto out_apps = artifact(cfg, "ingest", "hourly_apps.csv");
  const auto out_sel = artifact(cfg, "ingest", "category_selection.csv");
  write_file(out_hourly, [&](std::ostream& o) { ingest::write_hourly(o, hourly, dict.categories()); });
  write_file(out_apps, [&](std::ostream& o) { ingest::write_hourly_apps(o, hourly); });
  write_file(out_sel, [&](std::ostream& o) {
    csv::Writer w(o);
    w.row({"category", "participant_coverage", "traffic_share", "pass"});
    for (const auto& s : selection) {
      w.row({s.category, csv::format_double(s.participant_coverage), csv::format_double(s.traffic_share),
             s.pass ? "1" : "0"});
    }
  });
  std::set<std::string> users;
  for (const auto& h : hourly) users.insert(h.user_id);
  return finish(cfg, "ingest", {flows, dict_hosts(cfg), dict_apps(cfg)},
                {out_hourly, out_apps, out_sel},
                {{"flows", parsed.records.size()},
                 {"skipped_lines", parsed.skipped},
                 {"users", users.size()},
                 {"hours", hourly.size()}});
}

StageReport run_featurize(const RunConfig& cfg) {
  const auto in_hourly = artifact(cfg, "ingest", "hourly.csv");
  auto in = open_input(in_hourly, "ingest");
  const auto hourly = ingest::read_hourly(in, nullptr);
  const auto features = featurize::build_features(hourly);
  const auto by_user = featurize::group_by_user(features);
  std::vector<std::string> excluded;
  const auto plan = build_plan(by_user, cfg, &excluded);

  const auto out_features = artifact(cfg, "featurize", "features.csv");
  const auto out_windows = artifact(cfg, "featurize", "windows.csv");
  write_file(out_features, [&](std::ostream& o) { featurize::write_features(o, features); });
  write_file(out_windows, [&](std::ostream& o) { featurize::write_window_index(o, plan); });
  std::size_t train_windows = 0, test_windows = 0;
  for (const auto& [u, s] : plan) {
    train_windows += s.train.size();
    test_windows += s.test.size();
  }
  return finish(cfg, "featurize", {in_hourly}, {out_features, out_windows},
                {{"hours", features.size()},
                 {"eligible_users", plan.size()},
                 {"excluded_users", excluded},
                 {"train_windows", train_windows},
                 {"test_windows", test_windows}});
}

StageReport run_classical(const RunConfig& cfg) {
  const auto features = load_features(cfg);
  const auto by_user = featurize::group_by_user(features);
  const auto surveys = load_surveys(cfg);
  const auto weeks = analysis_weeks(cfg, by_user, surveys);

  const auto out = artifact(cfg, "classical", "metrics.csv");
  write_file(out, [&](std::ostream& o) {
    csv::Writer w(o);
    std::vector<std::string> header{"user_id", "survey_ts_ms", "week_start", "hours"};
    for (auto m : classical::kMetricNames) header.emplace_back(m);
    w.row(header);
    for (const auto& wk : weeks) {
      const auto series = week_series(rows_of(by_user, wk.user), wk.window);
      std::vector<std::string> row{wk.user, wk.survey_ts ? std::to_string(*wk.survey_ts) : "",
                                   timeutil::format_hour(LocalHour{wk.window.first_hour}),
                                   std::to_string(series.hours.size())};
      for (const auto& v : week_metrics(series)) row.push_back(csv::format_maybe(v));
      w.row(row);
    }
  });
  std::vector<fs::path> inputs{artifact(cfg, "featurize", "features.csv")};
  if (!surveys_path(cfg).empty()) inputs.emplace_back(surveys_path(cfg));
  return finish(cfg, "classical", inputs, {out},
                {{"weeks", weeks.size()}, {"survey_weeks", !surveys.empty()}});
}

StageReport run_train(const RunConfig& cfg) {
  const auto features = load_features(cfg);
  const auto by_user = featurize::group_by_user(features);
  const auto plan = build_plan(by_user, cfg, nullptr);
  if (plan.empty()) throw RuntimeError("no user has enough windows to train on");

  std::vector<featurize::Window> train_windows, all_windows;
  for (const auto& [u, s] : plan) {
    train_windows.insert(train_windows.end(), s.train.begin(), s.train.end());
    all_windows.insert(all_windows.end(), s.train.begin(), s.train.end());
    all_windows.insert(all_windows.end(), s.test.begin(), s.test.end());
  }
  std::vector<train::EpochLog> log;
  const auto model = train::train_phase1(train_windows, cfg.model, cfg.train, &log);
  auto phase2 = train::train_phase2(model, plan, cfg.train, cfg.threads);
  log.insert(log.end(), phase2.log.begin(), phase2.log.end());
  const auto test_loss = train::compare_test_loss(model, phase2.adapters, plan, cfg.train);
  const auto latents = train::extract_latents(model, all_windows);

  const auto out_backbone = artifact(cfg, "train", "backbone.fstc");
  const auto out_adapters = artifact(cfg, "train", "adapters.fstc");
  const auto out_log = artifact(cfg, "train", "training_log.csv");
  const auto out_test = artifact(cfg, "train", "test_loss.csv");
  const auto out_latents = artifact(cfg, "train", "latents.csv");
  const auto out_cos = artifact(cfg, "train", "adapter_delta_cosines.csv");
  fs::create_directories(stage_dir(cfg, "train"));
  train::save_backbone(out_backbone.string(), model, cfg.train);
  train::save_adapters(out_adapters.string(), phase2.adapters, cfg.train);
  write_file(out_log, [&](std::ostream& o) { train::write_training_log(o, log); });
  write_file(out_test, [&](std::ostream& o) { train::write_test_loss(o, test_loss); });
  write_file(out_latents, [&](std::ostream& o) { train::write_latents(o, latents); });

  json summary = {{"train_windows", train_windows.size()},
                  {"latent_hours", latents.size()},
                  {"skipped_adapter_users", phase2.skipped_users}};
  std::vector<fs::path> outputs{out_backbone, out_adapters, out_log, out_test, out_latents};
  if (phase2.adapters.size() >= 2 && !latents.empty()) {
    // Probe the adapters on an evenly spaced sample of corpus latents.
    const std::size_t n = std::min<std::size_t>(512, latents.size());
    Mat<float> probe(static_cast<Eigen::Index>(n), cfg.model.d_model);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& z = latents[i * latents.size() / n].z;
      for (int d = 0; d < cfg.model.d_model; ++d) probe(static_cast<Eigen::Index>(i), d) = z[d];
    }
    const auto cos = train::adapter_delta_cosines(phase2.adapters, probe);
    write_file(out_cos, [&](std::ostream& o) {
      csv::Writer w(o);
      w.row({"user_a", "user_b", "cosine"});
      for (std::size_t a = 0; a < cos.users.size(); ++a) {
        for (std::size_t b = a + 1; b < cos.users.size(); ++b) {
          const double c = cos.cosine(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
          w.row({cos.users[a], cos.users[b], std::isnan(c) ? "" : csv::format_double(c)});
        }
      }
    });
    outputs.push_back(out_cos);
    summary["delta_cosine"] = {{"mean", cos.mean},
                               {"max", cos.max},
                               {"fraction_negative", cos.fraction_negative},
                               {"pairs", cos.pairs},
                               {"zero_norm_users", cos.zero_norm_users}};
  }
  std::size_t improved = 0;
  for (const auto& t : test_loss) improved += t.with_adapter < t.without_adapter;
  summary["users_improved_by_adapter"] = improved;
  summary["users_compared"] = test_loss.size();
  for (const auto& e : log) {
    if (e.phase == 1) summary["phase1_final_loss"] = e.mean_loss;
  }
  return finish(cfg, "train", {artifact(cfg, "featurize", "features.csv")}, outputs, summary);
}

StageReport run_sae(const RunConfig& cfg) {
  const auto in_latents = artifact(cfg, "train", "latents.csv");
  auto in = open_input(in_latents, "train");
  const auto corpus = corpus_from_latents(train::read_latents(in));
  const auto result = sae::train(corpus, cfg.sae);
  const auto table = sae::activation_matrix(corpus, result.params);

  const auto out_ckpt = artifact(cfg, "sae", "sae.fstc");
  const auto out_hist = artifact(cfg, "sae", "history.csv");
  const auto out_act = artifact(cfg, "sae", "activations.csv");
  fs::create_directories(stage_dir(cfg, "sae"));
  sae::save(out_ckpt.string(), result.params, cfg.sae, result.held_out);
  write_file(out_hist, [&](std::ostream& o) { sae::write_history(o, result.history); });
  write_file(out_act, [&](std::ostream& o) { sae::write_activations(o, table); });
  const auto& best = result.history.at(static_cast<std::size_t>(result.best_epoch - 1));
  return finish(cfg, "sae", {in_latents}, {out_ckpt, out_hist, out_act},
                {{"rows", corpus.size()},
                 {"held_out_users", result.held_out},
                 {"best_epoch", result.best_epoch},
                 {"best_val_mse", best.val_mse},
                 {"max_norm_deviation", result.max_norm_deviation},
                 {"active_features", table.active_features().size()}});
}

StageReport run_interpret(const RunConfig& cfg) {
  const auto in_ckpt = artifact(cfg, "sae", "sae.fstc");
  const auto in_act = artifact(cfg, "sae", "activations.csv");
  const auto in_backbone = artifact(cfg, "train", "backbone.fstc");
  const auto in_features = artifact(cfg, "featurize", "features.csv");
  const auto in_hourly = artifact(cfg, "ingest", "hourly.csv");
  const auto in_apps = artifact(cfg, "ingest", "hourly_apps.csv");
  require_file(in_ckpt, "sae");
  require_file(in_backbone, "train");
  const auto params = sae::load(in_ckpt.string());
  auto act_in = open_input(in_act, "sae");
  const auto table = sae::read_activations(act_in, params.dict_size());
  const auto model = train::load_backbone(in_backbone.string());
  interpret::LinearHead head;
  head.weight = model.params().mat(model.head_weight_index()).cast<double>();
  head.bias = model.params().mat(model.head_bias_index()).row(0).transpose().cast<double>();
  const auto features = load_features(cfg);
  auto hourly_in = open_input(in_hourly, "ingest");
  auto apps_in = open_input(in_apps, "ingest");
  const auto traffic = ingest::read_hourly(hourly_in, &apps_in);
  const auto dict = load_dictionary(cfg);
  const auto result = interpret::interpret(table, params, head, features, traffic, dict,
                                           cfg.interpret_config());

  const auto out_csv = artifact(cfg, "interpret", "feature_reports.csv");
  const auto out_txt = artifact(cfg, "interpret", "feature_reports.txt");
  const auto out_sweep = artifact(cfg, "interpret", "label_sweep.csv");
  write_file(out_csv, [&](std::ostream& o) { interpret::write_reports_csv(o, result.reports); });
  write_file(out_txt, [&](std::ostream& o) { interpret::write_reports_text(o, result.reports); });
  write_file(out_sweep, [&](std::ostream& o) { interpret::write_sweep(o, result.sweep); });
  std::size_t perturbation_pass = 0;
  for (const auto& r : result.reports) perturbation_pass += r.perturbation.pass;
  return finish(cfg, "interpret",
                {in_ckpt, in_act, in_backbone, in_features, in_hourly, in_apps, dict_hosts(cfg), dict_apps(cfg)},
                {out_csv, out_txt, out_sweep},
                {{"active_features", result.active.size()},
                 {"retained_features", result.retained.size()},
                 {"perturbation_pass", perturbation_pass}});
}

StageReport run_stats(const RunConfig& cfg) {
  if (surveys_path(cfg).empty()) throw ConfigError("paths.surveys is required for stats");
  const auto surveys = load_surveys(cfg);
  const auto features = load_features(cfg);
  const auto by_user = featurize::group_by_user(features);
  const auto in_ckpt = artifact(cfg, "sae", "sae.fstc");
  const auto in_act = artifact(cfg, "sae", "activations.csv");
  const auto in_reports = artifact(cfg, "interpret", "feature_reports.csv");
  require_file(in_ckpt, "sae");
  const auto params = sae::load(in_ckpt.string());
  auto act_in = open_input(in_act, "sae");
  const auto table = sae::read_activations(act_in, params.dict_size());
  const auto retained = read_retained(in_reports);

  // Dense hourly activation series per retained feature, grouped by user.
  std::map<std::string, std::vector<std::size_t>> rows_by_user;
  for (std::size_t r = 0; r < table.users.size(); ++r) rows_by_user[table.users[r]].push_back(r);
  std::map<int, std::size_t> slot;
  for (std::size_t i = 0; i < retained.size(); ++i) slot[retained[i]] = i;
  std::vector<std::vector<double>> dense(retained.size(), std::vector<double>(table.users.size(), 0.0));
  for (const auto& e : table.entries) {
    auto it = slot.find(e.feature);
    if (it != slot.end()) dense[it->second][e.row] = e.value;
  }

  stats::Panel panel;
  for (int f : retained) {
    panel.predictor_names.push_back("f" + std::to_string(f));
    panel.predictor_family.push_back("sae");
  }
  for (auto m : classical::kMetricNames) {
    panel.predictor_names.emplace_back(m);
    panel.predictor_family.push_back("classical");
  }
  for (const auto& wk : analysis_weeks(cfg, by_user, surveys)) {
    const auto series = week_series(rows_of(by_user, wk.user), wk.window);
    if (series.hours.size() < cfg.stats.min_pre_survey_hours) {
      panel.excluded.push_back(week_label(wk) + ": " + std::to_string(series.hours.size()) +
                               " pre-survey hours");
      continue;
    }
    stats::PersonWeek pw;
    pw.user_id = wk.user;
    pw.survey_ts_ms = *wk.survey_ts;
    pw.coverage_hours = series.hours.size();
    pw.outcomes = stats::score_surveys(*wk.survey);
    std::vector<LocalHour> hours;
    std::vector<std::size_t> rows;
    if (auto it = rows_by_user.find(wk.user); it != rows_by_user.end()) {
      for (auto r : it->second) {
        if (wk.window.contains(table.hours[r])) {
          hours.push_back(table.hours[r]);
          rows.push_back(r);
        }
      }
    }
    for (std::size_t i = 0; i < retained.size(); ++i) {
      std::vector<double> v;
      v.reserve(rows.size());
      for (auto r : rows) v.push_back(dense[i][r]);
      pw.predictors.push_back(stats::weekly_mean(hours, v, wk.window).mean);
    }
    for (const auto& m : week_metrics(series)) pw.predictors.push_back(m);
    panel.rows.push_back(std::move(pw));
  }

  const auto result = stats::run_stats(panel, cfg.stats_config());
  const auto out_panel = artifact(cfg, "stats", "panel.csv");
  const auto out_results = artifact(cfg, "stats", "results.csv");
  const auto out_grid = artifact(cfg, "stats", "verdict_grid.csv");
  write_file(out_panel, [&](std::ostream& o) { stats::write_panel(o, panel); });
  write_file(out_results, [&](std::ostream& o) { stats::write_results(o, result); });
  write_file(out_grid, [&](std::ostream& o) { stats::write_grid(o, result.grid); });
  std::size_t significant = 0;
  for (const auto& p : result.pairs) significant += p.significant;
  return finish(cfg, "stats",
                {surveys_path(cfg), artifact(cfg, "featurize", "features.csv"), in_ckpt, in_act, in_reports},
                {out_panel, out_results, out_grid},
                {{"person_weeks", panel.rows.size()},
                 {"excluded", panel.excluded},
                 {"pairs", result.pairs.size()},
                 {"significant", significant},
                 {"robust", result.primary_robust},
                 {"nonconverged", result.any_nonconverged}},
                result.any_nonconverged);
}

StageReport run_probe(const RunConfig& cfg) {
  const auto in_latents = artifact(cfg, "train", "latents.csv");
  auto in = open_input(in_latents, "train");
  const auto latents = train::read_latents(in);
  const auto features = load_features(cfg);
  const auto by_user = featurize::group_by_user(features);
  const auto surveys = load_surveys(cfg);

  std::map<std::string, std::vector<const train::HourLatent*>> latents_by_user;
  for (const auto& l : latents) latents_by_user[l.user_id].push_back(&l);

  std::vector<Eigen::VectorXd> summaries;
  std::vector<std::string> subjects;
  std::vector<std::array<MaybeReal, classical::kMetricNames.size()>> targets;
  std::size_t single_hour = 0;
  for (const auto& wk : analysis_weeks(cfg, by_user, surveys)) {
    const auto series = week_series(rows_of(by_user, wk.user), wk.window);
    if (series.hours.size() < cfg.stats.min_pre_survey_hours) continue;
    std::vector<Eigen::VectorXd> zs;
    for (const auto* l : latents_by_user[wk.user]) {
      if (!wk.window.contains(l->hour)) continue;
      Eigen::VectorXd z(static_cast<Eigen::Index>(l->z.size()));
      for (std::size_t d = 0; d < l->z.size(); ++d) z(static_cast<Eigen::Index>(d)) = l->z[d];
      zs.push_back(std::move(z));
    }
    if (zs.empty()) continue;
    const auto s = probe::summarize(zs);
    single_hour += s.single_hour;
    summaries.push_back(s.values);
    subjects.push_back(wk.user);
    targets.push_back(week_metrics(series));
  }

  std::vector<probe::ProbeResult> results;
  std::vector<std::string> skipped;
  if (!summaries.empty()) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(summaries.size()), summaries.front().size());
    for (std::size_t i = 0; i < summaries.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = summaries[i];
    for (std::size_t m = 0; m < classical::kMetricNames.size(); ++m) {
      std::vector<MaybeReal> y;
      for (const auto& t : targets) y.push_back(t[m]);
      const std::string name(classical::kMetricNames[m]);
      if (auto r = probe::loso_probe(name, x, subjects, y)) {
        results.push_back(std::move(*r));
      } else {
        skipped.push_back(name);
      }
    }
  }
  const auto out = artifact(cfg, "probe", "probe.csv");
  write_file(out, [&](std::ostream& o) { probe::write_report(o, results); });
  std::vector<fs::path> inputs{in_latents, artifact(cfg, "featurize", "features.csv")};
  if (!surveys_path(cfg).empty()) inputs.emplace_back(surveys_path(cfg));
  return finish(cfg, "probe", inputs, {out},
                {{"person_weeks", summaries.size()},
                 {"single_hour_weeks", single_hour},
                 {"skipped_metrics", skipped}});
}

std::vector<StageReport> run_all(const RunConfig& cfg, std::ostream* progress) {
  std::vector<StageReport> reports;
  auto step = [&](auto&& fn, const char* name) {
    if (progress) *progress << "[" << name << "] running\n" << std::flush;
    reports.push_back(fn(cfg));
    if (progress) *progress << "[" << name << "] " << reports.back().summary.dump() << "\n" << std::flush;
  };
  if (cfg.paths.flows.empty()) step(run_synth, "synth");
  step(run_ingest, "ingest");
  step(run_featurize, "featurize");
  step(run_classical, "classical");
  step(run_train, "train");
  step(run_sae, "sae");
  step(run_interpret, "interpret");
  if (!surveys_path(cfg).empty()) step(run_stats, "stats");
  step(run_probe, "probe");
  return reports;
}

}  // namespace flowsense::pipeline
