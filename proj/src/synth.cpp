#include "flowsense/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "flowsense/rng.hpp"
#include "flowsense/timeutil.hpp"

namespace flowsense::synth {

namespace {

constexpr std::array<std::string_view, 3> kOutcomes = stats::kOutcomeNames;
constexpr std::array<std::pair<int, int>, 3> kRanges = {{{4, 20}, {4, 20}, {3, 9}}};

int outcome_index(const std::string& name) {
  for (std::size_t i = 0; i < kOutcomes.size(); ++i) {
    if (kOutcomes[i] == name) return static_cast<int>(i);
  }
  return -1;
}

// Typical bytes per flow by category; the generator's only notion of "app weight".
double mean_bytes(const std::string& category) {
  static const std::map<std::string, double> table = {
      {"communication", 2.0e5}, {"social_media", 1.2e6}, {"streaming", 4.0e6},
      {"productivity", 5.0e5},  {"system", 4.0e4},       {"gaming", 2.0e6},
      {"browsing", 1.5e5},      {"cdn", 3.0e5}};
  auto it = table.find(category);
  return it == table.end() ? 1.0e5 : it->second;
}

// Population category mix for foreground flows (system background is added separately).
const std::vector<std::pair<std::string, double>>& population_mix() {
  static const std::vector<std::pair<std::string, double>> mix = {
      {"communication", 0.22}, {"social_media", 0.18}, {"streaming", 0.14},
      {"productivity", 0.16},  {"system", 0.08},       {"browsing", 0.08},
      {"cdn", 0.06},           {"gaming", 0.02},       {"", 0.06}};  // "" = unmapped host
  return mix;
}

double lognormal(Rng& rng, double mean, double sigma) {
  return std::exp(rng.normal(std::log(mean) - 0.5 * sigma * sigma, sigma));
}

std::int64_t parse_date(const std::string& s) {
  int y = 0;
  unsigned m = 0, d = 0;
  if (std::sscanf(s.c_str(), "%d-%u-%u", &y, &m, &d) != 3 || m < 1 || m > 12 || d < 1 || d > 31) {
    throw ConfigError("start_date must be YYYY-MM-DD, got '" + s + "'");
  }
  return timeutil::days_from_civil(y, m, d);
}

struct HostPool {
  std::map<std::string, std::vector<std::string>> hosts_by_category;

  explicit HostPool(const ingest::Dictionary& dict) {
    for (const auto& [host, app] : dict.host_to_app()) {
      hosts_by_category[dict.app_to_category().at(app)].push_back(host);
    }
    for (auto& [c, hosts] : hosts_by_category) std::sort(hosts.begin(), hosts.end());
  }

  std::string pick(const std::string& category, Rng& rng) const {
    if (category.empty()) return "edge" + std::to_string(rng.below(40)) + ".unlisted-host.net";
    auto it = hosts_by_category.find(category);
    if (it == hosts_by_category.end() || it->second.empty()) {
      throw ConfigError("dictionary has no hostname for category " + category);
    }
    const auto& host = it->second[rng.below(it->second.size())];
    // Occasionally use a subdomain so suffix matching is exercised.
    return rng.bernoulli(0.3) ? "api." + host : host;
  }
};

struct UserProfile {
  std::string id;
  int wake_hour = 7;
  double activity = 1.0;
  std::vector<double> mix;                      // aligned with population_mix()
  std::map<std::string, double> prevalence;     // between patterns
};

// Weekly realized prevalences -> outcomes (noiseless part), shared with the manifest check.
struct WeekKey {
  std::string user;
  int week;
  auto operator<=>(const WeekKey&) const = default;
};

std::map<WeekKey, std::array<double, 3>> noiseless_outcomes(
    const SynthConfig& cfg, const std::map<WeekKey, std::map<std::string, double>>& realized) {
  std::map<WeekKey, std::array<double, 3>> out;
  for (const auto& [key, v] : realized) {
    for (std::size_t o = 0; o < kOutcomes.size(); ++o) {
      out[key][o] = cfg.outcome_mean.at(std::string(kOutcomes[o]));
    }
  }
  for (const auto& p : cfg.patterns) {
    std::vector<double> x;
    std::vector<std::string> users;
    for (const auto& [key, v] : realized) {
      x.push_back(v.at(p.name));
      users.push_back(key.user);
    }
    const auto m = stats::mundlak_decompose(x, users);
    if (!m) continue;  // no variation realized: the pattern cannot move outcomes
    const int o = outcome_index(p.outcome);
    std::size_t i = 0;
    for (const auto& [key, v] : realized) {
      out[key][o] += p.beta * (p.kind == "between" ? m->between[i] : m->within[i]);
      ++i;
    }
  }
  return out;
}

// Noise is drawn in (user, week, outcome) order from one seeded stream.
std::map<WeekKey, std::array<double, 3>> outcome_noise(const SynthConfig& cfg,
                                                       const std::vector<WeekKey>& keys) {
  Rng rng = Rng::derive(cfg.seed, "outcome-noise");
  std::map<WeekKey, std::array<double, 3>> out;
  for (const auto& k : keys) {
    for (std::size_t o = 0; o < kOutcomes.size(); ++o) out[k][o] = rng.normal(0.0, cfg.noise_sd);
  }
  return out;
}

std::array<int, 3> finalize(const std::array<double, 3>& noiseless, const std::array<double, 3>& noise,
                            std::array<bool, 3>* clipped) {
  std::array<int, 3> totals{};
  for (std::size_t o = 0; o < 3; ++o) {
    const long v = std::lround(noiseless[o] + noise[o]);
    const int c = static_cast<int>(std::clamp<long>(v, kRanges[o].first, kRanges[o].second));
    if (clipped) (*clipped)[o] = c != v;
    totals[o] = c;
  }
  return totals;
}

}  // namespace

void SynthConfig::validate() const {
  std::string errors;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors += (errors.empty() ? "" : "; ") + msg;
  };
  check(n_users >= 1, "n_users must be positive");
  check(weeks >= 1, "weeks must be positive");
  check(dropout_rate >= 0 && dropout_rate <= 1, "dropout_rate must be in [0, 1]");
  check(mean_flows_per_hour > 0, "mean_flows_per_hour must be positive");
  check(baseline_spread >= 0, "baseline_spread must be non-negative");
  check(morning_sd >= 0, "morning_sd must be non-negative");
  check(noise_sd >= 0, "noise_sd must be non-negative");
  check(!patterns.empty(), "at least one planted pattern is required");
  try {
    timeutil::validate_tz_offset(tz_offset_minutes);
  } catch (const ConfigError& e) {
    check(false, e.what());
  }
  try {
    parse_date(start_date);
  } catch (const ConfigError& e) {
    check(false, e.what());
  }
  for (auto name : kOutcomes) {
    check(outcome_mean.contains(std::string(name)), "outcome_mean lacks " + std::string(name));
  }
  std::array<double, 3> effect{};
  std::set<std::string> names;
  for (const auto& p : patterns) {
    const std::string tag = "pattern '" + p.name + "': ";
    check(!p.name.empty() && names.insert(p.name).second, tag + "names must be unique and non-empty");
    check(std::find(kModelCategories.begin(), kModelCategories.end(), p.category) !=
              kModelCategories.end(),
          tag + "category must be a model category");
    check(p.band_start >= 0 && p.band_end <= 23 && p.band_start <= p.band_end,
          tag + "band must satisfy 0 <= start <= end <= 23");
    check(p.kind == "between" || p.kind == "within", tag + "kind must be between or within");
    if (p.kind == "between") {
      check(0 <= p.prevalence_min && p.prevalence_min <= p.prevalence_max && p.prevalence_max <= 1,
            tag + "prevalence range must lie in [0, 1]");
    } else {
      check(p.prevalence_mean - p.jitter >= 0 && p.prevalence_mean + p.jitter <= 1,
            tag + "prevalence_mean +/- jitter must lie in [0, 1]");
    }
    check(p.boost_flows > 0, tag + "boost_flows must be positive");
    const int o = outcome_index(p.outcome);
    check(o >= 0, tag + "unknown outcome " + p.outcome);
    if (o >= 0) effect[o] += std::abs(p.beta);
  }
  // Two standard deviations of signal plus noise must fit inside each instrument range.
  for (std::size_t o = 0; o < kOutcomes.size(); ++o) {
    auto it = outcome_mean.find(std::string(kOutcomes[o]));
    if (it == outcome_mean.end()) continue;
    const double reach = 2.0 * (effect[o] + noise_sd);
    check(it->second - reach >= kRanges[o].first && it->second + reach <= kRanges[o].second,
          std::string(kOutcomes[o]) + ": outcome range too tight for the configured effects");
  }
  if (!errors.empty()) throw ConfigError("invalid synth config: " + errors);
}

nlohmann::json SynthConfig::to_json() const {
  nlohmann::json pats = nlohmann::json::array();
  for (const auto& p : patterns) {
    pats.push_back({{"name", p.name},
                    {"category", p.category},
                    {"band", {p.band_start, p.band_end}},
                    {"kind", p.kind},
                    {"prevalence_min", p.prevalence_min},
                    {"prevalence_max", p.prevalence_max},
                    {"prevalence_mean", p.prevalence_mean},
                    {"jitter", p.jitter},
                    {"boost_flows", p.boost_flows},
                    {"outcome", p.outcome},
                    {"beta", p.beta}});
  }
  return {{"n_users", n_users},
          {"weeks", weeks},
          {"seed", seed},
          {"tz_offset_minutes", tz_offset_minutes},
          {"start_date", start_date},
          {"dropout_rate", dropout_rate},
          {"mean_flows_per_hour", mean_flows_per_hour},
          {"baseline_spread", baseline_spread},
          {"morning_sd", morning_sd},
          {"noise_sd", noise_sd},
          {"outcome_mean", outcome_mean},
          {"patterns", pats}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    c.n_users = j.value("n_users", c.n_users);
    c.weeks = j.value("weeks", c.weeks);
    c.seed = j.value("seed", c.seed);
    c.tz_offset_minutes = j.value("tz_offset_minutes", c.tz_offset_minutes);
    c.start_date = j.value("start_date", c.start_date);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.mean_flows_per_hour = j.value("mean_flows_per_hour", c.mean_flows_per_hour);
    c.baseline_spread = j.value("baseline_spread", c.baseline_spread);
    c.morning_sd = j.value("morning_sd", c.morning_sd);
    c.noise_sd = j.value("noise_sd", c.noise_sd);
    if (j.contains("outcome_mean")) c.outcome_mean = j.at("outcome_mean").get<std::map<std::string, double>>();
    for (const auto& pj : j.value("patterns", nlohmann::json::array())) {
      PlantedPattern p;
      p.name = pj.value("name", p.name);
      p.category = pj.value("category", p.category);
      if (pj.contains("band")) {
        p.band_start = pj.at("band").at(0).get<int>();
        p.band_end = pj.at("band").at(1).get<int>();
      }
      p.kind = pj.value("kind", p.kind);
      p.prevalence_min = pj.value("prevalence_min", p.prevalence_min);
      p.prevalence_max = pj.value("prevalence_max", p.prevalence_max);
      p.prevalence_mean = pj.value("prevalence_mean", p.prevalence_mean);
      p.jitter = pj.value("jitter", p.jitter);
      p.boost_flows = pj.value("boost_flows", p.boost_flows);
      p.outcome = pj.value("outcome", p.outcome);
      p.beta = pj.value("beta", p.beta);
      c.patterns.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid synth config: ") + e.what());
  }
  c.validate();
  return c;
}

SynthConfig SynthConfig::bundled(int n_users, int weeks) {
  SynthConfig c;
  c.n_users = n_users;
  c.weeks = weeks;
  PlantedPattern between;
  between.name = "evening_social";
  between.category = "social_media";
  between.band_start = 19;
  between.band_end = 22;
  between.kind = "between";
  between.prevalence_min = 0.05;
  between.prevalence_max = 0.95;
  between.outcome = "stress";
  between.beta = 2.0;
  PlantedPattern within;
  within.name = "morning_communication";
  within.category = "communication";
  within.band_start = 6;
  within.band_end = 9;
  within.kind = "within";
  within.prevalence_mean = 0.5;
  within.jitter = 0.45;
  within.outcome = "sleep";
  within.beta = -2.0;
  c.patterns = {between, within};
  c.validate();
  return c;
}

stats::SurveyResponse backfill_items(const std::string& user_id, std::int64_t ts,
                                     const std::array<int, 3>& totals) {
  stats::SurveyResponse r;
  r.user_id = user_id;
  r.survey_ts_ms = ts;
  // Coded values start at the minimum and are raised round-robin until the total is met.
  auto fill = [](auto& items, int total, int lo, const auto* reversed, int hi) {
    const int n = static_cast<int>(items.size());
    std::vector<int> coded(n, lo);
    int remaining = total - lo * n;
    for (int i = 0; remaining > 0; i = (i + 1) % n) {
      if (coded[i] < hi) {
        ++coded[i];
        --remaining;
      }
    }
    for (int i = 0; i < n; ++i) {
      items[i] = (reversed && (*reversed)[i]) ? lo + hi - coded[i] : coded[i];
    }
  };
  fill(r.sleep, totals[0], 1, &stats::kSleepReversed, 5);
  fill(r.stress, totals[1], 1, &stats::kStressReversed, 5);
  fill(r.lonely, totals[2], 1, static_cast<const std::array<bool, 3>*>(nullptr), 3);
  return r;
}

Cohort generate_cohort(const SynthConfig& cfg, const ingest::Dictionary& dict) {
  cfg.validate();
  const HostPool pool(dict);
  const auto& mix = population_mix();
  const std::int64_t start_day = parse_date(cfg.start_date);
  const std::int64_t tz_ms = static_cast<std::int64_t>(cfg.tz_offset_minutes) * timeutil::kMsPerMinute;

  Cohort cohort;
  nlohmann::json users_json = nlohmann::json::array();
  nlohmann::json weeks_json = nlohmann::json::array();
  std::map<WeekKey, std::map<std::string, double>> realized;
  std::map<WeekKey, std::int64_t> survey_ts;
  std::map<WeekKey, nlohmann::json> week_detail;

  // Between-pattern prevalences are stratified: user u gets one of n equal-width strata of
  // [min, max] in seeded order, so the cohort always spans the configured range.
  std::map<std::string, std::vector<std::size_t>> strata;
  for (const auto& p : cfg.patterns) {
    if (p.kind != "between") continue;
    auto& order = strata[p.name];
    order.resize(cfg.n_users);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng srng = Rng::derive(cfg.seed, "strata:" + p.name);
    srng.shuffle(order);
  }

  for (int u = 0; u < cfg.n_users; ++u) {
    char id[16];
    std::snprintf(id, sizeof id, "u%02d", u + 1);
    UserProfile prof;
    prof.id = id;
    Rng urng = Rng::derive(cfg.seed, "user:" + prof.id);
    prof.wake_hour = 6 + static_cast<int>(urng.below(4));
    prof.activity = lognormal(urng, 1.0, 0.3);
    double total = 0.0;
    for (const auto& [cat, w] : mix) {
      prof.mix.push_back(w * std::exp(cfg.baseline_spread * urng.normal()));
      total += prof.mix.back();
    }
    for (auto& m : prof.mix) m /= total;
    for (const auto& p : cfg.patterns) {
      if (p.kind != "between") continue;
      const double width = (p.prevalence_max - p.prevalence_min) / cfg.n_users;
      prof.prevalence[p.name] =
          p.prevalence_min + width * (static_cast<double>(strata[p.name][u]) + urng.uniform());
    }
    nlohmann::json mix_json;
    for (std::size_t i = 0; i < mix.size(); ++i) {
      mix_json[mix[i].first.empty() ? "unmapped" : mix[i].first] = prof.mix[i];
    }
    users_json.push_back({{"user_id", prof.id},
                          {"wake_hour", prof.wake_hour},
                          {"activity", prof.activity},
                          {"category_mix", mix_json},
                          {"prevalence", prof.prevalence}});

    Rng frng = Rng::derive(cfg.seed, "flows:" + prof.id);
    for (int w = 0; w < cfg.weeks; ++w) {
      const WeekKey key{prof.id, w};
      std::map<std::string, double> prevalence;
      for (const auto& p : cfg.patterns) {
        prevalence[p.name] = p.kind == "between"
                                 ? prof.prevalence[p.name]
                                 : p.prevalence_mean + frng.uniform(-p.jitter, p.jitter);
      }
      const double morning = lognormal(frng, 1.0, cfg.morning_sd);
      std::map<std::string, int> planted_count, band_count;
      std::map<std::string, std::vector<std::int64_t>> planted_hours;
      for (int day = 0; day < 7; ++day) {
        const std::int64_t day_index = start_day + 7 * w + day;
        int gap_start = 24, gap_end = 24;
        if (frng.bernoulli(cfg.dropout_rate)) {
          gap_start = static_cast<int>(frng.below(20));
          gap_end = gap_start + 2 + static_cast<int>(frng.below(5));
        }
        const bool weekend = LocalHour{day_index * 24}.is_weekend();
        for (int h = 0; h < 24; ++h) {
          if (h >= gap_start && h < gap_end) continue;
          const LocalHour hour{day_index * 24 + h};
          const int since_wake = ((h - prof.wake_hour) % 24 + 24) % 24;
          const bool awake = since_wake < 16;
          double level = awake ? 1.0 + 0.6 * std::sin(std::numbers::pi * since_wake / 16.0) : 0.12;
          if (h >= 6 && h <= 11) level *= morning;
          if (weekend) level *= 0.85;
          const double lambda = cfg.mean_flows_per_hour * prof.activity * level;

          auto emit = [&](const std::string& category, double bytes_mean) {
            ingest::FlowRecord f;
            f.user_id = prof.id;
            f.start_ts_ms = hour.index * timeutil::kMsPerHour - tz_ms +
                            static_cast<std::int64_t>(frng.below(timeutil::kMsPerHour));
            f.hostname = pool.pick(category, frng);
            f.down_bytes = std::max<std::int64_t>(1, std::llround(lognormal(frng, bytes_mean, 0.8)));
            f.up_bytes = std::max<std::int64_t>(1, f.down_bytes / (5 + static_cast<int>(frng.below(10))));
            f.down_pkts = 1 + f.down_bytes / 1400;
            f.up_pkts = 1 + f.up_bytes / 1400;
            cohort.flows.push_back(std::move(f));
          };

          // Background heartbeat: every covered hour has at least one system flow.
          const auto heartbeat = 1 + frng.poisson(0.5);
          for (std::int64_t i = 0; i < heartbeat; ++i) emit("system", mean_bytes("system"));
          const auto n = frng.poisson(lambda);
          for (std::int64_t i = 0; i < n; ++i) {
            double x = frng.uniform(), acc = 0.0;
            std::size_t c = 0;
            for (; c + 1 < mix.size(); ++c) {
              acc += prof.mix[c];
              if (x < acc) break;
            }
            emit(mix[c].first, mean_bytes(mix[c].first));
          }
          for (const auto& p : cfg.patterns) {
            if (h < p.band_start || h > p.band_end) continue;
            ++band_count[p.name];
            if (!frng.bernoulli(prevalence[p.name])) continue;
            ++planted_count[p.name];
            planted_hours[p.name].push_back(hour.index);
            const auto extra = 3 + frng.poisson(p.boost_flows);
            for (std::int64_t i = 0; i < extra; ++i) emit(p.category, 2.0 * mean_bytes(p.category));
          }
        }
      }
      for (const auto& p : cfg.patterns) {
        const int bands = band_count[p.name];
        realized[key][p.name] = bands == 0 ? 0.0 : static_cast<double>(planted_count[p.name]) / bands;
      }
      const std::int64_t end_day = start_day + 7 * (w + 1);
      survey_ts[key] = end_day * 24 * timeutil::kMsPerHour - tz_ms;
      week_detail[key] = {{"morning_factor", morning},
                          {"planned_prevalence", prevalence},
                          {"planted_hours", planted_hours}};
    }
  }

  std::vector<WeekKey> keys;
  for (const auto& [k, v] : realized) keys.push_back(k);
  const auto noiseless = noiseless_outcomes(cfg, realized);
  const auto noise = outcome_noise(cfg, keys);
  for (const auto& k : keys) {
    std::array<bool, 3> clipped{};
    const auto totals = finalize(noiseless.at(k), noise.at(k), &clipped);
    cohort.surveys.push_back(backfill_items(k.user, survey_ts.at(k), totals));
    nlohmann::json outcomes;
    for (std::size_t o = 0; o < 3; ++o) {
      outcomes[std::string(kOutcomes[o])] = {{"noiseless", noiseless.at(k)[o]},
                                             {"noise", noise.at(k)[o]},
                                             {"total", totals[o]},
                                             {"clipped", clipped[o]}};
    }
    auto detail = week_detail.at(k);
    detail["user_id"] = k.user;
    detail["week"] = k.week;
    detail["survey_ts_ms"] = survey_ts.at(k);
    detail["realized_prevalence"] = realized.at(k);
    detail["outcomes"] = outcomes;
    weeks_json.push_back(detail);
  }

  std::stable_sort(cohort.flows.begin(), cohort.flows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.user_id, a.start_ts_ms) < std::tie(b.user_id, b.start_ts_ms);
  });
  cohort.manifest = {{"format", "flowsense-synth-manifest"},
                     {"version", kManifestVersion},
                     {"config", cfg.to_json()},
                     {"users", users_json},
                     {"weeks", weeks_json}};
  return cohort;
}

void write_cohort(const std::string& dir, const Cohort& cohort) {
  std::filesystem::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream out(dir + "/" + name);
    if (!out) throw ConfigError("cannot write " + dir + "/" + name);
    return out;
  };
  {
    auto out = open("flows.csv");
    ingest::write_flow_records(out, cohort.flows);
  }
  {
    auto out = open("surveys.csv");
    stats::write_surveys(out, cohort.surveys);
  }
  auto out = open("ground_truth.json");
  out << cohort.manifest.dump(1) << "\n";
}

std::map<std::pair<std::string, std::int64_t>, std::array<int, 3>> outcomes_from_manifest(
    const nlohmann::json& manifest) {
  if (manifest.value("version", 0) != kManifestVersion) {
    throw ConfigError("unsupported synth manifest version");
  }
  const SynthConfig cfg = SynthConfig::from_json(manifest.at("config"));
  std::map<WeekKey, std::map<std::string, double>> realized;
  std::map<WeekKey, std::int64_t> ts;
  for (const auto& w : manifest.at("weeks")) {
    const WeekKey k{w.at("user_id").get<std::string>(), w.at("week").get<int>()};
    realized[k] = w.at("realized_prevalence").get<std::map<std::string, double>>();
    ts[k] = w.at("survey_ts_ms").get<std::int64_t>();
  }
  std::vector<WeekKey> keys;
  for (const auto& [k, v] : realized) keys.push_back(k);
  const auto noiseless = noiseless_outcomes(cfg, realized);
  const auto noise = outcome_noise(cfg, keys);
  std::map<std::pair<std::string, std::int64_t>, std::array<int, 3>> out;
  for (const auto& k : keys) out[{k.user, ts.at(k)}] = finalize(noiseless.at(k), noise.at(k), nullptr);
  return out;
}

}  // namespace flowsense::synth
