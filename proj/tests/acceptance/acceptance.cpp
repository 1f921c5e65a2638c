// One check per invocation; prints a single PASS/FAIL line and exits 0 only on PASS.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flowsense/backbone.hpp"
#include "flowsense/classical.hpp"
#include "flowsense/csv.hpp"
#include "flowsense/featurize.hpp"
#include "flowsense/interpret.hpp"
#include "flowsense/pipeline.hpp"
#include "flowsense/probe.hpp"
#include "flowsense/rng.hpp"
#include "flowsense/sae.hpp"
#include "flowsense/stats.hpp"
#include "flowsense/synth.hpp"
#include "flowsense/train.hpp"
#include "oracles.hpp"

using namespace flowsense;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// Relative error with a floor so exact zeros compare absolutely.
double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

// ---- formula oracles -------------------------------------------------------------------

Outcome formula_oracles() {
  const auto t0 = Clock::now();
  constexpr std::int64_t kMonday = 4 * 24;
  Rng rng(20250106);
  double worst = 0.0;
  std::size_t mismatched_definedness = 0, compared = 0;
  auto same = [&](const MaybeReal& got, const oracle::Maybe& want) {
    if (got.has_value() != want.has_value()) {
      ++mismatched_definedness;
      return;
    }
    if (!got) return;
    ++compared;
    // Exact zeros on both sides are fine; otherwise relative.
    if (*got == *want) return;
    worst = std::max(worst, rel_err(*got, *want));
  };

  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(1 + rng.below(24 * 14));
    const auto first = static_cast<std::int64_t>(rng.below(24 * 7));
    std::vector<double> v(n);
    const int style = static_cast<int>(rng.below(4));
    for (std::size_t i = 0; i < n; ++i) {
      const int hod = static_cast<int>((first + static_cast<std::int64_t>(i)) % 24);
      if (style == 0) v[i] = rng.uniform();
      if (style == 1) v[i] = rng.bernoulli(0.3) ? rng.uniform() : 0.0;
      if (style == 2) v[i] = (hod >= 7 && hod <= 22 ? 0.6 : 0.05) + 0.1 * rng.uniform();
      if (style == 3) v[i] = std::floor(rng.uniform(0.0, 4.0)) / 3.0;
    }
    std::vector<LocalHour> hours;
    for (std::size_t i = 0; i < n; ++i) hours.push_back(LocalHour{kMonday + first + static_cast<std::int64_t>(i)});
    const auto s = classical::HourlySeries::from_hours(hours, v);
    const oracle::Series o{s.values, s.hour_of_day, s.weekend};
    const auto m = classical::compute_metrics(s);
    same(m.is, oracle::interdaily_stability(o));
    same(m.iv, oracle::intradaily_variability(o));
    same(m.ra, oracle::relative_amplitude(o));
    const auto night = oracle::band_mean(o, 0, 5), morning = oracle::band_mean(o, 6, 11);
    same(m.bands.night, night);
    same(m.bands.morning, morning);
    same(m.bands.afternoon, oracle::band_mean(o, 12, 17));
    same(m.bands.evening, oracle::band_mean(o, 18, 23));
    oracle::Maybe ratio;
    if (night && morning && *morning > 0.0) ratio = *night / *morning;
    same(m.bands.night_morning_ratio, ratio);
    same(m.activity_centroid, oracle::activity_centroid(o));
    same(m.active_span_hours, oracle::active_span(o));
    same(m.weekday_weekend_diff, oracle::weekday_weekend_diff(o));
  }

  // Degenerate inputs.
  std::vector<LocalHour> week;
  for (int i = 0; i < 168; ++i) week.push_back(LocalHour{kMonday + i});
  const std::vector<double> flat(168, 0.4), zeros(168, 0.0);
  std::vector<double> quiet_night(168, 1.0);
  for (int i = 0; i < 168; ++i) {
    if (i % 24 < 5) quiet_night[i] = 0.0;
  }
  const auto c = classical::compute_metrics(classical::HourlySeries::from_hours(week, flat));
  const auto z = classical::compute_metrics(classical::HourlySeries::from_hours(week, zeros));
  const auto q = classical::compute_metrics(classical::HourlySeries::from_hours(week, quiet_night));
  std::vector<std::string> bad;
  if (c.is || c.iv) bad.push_back("constant IS/IV defined");
  if (!c.ra || *c.ra != 0.0) bad.push_back("constant RA != 0");
  if (!c.activity_centroid || std::abs(*c.activity_centroid - 11.5) > 1e-12) bad.push_back("constant centroid");
  if (!c.weekday_weekend_diff || std::abs(*c.weekday_weekend_diff) > 1e-15) bad.push_back("constant weekday diff");
  if (z.ra || z.activity_centroid || z.active_span_hours) bad.push_back("all-zero metrics defined");
  if (!q.ra || std::abs(*q.ra - 1.0) > 1e-12) bad.push_back("zero L5 RA != 1");

  const double secs = seconds_since(t0);
  Outcome out;
  out.pass = worst <= 1e-12 && mismatched_definedness == 0 && bad.empty() && secs < 10.0;
  out.detail = "1000 series, " + std::to_string(compared) + " values, max rel err " + fmt(worst) +
               ", definedness mismatches " + std::to_string(mismatched_definedness) +
               (bad.empty() ? "" : ", degenerate: " + bad.front()) + ", " + fmt(secs) + " s";
  return out;
}

// ---- Mundlak + GEE ---------------------------------------------------------------------

Outcome mundlak_gee() {
  const auto t0 = Clock::now();
  Rng rng(77);

  // Reconstruction identity on random unbalanced panels.
  double identity_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x;
    std::vector<std::string> ids;
    const int n = 2 + static_cast<int>(rng.below(200));
    for (int i = 0; i < n; ++i) {
      x.push_back(rng.normal(rng.uniform(-5.0, 5.0), 2.0));
      ids.push_back("u" + std::to_string(rng.below(1 + n / 3)));
    }
    const auto m = stats::mundlak_decompose(x, ids);
    if (!m) continue;
    const auto ref = oracle::mundlak(x, ids);
    for (int i = 0; i < n; ++i) {
      identity_err = std::max(identity_err, std::abs(m->sd * (m->between[i] + m->within[i]) + m->grand_mean - x[i]) /
                                                std::max(1.0, std::abs(x[i])));
      identity_err = std::max(identity_err, std::abs(m->between[i] - ref.between[i]));
      identity_err = std::max(identity_err, std::abs(m->within[i] - ref.within[i]));
    }
  }

  // Singleton clusters against the normal-equations oracle.
  double ols_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 30 + static_cast<int>(rng.below(100));
    const int p = 2 + static_cast<int>(rng.below(4));
    Eigen::MatrixXd x(n, p);
    Eigen::VectorXd y(n);
    std::vector<std::vector<double>> rows(n, std::vector<double>(p));
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) {
      x(i, 0) = 1.0;
      for (int j = 1; j < p; ++j) x(i, j) = rng.normal();
      y[i] = x.row(i).sum() + rng.normal();
      for (int j = 0; j < p; ++j) rows[i][j] = x(i, j);
      ids.push_back("s" + std::to_string(i));
    }
    const auto fit = stats::fit_gee(y, x, ids);
    const auto ref = oracle::ols(rows, std::vector<double>(y.data(), y.data() + n));
    for (int j = 0; j < p; ++j) ols_err = std::max(ols_err, std::abs(fit.beta[j] - ref[j]));
  }

  // Monte Carlo: 200 users x 6 weeks, planted between +1.0 and within -0.5, noise SD 1.
  int covered = 0;
  for (int rep = 0; rep < 100; ++rep) {
    Rng r(Rng::derive(2025, "replicate:" + std::to_string(rep)));
    std::vector<double> x;
    std::vector<std::string> ids;
    std::vector<double> user_effect;
    for (int u = 0; u < 200; ++u) {
      const double level = r.normal();
      const double ue = r.normal(0.0, 0.3);
      for (int w = 0; w < 6; ++w) {
        x.push_back(level + r.normal());
        ids.push_back("u" + std::to_string(u));
        user_effect.push_back(ue);
      }
    }
    const auto m = stats::mundlak_decompose(x, ids);
    stats::Panel panel;
    panel.predictor_names = {"x"};
    panel.predictor_family = {"sae"};
    for (std::size_t i = 0; i < x.size(); ++i) {
      stats::PersonWeek pw;
      pw.user_id = ids[i];
      pw.survey_ts_ms = static_cast<std::int64_t>(i);
      pw.coverage_hours = 168;
      pw.outcomes.values[0] = 10.0 + m->between[i] - 0.5 * m->within[i] + user_effect[i] + r.normal();
      pw.predictors = {x[i]};
      panel.rows.push_back(pw);
    }
    const auto fit = stats::fit_pair(panel, 0, 0);
    if (!fit) continue;
    const auto& f = fit->fit;
    if (std::abs(f.beta[1] - 1.0) <= 3.0 * f.se[1] && std::abs(f.beta[2] + 0.5) <= 3.0 * f.se[2]) ++covered;
  }

  const double secs = seconds_since(t0);
  Outcome out;
  out.pass = identity_err < 1e-12 && ols_err < 1e-10 && covered >= 95 && secs < 120.0;
  out.detail = "identity err " + fmt(identity_err) + ", singleton vs OLS " + fmt(ols_err) + ", " +
               std::to_string(covered) + "/100 replicates within 3 SE, " + fmt(secs) + " s";
  return out;
}

// ---- BH --------------------------------------------------------------------------------

Outcome bh_fdr() {
  Rng rng(31);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const auto n = static_cast<std::size_t>(1 + rng.below(500));
    std::vector<double> p(n);
    const int style = static_cast<int>(rng.below(3));
    for (auto& x : p) {
      if (style == 0) x = rng.uniform();
      if (style == 1) x = rng.bernoulli(0.3) ? rng.uniform(0.0, 1e-3) : rng.uniform();
      if (style == 2) x = std::round(rng.uniform() * 20.0) / 20.0;  // heavy ties, exact 0 and 1
    }
    const auto got = stats::bh_fdr(p);
    const auto want = oracle::bh(p);
    for (std::size_t i = 0; i < n; ++i) mismatches += got[i] != want[i];
  }
  return {mismatches == 0, "10000 vectors of size 1-500, " + std::to_string(mismatches) + " q-values differ"};
}

// ---- gradient check --------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  backbone::ModelShape shape;
  shape.d_model = 16;
  shape.heads = 4;
  shape.layers = 1;
  shape.d_ff = 64;
  Rng rng(4242);
  backbone::Backbone<double> model(shape);
  model.init(rng);
  backbone::Adapter<double> adapter(shape.d_model);
  adapter.init_random(rng);
  Mat<double> w(kWindowHours, static_cast<int>(kFeatureDim));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform();

  const auto plain = train::gradient_check(model, nullptr, w, 17);
  const auto adapted = train::gradient_check(model, &adapter, w, 40);
  const double worst = std::max(plain.max_rel_error, adapted.max_rel_error);
  const bool all_groups = plain.per_tensor.size() == model.params().specs().size() &&
                          adapted.per_tensor.size() == model.params().specs().size() + adapter.params().specs().size();
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && all_groups && secs < 60.0,
          std::to_string(adapted.per_tensor.size()) + " parameter groups, " +
              std::to_string(plain.checked + adapted.checked) + " entries, max rel err " + fmt(worst) + ", " +
              fmt(secs) + " s"};
}

// ---- training behavior -----------------------------------------------------------------

ingest::Dictionary load_dict(const std::string& source) {
  return ingest::Dictionary::load(source + "/data/sample_dictionary/hosts.csv",
                                  source + "/data/sample_dictionary/apps.csv");
}

Outcome training(const std::string& source) {
  const auto t0 = Clock::now();
  const auto dict = load_dict(source);
  auto synth_cfg = synth::SynthConfig::bundled(10, 3);
  const auto cohort = synth::generate_cohort(synth_cfg, dict);
  const auto features =
      featurize::build_features(ingest::aggregate_hourly(cohort.flows, dict, synth_cfg.tz_offset_minutes));
  train::TrainConfig cfg;
  featurize::SplitPlan plan;
  std::vector<featurize::Window> train_windows;
  for (const auto& [user, rows] : featurize::group_by_user(features)) {
    auto windows = featurize::build_windows(rows);
    if (windows.size() < featurize::kMinWindowsPerUser) continue;
    plan[user] = featurize::chronological_split(std::move(windows), cfg.train_frac);
    train_windows.insert(train_windows.end(), plan[user].train.begin(), plan[user].train.end());
  }

  std::vector<train::EpochLog> log;
  const auto model = train::train_phase1(train_windows, backbone::ModelShape{}, cfg, &log);
  const auto& data = model.params().data();
  const std::vector<float> before(data.begin(), data.end());
  const auto phase2 = train::train_phase2(model, plan, cfg);
  const bool unchanged = before.size() == data.size() &&
                         std::memcmp(before.data(), data.data(), before.size() * sizeof(float)) == 0;
  const auto losses = train::compare_test_loss(model, phase2.adapters, plan, cfg);

  std::vector<double> phase1;
  for (const auto& e : log) {
    if (e.phase == 1) phase1.push_back(e.mean_loss);
  }
  const bool have_epochs = phase1.size() == 30;
  const double drop = have_epochs ? 1.0 - phase1.back() / phase1.front() : 0.0;
  std::size_t improved = 0;
  for (const auto& l : losses) improved += l.with_adapter < l.without_adapter;
  const double secs = seconds_since(t0);
  Outcome out;
  out.pass = have_epochs && phase1.back() < phase1.front() && drop >= 0.30 && unchanged && plan.size() == 10 &&
             improved >= 7 && secs < 600.0;
  out.detail = "phase-1 loss " + fmt(have_epochs ? phase1.front() : 0.0) + " -> " +
               fmt(have_epochs ? phase1.back() : 0.0) + " (" + fmt(100.0 * drop) + "% drop), backbone " +
               (unchanged ? "unchanged" : "MODIFIED") + ", adapters help " + std::to_string(improved) + "/" +
               std::to_string(losses.size()) + " users, " + fmt(secs) + " s";
  return out;
}

// ---- SAE invariants --------------------------------------------------------------------

Outcome sae_invariants() {
  const auto t0 = Clock::now();
  constexpr int kDim = 64, kUsers = 12, kPerUser = 200;
  Rng rng(606);
  Eigen::MatrixXd basis(5, kDim);
  for (Eigen::Index i = 0; i < basis.size(); ++i) basis.data()[i] = rng.normal();
  sae::Corpus corpus;
  corpus.x.resize(kUsers * kPerUser, kDim);
  for (int u = 0; u < kUsers; ++u) {
    for (int h = 0; h < kPerUser; ++h) {
      Eigen::RowVectorXd coef(5);
      for (int j = 0; j < 5; ++j) coef[j] = rng.normal();
      corpus.x.row(u * kPerUser + h) = coef * basis;
      corpus.users.push_back("u" + std::to_string(u));
      corpus.hours.push_back(LocalHour{h});
    }
  }
  sae::SaeConfig cfg;
  cfg.dict_size = 256;
  cfg.k = 16;
  cfg.lr = 3e-3;
  cfg.batch_size = 128;
  cfg.epochs = 50;
  cfg.held_out_users = 2;
  double worst_norm = 0.0;
  std::size_t steps = 0;
  const auto result = sae::train(corpus, cfg, [&](const sae::SaeParams& p) {
    worst_norm = std::max(worst_norm, p.max_norm_deviation());
    ++steps;
  });

  std::size_t sparsity_violations = 0, full_rows = 0;
  std::size_t codes = 0;
  auto check_code = [&](const sae::SaeParams& p, const Eigen::VectorXd& x) {
    const auto pre = sae::pre_activations(p, x);
    const auto positives = static_cast<std::size_t>((pre.array() > 0.0).count());
    const auto code = sae::encode(p, x);
    const std::size_t expected = std::min<std::size_t>(positives, 16);
    if (code.nnz() > 16 || code.nnz() != expected) ++sparsity_violations;
    full_rows += expected == 16;
    ++codes;
  };
  for (Eigen::Index r = 0; r < corpus.x.rows(); ++r) check_code(result.params, corpus.x.row(r).transpose());
  // Only 10 live encoder rows, so every code has fewer than 16 positives.
  auto sparse_enc = result.params;
  sparse_enc.w_enc.bottomRows(sparse_enc.w_enc.rows() - 10).setZero();
  check_code(result.params, result.params.b_pre);
  for (int i = 0; i < 500; ++i) {
    Eigen::VectorXd v(kDim);
    for (int j = 0; j < kDim; ++j) v[j] = rng.normal(0.0, 3.0);
    check_code(result.params, v);
    check_code(sparse_enc, v);
  }

  const Eigen::RowVectorXd mean = corpus.x.colwise().mean();
  const double variance = (corpus.x.rowwise() - mean).array().square().mean();
  const double mse = sae::reconstruction_mse(result.params, corpus.x);
  const double secs = seconds_since(t0);
  Outcome out;
  out.pass = sparsity_violations == 0 && steps > 0 && worst_norm < 1e-6 && mse < 0.05 * variance;
  out.detail = std::to_string(codes) + " codes (" + std::to_string(full_rows) +
               " with >=16 positives), " + std::to_string(sparsity_violations) + " sparsity violations, max norm dev " +
               fmt(worst_norm) + " over " + std::to_string(steps) + " steps, MSE " +
               fmt(100.0 * mse / variance) + "% of variance, " + fmt(secs) + " s";
  return out;
}

// ---- synthetic recovery on the bundled pipeline run ------------------------------------

Outcome prepare(const std::string& config, const std::string& run_dir) {
  auto cfg = pipeline::RunConfig::load(config);
  cfg.paths.out_dir = run_dir;
  fs::remove_all(run_dir);
  const auto t0 = Clock::now();
  pipeline::run_all(cfg, &std::cerr);
  const double secs = seconds_since(t0);
  std::ofstream(fs::path(run_dir) / "elapsed.json") << json{{"seconds", secs}}.dump() << "\n";
  return {true, "bundled pipeline finished in " + fmt(secs) + " s"};
}

csv::Table read_table(const fs::path& p) { return csv::Table::read_file(p.string()); }

std::string cell(const csv::Table& t, std::size_t row, const std::string& col) {
  return t.row(row)[*t.column(col)];
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  return oracle::pearson(a, b);
}

double mean_of(const std::vector<double>& v) { return oracle::mean_of(v); }

Outcome synthetic_recovery(const std::string& run_dir) {
  const fs::path run(run_dir);
  std::ifstream gin(run / "synth" / "ground_truth.json");
  const auto truth = json::parse(gin);
  std::ifstream pin(run / "stats" / "panel.csv");
  const auto panel = stats::read_panel(pin);
  const auto reports = read_table(run / "interpret" / "feature_reports.csv");
  const auto results = read_table(run / "stats" / "results.csv");
  std::ifstream ein(run / "elapsed.json");
  const double secs = json::parse(ein)["seconds"].get<double>();

  std::map<std::pair<std::string, std::int64_t>, const json*> week_of;
  for (const auto& w : truth["weeks"]) week_of[{w["user_id"].get<std::string>(), w["survey_ts_ms"].get<std::int64_t>()}] = &w;
  std::map<std::pair<std::string, std::string>, std::size_t> result_row;
  for (std::size_t i = 0; i < results.size(); ++i) result_row[{cell(results, i, "predictor"), cell(results, i, "outcome")}] = i;

  std::vector<std::string> users;
  for (const auto& row : panel.rows) users.push_back(row.user_id);
  const std::set<std::string> distinct(users.begin(), users.end());

  // Per-user means for between patterns, within-user deviations for within patterns.
  auto project = [&](const std::vector<double>& v, bool between) {
    std::map<std::string, std::vector<double>> by;
    for (std::size_t i = 0; i < v.size(); ++i) by[users[i]].push_back(v[i]);
    std::vector<double> out;
    if (between) {
      for (const auto& u : distinct) out.push_back(mean_of(by[u]));
    } else {
      for (std::size_t i = 0; i < v.size(); ++i) out.push_back(v[i] - mean_of(by[users[i]]));
    }
    return out;
  };

  bool all = true;
  std::string detail;
  for (const auto& pat : truth["config"]["patterns"]) {
    const auto name = pat["name"].get<std::string>();
    const auto category = pat["category"].get<std::string>();
    const bool between = pat["kind"] == "between";
    const std::string eff = between ? "b" : "w";
    const double sign = pat["beta"].get<double>() > 0 ? 1.0 : -1.0;
    std::vector<double> prevalence;
    for (const auto& row : panel.rows) {
      prevalence.push_back((*week_of.at({row.user_id, row.survey_ts_ms}))["realized_prevalence"][name].get<double>());
    }
    const auto truth_proj = project(prevalence, between);

    std::size_t attributed = 0, recovered = 0;
    std::string best;
    for (std::size_t i = 0; i < reports.size(); ++i) {
      if (cell(reports, i, category + "_label") != "high") continue;
      const std::string feature = "f" + cell(reports, i, "feature_id");
      const auto col = std::find(panel.predictor_names.begin(), panel.predictor_names.end(), feature);
      if (col == panel.predictor_names.end()) continue;
      const auto j = static_cast<std::size_t>(col - panel.predictor_names.begin());
      std::vector<double> values;
      for (const auto& row : panel.rows) values.push_back(row.predictors[j].value_or(0.0));
      const double r = pearson(project(values, between), truth_proj);
      if (!(r >= 0.5)) continue;
      ++attributed;
      const auto it = result_row.find({feature, pat["outcome"].get<std::string>()});
      if (it == result_row.end()) continue;
      const auto k = it->second;
      const auto beta = csv::parse_double(cell(results, k, "beta_" + eff));
      const auto q = csv::parse_double(cell(results, k, "q_" + eff));
      const auto folds = csv::parse_int(cell(results, k, "louo_folds"));
      const auto kept = csv::parse_int(cell(results, k, "louo_sign_kept_" + eff));
      const bool ok = beta && q && folds && kept && *beta * sign > 0 && *q < 0.05 &&
                      cell(results, k, "verdict") == "Robust" && *folds > 0 && *kept == *folds;
      if (ok) {
        ++recovered;
        if (best.empty()) best = feature + " r=" + fmt(r, 2) + " q=" + fmt(*q, 2) + " louo " +
                                 std::to_string(*kept) + "/" + std::to_string(*folds);
      }
    }
    all = all && recovered > 0;
    detail += name + ": " + std::to_string(recovered) + "/" + std::to_string(attributed) + " attributed recovered" +
              (best.empty() ? "" : " (" + best + ")") + "; ";
  }
  return {all && secs < 1200.0, detail + "pipeline " + fmt(secs) + " s"};
}

// ---- verdict grid ----------------------------------------------------------------------

bool grid_monotone(const stats::RobustGrid& g) {
  for (std::size_t d = 0; d < g.size(); ++d) {
    for (std::size_t s = 0; s < g[d].size(); ++s) {
      if (d > 0 && g[d][s] > g[d - 1][s]) return false;
      if (s > 0 && g[d][s] > g[d][s - 1]) return false;
    }
  }
  return true;
}

Outcome verdict_grid(const std::string& run_dir) {
  Rng rng(88);
  std::size_t bad_sets = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<stats::VerdictRecord> recs(rng.below(200));
    for (auto& r : recs) {
      if (rng.bernoulli(0.05)) continue;
      // Grid values themselves show up often so boundaries get exercised.
      r.delta_rmse_pct = rng.bernoulli(0.2) ? stats::kGridDelta[rng.below(stats::kGridDelta.size())]
                                            : rng.uniform(-2.0, 8.0);
      r.sign_pct = rng.bernoulli(0.2) ? stats::kGridSign[rng.below(stats::kGridSign.size())] : rng.uniform(30.0, 95.0);
      r.verdict = stats::classify(*r.delta_rmse_pct, *r.sign_pct);
    }
    const auto grid = stats::verdict_threshold_sweep(recs);
    std::size_t robust = 0;
    for (const auto& r : recs) robust += r.verdict == stats::Verdict::robust;
    bad_sets += !grid_monotone(grid) || grid[0][2] != robust;
  }

  // The pipeline's own grid against its verdict column.
  const fs::path run(run_dir);
  const auto grid_csv = read_table(run / "stats" / "verdict_grid.csv");
  const auto results = read_table(run / "stats" / "results.csv");
  stats::RobustGrid grid{};
  bool shape_ok = grid_csv.size() == stats::kGridDelta.size() && grid_csv.header().size() == stats::kGridSign.size() + 1;
  if (shape_ok) {
    for (std::size_t d = 0; d < grid.size(); ++d) {
      for (std::size_t s = 0; s < grid[d].size(); ++s) grid[d][s] = static_cast<std::size_t>(*csv::parse_int(grid_csv.row(d)[s + 1]));
    }
  }
  // The grid covers FDR-significant pairs, the ones whose verdicts are reported.
  std::size_t robust = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    robust += cell(results, i, "significant") == "1" && cell(results, i, "verdict") == "Robust";
  }
  const bool monotone = shape_ok && grid_monotone(grid);
  const bool run_ok = monotone && grid[0][2] == robust;
  return {bad_sets == 0 && run_ok, "2000 random verdict sets, " + std::to_string(bad_sets) +
                                       " violations; pipeline grid monotone " + (monotone ? "yes" : "no") +
                                       ", (0.5, 60) cell " + std::to_string(grid[0][2]) + " vs " +
                                       std::to_string(robust) + " significant Robust verdicts"};
}

// ---- label sweep -----------------------------------------------------------------------

Outcome label_sweep(const std::string& config, const std::string& run_dir) {
  auto cfg = pipeline::RunConfig::load(config);
  cfg.paths.out_dir = run_dir;
  const auto params = sae::load(pipeline::artifact(cfg, "sae", "sae.fstc").string());
  std::ifstream ain(pipeline::artifact(cfg, "sae", "activations.csv"));
  const auto table = sae::read_activations(ain, params.dict_size());
  std::ifstream fin(pipeline::artifact(cfg, "featurize", "features.csv"));
  const auto features = featurize::read_features(fin);
  const auto reports = read_table(pipeline::artifact(cfg, "interpret", "feature_reports.csv"));
  const auto corpus = interpret::corpus_features(table, features);

  std::vector<interpret::FeatureLabel> labels;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const int f = static_cast<int>(*csv::parse_int(cell(reports, i, "feature_id")));
    labels.push_back(interpret::label_feature(f, interpret::top_rows(table, f, cfg.interpret.label_top_n), corpus));
  }
  const auto sweep = interpret::label_threshold_sweep(labels, corpus);

  // Independent recount of every cell at every pair.
  std::size_t disagreements = 0, flips = 0;
  double canonical = 0.0;
  for (const auto& row : sweep) {
    std::size_t unchanged = 0, total = 0;
    for (const auto& l : labels) {
      for (auto c : interpret::kLabeledCategories) {
        const auto pop = corpus.population_mean[c];
        const auto at = interpret::label_category(l.top_mean[c], pop, {row.hi, row.lo});
        const auto base = interpret::label_category(l.top_mean[c], pop, {1.5, 0.7});
        ++total;
        unchanged += at == base;
        flips += (at == interpret::Label::high && base == interpret::Label::low) ||
                 (at == interpret::Label::low && base == interpret::Label::high);
      }
    }
    disagreements += row.unchanged != unchanged || row.total != total;
    if (row.hi == 1.5 && row.lo == 0.70) canonical = row.fraction_unchanged();
    flips += row.high_low_flips;
  }
  std::size_t min_unchanged = labels.size() * interpret::kLabeledCategories.size();
  for (const auto& row : sweep) min_unchanged = std::min(min_unchanged, row.unchanged);
  const bool pass = sweep.size() == 35 && !labels.empty() && canonical == 1.0 && flips == 0 && disagreements == 0;
  return {pass, std::to_string(labels.size()) + " retained features x " +
                    std::to_string(interpret::kLabeledCategories.size()) + " categories over " +
                    std::to_string(sweep.size()) + " pairs; canonical " + fmt(100.0 * canonical) + "% unchanged, " +
                    std::to_string(flips) + " high/low flips, worst pair keeps " + std::to_string(min_unchanged) +
                    " cells, " + std::to_string(disagreements) + " count mismatches"};
}

// ---- probe mechanism -------------------------------------------------------------------

Outcome probe_mechanism() {
  constexpr int kSubjects = 30, kWeeks = 8, kDim = 16;
  constexpr std::int64_t kMonday = 4 * 24;
  Rng rng(1010);
  Eigen::MatrixXd w(kDim, 5);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal(0.0, 0.7);

  std::vector<Eigen::VectorXd> rows;
  std::vector<std::string> subjects;
  std::vector<MaybeReal> morning, noise;
  Rng noise_rng(Rng::derive(1010, "fresh-noise"));
  for (int s = 0; s < kSubjects; ++s) {
    const double level = std::exp(rng.normal(0.0, 0.3));
    for (int wk = 0; wk < kWeeks; ++wk) {
      // Weekly morning routine strength; the rest of the day is unrelated to it.
      const double routine = std::exp(rng.normal(0.0, 0.5));
      std::vector<LocalHour> hours;
      std::vector<double> activity;
      std::vector<Eigen::VectorXd> latents;
      for (int h = 0; h < 168; ++h) {
        const LocalHour hour{kMonday + wk * 168 + h};
        const int hod = hour.hour_of_day();
        const bool is_morning = hod >= 6 && hod <= 11;
        const double base = hod < 6 ? 0.05 : 0.4 * std::exp(rng.normal(0.0, 0.4));
        const double a = level * (is_morning ? routine * 0.6 : base) * std::exp(rng.normal(0.0, 0.3));
        hours.push_back(hour);
        activity.push_back(a);
        Eigen::VectorXd u(5);
        const double angle = 2.0 * std::numbers::pi * hod / 24.0;
        u << a, is_morning ? a : 0.0, std::sin(angle), std::cos(angle), rng.normal();
        Eigen::VectorXd z = (w * u).array().tanh();
        for (int d = 0; d < kDim; ++d) z[d] += rng.normal(0.0, 0.1);
        latents.push_back(z);
      }
      const auto series = classical::HourlySeries::from_hours(hours, activity);
      morning.push_back(classical::band_means(series).morning);
      noise.push_back(noise_rng.normal());
      rows.push_back(probe::summarize(latents).values);
      subjects.push_back("s" + std::to_string(s));
    }
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  const auto signal = probe::loso_probe("morning", x, subjects, morning);
  const auto fresh = probe::loso_probe("fresh_noise", x, subjects, noise);
  if (!signal || !fresh) return {false, "probe preconditions not met"};
  const bool pass = signal->r > 0.5 && signal->encoded && fresh->r2 <= 0.0 && !fresh->encoded;
  return {pass, std::to_string(kSubjects) + " subjects x " + std::to_string(kWeeks) + " weeks; morning r " +
                    fmt(signal->r) + " (R2 " + fmt(signal->r2) + "); fresh noise R2 " + fmt(fresh->r2) + ", r " +
                    fmt(fresh->r) + ", encoded " + (fresh->encoded ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowsense acceptance checks"};
  std::string check, source = FLOWSENSE_SOURCE_DIR, run_dir, config;
  app.add_option("check", check, "Check to run")->required();
  app.add_option("--source", source, "Source tree (dictionary files)");
  app.add_option("--run-dir", run_dir, "Bundled pipeline run directory");
  app.add_option("--config", config, "Bundled run config");
  CLI11_PARSE(app, argc, argv);
  if (config.empty()) config = source + "/configs/bundled.json";

  const std::map<std::string, std::function<Outcome()>> checks = {
      {"formula_oracles", formula_oracles},
      {"mundlak_gee", mundlak_gee},
      {"bh_fdr", bh_fdr},
      {"gradient_check", gradient_check},
      {"training", [&] { return training(source); }},
      {"sae_invariants", sae_invariants},
      {"prepare", [&] { return prepare(config, run_dir); }},
      {"synthetic_recovery", [&] { return synthetic_recovery(run_dir); }},
      {"verdict_grid", [&] { return verdict_grid(run_dir); }},
      {"label_sweep", [&] { return label_sweep(config, run_dir); }},
      {"probe_mechanism", probe_mechanism},
  };
  const auto it = checks.find(check);
  if (it == checks.end()) {
    std::cerr << "unknown check " << check << "\n";
    return 2;
  }
  Outcome out;
  try {
    out = it->second();
  } catch (const std::exception& e) {
    out = {false, std::string("error: ") + e.what()};
  }
  std::cout << (out.pass ? "PASS " : "FAIL ") << check << ": " << out.detail << std::endl;
  return out.pass ? 0 : 1;
}
