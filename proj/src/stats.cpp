#include "flowsense/stats.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>

#include "flowsense/csv.hpp"
#include "flowsense/parallel.hpp"
#include "flowsense/timeutil.hpp"

namespace flowsense::stats {

// ---- surveys ---------------------------------------------------------------------------

namespace {

template <std::size_t N>
MaybeReal sum_items(const std::array<std::optional<int>, N>& items, int lo, int hi,
                    const std::array<bool, N>* reversed, std::string_view instrument) {
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    if (!items[i]) return std::nullopt;
    const int v = *items[i];
    if (v < lo || v > hi) {
      throw ConfigError(std::string(instrument) + " item " + std::to_string(i + 1) +
                        " out of range: " + std::to_string(v));
    }
    total += (reversed && (*reversed)[i]) ? (lo + hi - v) : v;
  }
  return total;
}

std::string item_column(std::string_view prefix, std::size_t i) {
  return std::string(prefix) + "_" + std::to_string(i + 1);
}

}  // namespace

Outcomes score_surveys(const SurveyResponse& r) {
  Outcomes o;
  o.values[0] = sum_items(r.sleep, 1, 5, &kSleepReversed, "sleep");
  o.values[1] = sum_items(r.stress, 1, 5, &kStressReversed, "stress");
  o.values[2] = sum_items<kLonelinessItems>(r.lonely, 1, 3, nullptr, "loneliness");
  return o;
}

std::vector<SurveyResponse> read_surveys(std::istream& in) {
  const auto table = csv::Table::read(in);
  std::vector<std::string> names{"user_id", "survey_ts_ms"};
  for (int i = 0; i < kSleepItems; ++i) names.push_back(item_column("sleep", i));
  for (int i = 0; i < kStressItems; ++i) names.push_back(item_column("stress", i));
  for (int i = 0; i < kLonelinessItems; ++i) names.push_back(item_column("lonely", i));
  const auto cols = table.require_columns(names);
  std::vector<SurveyResponse> out;
  for (std::size_t r = 0; r < table.size(); ++r) {
    const auto& row = table.row(r);
    const auto line = std::to_string(table.line_number(r));
    SurveyResponse s;
    s.user_id = row[cols[0]];
    const auto ts = csv::parse_int(row[cols[1]]);
    if (s.user_id.empty() || !ts) throw ConfigError("bad survey row at line " + line);
    s.survey_ts_ms = *ts;
    auto item = [&](std::size_t col) -> std::optional<int> {
      if (row[col].empty()) return std::nullopt;
      const auto v = csv::parse_int(row[col]);
      if (!v) throw ConfigError("bad survey item at line " + line);
      return static_cast<int>(*v);
    };
    std::size_t c = 2;
    for (auto& v : s.sleep) v = item(cols[c++]);
    for (auto& v : s.stress) v = item(cols[c++]);
    for (auto& v : s.lonely) v = item(cols[c++]);
    out.push_back(std::move(s));
  }
  return out;
}

void write_surveys(std::ostream& out, const std::vector<SurveyResponse>& rows) {
  csv::Writer w(out);
  std::vector<std::string> header{"user_id", "survey_ts_ms"};
  for (int i = 0; i < kSleepItems; ++i) header.push_back(item_column("sleep", i));
  for (int i = 0; i < kStressItems; ++i) header.push_back(item_column("stress", i));
  for (int i = 0; i < kLonelinessItems; ++i) header.push_back(item_column("lonely", i));
  w.row(header);
  auto cell = [](const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const auto& s : rows) {
    std::vector<std::string> row{s.user_id, std::to_string(s.survey_ts_ms)};
    for (const auto& v : s.sleep) row.push_back(cell(v));
    for (const auto& v : s.stress) row.push_back(cell(v));
    for (const auto& v : s.lonely) row.push_back(cell(v));
    w.row(row);
  }
}

// ---- weekly aggregation ----------------------------------------------------------------

WeekWindow week_window(std::int64_t survey_ts_ms, int tz_offset_minutes) {
  const std::int64_t local = timeutil::to_local_ms(survey_ts_ms, tz_offset_minutes);
  // Hours whose start is strictly before the survey: index < ceil(local / 1h).
  const std::int64_t end = -timeutil::floor_div(-local, timeutil::kMsPerHour);
  return {end - kWeekHours, end};
}

MaskedMean weekly_mean(std::span<const LocalHour> hours, std::span<const double> values,
                       const WeekWindow& w) {
  if (hours.size() != values.size()) throw ConfigError("weekly_mean: length mismatch");
  MaskedMean m;
  double sum = 0.0;
  for (std::size_t i = 0; i < hours.size(); ++i) {
    if (!w.contains(hours[i]) || !std::isfinite(values[i])) continue;
    sum += values[i];
    ++m.hours;
  }
  if (m.hours > 0) m.mean = sum / static_cast<double>(m.hours);
  return m;
}

// ---- Mundlak ---------------------------------------------------------------------------

std::optional<Mundlak> mundlak_decompose(std::span<const double> x,
                                         std::span<const std::string> clusters) {
  if (x.size() != clusters.size()) throw ConfigError("mundlak: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  Mundlak m;
  m.grand_mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : x) ss += (v - m.grand_mean) * (v - m.grand_mean);
  m.sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(m.sd > 0.0)) return std::nullopt;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (std::size_t i = 0; i < n; ++i) {
    auto& a = acc[clusters[i]];
    a.first += x[i];
    ++a.second;
  }
  for (const auto& [user, a] : acc) m.user_mean[user] = a.first / static_cast<double>(a.second);
  m.between.resize(n);
  m.within.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double um = m.user_mean.at(clusters[i]);
    m.between[i] = (um - m.grand_mean) / m.sd;
    m.within[i] = (x[i] - um) / m.sd;
  }
  return m;
}

// ---- GEE -------------------------------------------------------------------------------

double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

Eigen::VectorXd ols(const Eigen::VectorXd& y, const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd xtx = x.transpose() * x;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(xtx);
  if (lu.rank() < x.cols()) throw RuntimeError("singular design matrix");
  return lu.solve(x.transpose() * y);
}

GeeFit fit_gee(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
               std::span<const std::string> clusters, const GeeOptions& opt) {
  const auto n = x.rows();
  const auto p = x.cols();
  if (y.size() != n || static_cast<Eigen::Index>(clusters.size()) != n) {
    throw ConfigError("fit_gee: length mismatch");
  }
  std::map<std::string, std::vector<Eigen::Index>> groups;
  for (Eigen::Index i = 0; i < n; ++i) groups[clusters[i]].push_back(i);
  if (groups.size() < 2) throw RuntimeError("GEE needs at least two clusters");
  if (Eigen::ColPivHouseholderQR<Eigen::MatrixXd>(x).rank() < p) {
    throw RuntimeError("singular design matrix");
  }

  double pairs = 0.0;
  for (const auto& [c, idx] : groups) pairs += 0.5 * idx.size() * (idx.size() - 1.0);

  GeeFit fit;
  fit.beta = ols(y, x);

  auto moments = [&](const Eigen::VectorXd& r) {
    fit.phi = r.squaredNorm() / static_cast<double>(n - p);
    if (opt.fixed_alpha) {
      fit.alpha = *opt.fixed_alpha;
      return;
    }
    const double denom = pairs - static_cast<double>(p);
    if (pairs == 0.0 || denom <= 0.0 || fit.phi <= 0.0) {
      fit.alpha = 0.0;
      return;
    }
    double cross = 0.0;
    for (const auto& [c, idx] : groups) {
      // sum_{j<k} r_j r_k = ((sum r)^2 - sum r^2) / 2
      double s = 0.0, s2 = 0.0;
      for (auto i : idx) {
        s += r(i);
        s2 += r(i) * r(i);
      }
      cross += 0.5 * (s * s - s2);
    }
    fit.alpha = std::clamp(cross / (fit.phi * denom), 0.0, 0.99);
  };

  // X_i^T R_i^{-1} A_i for the exchangeable R_i, without forming R_i.
  auto weighted = [&](const std::vector<Eigen::Index>& idx, const Eigen::MatrixXd& a) {
    const double m = static_cast<double>(idx.size());
    const double c = fit.alpha / (1.0 - fit.alpha + m * fit.alpha);
    Eigen::MatrixXd xi(idx.size(), p), ai(idx.size(), a.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      xi.row(k) = x.row(idx[k]);
      ai.row(k) = a.row(idx[k]);
    }
    const Eigen::RowVectorXd a_sum = ai.colwise().sum();
    const Eigen::VectorXd x_sum = xi.colwise().sum().transpose();
    return Eigen::MatrixXd((xi.transpose() * ai - c * x_sum * a_sum) / (1.0 - fit.alpha));
  };

  Eigen::MatrixXd bread(p, p);
  for (fit.iterations = 1; fit.iterations <= opt.max_iter; ++fit.iterations) {
    moments(y - x * fit.beta);
    bread.setZero();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
    for (const auto& [c, idx] : groups) {
      bread += weighted(idx, x);
      rhs += weighted(idx, y);
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(bread);
    if (lu.rank() < p) throw RuntimeError("singular GEE information matrix");
    const Eigen::VectorXd next = lu.solve(rhs);
    const double delta = (next - fit.beta).cwiseAbs().maxCoeff();
    fit.beta = next;
    if (!fit.beta.allFinite()) throw RuntimeError("GEE diverged");
    if (delta < opt.tol) {
      fit.converged = true;
      break;
    }
  }
  fit.iterations = std::min(fit.iterations, opt.max_iter);

  const Eigen::VectorXd r = y - x * fit.beta;
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
  bread.setZero();
  for (const auto& [c, idx] : groups) {
    bread += weighted(idx, x);
    const Eigen::VectorXd u = weighted(idx, r);
    meat += u * u.transpose();
  }
  const Eigen::MatrixXd bread_inv = bread.inverse();
  fit.robust_cov = bread_inv * meat * bread_inv;
  fit.robust_cov = 0.5 * (fit.robust_cov + fit.robust_cov.transpose()).eval();
  fit.phi = r.squaredNorm() / static_cast<double>(n - p);
  fit.se = fit.robust_cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  fit.z.resize(p);
  fit.p.resize(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    fit.z(j) = fit.se(j) > 0 ? fit.beta(j) / fit.se(j) : 0.0;
    fit.p(j) = fit.se(j) > 0 ? normal_two_sided_p(fit.z(j)) : 1.0;
  }
  fit.fitted = x * fit.beta;
  return fit;
}

// ---- multiple testing ------------------------------------------------------------------

std::vector<double> bh_fdr(std::span<const double> p) {
  const std::size_t m = p.size();
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("p-value outside [0, 1]");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
  std::vector<double> q(m);
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const double v = p[order[k]] * (static_cast<double>(m) / static_cast<double>(k + 1));
    running = std::min(running, v);
    q[order[k]] = running;
  }
  return q;
}

// ---- verdicts --------------------------------------------------------------------------

std::string_view verdict_name(Verdict v) {
  switch (v) {
    case Verdict::robust:
      return "Robust";
    case Verdict::unstable:
      return "Unstable";
    case Verdict::redundant:
      return "Redundant";
    case Verdict::noise:
      return "Noise";
    default:
      return "Undefined";
  }
}

MaybeReal sign_consistency(const Eigen::VectorXd& y, const Eigen::VectorXd& fitted, SignRule rule) {
  const double ybar = y.mean();
  auto sgn = [](double v) { return (v > 0) - (v < 0); };
  std::size_t agree = 0, total = 0;
  if (rule == SignRule::outcome_agreement) {
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const int s_y = sgn(y(i) - ybar);
      if (s_y == 0) continue;
      ++total;
      if (sgn(fitted(i) - ybar) == s_y) ++agree;
    }
  } else {
    std::size_t pos = 0, neg = 0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const int s = sgn(fitted(i) - ybar);
      pos += s > 0;
      neg += s < 0;
    }
    total = static_cast<std::size_t>(y.size());
    agree = std::max(pos, neg);
  }
  if (total == 0) return std::nullopt;
  return 100.0 * static_cast<double>(agree) / static_cast<double>(total);
}

Verdict classify(double delta, double sign, const VerdictThresholds& t) {
  const bool helps = delta > t.delta_rmse_pct;
  const bool consistent = sign > t.sign_pct;
  if (helps && consistent) return Verdict::robust;
  if (helps) return Verdict::unstable;
  if (consistent) return Verdict::redundant;
  return Verdict::noise;
}

VerdictRecord ablation_verdict(const Eigen::VectorXd& y, const Eigen::VectorXd& fitted,
                               SignRule rule, const VerdictThresholds& t) {
  VerdictRecord v;
  const double ybar = y.mean();
  const double n = static_cast<double>(y.size());
  const double rmse_null = std::sqrt((y.array() - ybar).square().sum() / n);
  const double rmse_model = std::sqrt((y - fitted).squaredNorm() / n);
  if (!(rmse_null > 0.0)) return v;
  v.delta_rmse_pct = 100.0 * (rmse_null - rmse_model) / rmse_null;
  v.sign_pct = sign_consistency(y, fitted, rule);
  if (v.sign_pct) v.verdict = classify(*v.delta_rmse_pct, *v.sign_pct, t);
  return v;
}

RobustGrid verdict_threshold_sweep(const std::vector<VerdictRecord>& records) {
  RobustGrid grid{};
  for (std::size_t a = 0; a < kGridDelta.size(); ++a) {
    for (std::size_t b = 0; b < kGridSign.size(); ++b) {
      for (const auto& r : records) {
        if (!r.delta_rmse_pct || !r.sign_pct) continue;
        if (classify(*r.delta_rmse_pct, *r.sign_pct, {kGridDelta[a], kGridSign[b]}) ==
            Verdict::robust) {
          ++grid[a][b];
        }
      }
    }
  }
  return grid;
}

// ---- panel -----------------------------------------------------------------------------

void write_panel(std::ostream& out, const Panel& panel) {
  csv::Writer w(out);
  std::vector<std::string> header{"user_id", "survey_ts_ms", "coverage_hours"};
  for (auto name : kOutcomeNames) header.emplace_back(name);
  for (std::size_t j = 0; j < panel.predictor_names.size(); ++j) {
    header.push_back(panel.predictor_family[j] + ":" + panel.predictor_names[j]);
  }
  w.row(header);
  for (const auto& r : panel.rows) {
    std::vector<std::string> row{r.user_id, std::to_string(r.survey_ts_ms),
                                 std::to_string(r.coverage_hours)};
    for (const auto& v : r.outcomes.values) row.push_back(csv::format_maybe(v));
    for (const auto& v : r.predictors) row.push_back(csv::format_maybe(v));
    w.row(row);
  }
}

Panel read_panel(std::istream& in) {
  const auto table = csv::Table::read(in);
  std::vector<std::string> fixed{"user_id", "survey_ts_ms", "coverage_hours"};
  for (auto name : kOutcomeNames) fixed.emplace_back(name);
  const auto cols = table.require_columns(fixed);
  Panel panel;
  std::vector<std::size_t> pred_cols;
  for (std::size_t c = 0; c < table.header().size(); ++c) {
    const auto& h = table.header()[c];
    const auto colon = h.find(':');
    if (colon == std::string::npos) continue;
    panel.predictor_family.push_back(h.substr(0, colon));
    panel.predictor_names.push_back(h.substr(colon + 1));
    pred_cols.push_back(c);
  }
  auto maybe = [](const std::string& s, const std::string& line) -> MaybeReal {
    if (s.empty()) return std::nullopt;
    const auto v = csv::parse_double(s);
    if (!v) throw ConfigError("bad panel value at line " + line);
    return *v;
  };
  for (std::size_t r = 0; r < table.size(); ++r) {
    const auto& row = table.row(r);
    const auto line = std::to_string(table.line_number(r));
    PersonWeek pw;
    pw.user_id = row[cols[0]];
    const auto ts = csv::parse_int(row[cols[1]]);
    const auto cov = csv::parse_int(row[cols[2]]);
    if (!ts || !cov) throw ConfigError("bad panel row at line " + line);
    pw.survey_ts_ms = *ts;
    pw.coverage_hours = static_cast<std::size_t>(*cov);
    for (std::size_t k = 0; k < 3; ++k) pw.outcomes.values[k] = maybe(row[cols[3 + k]], line);
    for (auto c : pred_cols) pw.predictors.push_back(maybe(row[c], line));
    panel.rows.push_back(std::move(pw));
  }
  return panel;
}

// ---- pair fitting ----------------------------------------------------------------------

namespace {

std::optional<PairFit> fit_rows(const Panel& panel, std::size_t predictor, std::size_t outcome,
                                const GeeOptions& opt, const std::string* exclude) {
  std::vector<double> x, y;
  std::vector<std::string> clusters;
  for (const auto& r : panel.rows) {
    if (exclude && r.user_id == *exclude) continue;
    const auto& xv = r.predictors[predictor];
    const auto& yv = r.outcomes.values[outcome];
    if (!xv || !yv) continue;
    x.push_back(*xv);
    y.push_back(*yv);
    clusters.push_back(r.user_id);
  }
  auto m = mundlak_decompose(x, clusters);
  if (!m) return std::nullopt;
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd design(n, 3);
  Eigen::VectorXd yy(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    design(i, 1) = m->between[i];
    design(i, 2) = m->within[i];
    yy(i) = y[i];
  }
  PairFit out{fit_gee(yy, design, clusters, opt), std::move(y), std::move(clusters), std::move(*m)};
  return out;
}

}  // namespace

std::optional<PairFit> fit_pair(const Panel& panel, std::size_t predictor, std::size_t outcome,
                                const GeeOptions& opt) {
  return fit_rows(panel, predictor, outcome, opt, nullptr);
}

LouoSummary louo_resample(const Panel& panel, std::size_t predictor, std::size_t outcome,
                          const GeeOptions& opt) {
  const auto full = fit_pair(panel, predictor, outcome, opt);
  if (!full) throw RuntimeError("LOUO: predictor has no variance");
  const std::set<std::string> users(full->clusters.begin(), full->clusters.end());
  if (users.size() < 3) throw RuntimeError("LOUO needs at least three participants");
  const double sign_b = full->fit.beta(1), sign_w = full->fit.beta(2);
  LouoSummary s;
  for (const auto& u : users) {
    LouoFold fold;
    fold.held_out = u;
    try {
      if (auto f = fit_rows(panel, predictor, outcome, opt, &u)) {
        fold.fitted = true;
        fold.beta_b = f->fit.beta(1);
        fold.beta_w = f->fit.beta(2);
        fold.p_b = f->fit.p(1);
        fold.p_w = f->fit.p(2);
      }
    } catch (const RuntimeError&) {
      fold.fitted = false;
    }
    if (fold.fitted) {
      ++s.fitted;
      s.sign_kept_b += (fold.beta_b > 0) == (sign_b > 0) && fold.beta_b != 0;
      s.sign_kept_w += (fold.beta_w > 0) == (sign_w > 0) && fold.beta_w != 0;
      s.significant_b += fold.p_b < 0.05;
      s.significant_w += fold.p_w < 0.05;
    }
    s.folds.push_back(fold);
  }
  return s;
}

StatsResult run_stats(const Panel& panel, const StatsConfig& cfg) {
  StatsResult out;
  const std::size_t np = panel.predictor_names.size();
  const std::size_t no = kOutcomeNames.size();
  out.pairs.resize(np * no);
  std::vector<std::optional<PairFit>> fits(np * no);
  parallel_for(np * no, cfg.threads, [&](std::size_t k) {
    const std::size_t j = k / no, o = k % no;
    PairResult& r = out.pairs[k];
    r.predictor = panel.predictor_names[j];
    r.family = panel.predictor_family[j];
    r.outcome = std::string(kOutcomeNames[o]);
    try {
      fits[k] = fit_pair(panel, j, o, cfg.gee);
      if (!fits[k]) {
        r.dropped = true;
        r.note = "zero predictor variance";
        return;
      }
    } catch (const RuntimeError& e) {
      r.dropped = true;
      r.note = e.what();
      return;
    }
    const auto& f = fits[k]->fit;
    r.n = fits[k]->y.size();
    r.clusters = std::set<std::string>(fits[k]->clusters.begin(), fits[k]->clusters.end()).size();
    r.beta_0 = f.beta(0);
    r.beta_b = f.beta(1);
    r.beta_w = f.beta(2);
    r.se_b = f.se(1);
    r.se_w = f.se(2);
    r.p_b = f.p(1);
    r.p_w = f.p(2);
    r.alpha = f.alpha;
    r.converged = f.converged;
    const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(fits[k]->y.data(), r.n);
    r.verdict = ablation_verdict(y, f.fitted, cfg.sign_rule, cfg.thresholds);
  });

  // BH within each (family, effect type) over the fitted pairs.
  std::set<std::string> families(panel.predictor_family.begin(), panel.predictor_family.end());
  for (const auto& fam : families) {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < out.pairs.size(); ++k) {
      if (!out.pairs[k].dropped && out.pairs[k].family == fam) idx.push_back(k);
    }
    std::vector<double> pb, pw;
    for (auto k : idx) {
      pb.push_back(out.pairs[k].p_b);
      pw.push_back(out.pairs[k].p_w);
    }
    const auto qb = bh_fdr(pb), qw = bh_fdr(pw);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.pairs[idx[i]].q_b = qb[i];
      out.pairs[idx[i]].q_w = qw[i];
    }
  }

  std::vector<VerdictRecord> significant;
  std::vector<std::size_t> sig_idx;
  for (std::size_t k = 0; k < out.pairs.size(); ++k) {
    auto& r = out.pairs[k];
    if (r.dropped) continue;
    if (!r.converged) out.any_nonconverged = true;
    r.significant = r.q_b < cfg.fdr_alpha || r.q_w < cfg.fdr_alpha;
    if (!r.significant) continue;
    significant.push_back(r.verdict);
    sig_idx.push_back(k);
    if (r.verdict.verdict == Verdict::robust) ++out.primary_robust;
  }
  parallel_for(sig_idx.size(), cfg.threads, [&](std::size_t i) {
    const std::size_t k = sig_idx[i];
    if (out.pairs[k].clusters >= 3) out.pairs[k].louo = louo_resample(panel, k / no, k % no, cfg.gee);
  });
  out.grid = verdict_threshold_sweep(significant);
  return out;
}

void write_results(std::ostream& out, const StatsResult& r) {
  csv::Writer w(out);
  w.row({"predictor", "family", "outcome", "n", "clusters", "beta_0", "beta_b", "beta_w", "se_b",
         "se_w", "p_b", "p_w", "q_b", "q_w", "alpha", "converged", "delta_rmse_pct", "sign_pct",
         "verdict", "significant", "louo_folds", "louo_sign_kept_b", "louo_sign_kept_w",
         "louo_significant_b", "louo_significant_w", "note"});
  auto d = [](double v) { return csv::format_double(v); };
  for (const auto& p : r.pairs) {
    if (p.dropped) {
      w.row({p.predictor, p.family, p.outcome, "", "", "", "", "", "", "", "", "", "", "", "", "",
             "", "", "", "0", "", "", "", "", "", p.note});
      continue;
    }
    std::vector<std::string> row{p.predictor, p.family, p.outcome, std::to_string(p.n),
                                 std::to_string(p.clusters), d(p.beta_0), d(p.beta_b), d(p.beta_w),
                                 d(p.se_b), d(p.se_w), d(p.p_b), d(p.p_w), d(p.q_b), d(p.q_w),
                                 d(p.alpha), p.converged ? "1" : "0",
                                 csv::format_maybe(p.verdict.delta_rmse_pct),
                                 csv::format_maybe(p.verdict.sign_pct),
                                 std::string(verdict_name(p.verdict.verdict)),
                                 p.significant ? "1" : "0"};
    if (p.louo) {
      row.push_back(std::to_string(p.louo->fitted));
      row.push_back(std::to_string(p.louo->sign_kept_b));
      row.push_back(std::to_string(p.louo->sign_kept_w));
      row.push_back(std::to_string(p.louo->significant_b));
      row.push_back(std::to_string(p.louo->significant_w));
    } else {
      row.insert(row.end(), 5, "");
    }
    row.push_back(p.note);
    w.row(row);
  }
}

void write_grid(std::ostream& out, const RobustGrid& grid) {
  csv::Writer w(out);
  std::vector<std::string> header{"delta_rmse_pct"};
  for (double s : kGridSign) header.push_back("sign_" + csv::format_double(s));
  w.row(header);
  for (std::size_t a = 0; a < kGridDelta.size(); ++a) {
    std::vector<std::string> row{csv::format_double(kGridDelta[a])};
    for (auto c : grid[a]) row.push_back(std::to_string(c));
    w.row(row);
  }
}

}  // namespace flowsense::stats
