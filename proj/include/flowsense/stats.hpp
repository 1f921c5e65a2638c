#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "flowsense/common.hpp"

namespace flowsense::stats {

// ---- surveys ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 3> kOutcomeNames = {"sleep", "stress", "loneliness"};
inline constexpr int kSleepItems = 4;
inline constexpr int kStressItems = 4;
inline constexpr int kLonelinessItems = 3;

// Raw item responses as collected; a missing item is nullopt.
struct SurveyResponse {
  std::string user_id;
  std::int64_t survey_ts_ms = 0;  // UTC
  std::array<std::optional<int>, kSleepItems> sleep{};       // 1-5
  std::array<std::optional<int>, kStressItems> stress{};     // 1-5
  std::array<std::optional<int>, kLonelinessItems> lonely{}; // 1-3
};

// Items whose raw answer is reverse coded (6 - raw) before summing.
inline constexpr std::array<bool, kSleepItems> kSleepReversed = {true, true, false, false};
inline constexpr std::array<bool, kStressItems> kStressReversed = {false, true, true, false};

struct Outcomes {
  std::array<MaybeReal, 3> values;  // sleep 4-20, stress 4-20, loneliness 3-9
};
// Throws ConfigError on an out-of-range item; a missing item leaves its instrument undefined.
Outcomes score_surveys(const SurveyResponse& r);

// CSV: user_id, survey_ts_ms, sleep_1..4, stress_1..4, lonely_1..3 (empty = missing).
std::vector<SurveyResponse> read_surveys(std::istream& in);
void write_surveys(std::ostream& out, const std::vector<SurveyResponse>& rows);

// ---- weekly aggregation ----------------------------------------------------------------

inline constexpr int kWeekHours = 168;
inline constexpr int kMinPreSurveyHours = 48;

// Local hours in [survey - 168h, survey) where `survey_local` is the survey time as a local
// epoch-millisecond value. An hour belongs to the window when its start lies inside.
struct WeekWindow {
  std::int64_t first_hour = 0;  // inclusive local hour index
  std::int64_t end_hour = 0;    // exclusive
  bool contains(LocalHour h) const { return h.index >= first_hour && h.index < end_hour; }
};
WeekWindow week_window(std::int64_t survey_ts_ms, int tz_offset_minutes);

// Mean of the values present in the window; hours without a value are excluded.
struct MaskedMean {
  MaybeReal mean;
  std::size_t hours = 0;
};
MaskedMean weekly_mean(std::span<const LocalHour> hours, std::span<const double> values,
                       const WeekWindow& w);

// ---- Mundlak ---------------------------------------------------------------------------

struct Mundlak {
  std::vector<double> between;  // (user mean - grand mean) / sd
  std::vector<double> within;   // (x - user mean) / sd
  std::map<std::string, double> user_mean;
  double grand_mean = 0.0;
  double sd = 0.0;  // sample SD over all observations (N - 1)
};
// nullopt when fewer than two observations or zero SD (predictor dropped).
std::optional<Mundlak> mundlak_decompose(std::span<const double> x,
                                         std::span<const std::string> clusters);

// ---- GEE -------------------------------------------------------------------------------

struct GeeOptions {
  double tol = 1e-8;
  int max_iter = 100;
  std::optional<double> fixed_alpha;  // force a working correlation (e.g. 0 = independence)
};

struct GeeFit {
  Eigen::VectorXd beta;
  Eigen::MatrixXd robust_cov;
  Eigen::VectorXd se, z, p;
  double alpha = 0.0;
  double phi = 0.0;
  int iterations = 0;
  bool converged = false;
  Eigen::VectorXd fitted;
};

// Gaussian identity-link GEE with exchangeable working correlation and sandwich errors.
// X includes the intercept column. Observations of one cluster need not be adjacent.
// Throws RuntimeError on a singular design or fewer than two clusters.
GeeFit fit_gee(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
               std::span<const std::string> clusters, const GeeOptions& opt = {});

// Normal-equations OLS, used as a reference in tests and as the GEE starting point.
Eigen::VectorXd ols(const Eigen::VectorXd& y, const Eigen::MatrixXd& x);

double normal_two_sided_p(double z);

// ---- multiple testing ------------------------------------------------------------------

// Benjamini-Hochberg step-up q-values, returned in input order. Throws ConfigError for p
// outside [0, 1].
std::vector<double> bh_fdr(std::span<const double> p);

// ---- verdicts --------------------------------------------------------------------------

enum class Verdict { robust, unstable, redundant, noise, undefined };
std::string_view verdict_name(Verdict v);

enum class SignRule { outcome_agreement, prediction_majority };

struct VerdictThresholds {
  double delta_rmse_pct = 0.5;
  double sign_pct = 60.0;
};

struct VerdictRecord {
  MaybeReal delta_rmse_pct;
  MaybeReal sign_pct;
  Verdict verdict = Verdict::undefined;
};

// outcome_agreement: share of observations with sign(yhat - ybar) == sign(y - ybar), excluding
// y == ybar. prediction_majority: share of observations whose yhat - ybar carries the majority
// sign.
MaybeReal sign_consistency(const Eigen::VectorXd& y, const Eigen::VectorXd& fitted, SignRule rule);
Verdict classify(double delta_rmse_pct, double sign_pct, const VerdictThresholds& t = {});
VerdictRecord ablation_verdict(const Eigen::VectorXd& y, const Eigen::VectorXd& fitted,
                               SignRule rule = SignRule::outcome_agreement,
                               const VerdictThresholds& t = {});

inline constexpr std::array<double, 7> kGridDelta = {0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 5.0};
inline constexpr std::array<double, 6> kGridSign = {50, 55, 60, 65, 70, 75};
using RobustGrid = std::array<std::array<std::size_t, kGridSign.size()>, kGridDelta.size()>;
RobustGrid verdict_threshold_sweep(const std::vector<VerdictRecord>& records);

// ---- panel + pipeline ------------------------------------------------------------------

struct PersonWeek {
  std::string user_id;
  std::int64_t survey_ts_ms = 0;
  std::size_t coverage_hours = 0;
  Outcomes outcomes;
  std::vector<MaybeReal> predictors;  // aligned with Panel::predictor_names
};

struct Panel {
  std::vector<std::string> predictor_names;
  std::vector<std::string> predictor_family;  // e.g. "sae" or "classical"; BH runs per family
  std::vector<PersonWeek> rows;
  std::vector<std::string> excluded;  // "user@ts: reason"
};

void write_panel(std::ostream& out, const Panel& panel);
Panel read_panel(std::istream& in);

struct LouoFold {
  std::string held_out;
  bool fitted = false;  // false when the fold design was singular
  double beta_b = 0.0, beta_w = 0.0, p_b = 1.0, p_w = 1.0;
};
struct LouoSummary {
  std::vector<LouoFold> folds;
  std::size_t fitted = 0;
  std::size_t sign_kept_b = 0, sign_kept_w = 0;
  std::size_t significant_b = 0, significant_w = 0;
};

struct PairResult {
  std::string predictor;
  std::string family;
  std::string outcome;
  std::size_t n = 0;
  std::size_t clusters = 0;
  bool dropped = false;
  std::string note;
  double beta_0 = 0.0, beta_b = 0.0, beta_w = 0.0;
  double se_b = 0.0, se_w = 0.0;
  double p_b = 1.0, p_w = 1.0;
  double q_b = 1.0, q_w = 1.0;
  double alpha = 0.0;
  bool converged = false;
  VerdictRecord verdict;
  bool significant = false;  // q_b < 0.05 or q_w < 0.05
  std::optional<LouoSummary> louo;
};

// Fits y ~ 1 + X_B + X_W for the Mundlak-decomposed predictor; nullopt when dropped.
struct PairFit {
  GeeFit fit;
  std::vector<double> y;
  std::vector<std::string> clusters;
  Mundlak mundlak;
};
std::optional<PairFit> fit_pair(const Panel& panel, std::size_t predictor, std::size_t outcome,
                                const GeeOptions& opt = {});

// Refits with each participant held out in turn (needs >= 3 clusters).
LouoSummary louo_resample(const Panel& panel, std::size_t predictor, std::size_t outcome,
                          const GeeOptions& opt = {});

struct StatsConfig {
  double fdr_alpha = 0.05;
  SignRule sign_rule = SignRule::outcome_agreement;
  VerdictThresholds thresholds;
  GeeOptions gee;
  int threads = 1;
};

struct StatsResult {
  std::vector<PairResult> pairs;
  RobustGrid grid{};
  std::size_t primary_robust = 0;
  bool any_nonconverged = false;
};

// Every (predictor, outcome) pair; BH within each (family, effect type); verdicts and LOUO for
// FDR-significant pairs; the Robust-count grid over those verdicts.
StatsResult run_stats(const Panel& panel, const StatsConfig& cfg = {});

void write_results(std::ostream& out, const StatsResult& r);
void write_grid(std::ostream& out, const RobustGrid& grid);

}  // namespace flowsense::stats
