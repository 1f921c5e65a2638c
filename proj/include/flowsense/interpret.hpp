#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "flowsense/common.hpp"
#include "flowsense/featurize.hpp"
#include "flowsense/ingest.hpp"
#include "flowsense/sae.hpp"

namespace flowsense::interpret {

// Categories that receive labels: every model category except system.
inline constexpr std::array<std::size_t, 4> kLabeledCategories = {0, 1, 2, 3};

enum class Label { low, neutral, high };
std::string_view label_name(Label l);

enum class Band { night, morning, midday, afternoon, evening };
inline constexpr std::array<std::string_view, 5> kBandNames = {"night", "morning", "midday",
                                                               "afternoon", "evening"};
// night 23-04, morning 05-09, midday 10-13, afternoon 14-17, evening 18-22.
Band band_of_hour(int hour_of_day);

// Corpus rows with the highest activation of `feature`, ties to the lower row; at most n.
std::vector<std::pair<std::size_t, double>> top_rows(const sae::ActivationTable& table, int feature,
                                                     std::size_t n);

struct GeneralityConfig {
  std::size_t top_n = 50;
  double min_participant_fraction = 0.40;
};
// ceil(fraction * participants), guarded against representation error in the product.
std::size_t participant_threshold(std::size_t participants, double fraction);
// Active features whose top-N hours span at least the threshold number of distinct users.
std::vector<int> generality_filter(const sae::ActivationTable& table, std::size_t participants,
                                   const GeneralityConfig& cfg = {});

struct Thresholds {
  double hi = 1.5;
  double lo = 0.7;
};

// Per-category labels from mean category fractions over a feature's top hours.
struct FeatureLabel {
  int feature = 0;
  std::size_t top_count = 0;
  bool few_activations = false;  // fewer than 20 top hours available
  std::array<double, kNumModelCategories> top_mean{};
  std::array<Label, kNumModelCategories> labels{};  // system always neutral
  std::array<bool, kNumModelCategories> zero_population{};  // neutral because the mean is 0
  Band band = Band::night;
};

Label label_category(double top_mean, double population_mean, const Thresholds& t);

// Row-aligned category fractions and hour-of-day for the activation table's corpus.
struct CorpusFeatures {
  std::vector<std::array<double, kNumModelCategories>> fractions;
  std::vector<int> hour_of_day;
  std::array<double, kNumModelCategories> population_mean{};
};
// Looks up each activation-table row in the feature file; throws ConfigError when missing.
CorpusFeatures corpus_features(const sae::ActivationTable& table,
                               const std::vector<featurize::HourlyFeature>& features);

FeatureLabel label_feature(int feature, const std::vector<std::pair<std::size_t, double>>& top,
                           const CorpusFeatures& corpus, const Thresholds& t = {});

inline constexpr std::array<double, 7> kSweepHi = {1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 2.0};
inline constexpr std::array<double, 5> kSweepLo = {0.60, 0.65, 0.70, 0.75, 0.80};

struct SweepRow {
  double hi = 0.0;
  double lo = 0.0;
  std::size_t unchanged = 0;
  std::size_t changed = 0;
  std::size_t total = 0;
  std::size_t high_low_flips = 0;  // cells that moved directly between high and low
  double fraction_unchanged() const {
    return total == 0 ? 1.0 : static_cast<double>(unchanged) / static_cast<double>(total);
  }
};
// Every (hi, lo) pair relabels the same (feature, category) cells and compares to `canonical`.
std::vector<SweepRow> label_threshold_sweep(const std::vector<FeatureLabel>& labels,
                                            const CorpusFeatures& corpus,
                                            const Thresholds& canonical = {});

struct Composition {
  double foreground_fraction = 0.0;  // mapped non-background bytes / total bytes
  std::int64_t total_bytes = 0;
  std::vector<std::pair<std::string, double>> app_shares;  // within foreground, descending
};
// Over the given corpus rows. Traffic is looked up by (user, hour); absent hours contribute 0.
Composition foreground_composition(
    const std::vector<std::size_t>& rows, const sae::ActivationTable& table,
    const std::map<std::pair<std::string, std::int64_t>, const ingest::HourlyTraffic*>& traffic,
    const ingest::Dictionary& dict, const std::set<std::string>& background = {"system"});

// Affine map from a backbone latent to the 8 reconstructed features.
struct LinearHead {
  Eigen::MatrixXd weight;  // d_model x d_out
  Eigen::VectorXd bias;    // d_out
  Eigen::VectorXd apply(const Eigen::VectorXd& h) const {
    return weight.transpose() * h + bias;
  }
};

struct PerturbationResult {
  int feature = 0;
  double sigma = 0.0;
  bool inconclusive = false;  // sigma == 0
  std::array<double, kNumModelCategories> mean_change{};
  bool pass = false;
};
// Empirical (population) standard deviation of a feature over every corpus row, zeros included.
double activation_sigma(const sae::ActivationTable& table, int feature);
// Adds multiplier * sigma to `feature` in each reference code, decodes, applies the head and
// averages the change of each category output. Pass iff every high-labeled category increases
// and every low-labeled category decreases.
PerturbationResult perturbation_test(const FeatureLabel& label, double sigma,
                                     const std::vector<sae::SparseCode>& reference,
                                     const sae::SaeParams& sae, const LinearHead& head,
                                     double multiplier = 5.0);
// Seeded sample (without replacement) of corpus codes used as perturbation baselines.
std::vector<sae::SparseCode> reference_codes(const sae::ActivationTable& table, std::size_t count,
                                             std::uint64_t seed);

struct FeatureReport {
  FeatureLabel label;
  std::size_t distinct_users_top50 = 0;
  Composition composition;
  PerturbationResult perturbation;
};

struct InterpretConfig {
  GeneralityConfig generality;
  Thresholds thresholds;
  std::size_t top_n_label = 100;
  std::size_t reference_codes = 256;
  double perturbation_multiplier = 5.0;
  std::uint64_t seed = 42;
};

struct InterpretResult {
  std::vector<int> active;
  std::vector<int> retained;
  std::vector<FeatureReport> reports;  // retained features, ascending id
  std::vector<SweepRow> sweep;
  CorpusFeatures corpus;
};

InterpretResult interpret(const sae::ActivationTable& table, const sae::SaeParams& sae,
                          const LinearHead& head,
                          const std::vector<featurize::HourlyFeature>& features,
                          const std::vector<ingest::HourlyTraffic>& traffic,
                          const ingest::Dictionary& dict, const InterpretConfig& cfg = {});

void write_reports_csv(std::ostream& out, const std::vector<FeatureReport>& reports);
void write_reports_text(std::ostream& out, const std::vector<FeatureReport>& reports);
void write_sweep(std::ostream& out, const std::vector<SweepRow>& sweep);

}  // namespace flowsense::interpret
