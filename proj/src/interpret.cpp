#include "flowsense/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "flowsense/csv.hpp"
#include "flowsense/rng.hpp"

namespace flowsense::interpret {

std::string_view label_name(Label l) {
  switch (l) {
    case Label::low:
      return "low";
    case Label::high:
      return "high";
    default:
      return "neutral";
  }
}

Band band_of_hour(int h) {
  if (h < 0 || h > 23) throw std::out_of_range("hour of day out of range");
  if (h >= 23 || h <= 4) return Band::night;
  if (h <= 9) return Band::morning;
  if (h <= 13) return Band::midday;
  if (h <= 17) return Band::afternoon;
  return Band::evening;
}

std::vector<std::pair<std::size_t, double>> top_rows(const sae::ActivationTable& table, int feature,
                                                     std::size_t n) {
  std::vector<std::pair<std::size_t, double>> rows;
  for (const auto& e : table.entries) {
    if (e.feature == feature) rows.emplace_back(e.row, e.value);
  }
  auto better = [](const auto& a, const auto& b) {
    return a.second > b.second || (a.second == b.second && a.first < b.first);
  };
  if (rows.size() > n) {
    std::partial_sort(rows.begin(), rows.begin() + n, rows.end(), better);
    rows.resize(n);
  } else {
    std::sort(rows.begin(), rows.end(), better);
  }
  return rows;
}

std::size_t participant_threshold(std::size_t participants, double fraction) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(participants) - 1e-9));
}

std::vector<int> generality_filter(const sae::ActivationTable& table, std::size_t participants,
                                   const GeneralityConfig& cfg) {
  const std::size_t need = participant_threshold(participants, cfg.min_participant_fraction);
  std::vector<int> kept;
  for (int f : table.active_features()) {
    std::set<std::string> users;
    for (const auto& [row, value] : top_rows(table, f, cfg.top_n)) users.insert(table.users[row]);
    if (users.size() >= need) kept.push_back(f);
  }
  return kept;
}

Label label_category(double top_mean, double population_mean, const Thresholds& t) {
  if (population_mean <= 0.0) return Label::neutral;
  if (top_mean > t.hi * population_mean) return Label::high;
  if (top_mean < t.lo * population_mean) return Label::low;
  return Label::neutral;
}

CorpusFeatures corpus_features(const sae::ActivationTable& table,
                               const std::vector<featurize::HourlyFeature>& features) {
  std::map<std::pair<std::string, std::int64_t>, const featurize::HourlyFeature*> index;
  for (const auto& f : features) index[{f.user_id, f.hour.index}] = &f;
  CorpusFeatures out;
  out.fractions.reserve(table.users.size());
  for (std::size_t r = 0; r < table.users.size(); ++r) {
    auto it = index.find({table.users[r], table.hours[r].index});
    if (it == index.end()) {
      throw ConfigError("no feature row for user " + table.users[r] + " at an activation hour");
    }
    std::array<double, kNumModelCategories> frac{};
    for (std::size_t c = 0; c < kNumModelCategories; ++c) frac[c] = it->second->frac(c);
    out.fractions.push_back(frac);
    out.hour_of_day.push_back(table.hours[r].hour_of_day());
    for (std::size_t c = 0; c < kNumModelCategories; ++c) out.population_mean[c] += frac[c];
  }
  if (!out.fractions.empty()) {
    for (auto& m : out.population_mean) m /= static_cast<double>(out.fractions.size());
  }
  return out;
}

FeatureLabel label_feature(int feature, const std::vector<std::pair<std::size_t, double>>& top,
                           const CorpusFeatures& corpus, const Thresholds& t) {
  FeatureLabel l;
  l.feature = feature;
  l.top_count = top.size();
  l.few_activations = top.size() < 20;
  l.labels.fill(Label::neutral);
  if (top.empty()) return l;
  std::array<std::size_t, kBandNames.size()> band_counts{};
  for (const auto& [row, value] : top) {
    for (std::size_t c = 0; c < kNumModelCategories; ++c) l.top_mean[c] += corpus.fractions[row][c];
    ++band_counts[static_cast<std::size_t>(band_of_hour(corpus.hour_of_day[row]))];
  }
  for (auto& m : l.top_mean) m /= static_cast<double>(top.size());
  for (std::size_t c : kLabeledCategories) {
    l.zero_population[c] = corpus.population_mean[c] <= 0.0;
    l.labels[c] = label_category(l.top_mean[c], corpus.population_mean[c], t);
  }
  // Mode band; ties go to the earlier band in the fixed order.
  l.band = static_cast<Band>(std::max_element(band_counts.begin(), band_counts.end()) -
                             band_counts.begin());
  return l;
}

std::vector<SweepRow> label_threshold_sweep(const std::vector<FeatureLabel>& labels,
                                            const CorpusFeatures& corpus,
                                            const Thresholds& canonical) {
  std::vector<SweepRow> out;
  for (double hi : kSweepHi) {
    for (double lo : kSweepLo) {
      SweepRow row{hi, lo};
      for (const auto& l : labels) {
        for (std::size_t c : kLabeledCategories) {
          const Label base = label_category(l.top_mean[c], corpus.population_mean[c], canonical);
          const Label now = label_category(l.top_mean[c], corpus.population_mean[c], {hi, lo});
          ++row.total;
          if (base == now) {
            ++row.unchanged;
          } else {
            ++row.changed;
            if (base != Label::neutral && now != Label::neutral) ++row.high_low_flips;
          }
        }
      }
      out.push_back(row);
    }
  }
  return out;
}

Composition foreground_composition(
    const std::vector<std::size_t>& rows, const sae::ActivationTable& table,
    const std::map<std::pair<std::string, std::int64_t>, const ingest::HourlyTraffic*>& traffic,
    const ingest::Dictionary& dict, const std::set<std::string>& background) {
  Composition out;
  std::map<std::string, std::int64_t> app_bytes;
  std::int64_t foreground = 0;
  for (auto r : rows) {
    auto it = traffic.find({table.users[r], table.hours[r].index});
    if (it == traffic.end()) continue;
    const auto& h = *it->second;
    out.total_bytes += h.total_bytes;
    for (const auto& [app, bytes] : h.app_bytes) {
      auto cat = dict.app_to_category().find(app);
      if (cat == dict.app_to_category().end() || background.contains(cat->second)) continue;
      app_bytes[app] += bytes;
      foreground += bytes;
    }
  }
  if (out.total_bytes == 0) return out;
  out.foreground_fraction = static_cast<double>(foreground) / static_cast<double>(out.total_bytes);
  for (const auto& [app, bytes] : app_bytes) {
    if (foreground > 0) {
      out.app_shares.emplace_back(app, static_cast<double>(bytes) / static_cast<double>(foreground));
    }
  }
  std::stable_sort(out.app_shares.begin(), out.app_shares.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

double activation_sigma(const sae::ActivationTable& table, int feature) {
  const auto n = static_cast<double>(table.users.size());
  if (n == 0) return 0.0;
  double sum = 0.0, sq = 0.0;
  for (const auto& e : table.entries) {
    if (e.feature != feature) continue;
    sum += e.value;
    sq += e.value * e.value;
  }
  const double mean = sum / n;
  return std::sqrt(std::max(0.0, sq / n - mean * mean));
}

PerturbationResult perturbation_test(const FeatureLabel& label, double sigma,
                                     const std::vector<sae::SparseCode>& reference,
                                     const sae::SaeParams& sae, const LinearHead& head,
                                     double multiplier) {
  PerturbationResult out;
  out.feature = label.feature;
  out.sigma = sigma;
  if (sigma <= 0.0 || reference.empty()) {
    out.inconclusive = true;
    return out;
  }
  const double bump = multiplier * sigma;
  Eigen::VectorXd total = Eigen::VectorXd::Zero(head.bias.size());
  for (const auto& code : reference) {
    sae::SparseCode bumped = code;
    auto it = std::lower_bound(bumped.indices.begin(), bumped.indices.end(), label.feature);
    const auto pos = static_cast<std::size_t>(it - bumped.indices.begin());
    if (it != bumped.indices.end() && *it == label.feature) {
      bumped.values[pos] += bump;
    } else {
      bumped.indices.insert(it, label.feature);
      bumped.values.insert(bumped.values.begin() + static_cast<std::ptrdiff_t>(pos), bump);
    }
    total += head.apply(sae::decode(sae, bumped)) - head.apply(sae::decode(sae, code));
  }
  total /= static_cast<double>(reference.size());
  out.pass = true;
  for (std::size_t c = 0; c < kNumModelCategories; ++c) {
    out.mean_change[c] = total(static_cast<Eigen::Index>(c));
    if (label.labels[c] == Label::high && !(out.mean_change[c] > 0)) out.pass = false;
    if (label.labels[c] == Label::low && !(out.mean_change[c] < 0)) out.pass = false;
  }
  return out;
}

std::vector<sae::SparseCode> reference_codes(const sae::ActivationTable& table, std::size_t count,
                                             std::uint64_t seed) {
  std::vector<std::size_t> rows(table.users.size());
  std::iota(rows.begin(), rows.end(), 0);
  Rng rng = Rng::derive(seed, "perturbation-reference");
  rng.shuffle(rows);
  rows.resize(std::min(rows.size(), count));
  std::sort(rows.begin(), rows.end());
  std::vector<sae::SparseCode> codes(rows.size());
  std::map<std::size_t, std::size_t> slot;
  for (std::size_t i = 0; i < rows.size(); ++i) slot[rows[i]] = i;
  for (const auto& e : table.entries) {
    auto it = slot.find(e.row);
    if (it == slot.end()) continue;
    codes[it->second].indices.push_back(e.feature);
    codes[it->second].values.push_back(e.value);
  }
  return codes;
}

InterpretResult interpret(const sae::ActivationTable& table, const sae::SaeParams& sae,
                          const LinearHead& head,
                          const std::vector<featurize::HourlyFeature>& features,
                          const std::vector<ingest::HourlyTraffic>& traffic,
                          const ingest::Dictionary& dict, const InterpretConfig& cfg) {
  InterpretResult out;
  out.corpus = corpus_features(table, features);
  const std::set<std::string> participants(table.users.begin(), table.users.end());
  out.active = table.active_features();
  out.retained = generality_filter(table, participants.size(), cfg.generality);

  std::map<std::pair<std::string, std::int64_t>, const ingest::HourlyTraffic*> traffic_index;
  for (const auto& h : traffic) traffic_index[{h.user_id, h.hour.index}] = &h;
  const auto reference = reference_codes(table, cfg.reference_codes, cfg.seed);

  std::vector<FeatureLabel> labels;
  for (int f : out.retained) {
    FeatureReport rep;
    const auto top = top_rows(table, f, cfg.top_n_label);
    rep.label = label_feature(f, top, out.corpus, cfg.thresholds);
    std::set<std::string> users;
    for (const auto& [row, v] : top_rows(table, f, cfg.generality.top_n)) users.insert(table.users[row]);
    rep.distinct_users_top50 = users.size();
    std::vector<std::size_t> rows;
    for (const auto& [row, v] : top) rows.push_back(row);
    rep.composition = foreground_composition(rows, table, traffic_index, dict);
    rep.perturbation = perturbation_test(rep.label, activation_sigma(table, f), reference, sae, head,
                                         cfg.perturbation_multiplier);
    labels.push_back(rep.label);
    out.reports.push_back(std::move(rep));
  }
  out.sweep = label_threshold_sweep(labels, out.corpus, cfg.thresholds);
  return out;
}

namespace {

std::string top_apps(const Composition& c, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < std::min(n, c.app_shares.size()); ++i) {
    if (!s.empty()) s += ";";
    s += c.app_shares[i].first + ":" + csv::format_double(c.app_shares[i].second);
  }
  return s;
}

}  // namespace

void write_reports_csv(std::ostream& out, const std::vector<FeatureReport>& reports) {
  csv::Writer w(out);
  std::vector<std::string> header{"feature_id", "top_count", "distinct_users_top50", "band"};
  for (std::size_t c : kLabeledCategories) header.push_back(std::string(kModelCategories[c]) + "_label");
  for (std::size_t c = 0; c < kNumModelCategories; ++c) {
    header.push_back(std::string(kModelCategories[c]) + "_top_mean");
  }
  for (const char* h : {"foreground_fraction", "top_apps", "perturbation_sigma",
                        "perturbation_inconclusive", "perturbation_pass", "few_activations"}) {
    header.push_back(h);
  }
  w.row(header);
  for (const auto& r : reports) {
    std::vector<std::string> row{std::to_string(r.label.feature), std::to_string(r.label.top_count),
                                 std::to_string(r.distinct_users_top50),
                                 std::string(kBandNames[static_cast<std::size_t>(r.label.band)])};
    for (std::size_t c : kLabeledCategories) row.emplace_back(label_name(r.label.labels[c]));
    for (double m : r.label.top_mean) row.push_back(csv::format_double(m));
    row.push_back(csv::format_double(r.composition.foreground_fraction));
    row.push_back(top_apps(r.composition, 5));
    row.push_back(csv::format_double(r.perturbation.sigma));
    row.push_back(r.perturbation.inconclusive ? "1" : "0");
    row.push_back(r.perturbation.pass ? "1" : "0");
    row.push_back(r.label.few_activations ? "1" : "0");
    w.row(row);
  }
}

void write_reports_text(std::ostream& out, const std::vector<FeatureReport>& reports) {
  for (const auto& r : reports) {
    out << "feature " << r.label.feature << "  band=" << kBandNames[static_cast<std::size_t>(r.label.band)]
        << "  users(top50)=" << r.distinct_users_top50 << "  top=" << r.label.top_count << "\n";
    out << "  labels:";
    for (std::size_t c : kLabeledCategories) {
      out << " " << kModelCategories[c] << "=" << label_name(r.label.labels[c]);
    }
    out << "\n  foreground " << csv::format_double(100.0 * r.composition.foreground_fraction) << "%";
    if (!r.composition.app_shares.empty()) out << " (" << top_apps(r.composition, 3) << ")";
    out << "\n  perturbation: ";
    if (r.perturbation.inconclusive) {
      out << "inconclusive (sigma 0)";
    } else {
      out << (r.perturbation.pass ? "pass" : "fail");
    }
    out << "\n";
  }
}

void write_sweep(std::ostream& out, const std::vector<SweepRow>& sweep) {
  csv::Writer w(out);
  w.row({"hi", "lo", "unchanged", "changed", "total", "fraction_unchanged", "high_low_flips"});
  for (const auto& s : sweep) {
    w.row({csv::format_double(s.hi), csv::format_double(s.lo), std::to_string(s.unchanged),
           std::to_string(s.changed), std::to_string(s.total),
           csv::format_double(s.fraction_unchanged()), std::to_string(s.high_low_flips)});
  }
}

}  // namespace flowsense::interpret
