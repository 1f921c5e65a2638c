#include <algorithm>

#include "doctest.h"

#include "flowsense/interpret.hpp"
#include "flowsense/rng.hpp"

using namespace flowsense;
using namespace flowsense::interpret;

namespace {

// Row r belongs to users[r]; hour-of-day r % 24.
sae::ActivationTable table_of(const std::vector<std::string>& users,
                              const std::vector<sae::Activation>& entries, int dict) {
  sae::ActivationTable t;
  t.users = users;
  for (std::size_t r = 0; r < users.size(); ++r) t.hours.push_back(LocalHour{static_cast<std::int64_t>(r)});
  t.entries = entries;
  std::sort(t.entries.begin(), t.entries.end(),
            [](const auto& a, const auto& b) { return std::tie(a.row, a.feature) < std::tie(b.row, b.feature); });
  t.dict_size = dict;
  t.active_count.assign(dict, 0);
  for (const auto& e : t.entries) ++t.active_count[e.feature];
  return t;
}

CorpusFeatures uniform_corpus(std::size_t rows, std::array<double, kNumModelCategories> frac) {
  CorpusFeatures c;
  c.fractions.assign(rows, frac);
  for (std::size_t r = 0; r < rows; ++r) c.hour_of_day.push_back(static_cast<int>(r % 24));
  c.population_mean = frac;
  return c;
}

std::vector<std::pair<std::size_t, double>> rows_with_value(const std::vector<std::size_t>& rows) {
  std::vector<std::pair<std::size_t, double>> out;
  for (auto r : rows) out.push_back({r, 1.0});
  return out;
}

}  // namespace

TEST_CASE("band_of_hour") {
  const std::vector<std::pair<int, Band>> cases = {
      {23, Band::night},    {0, Band::night},      {4, Band::night},      {5, Band::morning},
      {9, Band::morning},   {10, Band::midday},    {13, Band::midday},    {14, Band::afternoon},
      {17, Band::afternoon}, {18, Band::evening},  {22, Band::evening}};
  for (const auto& [h, b] : cases) CHECK(band_of_hour(h) == b);
}

TEST_CASE("participant threshold and generality filter") {
  CHECK(participant_threshold(25, 0.40) == 10);
  CHECK(participant_threshold(10, 0.40) == 4);
  CHECK(participant_threshold(5, 0.40) == 2);

  // Three users, ten rows each. Feature 0 fires for user a only; feature 1 for everyone.
  std::vector<std::string> users;
  for (const char* u : {"a", "b", "c"}) users.insert(users.end(), 10, u);
  std::vector<sae::Activation> e;
  for (std::size_t r = 0; r < 30; ++r) {
    if (r < 10) e.push_back({r, 0, 1.0 + static_cast<double>(r)});
    e.push_back({r, 1, 0.5});
  }
  const auto t = table_of(users, e, 4);
  CHECK(generality_filter(t, 3) == std::vector<int>{1});

  GeneralityConfig loose{50, 0.30};
  CHECK(generality_filter(t, 3, loose) == std::vector<int>{0, 1});

  // top_rows orders by activation, ties to the lower row.
  const auto top = top_rows(t, 0, 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0].first == 9);
  CHECK(top[2].first == 7);
  CHECK(top_rows(t, 1, 2)[0].first == 0);
}

TEST_CASE("generality filter is monotone in the participant fraction") {
  Rng rng(12);
  std::vector<std::string> users;
  for (int u = 0; u < 12; ++u) users.insert(users.end(), 30, "u" + std::to_string(u));
  std::vector<sae::Activation> e;
  for (std::size_t r = 0; r < users.size(); ++r) {
    for (int f = 0; f < 20; ++f) {
      if (rng.bernoulli(0.05 + 0.04 * f * (r % 3 == 0))) e.push_back({r, f, rng.uniform(0.1, 2.0)});
    }
  }
  const auto t = table_of(users, e, 20);
  std::vector<int> prev = generality_filter(t, 12, {50, 1.0});
  for (double frac : {0.9, 0.7, 0.5, 0.4, 0.3, 0.1}) {
    const auto cur = generality_filter(t, 12, {50, frac});
    CHECK(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
    prev = cur;
  }
}

TEST_CASE("label_category and label_feature") {
  const Thresholds t;
  CHECK(label_category(1.0, 0.2, t) == Label::high);
  CHECK(label_category(0.2, 0.2, t) == Label::neutral);
  CHECK(label_category(0.1, 0.2, t) == Label::low);

  auto corpus = uniform_corpus(48, {0.2, 0.2, 0.2, 0.2, 0.2});
  for (std::size_t r = 0; r < 48; ++r) {
    if (r % 24 >= 10 && r % 24 <= 13) corpus.fractions[r] = {1.0, 0.0, 0.0, 0.0, 0.0};
  }
  const auto l = label_feature(3, rows_with_value({10, 11, 12, 13, 34, 35, 36, 37}), corpus);
  CHECK(l.feature == 3);
  CHECK(l.top_count == 8);
  CHECK(l.few_activations);
  CHECK(l.labels[0] == Label::high);
  CHECK(l.labels[1] == Label::low);
  CHECK(l.labels[kSystemCategory] == Label::neutral);
  CHECK(l.band == Band::midday);

  // A category that never occurs in the population stays neutral and is flagged.
  auto zero = uniform_corpus(24, {0.5, 0.0, 0.5, 0.0, 0.0});
  const auto z = label_feature(0, rows_with_value({1, 2, 3}), zero);
  CHECK(z.labels[1] == Label::neutral);
  CHECK(z.zero_population[1]);
  CHECK_FALSE(z.zero_population[0]);

  // Pure function of the inputs.
  const auto again = label_feature(3, rows_with_value({10, 11, 12, 13, 34, 35, 36, 37}), corpus);
  CHECK(again.labels == l.labels);
  CHECK(again.top_mean == l.top_mean);
}

TEST_CASE("threshold sweep partitions cells and never flips high to low") {
  CHECK(kSweepHi.size() * kSweepLo.size() == 35);
  Rng rng(30);
  for (int trial = 0; trial < 20; ++trial) {
    CorpusFeatures corpus;
    for (std::size_t r = 0; r < 300; ++r) {
      std::array<double, kNumModelCategories> f{};
      double s = 0.0;
      for (auto& x : f) s += (x = rng.uniform(0.01, 1.0));
      for (auto& x : f) x /= s;
      corpus.fractions.push_back(f);
      corpus.hour_of_day.push_back(static_cast<int>(r % 24));
    }
    for (std::size_t c = 0; c < kNumModelCategories; ++c) {
      double s = 0.0;
      for (const auto& f : corpus.fractions) s += f[c];
      corpus.population_mean[c] = s / 300.0;
    }
    std::vector<FeatureLabel> labels;
    for (int feat = 0; feat < 30; ++feat) {
      std::vector<std::size_t> rows;
      for (int i = 0; i < 10; ++i) rows.push_back(rng.below(300));
      std::sort(rows.begin(), rows.end());
      rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
      labels.push_back(label_feature(feat, rows_with_value(rows), corpus));
    }
    const auto sweep = label_threshold_sweep(labels, corpus);
    CHECK(sweep.size() == 35);
    for (const auto& row : sweep) {
      CHECK(row.changed + row.unchanged == row.total);
      CHECK(row.total == labels.size() * kLabeledCategories.size());
      CHECK(row.high_low_flips == 0);
      if (row.hi == 1.5 && row.lo == 0.70) CHECK(row.unchanged == row.total);
    }
  }
}

TEST_CASE("foreground composition") {
  const auto dict = ingest::Dictionary({{"a.com", "app_a"}, {"b.com", "app_b"}, {"os.com", "os"}},
                                       {{"app_a", "communication"}, {"app_b", "streaming"}, {"os", "system"}});
  const auto t = table_of({"u", "u", "u"}, {{0, 0, 1.0}, {1, 0, 1.0}, {2, 0, 1.0}}, 1);

  ingest::HourlyTraffic h0;
  h0.user_id = "u";
  h0.hour = LocalHour{0};
  h0.app_bytes = {{"app_a", 300}, {"app_b", 100}};
  h0.total_bytes = 400;
  ingest::HourlyTraffic h1 = h0;
  h1.hour = LocalHour{1};
  h1.app_bytes = {{"os", 50}};
  h1.total_bytes = 1000;
  h1.unmapped_bytes = 950;

  std::map<std::pair<std::string, std::int64_t>, const ingest::HourlyTraffic*> traffic = {
      {{"u", 0}, &h0}, {{"u", 1}, &h1}};

  auto c = foreground_composition({0}, t, traffic, dict);
  REQUIRE(c.app_shares.size() == 2);
  CHECK(c.app_shares[0].first == "app_a");
  CHECK(c.app_shares[0].second == doctest::Approx(0.75));
  CHECK(c.app_shares[1].second == doctest::Approx(0.25));
  CHECK(c.foreground_fraction == doctest::Approx(1.0));

  c = foreground_composition({1}, t, traffic, dict);
  CHECK(c.foreground_fraction == 0.0);
  CHECK(c.app_shares.empty());

  c = foreground_composition({0, 1}, t, traffic, dict);
  CHECK(c.foreground_fraction == doctest::Approx(400.0 / 1400.0));

  // Row 2 has no traffic at all.
  c = foreground_composition({2}, t, traffic, dict);
  CHECK(c.total_bytes == 0);
  CHECK(c.foreground_fraction == 0.0);
}

TEST_CASE("perturbation test on a constructed linear fixture") {
  // Latent dim 4, dictionary 3. Feature 0 decodes to latent axis 0, which the head maps to the
  // communication output; feature 1 decodes to axis 1, mapped negatively to streaming.
  sae::SaeParams p;
  p.w_dec = Eigen::MatrixXd::Zero(4, 3);
  p.w_dec(0, 0) = 1.0;
  p.w_dec(1, 1) = 1.0;
  p.w_dec(2, 2) = 1.0;
  p.w_enc = p.w_dec.transpose();
  p.b_pre = Eigen::VectorXd::Zero(4);
  p.b_post = Eigen::VectorXd::Constant(4, 0.1);
  p.k = 2;
  LinearHead head{Eigen::MatrixXd::Zero(4, kFeatureDim), Eigen::VectorXd::Zero(kFeatureDim)};
  head.weight(0, 0) = 2.0;
  head.weight(1, 2) = -1.0;

  const std::vector<sae::SparseCode> ref = {{{}, {}}, {{2}, {0.4}}, {{0, 2}, {1.0, 0.3}}};

  FeatureLabel comm;
  comm.feature = 0;
  comm.labels.fill(Label::neutral);
  comm.labels[0] = Label::high;
  auto r = perturbation_test(comm, 0.5, ref, p, head, 5.0);
  CHECK(r.pass);
  CHECK(r.mean_change[0] == doctest::Approx(2.0 * 2.5));
  CHECK(r.mean_change[1] == doctest::Approx(0.0));

  const auto doubled = perturbation_test(comm, 0.5, ref, p, head, 10.0);
  CHECK(doubled.mean_change[0] == doctest::Approx(2.0 * r.mean_change[0]));

  const auto zero = perturbation_test(comm, 0.5, ref, p, head, 0.0);
  for (double d : zero.mean_change) CHECK(d == doctest::Approx(0.0));

  // A high label contradicted by the decoder direction fails.
  FeatureLabel wrong = comm;
  wrong.feature = 1;
  wrong.labels.fill(Label::neutral);
  wrong.labels[2] = Label::high;
  CHECK_FALSE(perturbation_test(wrong, 0.5, ref, p, head).pass);
  wrong.labels[2] = Label::low;
  CHECK(perturbation_test(wrong, 0.5, ref, p, head).pass);

  const auto flat = perturbation_test(comm, 0.0, ref, p, head);
  CHECK(flat.inconclusive);
  CHECK_FALSE(flat.pass);
}

TEST_CASE("activation sigma is the population std including zeros") {
  const auto t = table_of({"u", "u", "u", "u"}, {{0, 0, 2.0}, {1, 0, 4.0}}, 2);
  // Values 2, 4, 0, 0: mean 1.5, variance (0.25 + 6.25 + 2.25 + 2.25) / 4 = 2.75.
  CHECK(activation_sigma(t, 0) == doctest::Approx(std::sqrt(2.75)));
  CHECK(activation_sigma(t, 1) == 0.0);

  const auto a = reference_codes(t, 3, 7), b = reference_codes(t, 3, 7);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].indices == b[i].indices);
}
