#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"

#include "flowsense/sae.hpp"
#include "oracles.hpp"

using namespace flowsense;
using namespace flowsense::sae;

namespace {

SaeParams random_params(int dim, int dict, int k, std::uint64_t seed) {
  Rng rng(seed);
  return SaeParams::init(dim, dict, k, Eigen::VectorXd::Zero(dim), rng);
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

// Latents in a 5-dimensional subspace of R^dim, spread over `users` users.
Corpus subspace_corpus(int users, int per_user, int dim, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd basis(5, dim);
  for (int i = 0; i < basis.size(); ++i) basis.data()[i] = rng.normal();
  Corpus c;
  c.x.resize(users * per_user, dim);
  for (int u = 0; u < users; ++u) {
    for (int h = 0; h < per_user; ++h) {
      Eigen::RowVectorXd coef(5);
      for (int j = 0; j < 5; ++j) coef[j] = rng.normal();
      c.x.row(u * per_user + h) = coef * basis;
      c.users.push_back("u" + std::to_string(u));
      c.hours.push_back(LocalHour{h});
    }
  }
  return c;
}

double corpus_variance(const Eigen::MatrixXd& x) {
  const Eigen::RowVectorXd mean = x.colwise().mean();
  return (x.rowwise() - mean).array().square().mean();
}

}  // namespace

TEST_CASE("top_k keeps the largest positives") {
  Eigen::VectorXd pre = -Eigen::VectorXd::Ones(20);
  CHECK(top_k(pre, 4).nnz() == 0);

  pre << 0, 3, -1, 2, 0, 0, 1, 0, 0, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0;
  const auto z = top_k(pre, 4);
  CHECK(z.indices == std::vector<int>{1, 3, 6, 9});
  CHECK(z.values == std::vector<double>{3, 2, 1, 4});

  pre.setZero();
  pre[2] = pre[5] = pre[7] = 1.0;
  CHECK(top_k(pre, 2).indices == std::vector<int>{2, 5});

  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd p(512);
    for (int i = 0; i < 512; ++i) p[i] = rng.bernoulli(0.1) ? 0.5 : rng.normal();
    const auto got = top_k(p, 16);
    CHECK(got.indices == oracle::top_k(to_std(p), 16));
    for (double v : got.values) CHECK(v > 0.0);
  }
}

TEST_CASE("top_k monotonicity: raising an included entry keeps it") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::VectorXd p(64);
    for (int i = 0; i < 64; ++i) p[i] = rng.normal();
    const auto z = top_k(p, 8);
    if (z.nnz() == 0) continue;
    const int j = z.indices[rng.below(z.nnz())];
    p[j] += rng.uniform(0.0, 3.0);
    const auto after = top_k(p, 8).indices;
    CHECK(std::find(after.begin(), after.end(), j) != after.end());
  }
}

TEST_CASE("encode and decode") {
  const auto p = random_params(8, 32, 4, 1);
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd x(8);
    for (int i = 0; i < 8; ++i) x[i] = rng.normal();
    const auto z = encode(p, x);
    CHECK(z.nnz() <= 4);
    const Eigen::VectorXd pre = p.w_enc * (x - p.b_pre);
    CHECK(z.indices == oracle::top_k(to_std(pre), 4));
    const auto positives = (pre.array() > 0).count();
    if (positives >= 4) CHECK(z.nnz() == 4);
  }

  SparseCode empty;
  CHECK(decode(p, empty).isApprox(p.b_post));
  SparseCode one{{5}, {2.5}};
  const Eigen::VectorXd want = 2.5 * p.w_dec.col(5) + p.b_post;
  CHECK((decode(p, one) - want).norm() < 1e-12);

  // With k at least the number of positives, the code is the ReLU output.
  const auto wide = random_params(8, 32, 32, 3);
  Eigen::VectorXd x = Eigen::VectorXd::Ones(8);
  const auto z = encode(wide, x);
  const Eigen::VectorXd pre = wide.w_enc * (x - wide.b_pre);
  CHECK(static_cast<long>(z.nnz()) == (pre.array() > 0).count());
}

TEST_CASE("init has unit decoder columns and tied encoder") {
  const auto p = random_params(16, 64, 8, 9);
  CHECK(p.max_norm_deviation() < 1e-12);
  CHECK((p.w_enc - p.w_dec.transpose()).norm() == 0.0);
}

TEST_CASE("train rejects a corpus with too few users") {
  SaeConfig cfg;
  cfg.held_out_users = 5;
  const auto c = subspace_corpus(5, 10, 8, 1);
  CHECK_THROWS_AS(train(c, cfg), ConfigError);
}

TEST_CASE("training keeps decoder columns unit norm and recovers a 5-dim subspace") {
  const auto c = subspace_corpus(10, 200, 16, 11);
  SaeConfig cfg;
  cfg.dict_size = 64;
  cfg.k = 8;
  cfg.lr = 3e-3;
  cfg.batch_size = 128;
  cfg.epochs = 60;
  cfg.held_out_users = 2;
  cfg.seed = 5;
  double worst = 0.0;
  std::size_t steps = 0;
  const auto r = train(c, cfg, [&](const SaeParams& p) {
    worst = std::max(worst, p.max_norm_deviation());
    ++steps;
  });
  CHECK(steps == r.steps);
  CHECK(worst < 1e-6);
  CHECK(r.max_norm_deviation < 1e-6);
  CHECK(r.held_out.size() == 2);
  REQUIRE(r.history.size() == 60);

  double best_val = r.history[0].val_mse;
  for (const auto& e : r.history) best_val = std::min(best_val, e.val_mse);
  CHECK(r.history[r.best_epoch - 1].val_mse == best_val);
  CHECK(best_val <= r.history.back().val_mse);

  const double mse = reconstruction_mse(r.params, c.x);
  CHECK(mse < 0.05 * corpus_variance(c.x));
  CHECK(r.history.back().train_mse < r.history.front().train_mse);
}

TEST_CASE("training MSE does not rise over a short smoke run") {
  const auto c = subspace_corpus(8, 100, 8, 2);
  SaeConfig cfg;
  cfg.dict_size = 32;
  cfg.k = 4;
  cfg.batch_size = 800;  // full batch
  cfg.lr = 1e-3;
  cfg.epochs = 10;
  cfg.held_out_users = 1;
  const auto r = train(c, cfg);
  for (std::size_t e = 1; e < r.history.size(); ++e) {
    CHECK(r.history[e].train_mse <= r.history[e - 1].train_mse + 1e-6);
  }
}

TEST_CASE("held-out choice is seeded and disjoint from training") {
  const std::vector<std::string> users = {"e", "a", "d", "c", "b", "a", "f"};
  const auto h1 = choose_held_out(users, 3, 42), h2 = choose_held_out(users, 3, 42);
  CHECK(h1 == h2);
  CHECK(h1.size() == 3);
  CHECK(std::set<std::string>(h1.begin(), h1.end()).size() == 3);
}

TEST_CASE("activation table respects sparsity and round-trips") {
  const auto c = subspace_corpus(3, 40, 8, 3);
  const auto p = random_params(8, 32, 4, 7);
  const auto t = activation_matrix(c, p);
  std::map<std::size_t, int> per_row;
  for (const auto& e : t.entries) {
    ++per_row[e.row];
    CHECK(e.value > 0.0);
  }
  for (const auto& [row, n] : per_row) CHECK(n <= 4);
  for (int f = 0; f < 32; ++f) {
    std::size_t n = 0;
    for (const auto& e : t.entries) n += e.feature == f;
    CHECK(t.active_count[f] == n);
    const auto active = t.active_features();
    CHECK((std::find(active.begin(), active.end(), f) != active.end()) == (n > 0));
  }

  std::stringstream ss;
  write_activations(ss, t);
  const auto back = read_activations(ss, 32);
  CHECK(back.active_count == t.active_count);
  REQUIRE(back.entries.size() == t.entries.size());
  for (std::size_t i = 0; i < t.entries.size(); ++i) {
    CHECK(back.users[back.entries[i].row] == t.users[t.entries[i].row]);
    CHECK(back.hours[back.entries[i].row] == t.hours[t.entries[i].row]);
    CHECK(back.entries[i].feature == t.entries[i].feature);
    CHECK(back.entries[i].value == t.entries[i].value);
  }
}
