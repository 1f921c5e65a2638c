#include "flowsense/sae.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <set>

#include "flowsense/csv.hpp"
#include "flowsense/timeutil.hpp"

namespace flowsense::sae {

void SaeConfig::validate() const {
  std::string errors;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors += (errors.empty() ? "" : "; ") + msg;
  };
  check(dict_size > 0, "dict_size must be positive");
  check(k > 0 && k <= dict_size, "k must be in [1, dict_size]");
  check(lr > 0 && std::isfinite(lr), "lr must be positive");
  check(batch_size > 0, "batch_size must be positive");
  check(epochs > 0, "epochs must be positive");
  check(held_out_users >= 0, "held_out_users must be non-negative");
  if (!errors.empty()) throw ConfigError("invalid SAE config: " + errors);
}

nlohmann::json SaeConfig::to_json() const {
  return {{"dict_size", dict_size}, {"k", k},           {"lr", lr},
          {"batch_size", batch_size}, {"epochs", epochs}, {"held_out_users", held_out_users},
          {"seed", seed}};
}

SaeConfig SaeConfig::from_json(const nlohmann::json& j) {
  SaeConfig c;
  c.dict_size = j.value("dict_size", c.dict_size);
  c.k = j.value("k", c.k);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.held_out_users = j.value("held_out_users", c.held_out_users);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

SaeParams SaeParams::init(int dim, int dict_size, int k, const Eigen::VectorXd& mean, Rng& rng) {
  if (mean.size() != dim) throw ConfigError("SAE init: mean has the wrong dimension");
  SaeParams p;
  p.k = k;
  p.w_dec.resize(dim, dict_size);
  for (int j = 0; j < dict_size; ++j) {
    for (int i = 0; i < dim; ++i) p.w_dec(i, j) = rng.normal();
  }
  p.normalize_decoder();
  p.w_enc = p.w_dec.transpose();
  p.b_pre = mean;
  p.b_post = mean;
  return p;
}

double SaeParams::max_norm_deviation() const {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < w_dec.cols(); ++j) {
    worst = std::max(worst, std::abs(w_dec.col(j).norm() - 1.0));
  }
  return worst;
}

void SaeParams::normalize_decoder() {
  for (Eigen::Index j = 0; j < w_dec.cols(); ++j) {
    const double n = w_dec.col(j).norm();
    if (n > 0) w_dec.col(j) /= n;
  }
}

void SaeParams::round_to_float() {
  auto round = [](auto& m) { m = m.template cast<float>().template cast<double>(); };
  round(w_enc);
  round(w_dec);
  round(b_pre);
  round(b_post);
}

Eigen::VectorXd pre_activations(const SaeParams& p, const Eigen::VectorXd& x) {
  return p.w_enc * (x - p.b_pre);
}

SparseCode top_k(const Eigen::VectorXd& pre, int k) {
  std::vector<int> positive;
  for (Eigen::Index j = 0; j < pre.size(); ++j) {
    if (pre(j) > 0.0) positive.push_back(static_cast<int>(j));
  }
  auto larger = [&](int a, int b) { return pre(a) > pre(b) || (pre(a) == pre(b) && a < b); };
  if (positive.size() > static_cast<std::size_t>(k)) {
    std::nth_element(positive.begin(), positive.begin() + (k - 1), positive.end(), larger);
    positive.resize(k);
  }
  std::sort(positive.begin(), positive.end());
  SparseCode z;
  z.indices = positive;
  for (int j : positive) z.values.push_back(pre(j));
  return z;
}

SparseCode encode(const SaeParams& p, const Eigen::VectorXd& x) {
  return top_k(pre_activations(p, x), p.k);
}

Eigen::VectorXd decode(const SaeParams& p, const SparseCode& z) {
  Eigen::VectorXd out = p.b_post;
  for (std::size_t i = 0; i < z.nnz(); ++i) out += z.values[i] * p.w_dec.col(z.indices[i]);
  return out;
}

double reconstruction_mse(const SaeParams& p, const Eigen::MatrixXd& x,
                          const std::vector<std::size_t>& rows) {
  double sse = 0.0;
  std::size_t n = 0;
  auto add = [&](Eigen::Index r) {
    const Eigen::VectorXd xr = x.row(r).transpose();
    sse += (decode(p, encode(p, xr)) - xr).squaredNorm();
    ++n;
  };
  if (rows.empty()) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) add(r);
  } else {
    for (auto r : rows) add(static_cast<Eigen::Index>(r));
  }
  return n == 0 ? 0.0 : sse / static_cast<double>(n * x.cols());
}

std::vector<std::string> choose_held_out(const std::vector<std::string>& users, int count,
                                         std::uint64_t seed) {
  std::set<std::string> distinct(users.begin(), users.end());
  std::vector<std::string> order(distinct.begin(), distinct.end());
  Rng rng = Rng::derive(seed, "sae-held-out");
  rng.shuffle(order);
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(count)));
  std::sort(order.begin(), order.end());
  return order;
}

TrainResult train(const Corpus& corpus, const SaeConfig& cfg,
                  const std::function<void(const SaeParams&)>& on_step) {
  cfg.validate();
  const std::set<std::string> distinct(corpus.users.begin(), corpus.users.end());
  if (distinct.size() < static_cast<std::size_t>(cfg.held_out_users) + 1) {
    throw ConfigError("SAE training needs at least " + std::to_string(cfg.held_out_users + 1) +
                      " users, got " + std::to_string(distinct.size()));
  }
  TrainResult result;
  result.held_out = choose_held_out(corpus.users, cfg.held_out_users, cfg.seed);
  const std::set<std::string> held(result.held_out.begin(), result.held_out.end());
  std::vector<std::size_t> train_rows, val_rows;
  for (std::size_t r = 0; r < corpus.size(); ++r) {
    (held.contains(corpus.users[r]) ? val_rows : train_rows).push_back(r);
  }
  if (train_rows.empty()) throw ConfigError("SAE training set is empty");
  if (val_rows.empty()) val_rows = train_rows;

  const int d = static_cast<int>(corpus.x.cols());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (auto r : train_rows) mean += corpus.x.row(r).transpose();
  mean /= static_cast<double>(train_rows.size());
  Rng init_rng = Rng::derive(cfg.seed, "sae-init");
  SaeParams p = SaeParams::init(d, cfg.dict_size, cfg.k, mean, init_rng);

  Adam<double> adam_enc(p.w_enc.size()), adam_dec(p.w_dec.size()), adam_pre(d), adam_post(d);
  Eigen::MatrixXd g_enc(p.w_enc.rows(), p.w_enc.cols()), g_dec(p.w_dec.rows(), p.w_dec.cols());
  Eigen::VectorXd g_pre(d), g_post(d);

  Rng rng = Rng::derive(cfg.seed, "sae-batches");
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order = train_rows;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / cfg.epochs));
    rng.shuffle(order);
    double train_sse = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto b = static_cast<Eigen::Index>(end - start);
      Eigen::MatrixXd xc(d, b);
      for (Eigen::Index i = 0; i < b; ++i) xc.col(i) = corpus.x.row(order[start + i]).transpose() - p.b_pre;
      const Eigen::MatrixXd pre = p.w_enc * xc;
      g_enc.setZero();
      g_dec.setZero();
      g_pre.setZero();
      g_post.setZero();
      const double scale = 2.0 / static_cast<double>(b * d);
      for (Eigen::Index i = 0; i < b; ++i) {
        const SparseCode z = top_k(pre.col(i), p.k);
        const Eigen::VectorXd x = corpus.x.row(order[start + i]).transpose();
        Eigen::VectorXd err = p.b_post - x;
        for (std::size_t a = 0; a < z.nnz(); ++a) err += z.values[a] * p.w_dec.col(z.indices[a]);
        train_sse += err.squaredNorm();
        const Eigen::VectorXd d_xhat = scale * err;
        g_post += d_xhat;
        for (std::size_t a = 0; a < z.nnz(); ++a) {
          const int j = z.indices[a];
          g_dec.col(j) += z.values[a] * d_xhat;
          const double dz = p.w_dec.col(j).dot(d_xhat);
          g_enc.row(j) += dz * xc.col(i).transpose();
          g_pre -= dz * p.w_enc.row(j).transpose();
        }
      }
      adam_enc.step(p.w_enc.data(), g_enc.data(), p.w_enc.size(), lr);
      adam_dec.step(p.w_dec.data(), g_dec.data(), p.w_dec.size(), lr);
      adam_pre.step(p.b_pre.data(), g_pre.data(), d, lr);
      adam_post.step(p.b_post.data(), g_post.data(), d, lr);
      p.normalize_decoder();
      ++result.steps;
      result.max_norm_deviation = std::max(result.max_norm_deviation, p.max_norm_deviation());
      if (on_step) on_step(p);
    }
    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.lr = lr;
    stats.train_mse = train_sse / static_cast<double>(order.size() * d);
    stats.val_mse = reconstruction_mse(p, corpus.x, val_rows);
    if (!std::isfinite(stats.train_mse) || !std::isfinite(stats.val_mse)) {
      throw RuntimeError("SAE training diverged at epoch " + std::to_string(stats.epoch));
    }
    result.history.push_back(stats);
    if (stats.val_mse < best_val) {
      best_val = stats.val_mse;
      result.best_epoch = stats.epoch;
      result.params = p;
    }
  }
  result.params.round_to_float();
  return result;
}

std::vector<int> ActivationTable::active_features() const {
  std::vector<int> out;
  for (int j = 0; j < dict_size; ++j) {
    if (active_count[j] > 0) out.push_back(j);
  }
  return out;
}

ActivationTable activation_matrix(const Corpus& corpus, const SaeParams& p) {
  ActivationTable t;
  t.users = corpus.users;
  t.hours = corpus.hours;
  t.dict_size = p.dict_size();
  t.active_count.assign(t.dict_size, 0);
  for (std::size_t r = 0; r < corpus.size(); ++r) {
    const SparseCode z = encode(p, corpus.x.row(r).transpose());
    for (std::size_t a = 0; a < z.nnz(); ++a) {
      t.entries.push_back({r, z.indices[a], z.values[a]});
      ++t.active_count[z.indices[a]];
    }
  }
  return t;
}

void write_activations(std::ostream& out, const ActivationTable& table) {
  csv::Writer w(out);
  w.row({"user_id", "local_hour", "feature_id", "value"});
  // Hours without any active feature still appear once, with feature_id -1, so the
  // table keeps the full corpus row set.
  std::size_t e = 0;
  for (std::size_t r = 0; r < table.users.size(); ++r) {
    const std::string hour = timeutil::format_hour(table.hours[r]);
    if (e >= table.entries.size() || table.entries[e].row != r) {
      w.row({table.users[r], hour, "-1", "0"});
      continue;
    }
    for (; e < table.entries.size() && table.entries[e].row == r; ++e) {
      w.row({table.users[r], hour, std::to_string(table.entries[e].feature),
             csv::format_double(table.entries[e].value)});
    }
  }
}

ActivationTable read_activations(std::istream& in, int dict_size) {
  const auto table = csv::Table::read(in);
  const auto cols = table.require_columns({"user_id", "local_hour", "feature_id", "value"});
  ActivationTable t;
  t.dict_size = dict_size;
  t.active_count.assign(dict_size, 0);
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& row = table.row(i);
    const auto line = std::to_string(table.line_number(i));
    const auto hour = timeutil::parse_hour(row[cols[1]]);
    const auto feature = csv::parse_int(row[cols[2]]);
    const auto value = csv::parse_double(row[cols[3]]);
    if (!hour || !feature || !value || *feature < -1 || *feature >= dict_size) {
      throw ConfigError("bad activation row at line " + line);
    }
    if (t.users.empty() || t.users.back() != row[cols[0]] || t.hours.back() != *hour) {
      t.users.push_back(row[cols[0]]);
      t.hours.push_back(*hour);
    }
    if (*feature >= 0) {
      t.entries.push_back({t.users.size() - 1, static_cast<int>(*feature), *value});
      ++t.active_count[*feature];
    }
  }
  return t;
}

void write_history(std::ostream& out, const std::vector<EpochStats>& history) {
  csv::Writer w(out);
  w.row({"epoch", "lr", "train_mse", "val_mse"});
  for (const auto& h : history) {
    w.row({std::to_string(h.epoch), csv::format_double(h.lr), csv::format_double(h.train_mse),
           csv::format_double(h.val_mse)});
  }
}

void save(const std::string& path, const SaeParams& p, const SaeConfig& cfg,
          const std::vector<std::string>& held_out) {
  checkpoint::Container c;
  c.kind = "sae";
  c.seed = cfg.seed;
  c.config = {{"sae", cfg.to_json()}, {"dim", p.dim()}, {"held_out", held_out}};
  c.tensors.mat(c.tensors.add("sae.w_enc", p.dict_size(), p.dim())) = p.w_enc.cast<float>();
  c.tensors.mat(c.tensors.add("sae.w_dec", p.dim(), p.dict_size())) = p.w_dec.cast<float>();
  c.tensors.mat(c.tensors.add("sae.b_pre", 1, p.dim())) = p.b_pre.transpose().cast<float>();
  c.tensors.mat(c.tensors.add("sae.b_post", 1, p.dim())) = p.b_post.transpose().cast<float>();
  checkpoint::write_file(path, c);
}

SaeParams load(const std::string& path) {
  const auto c = checkpoint::read_file(path);
  if (c.kind != "sae") throw ConfigError(path + " is not an SAE checkpoint");
  const auto cfg = SaeConfig::from_json(c.config.at("sae"));
  const int dim = c.config.at("dim").get<int>();
  ParamStore<double> store;
  store.add("sae.w_enc", cfg.dict_size, dim);
  store.add("sae.w_dec", dim, cfg.dict_size);
  store.add("sae.b_pre", 1, dim);
  store.add("sae.b_post", 1, dim);
  checkpoint::load_into(c.tensors, store);
  SaeParams p;
  p.k = cfg.k;
  p.w_enc = store.mat(0);
  p.w_dec = store.mat(1);
  p.b_pre = store.mat(2).row(0).transpose();
  p.b_post = store.mat(3).row(0).transpose();
  return p;
}

}  // namespace flowsense::sae
