#include "flowsense/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <tuple>

#include "flowsense/csv.hpp"
#include "flowsense/parallel.hpp"
#include "flowsense/tensor.hpp"
#include "flowsense/timeutil.hpp"

namespace flowsense::train {

namespace {

// Batched Adam over one parameter store: losses and gradients are averaged per batch.
class BatchTrainer {
 public:
  BatchTrainer(ParamStore<float>& params, double lr)
      : params_(params), grads_(params.zeros_like()), adam_(params.size()), lr_(lr) {}

  ParamStore<float>& grads() { return grads_; }

  void step(std::size_t batch_count) {
    const float inv = 1.0f / static_cast<float>(batch_count);
    for (auto& g : grads_.data()) g *= inv;
    adam_.step(params_.data(), grads_.data(), lr_);
    grads_.set_zero();
  }

 private:
  ParamStore<float>& params_;
  ParamStore<float> grads_;
  Adam<float> adam_;
  double lr_;
};

void check_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw RuntimeError("non-finite loss during " + where);
}

std::vector<int> eval_positions(const TrainConfig& cfg, const std::string& user_id,
                                std::size_t window_index) {
  Rng rng = Rng::derive(cfg.seed, "eval:" + user_id + ":" + std::to_string(window_index));
  std::vector<int> pos(cfg.eval_masks_per_window);
  for (auto& p : pos) p = static_cast<int>(rng.below(kWindowHours));
  return pos;
}

}  // namespace

void TrainConfig::validate() const {
  std::string errors;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors += (errors.empty() ? "" : "; ") + msg;
  };
  check(lr > 0 && std::isfinite(lr), "lr must be positive");
  check(batch_size > 0, "batch_size must be positive");
  check(phase1_epochs > 0, "phase1_epochs must be positive");
  check(phase2_epochs > 0, "phase2_epochs must be positive");
  check(train_frac > 0 && train_frac <= 1, "train_frac must be in (0, 1]");
  check(eval_masks_per_window > 0, "eval_masks_per_window must be positive");
  if (!errors.empty()) throw ConfigError("invalid training config: " + errors);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"batch_size", batch_size},
          {"phase1_epochs", phase1_epochs},
          {"phase2_epochs", phase2_epochs},
          {"seed", seed},
          {"train_frac", train_frac},
          {"eval_masks_per_window", eval_masks_per_window}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.phase1_epochs = j.value("phase1_epochs", c.phase1_epochs);
  c.phase2_epochs = j.value("phase2_epochs", c.phase2_epochs);
  c.seed = j.value("seed", c.seed);
  c.train_frac = j.value("train_frac", c.train_frac);
  c.eval_masks_per_window = j.value("eval_masks_per_window", c.eval_masks_per_window);
  c.validate();
  return c;
}

void write_training_log(std::ostream& out, const std::vector<EpochLog>& log) {
  csv::Writer w(out);
  w.row({"phase", "user_id", "epoch", "mean_loss"});
  for (const auto& e : log) {
    w.row({std::to_string(e.phase), e.user_id, std::to_string(e.epoch),
           csv::format_double(e.mean_loss)});
  }
}

template <typename T>
Mat<T> window_matrix(const featurize::Window& w) {
  Mat<T> m(static_cast<Eigen::Index>(w.rows.size()), static_cast<Eigen::Index>(kFeatureDim));
  for (std::size_t i = 0; i < w.rows.size(); ++i) {
    for (std::size_t j = 0; j < kFeatureDim; ++j) m(i, j) = static_cast<T>(w.rows[i][j]);
  }
  return m;
}
template Mat<float> window_matrix<float>(const featurize::Window&);
template Mat<double> window_matrix<double>(const featurize::Window&);

Backbone<float> train_phase1(const std::vector<featurize::Window>& windows, const ModelShape& shape,
                             const TrainConfig& cfg, std::vector<EpochLog>* log) {
  cfg.validate();
  if (windows.empty()) throw RuntimeError("phase 1 needs at least one training window");
  Backbone<float> model(shape);
  Rng init_rng = Rng::derive(cfg.seed, "backbone-init");
  model.init(init_rng);
  Rng rng = Rng::derive(cfg.seed, "phase1");

  std::vector<Mat<float>> inputs;
  inputs.reserve(windows.size());
  for (const auto& w : windows) inputs.push_back(window_matrix<float>(w));

  BatchTrainer trainer(model.params(), cfg.lr);
  Backbone<float>::Cache cache;
  std::vector<std::size_t> order(inputs.size());
  for (int epoch = 1; epoch <= cfg.phase1_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double total = 0.0;
    std::size_t in_batch = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const int mask_pos = static_cast<int>(rng.below(shape.seq_len));
      const float loss = backbone::masked_loss<float>(model, nullptr, inputs[order[i]], mask_pos,
                                                      cache, {&trainer.grads(), nullptr});
      check_finite(loss, "phase 1 epoch " + std::to_string(epoch));
      total += loss;
      if (++in_batch == static_cast<std::size_t>(cfg.batch_size) || i + 1 == order.size()) {
        trainer.step(in_batch);
        in_batch = 0;
      }
    }
    if (!model.params().all_finite()) {
      throw RuntimeError("phase 1 diverged: non-finite parameters after epoch " +
                         std::to_string(epoch));
    }
    if (log) log->push_back({1, "", epoch, total / static_cast<double>(order.size())});
  }
  return model;
}

Adapter<float> train_adapter(const Backbone<float>& model, const std::string& user_id,
                             const std::vector<featurize::Window>& windows, const TrainConfig& cfg,
                             std::vector<EpochLog>* log) {
  if (windows.empty()) throw RuntimeError("user " + user_id + " has no training windows");
  const int seq_len = model.shape().seq_len;
  Adapter<float> adapter(model.shape().d_model);
  Rng init_rng = Rng::derive(cfg.seed, "adapter-init:" + user_id);
  adapter.init(init_rng);
  Rng rng = Rng::derive(cfg.seed, "phase2:" + user_id);

  std::vector<Mat<float>> inputs;
  for (const auto& w : windows) inputs.push_back(window_matrix<float>(w));
  BatchTrainer trainer(adapter.params(), cfg.lr);
  Backbone<float>::Cache cache;
  std::vector<std::size_t> order(inputs.size());
  for (int epoch = 1; epoch <= cfg.phase2_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double total = 0.0;
    std::size_t in_batch = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const int mask_pos = static_cast<int>(rng.below(seq_len));
      const float loss = backbone::masked_loss<float>(model, &adapter, inputs[order[i]], mask_pos,
                                                      cache, {nullptr, &trainer.grads()});
      check_finite(loss, "phase 2 for user " + user_id);
      total += loss;
      if (++in_batch == static_cast<std::size_t>(cfg.batch_size) || i + 1 == order.size()) {
        trainer.step(in_batch);
        in_batch = 0;
      }
    }
    if (log) log->push_back({2, user_id, epoch, total / static_cast<double>(order.size())});
  }
  return adapter;
}

Phase2Result train_phase2(const Backbone<float>& model, const featurize::SplitPlan& plan,
                          const TrainConfig& cfg, int threads) {
  cfg.validate();
  const auto before = model.params().data();
  Phase2Result result;
  std::vector<std::string> users;
  for (const auto& [user, split] : plan) {
    if (split.train.empty()) {
      result.skipped_users.push_back(user);
    } else {
      users.push_back(user);
    }
  }
  std::vector<std::optional<Adapter<float>>> trained(users.size());
  std::vector<std::vector<EpochLog>> logs(users.size());
  parallel_for(users.size(), threads, [&](std::size_t i) {
    trained[i] = train_adapter(model, users[i], plan.at(users[i]).train, cfg, &logs[i]);
  });
  const auto& after = model.params().data();
  if (after.size() != before.size() ||
      std::memcmp(after.data(), before.data(), before.size() * sizeof(float)) != 0) {
    throw RuntimeError("phase 2 modified the frozen backbone");
  }
  for (std::size_t i = 0; i < users.size(); ++i) {
    result.adapters.emplace(users[i], std::move(*trained[i]));
    result.log.insert(result.log.end(), logs[i].begin(), logs[i].end());
  }
  return result;
}

std::vector<TestLoss> compare_test_loss(const Backbone<float>& model,
                                        const std::map<std::string, Adapter<float>>& adapters,
                                        const featurize::SplitPlan& plan, const TrainConfig& cfg) {
  std::vector<TestLoss> out;
  Backbone<float>::Cache cache;
  for (const auto& [user, split] : plan) {
    auto it = adapters.find(user);
    if (it == adapters.end() || split.test.empty()) continue;
    TestLoss row{user, split.test.size(), 0.0, 0.0};
    std::size_t n = 0;
    for (std::size_t wi = 0; wi < split.test.size(); ++wi) {
      const Mat<float> x = window_matrix<float>(split.test[wi]);
      for (int pos : eval_positions(cfg, user, wi)) {
        model.forward(backbone::mask_input(x, pos), cache);
        const RowVec<float> h = cache.latents.row(pos);
        const RowVec<float> target = x.row(pos);
        const double plain = (model.head(h) - target).squaredNorm() / target.size();
        const double adapted = (model.head(it->second.apply(h)) - target).squaredNorm() / target.size();
        row.without_adapter += plain;
        row.with_adapter += adapted;
        ++n;
      }
    }
    row.without_adapter /= static_cast<double>(n);
    row.with_adapter /= static_cast<double>(n);
    out.push_back(row);
  }
  return out;
}

void write_test_loss(std::ostream& out, const std::vector<TestLoss>& rows) {
  csv::Writer w(out);
  w.row({"user_id", "test_windows", "loss_without_adapter", "loss_with_adapter"});
  for (const auto& r : rows) {
    w.row({r.user_id, std::to_string(r.windows), csv::format_double(r.without_adapter),
           csv::format_double(r.with_adapter)});
  }
}

GradCheckResult gradient_check(Backbone<double>& model, Adapter<double>* adapter,
                               const Mat<double>& window, int mask_pos, double step, double floor) {
  ParamStore<double> g_model = model.params().zeros_like();
  std::optional<ParamStore<double>> g_adapter;
  if (adapter) g_adapter = adapter->params().zeros_like();
  Backbone<double>::Cache cache;
  backbone::masked_loss<double>(model, adapter, window, mask_pos, cache,
                                {&g_model, g_adapter ? &*g_adapter : nullptr});

  GradCheckResult result;
  auto check_store = [&](ParamStore<double>& params, const ParamStore<double>& grads) {
    for (const auto& spec : params.specs()) {
      double worst = 0.0;
      for (std::size_t k = 0; k < spec.size(); ++k) {
        double& p = params.data()[spec.offset + k];
        const double saved = p;
        p = saved + step;
        const double up = backbone::masked_loss<double>(model, adapter, window, mask_pos);
        p = saved - step;
        const double down = backbone::masked_loss<double>(model, adapter, window, mask_pos);
        p = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double analytic = grads.data()[spec.offset + k];
        const double rel = std::abs(analytic - numeric) /
                           std::max(std::abs(analytic) + std::abs(numeric), floor);
        worst = std::max(worst, rel);
        ++result.checked;
      }
      result.per_tensor[spec.name] = worst;
      result.max_rel_error = std::max(result.max_rel_error, worst);
    }
  };
  check_store(model.params(), g_model);
  if (adapter) check_store(adapter->params(), *g_adapter);
  return result;
}

std::vector<HourLatent> extract_latents(const Backbone<float>& model,
                                        const std::vector<featurize::Window>& windows) {
  const int last = model.shape().seq_len - 1;
  // (user, hour) -> (priority, window start, window index, position). Lower tuple wins.
  using Key = std::pair<std::string, std::int64_t>;
  std::map<Key, std::tuple<int, std::int64_t, std::size_t, int>> choice;
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const auto& w = windows[wi];
    for (int pos = 0; pos <= last; ++pos) {
      const auto cand = std::make_tuple(pos == last ? 0 : 1, w.start.index, wi, pos);
      auto [it, inserted] = choice.try_emplace(Key{w.user_id, w.hour_at(pos).index}, cand);
      if (!inserted && cand < it->second) it->second = cand;
    }
  }
  std::map<std::size_t, std::vector<std::pair<int, const Key*>>> needed;
  for (const auto& [key, c] : choice) needed[std::get<2>(c)].push_back({std::get<3>(c), &key});

  std::map<Key, std::vector<float>> latent_of;
  for (const auto& [wi, positions] : needed) {
    const Mat<float> z = model.encode(window_matrix<float>(windows[wi]));
    for (const auto& [pos, key] : positions) {
      latent_of[*key] = std::vector<float>(z.row(pos).data(), z.row(pos).data() + z.cols());
    }
  }
  std::vector<HourLatent> out;
  out.reserve(latent_of.size());
  for (auto& [key, z] : latent_of) out.push_back({key.first, LocalHour{key.second}, std::move(z)});
  return out;
}

void write_latents(std::ostream& out, const std::vector<HourLatent>& latents) {
  csv::Writer w(out);
  std::vector<std::string> header{"user_id", "local_hour"};
  const std::size_t dim = latents.empty() ? 0 : latents.front().z.size();
  for (std::size_t i = 0; i < dim; ++i) header.push_back("z" + std::to_string(i));
  w.row(header);
  for (const auto& l : latents) {
    std::vector<std::string> row{l.user_id, timeutil::format_hour(l.hour)};
    for (float v : l.z) row.push_back(csv::format_float(v));
    w.row(row);
  }
}

std::vector<HourLatent> read_latents(std::istream& in) {
  const auto table = csv::Table::read(in);
  const auto cols = table.require_columns({"user_id", "local_hour"});
  std::vector<std::size_t> zcols;
  for (std::size_t i = 0;; ++i) {
    auto c = table.column("z" + std::to_string(i));
    if (!c) break;
    zcols.push_back(*c);
  }
  if (zcols.empty()) throw ConfigError("latent file has no z0.. columns");
  std::vector<HourLatent> out;
  for (std::size_t r = 0; r < table.size(); ++r) {
    const auto& row = table.row(r);
    const auto hour = timeutil::parse_hour(row[cols[1]]);
    if (!hour) throw ConfigError("bad local_hour at line " + std::to_string(table.line_number(r)));
    HourLatent l{row[cols[0]], *hour, {}};
    for (auto c : zcols) {
      const auto v = csv::parse_double(row[c]);
      if (!v) throw ConfigError("bad latent value at line " + std::to_string(table.line_number(r)));
      l.z.push_back(static_cast<float>(*v));
    }
    out.push_back(std::move(l));
  }
  return out;
}

DeltaCosines adapter_delta_cosines(const std::map<std::string, Adapter<float>>& adapters,
                                   const Mat<float>& probe_latents) {
  if (adapters.size() < 2) throw ConfigError("delta cosines need at least two adapters");
  if (probe_latents.rows() == 0) throw ConfigError("delta cosines need probe latents");
  DeltaCosines out;
  std::vector<Eigen::VectorXd> means;
  for (const auto& [user, adapter] : adapters) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(probe_latents.cols());
    for (Eigen::Index r = 0; r < probe_latents.rows(); ++r) {
      mean += adapter.delta(probe_latents.row(r)).cast<double>().transpose();
    }
    mean /= static_cast<double>(probe_latents.rows());
    if (mean.norm() == 0.0) out.zero_norm_users.push_back(user);
    out.users.push_back(user);
    means.push_back(std::move(mean));
  }
  const auto n = static_cast<Eigen::Index>(means.size());
  out.cosine = Eigen::MatrixXd::Constant(n, n, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t negative = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      const double ni = means[i].norm(), nj = means[j].norm();
      if (ni == 0.0 || nj == 0.0) continue;
      const double c = i == j ? 1.0 : means[i].dot(means[j]) / (ni * nj);
      out.cosine(i, j) = out.cosine(j, i) = c;
      if (i == j) continue;
      sum += c;
      best = std::max(best, c);
      if (c < 0) ++negative;
      ++out.pairs;
    }
  }
  if (out.pairs > 0) {
    out.mean = sum / static_cast<double>(out.pairs);
    out.max = best;
    out.fraction_negative = static_cast<double>(negative) / static_cast<double>(out.pairs);
  }
  return out;
}

void save_backbone(const std::string& path, const Backbone<float>& model, const TrainConfig& cfg) {
  checkpoint::Container c;
  c.kind = "backbone";
  c.seed = cfg.seed;
  c.config = {{"shape", model.shape().to_json()}, {"train", cfg.to_json()}};
  c.tensors = model.params();
  checkpoint::write_file(path, c);
}

Backbone<float> load_backbone(const std::string& path) {
  const auto c = checkpoint::read_file(path);
  if (c.kind != "backbone") throw ConfigError(path + " is not a backbone checkpoint");
  Backbone<float> model(ModelShape::from_json(c.config.at("shape")));
  checkpoint::load_into(c.tensors, model.params());
  return model;
}

void save_adapters(const std::string& path, const std::map<std::string, Adapter<float>>& adapters,
                   const TrainConfig& cfg) {
  checkpoint::Container c;
  c.kind = "adapters";
  c.seed = cfg.seed;
  c.config = {{"train", cfg.to_json()}, {"users", nlohmann::json::array()}};
  int d_model = 0;
  for (const auto& [user, adapter] : adapters) {
    c.config["users"].push_back(user);
    d_model = adapter.d_model();
    const auto& p = adapter.params();
    for (std::size_t i = 0; i < p.specs().size(); ++i) {
      const auto& s = p.specs()[i];
      const auto idx = c.tensors.add(user + "/" + s.name, s.rows, s.cols);
      c.tensors.mat(idx) = p.mat(i);
    }
  }
  c.config["d_model"] = d_model;
  checkpoint::write_file(path, c);
}

std::map<std::string, Adapter<float>> load_adapters(const std::string& path) {
  const auto c = checkpoint::read_file(path);
  if (c.kind != "adapters") throw ConfigError(path + " is not an adapter checkpoint");
  const int d_model = c.config.at("d_model").get<int>();
  std::map<std::string, Adapter<float>> out;
  for (const auto& u : c.config.at("users")) {
    const auto user = u.get<std::string>();
    Adapter<float> adapter(d_model);
    auto& p = adapter.params();
    for (std::size_t i = 0; i < p.specs().size(); ++i) {
      const auto& s = p.specs()[i];
      const auto j = c.tensors.find(user + "/" + s.name);
      if (!j) throw ConfigError("adapter checkpoint lacks " + user + "/" + s.name);
      const auto& src = c.tensors.specs()[*j];
      if (src.rows != s.rows || src.cols != s.cols) {
        throw ConfigError("adapter tensor " + user + "/" + s.name + " has the wrong shape");
      }
      p.mat(i) = c.tensors.mat(*j);
    }
    out.emplace(user, std::move(adapter));
  }
  return out;
}

}  // namespace flowsense::train
