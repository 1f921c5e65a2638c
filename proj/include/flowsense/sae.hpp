#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "flowsense/common.hpp"
#include "flowsense/rng.hpp"
#include "flowsense/tensor.hpp"

namespace flowsense::sae {

struct SaeConfig {
  int dict_size = 512;
  int k = 16;
  double lr = 3e-4;
  int batch_size = 512;
  int epochs = 500;
  int held_out_users = 5;
  std::uint64_t seed = 42;

  void validate() const;
  nlohmann::json to_json() const;
  static SaeConfig from_json(const nlohmann::json& j);
};

struct SparseCode {
  std::vector<int> indices;     // ascending feature index
  std::vector<double> values;   // all > 0
  std::size_t nnz() const { return indices.size(); }
};

// z = TopK(ReLU(W_e (x - b_pre))), x_hat = W_d z + b_post.
struct SaeParams {
  Eigen::MatrixXd w_enc;  // dict x d
  Eigen::MatrixXd w_dec;  // d x dict
  Eigen::VectorXd b_pre;  // d
  Eigen::VectorXd b_post; // d
  int k = 16;

  int dim() const { return static_cast<int>(w_dec.rows()); }
  int dict_size() const { return static_cast<int>(w_dec.cols()); }

  // Unit-norm random decoder columns, W_e = W_d^T, both biases at `mean`.
  static SaeParams init(int dim, int dict_size, int k, const Eigen::VectorXd& mean, Rng& rng);

  // max |‖W_d[:, j]‖ - 1| over columns.
  double max_norm_deviation() const;
  void normalize_decoder();
  // Rounds every parameter to float32 so checkpoint reloads are exact.
  void round_to_float();
};

Eigen::VectorXd pre_activations(const SaeParams& p, const Eigen::VectorXd& x);
// Keeps the k largest positive entries (ties to the lower index).
SparseCode top_k(const Eigen::VectorXd& pre, int k);
SparseCode encode(const SaeParams& p, const Eigen::VectorXd& x);
Eigen::VectorXd decode(const SaeParams& p, const SparseCode& z);

// Latent corpus: one row per (user, hour).
struct Corpus {
  std::vector<std::string> users;
  std::vector<LocalHour> hours;
  Eigen::MatrixXd x;  // rows x dim
  std::size_t size() const { return users.size(); }
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct TrainResult {
  SaeParams params;  // best-validation checkpoint
  int best_epoch = 0;
  std::vector<std::string> held_out;
  std::vector<EpochStats> history;
  double max_norm_deviation = 0.0;  // worst over every optimizer step
  std::size_t steps = 0;
};

// Mean squared reconstruction error per element over the selected rows (all when empty).
double reconstruction_mse(const SaeParams& p, const Eigen::MatrixXd& x,
                          const std::vector<std::size_t>& rows = {});

// The first `count` users of the sorted distinct users after a seeded shuffle.
std::vector<std::string> choose_held_out(const std::vector<std::string>& users, int count,
                                         std::uint64_t seed);

// Throws ConfigError when fewer than held_out_users + 1 users are present. The optional
// observer runs after every optimizer step (post renormalization).
TrainResult train(const Corpus& corpus, const SaeConfig& cfg,
                  const std::function<void(const SaeParams&)>& on_step = {});

struct Activation {
  std::size_t row = 0;  // corpus row
  int feature = 0;
  double value = 0.0;
};
struct ActivationTable {
  std::vector<std::string> users;
  std::vector<LocalHour> hours;
  std::vector<Activation> entries;       // sorted by (row, feature)
  std::vector<std::size_t> active_count; // per feature: number of hours it fires on
  int dict_size = 0;

  std::vector<int> active_features() const;
};
ActivationTable activation_matrix(const Corpus& corpus, const SaeParams& p);

// Sparse triplets: user_id, local_hour, feature_id, value.
void write_activations(std::ostream& out, const ActivationTable& table);
ActivationTable read_activations(std::istream& in, int dict_size);

void write_history(std::ostream& out, const std::vector<EpochStats>& history);

void save(const std::string& path, const SaeParams& p, const SaeConfig& cfg,
          const std::vector<std::string>& held_out);
SaeParams load(const std::string& path);

}  // namespace flowsense::sae
