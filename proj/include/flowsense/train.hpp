#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowsense/backbone.hpp"
#include "flowsense/featurize.hpp"

namespace flowsense::train {

using backbone::Adapter;
using backbone::Backbone;
using backbone::ModelShape;

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 64;
  int phase1_epochs = 30;
  int phase2_epochs = 15;
  std::uint64_t seed = 42;
  double train_frac = 0.7;
  int eval_masks_per_window = 8;  // fixed seeded mask positions for test-loss comparisons

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochLog {
  int phase = 1;
  std::string user_id;  // empty for phase 1
  int epoch = 0;        // 1-based
  double mean_loss = 0.0;
};

void write_training_log(std::ostream& out, const std::vector<EpochLog>& log);

template <typename T>
Mat<T> window_matrix(const featurize::Window& w);

// Shared backbone + head trained on every user's train windows with adapters disabled.
// One uniformly drawn mask per window per epoch. Throws RuntimeError on a non-finite loss.
Backbone<float> train_phase1(const std::vector<featurize::Window>& windows, const ModelShape& shape,
                             const TrainConfig& cfg, std::vector<EpochLog>* log = nullptr);

// One adapter per user with at least one train window; the backbone is never modified
// (checked byte-for-byte, RuntimeError otherwise). Users are independent jobs.
struct Phase2Result {
  std::map<std::string, Adapter<float>> adapters;
  std::vector<std::string> skipped_users;  // no train windows
  std::vector<EpochLog> log;
};
Phase2Result train_phase2(const Backbone<float>& model, const featurize::SplitPlan& plan,
                          const TrainConfig& cfg, int threads = 1);

// Adapter for a single user's windows, seeded from (seed, user).
Adapter<float> train_adapter(const Backbone<float>& model, const std::string& user_id,
                             const std::vector<featurize::Window>& windows, const TrainConfig& cfg,
                             std::vector<EpochLog>* log = nullptr);

struct TestLoss {
  std::string user_id;
  std::size_t windows = 0;
  double without_adapter = 0.0;
  double with_adapter = 0.0;
};
// Mean masked loss over each test window at a fixed seeded set of mask positions, with and
// without the user's adapter.
std::vector<TestLoss> compare_test_loss(const Backbone<float>& model,
                                        const std::map<std::string, Adapter<float>>& adapters,
                                        const featurize::SplitPlan& plan, const TrainConfig& cfg);
void write_test_loss(std::ostream& out, const std::vector<TestLoss>& rows);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::map<std::string, double> per_tensor;  // tensor name -> max relative error
  std::size_t checked = 0;
};
// Central differences on every parameter of the backbone (and adapter when given). Relative
// error is |a - n| / max(|a| + |n|, floor).
GradCheckResult gradient_check(Backbone<double>& model, Adapter<double>* adapter,
                               const Mat<double>& window, int mask_pos, double step = 1e-4,
                               double floor = 1e-7);

// Canonical backbone-only latent per hour: from the window in which the hour is the final
// position, else the earliest window containing it.
struct HourLatent {
  std::string user_id;
  LocalHour hour;
  std::vector<float> z;
};
std::vector<HourLatent> extract_latents(const Backbone<float>& model,
                                        const std::vector<featurize::Window>& windows);
void write_latents(std::ostream& out, const std::vector<HourLatent>& latents);
std::vector<HourLatent> read_latents(std::istream& in);

struct DeltaCosines {
  std::vector<std::string> users;
  Eigen::MatrixXd cosine;  // NaN where a zero-norm delta made the pair undefined
  std::vector<std::string> zero_norm_users;
  double mean = 0.0;
  double max = 0.0;
  double fraction_negative = 0.0;
  std::size_t pairs = 0;
};
// Cosine between user-mean adapter deltas over the probe latents (rows).
DeltaCosines adapter_delta_cosines(const std::map<std::string, Adapter<float>>& adapters,
                                   const Mat<float>& probe_latents);

// Checkpoint round trip.
void save_backbone(const std::string& path, const Backbone<float>& model, const TrainConfig& cfg);
Backbone<float> load_backbone(const std::string& path);
void save_adapters(const std::string& path, const std::map<std::string, Adapter<float>>& adapters,
                   const TrainConfig& cfg);
std::map<std::string, Adapter<float>> load_adapters(const std::string& path);

}  // namespace flowsense::train
