#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"

#include "flowsense/common.hpp"
#include "flowsense/rng.hpp"
#include "flowsense/tensor.hpp"

namespace flowsense::backbone {

struct ModelShape {
  int d_in = static_cast<int>(kFeatureDim);
  int d_model = 64;
  int heads = 4;
  int layers = 2;
  int d_ff = 256;
  int seq_len = kWindowHours;
  int d_out = static_cast<int>(kFeatureDim);

  int head_dim() const { return d_model / heads; }
  // Throws ConfigError listing every violation.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelShape from_json(const nlohmann::json& j);
};

// Pre-LN transformer encoder: input projection + sinusoidal positions, `layers` blocks of
// multi-head self-attention and a GELU feed-forward sublayer, final LayerNorm. The shared
// prediction head (d_model -> d_out) lives here as well.
template <typename T>
class Backbone {
 public:
  struct LayerCache {
    Mat<T> x_in, ln1, qkv, ctx, x_mid, ln2, ff_pre, ff_act;
    std::vector<Mat<T>> probs;  // per head, seq_len x seq_len
    Eigen::Matrix<T, Eigen::Dynamic, 1> mu1, rstd1, mu2, rstd2;
  };
  struct Cache {
    Mat<T> input;
    std::vector<LayerCache> layers;
    Mat<T> x_final;
    Eigen::Matrix<T, Eigen::Dynamic, 1> muf, rstdf;
    Mat<T> latents;
  };

  explicit Backbone(ModelShape shape = {});

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit LayerNorm gains.
  void init(Rng& rng);

  const ModelShape& shape() const { return shape_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Mat<T>& positional() const { return positional_; }

  // seq_len x d_in -> seq_len x d_model. Throws RuntimeError on non-finite parameters.
  Mat<T> encode(const Mat<T>& input) const;
  void forward(const Mat<T>& input, Cache& cache) const;
  // Accumulates parameter gradients for d(loss)/d(latents).
  void backward(const Cache& cache, const Mat<T>& d_latents, ParamStore<T>& grads) const;

  RowVec<T> head(const RowVec<T>& h) const;
  // Accumulates head gradients; returns d(loss)/dh.
  RowVec<T> head_backward(const RowVec<T>& h, const RowVec<T>& d_out, ParamStore<T>& grads) const;

  std::size_t head_weight_index() const { return w_head_; }
  std::size_t head_bias_index() const { return b_head_; }

  template <typename U>
  Backbone<U> cast() const {
    Backbone<U> out(shape_);
    out.params() = params_.template cast<U>();
    return out;
  }

 private:
  struct LayerIndex {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
  };

  ModelShape shape_;
  ParamStore<T> params_;
  Mat<T> positional_;
  std::size_t w_in_, b_in_, lnf_g_, lnf_b_, w_head_, b_head_;
  std::vector<LayerIndex> layer_idx_;
};

// Per-user residual adapter: h + Linear(ReLU(Linear(h))).
template <typename T>
class Adapter {
 public:
  explicit Adapter(int d_model = 64);

  // First layer uniform fan-in; second layer zero so the adapter starts as the identity.
  void init(Rng& rng);
  void init_random(Rng& rng);  // both layers random (tests, gradient checks)

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  int d_model() const { return d_model_; }

  RowVec<T> delta(const RowVec<T>& h) const;
  RowVec<T> apply(const RowVec<T>& h) const { return h + delta(h); }
  // Accumulates adapter gradients for d(loss)/d(apply(h)); returns d(loss)/dh.
  RowVec<T> backward(const RowVec<T>& h, const RowVec<T>& d_out, ParamStore<T>& grads) const;

  template <typename U>
  Adapter<U> cast() const {
    Adapter<U> out(d_model_);
    out.params() = params_.template cast<U>();
    return out;
  }

 private:
  int d_model_;
  ParamStore<T> params_;
  std::size_t w1_, b1_, w2_, b2_;
};

// Copy of `window` with row `mask_pos` replaced by zeros.
template <typename T>
Mat<T> mask_input(const Mat<T>& window, int mask_pos);

template <typename T>
struct LossGrads {
  ParamStore<T>* backbone = nullptr;  // null: backbone frozen
  ParamStore<T>* adapter = nullptr;   // null: adapter frozen
};

// Mean over output dims of (prediction - target)^2 at mask_pos, where the prediction is
// head(adapt(encode(masked window))[mask_pos]). Gradients are accumulated when requested.
template <typename T>
T masked_loss(const Backbone<T>& model, const Adapter<T>* adapter, const Mat<T>& window,
              int mask_pos, typename Backbone<T>::Cache& cache, LossGrads<T> grads = {});

template <typename T>
T masked_loss(const Backbone<T>& model, const Adapter<T>* adapter, const Mat<T>& window,
              int mask_pos) {
  typename Backbone<T>::Cache cache;
  return masked_loss(model, adapter, window, mask_pos, cache);
}

extern template class Backbone<float>;
extern template class Backbone<double>;
extern template class Adapter<float>;
extern template class Adapter<double>;

}  // namespace flowsense::backbone
