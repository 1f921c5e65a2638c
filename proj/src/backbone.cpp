#include "flowsense/backbone.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace flowsense::backbone {

namespace {

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr double kLnEps = 1e-5;

template <typename T>
void layer_norm(const Mat<T>& x, const Eigen::Map<const Mat<T>>& gain,
                const Eigen::Map<const Mat<T>>& bias, Mat<T>& out, ColVec<T>& mu,
                ColVec<T>& rstd) {
  const auto n = x.rows();
  const auto d = x.cols();
  out.resize(n, d);
  mu.resize(n);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T m = x.row(i).mean();
    const T var = (x.row(i).array() - m).square().mean();
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    mu(i) = m;
    rstd(i) = r;
    out.row(i) = ((x.row(i).array() - m) * r * gain.row(0).array() + bias.row(0).array()).matrix();
  }
}

// d_in accumulates the input gradient; gain/bias gradients go to the grad store.
template <typename T>
void layer_norm_backward(const Mat<T>& x, const ColVec<T>& mu, const ColVec<T>& rstd,
                         const Eigen::Map<const Mat<T>>& gain, const Mat<T>& d_out,
                         Eigen::Map<Mat<T>> d_gain, Eigen::Map<Mat<T>> d_bias, Mat<T>& d_in) {
  const auto n = x.rows();
  const auto d = static_cast<T>(x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (d_out.row(i).isZero(0)) continue;
    const auto xhat = ((x.row(i).array() - mu(i)) * rstd(i)).eval();
    const auto dy = d_out.row(i).array();
    d_gain.row(0).array() += dy * xhat;
    d_bias.row(0).array() += dy;
    const auto dxhat = (dy * gain.row(0).array()).eval();
    const T mean_dxhat = dxhat.sum() / d;
    const T mean_dxhat_xhat = (dxhat * xhat).sum() / d;
    d_in.row(i).array() += rstd(i) * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
  }
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
void uniform_fill(Eigen::Map<Mat<T>> m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
}

}  // namespace

void ModelShape::validate() const {
  std::string errors;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors += (errors.empty() ? "" : "; ") + msg;
  };
  check(d_in > 0, "d_in must be positive");
  check(d_model > 0, "d_model must be positive");
  check(heads > 0 && d_model % std::max(heads, 1) == 0, "heads must divide d_model");
  check(layers > 0, "layers must be positive");
  check(d_ff > 0, "d_ff must be positive");
  check(seq_len > 0, "seq_len must be positive");
  check(d_out > 0, "d_out must be positive");
  if (!errors.empty()) throw ConfigError("invalid model shape: " + errors);
}

nlohmann::json ModelShape::to_json() const {
  return {{"d_in", d_in},     {"d_model", d_model}, {"heads", heads}, {"layers", layers},
          {"d_ff", d_ff},     {"seq_len", seq_len}, {"d_out", d_out}};
}

ModelShape ModelShape::from_json(const nlohmann::json& j) {
  ModelShape s;
  s.d_in = j.value("d_in", s.d_in);
  s.d_model = j.value("d_model", s.d_model);
  s.heads = j.value("heads", s.heads);
  s.layers = j.value("layers", s.layers);
  s.d_ff = j.value("d_ff", s.d_ff);
  s.seq_len = j.value("seq_len", s.seq_len);
  s.d_out = j.value("d_out", s.d_out);
  s.validate();
  return s;
}

template <typename T>
Backbone<T>::Backbone(ModelShape shape) : shape_(shape) {
  shape_.validate();
  const int d = shape_.d_model;
  w_in_ = params_.add("input.weight", shape_.d_in, d);
  b_in_ = params_.add("input.bias", 1, d);
  for (int l = 0; l < shape_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerIndex li{};
    li.ln1_g = params_.add(p + "ln1.gain", 1, d);
    li.ln1_b = params_.add(p + "ln1.bias", 1, d);
    li.w_qkv = params_.add(p + "attn.qkv.weight", d, 3 * d);
    li.b_qkv = params_.add(p + "attn.qkv.bias", 1, 3 * d);
    li.w_o = params_.add(p + "attn.out.weight", d, d);
    li.b_o = params_.add(p + "attn.out.bias", 1, d);
    li.ln2_g = params_.add(p + "ln2.gain", 1, d);
    li.ln2_b = params_.add(p + "ln2.bias", 1, d);
    li.w_1 = params_.add(p + "ff.in.weight", d, shape_.d_ff);
    li.b_1 = params_.add(p + "ff.in.bias", 1, shape_.d_ff);
    li.w_2 = params_.add(p + "ff.out.weight", shape_.d_ff, d);
    li.b_2 = params_.add(p + "ff.out.bias", 1, d);
    layer_idx_.push_back(li);
  }
  lnf_g_ = params_.add("final_ln.gain", 1, d);
  lnf_b_ = params_.add("final_ln.bias", 1, d);
  w_head_ = params_.add("head.weight", d, shape_.d_out);
  b_head_ = params_.add("head.bias", 1, shape_.d_out);

  positional_.resize(shape_.seq_len, d);
  for (int pos = 0; pos < shape_.seq_len; ++pos) {
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      positional_(pos, i) = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < d) positional_(pos, i + 1) = static_cast<T>(std::cos(pos * freq));
    }
  }
  for (auto g : {lnf_g_}) params_.mat(g).setOnes();
  for (const auto& li : layer_idx_) {
    params_.mat(li.ln1_g).setOnes();
    params_.mat(li.ln2_g).setOnes();
  }
}

template <typename T>
void Backbone<T>::init(Rng& rng) {
  for (std::size_t i = 0; i < params_.specs().size(); ++i) {
    const auto& s = params_.specs()[i];
    const bool is_weight = s.name.ends_with(".weight");
    if (is_weight) {
      uniform_fill<T>(params_.mat(i), rng, 1.0 / std::sqrt(static_cast<double>(s.rows)));
    } else if (s.name.ends_with(".gain")) {
      params_.mat(i).setOnes();
    } else {
      params_.mat(i).setZero();
    }
  }
}

template <typename T>
Mat<T> Backbone<T>::encode(const Mat<T>& input) const {
  Cache cache;
  forward(input, cache);
  return cache.latents;
}

template <typename T>
void Backbone<T>::forward(const Mat<T>& input, Cache& c) const {
  if (!params_.all_finite()) throw RuntimeError("backbone has non-finite parameters");
  const int L = shape_.seq_len, d = shape_.d_model, H = shape_.heads, dh = shape_.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  c.input = input;
  Mat<T> x = input * params_.mat(w_in_);
  x.rowwise() += params_.mat(b_in_).row(0);
  x += positional_;
  c.layers.resize(shape_.layers);
  for (int l = 0; l < shape_.layers; ++l) {
    const auto& li = layer_idx_[l];
    auto& lc = c.layers[l];
    lc.x_in = x;
    layer_norm<T>(x, params_.mat(li.ln1_g), params_.mat(li.ln1_b), lc.ln1, lc.mu1, lc.rstd1);
    lc.qkv.noalias() = lc.ln1 * params_.mat(li.w_qkv);
    lc.qkv.rowwise() += params_.mat(li.b_qkv).row(0);
    lc.ctx.resize(L, d);
    lc.probs.resize(H);
    for (int h = 0; h < H; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      Mat<T>& p = lc.probs[h];
      p.noalias() = (q * k.transpose()) * scale;
      for (int i = 0; i < L; ++i) {
        const T mx = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - mx).exp().matrix();
        p.row(i) /= p.row(i).sum();
      }
      lc.ctx.middleCols(h * dh, dh).noalias() = p * v;
    }
    x = lc.x_in;
    x.noalias() += lc.ctx * params_.mat(li.w_o);
    x.rowwise() += params_.mat(li.b_o).row(0);
    lc.x_mid = x;
    layer_norm<T>(x, params_.mat(li.ln2_g), params_.mat(li.ln2_b), lc.ln2, lc.mu2, lc.rstd2);
    lc.ff_pre.noalias() = lc.ln2 * params_.mat(li.w_1);
    lc.ff_pre.rowwise() += params_.mat(li.b_1).row(0);
    lc.ff_act = lc.ff_pre.unaryExpr([](T v) { return gelu(v); });
    x.noalias() += lc.ff_act * params_.mat(li.w_2);
    x.rowwise() += params_.mat(li.b_2).row(0);
  }
  c.x_final = x;
  layer_norm<T>(x, params_.mat(lnf_g_), params_.mat(lnf_b_), c.latents, c.muf, c.rstdf);
}

template <typename T>
void Backbone<T>::backward(const Cache& c, const Mat<T>& d_latents, ParamStore<T>& g) const {
  const int L = shape_.seq_len, d = shape_.d_model, H = shape_.heads, dh = shape_.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Mat<T> dx = Mat<T>::Zero(L, d);
  layer_norm_backward<T>(c.x_final, c.muf, c.rstdf, params_.mat(lnf_g_), d_latents,
                         g.mat(lnf_g_), g.mat(lnf_b_), dx);
  Mat<T> d_ln, d_act, d_pre, d_ctx, d_qkv, d_p;
  for (int l = shape_.layers - 1; l >= 0; --l) {
    const auto& li = layer_idx_[l];
    const auto& lc = c.layers[l];
    // Feed-forward sublayer: x_out = x_mid + GELU(ln2 W1 + b1) W2 + b2.
    g.mat(li.w_2).noalias() += lc.ff_act.transpose() * dx;
    g.mat(li.b_2).row(0) += dx.colwise().sum();
    d_act.noalias() = dx * params_.mat(li.w_2).transpose();
    d_pre = d_act.cwiseProduct(lc.ff_pre.unaryExpr([](T v) { return gelu_grad(v); }));
    g.mat(li.w_1).noalias() += lc.ln2.transpose() * d_pre;
    g.mat(li.b_1).row(0) += d_pre.colwise().sum();
    d_ln.noalias() = d_pre * params_.mat(li.w_1).transpose();
    layer_norm_backward<T>(lc.x_mid, lc.mu2, lc.rstd2, params_.mat(li.ln2_g), d_ln,
                           g.mat(li.ln2_g), g.mat(li.ln2_b), dx);
    // Attention sublayer: x_mid = x_in + ctx Wo + bo.
    g.mat(li.w_o).noalias() += lc.ctx.transpose() * dx;
    g.mat(li.b_o).row(0) += dx.colwise().sum();
    d_ctx.noalias() = dx * params_.mat(li.w_o).transpose();
    d_qkv.setZero(L, 3 * d);
    for (int h = 0; h < H; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      const Mat<T>& p = lc.probs[h];
      const auto d_o = d_ctx.middleCols(h * dh, dh);
      d_p.noalias() = d_o * v.transpose();
      d_qkv.middleCols(2 * d + h * dh, dh).noalias() += p.transpose() * d_o;
      // Softmax backward, row by row.
      for (int i = 0; i < L; ++i) {
        const T dot = d_p.row(i).dot(p.row(i));
        d_p.row(i) = (p.row(i).array() * (d_p.row(i).array() - dot)).matrix();
      }
      d_p *= scale;
      d_qkv.middleCols(h * dh, dh).noalias() += d_p * k;
      d_qkv.middleCols(d + h * dh, dh).noalias() += d_p.transpose() * q;
    }
    g.mat(li.w_qkv).noalias() += lc.ln1.transpose() * d_qkv;
    g.mat(li.b_qkv).row(0) += d_qkv.colwise().sum();
    d_ln.noalias() = d_qkv * params_.mat(li.w_qkv).transpose();
    layer_norm_backward<T>(lc.x_in, lc.mu1, lc.rstd1, params_.mat(li.ln1_g), d_ln,
                           g.mat(li.ln1_g), g.mat(li.ln1_b), dx);
  }
  // dx now holds d(loss)/d(x0); x0 = input W_in + b_in + positions.
  g.mat(w_in_).noalias() += c.input.transpose() * dx;
  g.mat(b_in_).row(0) += dx.colwise().sum();
}

template <typename T>
RowVec<T> Backbone<T>::head(const RowVec<T>& h) const {
  return h * params_.mat(w_head_) + params_.mat(b_head_).row(0);
}

template <typename T>
RowVec<T> Backbone<T>::head_backward(const RowVec<T>& h, const RowVec<T>& d_out,
                                     ParamStore<T>& g) const {
  g.mat(w_head_).noalias() += h.transpose() * d_out;
  g.mat(b_head_).row(0) += d_out;
  return d_out * params_.mat(w_head_).transpose();
}

template <typename T>
Adapter<T>::Adapter(int d_model) : d_model_(d_model) {
  w1_ = params_.add("adapter.fc1.weight", d_model, d_model);
  b1_ = params_.add("adapter.fc1.bias", 1, d_model);
  w2_ = params_.add("adapter.fc2.weight", d_model, d_model);
  b2_ = params_.add("adapter.fc2.bias", 1, d_model);
}

template <typename T>
void Adapter<T>::init(Rng& rng) {
  params_.set_zero();
  uniform_fill<T>(params_.mat(w1_), rng, 1.0 / std::sqrt(static_cast<double>(d_model_)));
}

template <typename T>
void Adapter<T>::init_random(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model_));
  for (std::size_t i = 0; i < params_.specs().size(); ++i) uniform_fill<T>(params_.mat(i), rng, bound);
}

template <typename T>
RowVec<T> Adapter<T>::delta(const RowVec<T>& h) const {
  RowVec<T> hidden = h * params_.mat(w1_) + params_.mat(b1_).row(0);
  hidden = hidden.cwiseMax(T(0));
  return hidden * params_.mat(w2_) + params_.mat(b2_).row(0);
}

template <typename T>
RowVec<T> Adapter<T>::backward(const RowVec<T>& h, const RowVec<T>& d_out, ParamStore<T>& g) const {
  const RowVec<T> pre = h * params_.mat(w1_) + params_.mat(b1_).row(0);
  const RowVec<T> hidden = pre.cwiseMax(T(0));
  g.mat(w2_).noalias() += hidden.transpose() * d_out;
  g.mat(b2_).row(0) += d_out;
  RowVec<T> d_hidden = d_out * params_.mat(w2_).transpose();
  for (Eigen::Index i = 0; i < d_hidden.size(); ++i) {
    if (pre(i) <= T(0)) d_hidden(i) = T(0);
  }
  g.mat(w1_).noalias() += h.transpose() * d_hidden;
  g.mat(b1_).row(0) += d_hidden;
  return d_out + d_hidden * params_.mat(w1_).transpose();
}

template <typename T>
Mat<T> mask_input(const Mat<T>& window, int mask_pos) {
  Mat<T> out = window;
  out.row(mask_pos).setZero();
  return out;
}

template <typename T>
T masked_loss(const Backbone<T>& model, const Adapter<T>* adapter, const Mat<T>& window,
              int mask_pos, typename Backbone<T>::Cache& cache, LossGrads<T> grads) {
  const auto& shape = model.shape();
  if (mask_pos < 0 || mask_pos >= shape.seq_len) {
    throw ConfigError("mask position " + std::to_string(mask_pos) + " out of range");
  }
  model.forward(mask_input(window, mask_pos), cache);
  const RowVec<T> h = cache.latents.row(mask_pos);
  const RowVec<T> adapted = adapter ? adapter->apply(h) : h;
  const RowVec<T> pred = model.head(adapted);
  const RowVec<T> err = pred - window.row(mask_pos);
  const T loss = err.squaredNorm() / static_cast<T>(shape.d_out);
  if (!grads.backbone && !grads.adapter) return loss;

  const RowVec<T> d_pred = err * (T(2) / static_cast<T>(shape.d_out));
  RowVec<T> d_adapted;
  if (grads.backbone) {
    d_adapted = model.head_backward(adapted, d_pred, *grads.backbone);
  } else {
    d_adapted = d_pred * model.params().mat(model.head_weight_index()).transpose();
  }
  RowVec<T> d_h = d_adapted;
  if (adapter) {
    if (grads.adapter) {
      d_h = adapter->backward(h, d_adapted, *grads.adapter);
    } else if (grads.backbone) {
      ParamStore<T> scratch = adapter->params().zeros_like();
      d_h = adapter->backward(h, d_adapted, scratch);
    }
  }
  if (grads.backbone) {
    Mat<T> d_latents = Mat<T>::Zero(shape.seq_len, shape.d_model);
    d_latents.row(mask_pos) = d_h;
    model.backward(cache, d_latents, *grads.backbone);
  }
  return loss;
}

template class Backbone<float>;
template class Backbone<double>;
template class Adapter<float>;
template class Adapter<double>;
template Mat<float> mask_input(const Mat<float>&, int);
template Mat<double> mask_input(const Mat<double>&, int);
template float masked_loss(const Backbone<float>&, const Adapter<float>*, const Mat<float>&, int,
                           Backbone<float>::Cache&, LossGrads<float>);
template double masked_loss(const Backbone<double>&, const Adapter<double>*, const Mat<double>&,
                            int, Backbone<double>::Cache&, LossGrads<double>);

}  // namespace flowsense::backbone
