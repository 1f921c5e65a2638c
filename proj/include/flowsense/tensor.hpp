#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowsense/common.hpp"

namespace flowsense {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct TensorSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

// Named row-major tensors packed into one flat buffer. Gradients and optimizer state use the
// same layout, so whole-model operations are plain vector loops. The buffer and every tensor
// start on a 64-byte boundary: Eigen picks its SIMD split of a reduction from the address, so
// without this the rounding of results would depend on where the heap placed the buffer.
inline constexpr std::size_t kTensorAlignBytes = 64;

template <typename T>
using AlignedBuffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
class ParamStore {
 public:
  using MatMap = Eigen::Map<Mat<T>>;
  using ConstMatMap = Eigen::Map<const Mat<T>>;
  static constexpr std::size_t kAlign = kTensorAlignBytes / sizeof(T);

  std::size_t add(std::string name, int rows, int cols) {
    const std::size_t offset = (data_.size() + kAlign - 1) / kAlign * kAlign;
    TensorSpec s{std::move(name), rows, cols, offset};
    data_.resize(offset + s.size(), T(0));
    specs_.push_back(std::move(s));
    return specs_.size() - 1;
  }

  MatMap mat(std::size_t i) {
    const auto& s = specs_[i];
    return MatMap(data_.data() + s.offset, s.rows, s.cols);
  }
  ConstMatMap mat(std::size_t i) const {
    const auto& s = specs_[i];
    return ConstMatMap(data_.data() + s.offset, s.rows, s.cols);
  }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      if (specs_[i].name == name) return i;
    }
    return std::nullopt;
  }

  const std::vector<TensorSpec>& specs() const { return specs_; }
  // Includes zero padding between tensors.
  AlignedBuffer<T>& data() { return data_; }
  const AlignedBuffer<T>& data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  void set_zero() { std::fill(data_.begin(), data_.end(), T(0)); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Same layout, zeroed: the gradient buffer for this store.
  ParamStore zeros_like() const {
    ParamStore g = *this;
    g.set_zero();
    return g;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& s : specs_) out.add(s.name, s.rows, s.cols);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::vector<TensorSpec> specs_;
  AlignedBuffer<T> data_;
};

// Adam with bias correction; defaults match the common reference implementation.
template <typename T>
class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, T(0)), v_(n, T(0)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  template <typename Buffer>
  void step(Buffer& params, const Buffer& grads, double lr) {
    step(params.data(), grads.data(), params.size(), lr);
  }

  void step(T* params, const T* grads, std::size_t n, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(eps_);
    for (std::size_t i = 0; i < n; ++i) {
      const T g = grads[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g * g;
      params[i] -= step_size * m_[i] / (std::sqrt(v_[i]) * inv_sqrt_bc2 + eps);
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  std::vector<T> m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// Versioned tensor container:
//   "FSTC" | u32 version | u64 metadata length | metadata JSON | float32 LE payloads, one per
//   tensor in metadata order, unpadded
// Metadata carries {"kind", "seed", "config", "tensors": [{"name", "shape"}]}.
namespace checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Container {
  std::string kind;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  ParamStore<float> tensors;
};

void write(std::ostream& out, const Container& c);
Container read(std::istream& in);
void write_file(const std::string& path, const Container& c);
Container read_file(const std::string& path);

// Copies tensors by name into an existing layout; throws ConfigError on any mismatch.
template <typename T>
void load_into(const ParamStore<float>& src, ParamStore<T>& dst) {
  for (std::size_t i = 0; i < dst.specs().size(); ++i) {
    const auto& spec = dst.specs()[i];
    const auto j = src.find(spec.name);
    if (!j) throw ConfigError("checkpoint lacks tensor " + spec.name);
    const auto& s = src.specs()[*j];
    if (s.rows != spec.rows || s.cols != spec.cols) {
      throw ConfigError("checkpoint tensor " + spec.name + " has the wrong shape");
    }
    for (std::size_t k = 0; k < spec.size(); ++k) {
      dst.data()[spec.offset + k] = static_cast<T>(src.data()[s.offset + k]);
    }
  }
}

}  // namespace checkpoint

}  // namespace flowsense
