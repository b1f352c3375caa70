#pragma once

// Backbones, MLP heads, prototype layers and EMA target copies.
// Parameters are named "module.layer.index.kind" for the checkpoint format.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "sslkit/rng.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit::models {

using nd::Shape;
using nd::Tensor;
using nd::TensorError;

template <class T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
Tensor<T> he_uniform(Shape shape, int64_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> v(static_cast<size_t>(nd::numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>::from(std::move(shape), std::move(v), /*requires_grad=*/true);
}

// ---------------------------------------------------------------------------

template <class T>
class MlpHead {
 public:
  MlpHead() = default;

  // dims = [in, hidden..., out]; batchnorm+relu on hidden layers only,
  // final layer is a plain linear map.
  MlpHead(std::string name, std::vector<int64_t> dims, bool hidden_batchnorm,
          Rng& rng)
      : name_(std::move(name)), dims_(std::move(dims)), bn_(hidden_batchnorm) {
    for (size_t i = 0; i + 1 < dims_.size(); ++i) {
      const int64_t in = dims_[i], out = dims_[i + 1];
      weights_.push_back(he_uniform<T>({in, out}, in, rng));
      biases_.push_back(Tensor<T>::zeros({out}, true));
      const bool hidden = i + 2 < dims_.size();
      if (hidden && bn_) {
        gammas_.push_back(Tensor<T>::full({out}, T(1), true));
        betas_.push_back(Tensor<T>::zeros({out}, true));
      }
    }
  }

  Tensor<T> forward(Tensor<T> x) const {
    for (size_t i = 0; i < weights_.size(); ++i) {
      x = nd::add(nd::matmul(x, weights_[i]), biases_[i]);
      if (i + 1 < weights_.size()) {
        if (bn_) x = nd::batch_norm(x, gammas_[i], betas_[i]);
        x = nd::relu(x);
      }
    }
    return x;
  }

  int64_t out_dim() const { return dims_.back(); }
  int64_t in_dim() const { return dims_.front(); }

  ParamList<T> params() const {
    ParamList<T> p;
    for (size_t i = 0; i < weights_.size(); ++i) {
      p.emplace_back(name_ + ".linear." + std::to_string(i) + ".weight", weights_[i]);
      p.emplace_back(name_ + ".linear." + std::to_string(i) + ".bias", biases_[i]);
    }
    for (size_t i = 0; i < gammas_.size(); ++i) {
      p.emplace_back(name_ + ".bn." + std::to_string(i) + ".gamma", gammas_[i]);
      p.emplace_back(name_ + ".bn." + std::to_string(i) + ".beta", betas_[i]);
    }
    return p;
  }

 private:
  std::string name_;
  std::vector<int64_t> dims_;
  bool bn_ = false;
  std::vector<Tensor<T>> weights_, biases_, gammas_, betas_;
};

// ---------------------------------------------------------------------------

// 4 conv blocks (3x3, stride 2, batchnorm+relu) + global average pool.
// 32x32x3 input -> 256-d features; small enough to train on a CPU.
template <class T>
class SmallCnn {
 public:
  static constexpr int64_t kOutDim = 256;

  SmallCnn() = default;
  SmallCnn(std::string name, Rng& rng) : name_(std::move(name)) {
    const int64_t channels[5] = {3, 32, 64, 128, 256};
    for (int i = 0; i < 4; ++i) {
      const int64_t cin = channels[i], cout = channels[i + 1];
      kernels_.push_back(he_uniform<T>({cout, cin, 3, 3}, cin * 9, rng));
      gammas_.push_back(Tensor<T>::full({cout}, T(1), true));
      betas_.push_back(Tensor<T>::zeros({cout}, true));
    }
  }

  Tensor<T> forward(Tensor<T> x) const {
    if (x.ndim() != 4 || x.dim(1) != 3)
      throw TensorError("backbone expects [B,3,H,W] input, got " +
                        nd::shape_str(x.shape()));
    for (size_t i = 0; i < kernels_.size(); ++i) {
      x = nd::conv2d(x, kernels_[i], 2);
      x = nd::relu(nd::batch_norm(x, gammas_[i], betas_[i]));
    }
    // global average pool
    return pool(x, x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
  }

  int64_t out_dim() const { return kOutDim; }

  ParamList<T> params() const {
    ParamList<T> p;
    for (size_t i = 0; i < kernels_.size(); ++i) {
      p.emplace_back(name_ + ".conv." + std::to_string(i) + ".weight", kernels_[i]);
      p.emplace_back(name_ + ".bn." + std::to_string(i) + ".gamma", gammas_[i]);
      p.emplace_back(name_ + ".bn." + std::to_string(i) + ".beta", betas_[i]);
    }
    return p;
  }

 private:
  static Tensor<T> pool(const Tensor<T>& x, int64_t B, int64_t C, int64_t S) {
    return nd::reshape(nd::mean(nd::reshape(x, {B * C, S}), 1, true), {B, C});
  }

  std::string name_;
  std::vector<Tensor<T>> kernels_, gammas_, betas_;
};

// ---------------------------------------------------------------------------

// Prototype matrix for SwAV-style assignment; rows kept unit-norm after
// every optimizer step via renormalize().
template <class T>
class Prototypes {
 public:
  Prototypes() = default;
  Prototypes(std::string name, int64_t count, int64_t dim, Rng& rng)
      : name_(std::move(name)), matrix_(he_uniform<T>({count, dim}, dim, rng)) {
    renormalize();
  }

  Tensor<T>& matrix() { return matrix_; }
  const Tensor<T>& matrix() const { return matrix_; }

  void renormalize() {
    const int64_t K = matrix_.dim(0), d = matrix_.dim(1);
    auto& v = matrix_.data();
    for (int64_t k = 0; k < K; ++k) {
      T n = 0;
      for (int64_t j = 0; j < d; ++j) {
        const T x = v[static_cast<size_t>(k * d + j)];
        n += x * x;
      }
      n = std::sqrt(n) + T(1e-8);
      for (int64_t j = 0; j < d; ++j) v[static_cast<size_t>(k * d + j)] /= n;
    }
  }

  ParamList<T> params() const { return {{name_ + ".matrix", matrix_}}; }

 private:
  std::string name_;
  Tensor<T> matrix_;
};

// ---------------------------------------------------------------------------

// Online parameters theta and their EMA target copy xi. Targets never
// require gradients; ema_update moves xi towards theta.
template <class T>
class MomentumPair {
 public:
  MomentumPair() = default;

  // Both lists are live handles into the online and target modules; the
  // target values are overwritten with exact copies of the online ones.
  MomentumPair(const ParamList<T>& online, const ParamList<T>& target) {
    if (online.size() != target.size())
      throw TensorError("MomentumPair: parameter lists differ in length");
    for (size_t i = 0; i < online.size(); ++i) {
      if (online[i].second.shape() != target[i].second.shape())
        throw TensorError("MomentumPair: shape mismatch at " + online[i].first);
      online_.push_back(online[i].second);
      Tensor<T> t = target[i].second;
      t.data() = online[i].second.data();
      t.set_requires_grad(false);
      target_.emplace_back(target[i].first, t);
    }
  }

  // xi <- m*xi + (1-m)*theta, elementwise
  void ema_update(T m) {
    if (m < T(0) || m > T(1))
      throw TensorError("ema_update: momentum must lie in [0,1]");
    for (size_t i = 0; i < online_.size(); ++i) {
      const auto& th = online_[i].data();
      auto& xi = target_[i].second.data();
      for (size_t j = 0; j < xi.size(); ++j)
        xi[j] = m * xi[j] + (T(1) - m) * th[j];
    }
  }

  const ParamList<T>& target_params() const { return target_; }
  ParamList<T>& target_params() { return target_; }

 private:
  std::vector<Tensor<T>> online_;
  ParamList<T> target_;
};

// Cosine momentum schedule: m(0)=m_base, m(K)=1, monotone non-decreasing.
inline double momentum_schedule(int64_t step, int64_t total, double m_base) {
  if (total <= 0) throw TensorError("momentum_schedule: total steps must be > 0");
  const double c = (std::cos(M_PI * static_cast<double>(step) /
                             static_cast<double>(total)) +
                    1.0) /
                   2.0;
  return 1.0 - (1.0 - m_base) * c;
}

}  // namespace sslkit::models
