#pragma once

// The tempo encoder and its two heads.
//
// A log-mel batch [batch x frames x 81] is feature-normalised, reduced by
// three small 2-D convolution blocks to a 16-channel frame sequence (the mel
// axis collapses 81 -> 79 -> 26 -> 24 -> 8 -> 1 through valid-mel kernels and
// 1x3 max-pools), refined by a stack of dilated 1-D convolutions with
// residual connections, and averaged over time into a 16-d embedding.
//
// On top of the embedding sit a strictly affine projection to one scalar
// (the pseudo-tempo read-out used during self-supervised training) and a
// 300-way softmax classifier (the fine-tuning head, one class per BPM).

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "equitempo/numerics/conv.hpp"
#include "equitempo/numerics/hash.hpp"
#include "equitempo/numerics/norm.hpp"
#include "equitempo/numerics/ops.hpp"
#include "equitempo/numerics/rng.hpp"
#include "equitempo/numerics/tensor.hpp"

namespace equitempo {

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

namespace detail {

// He-uniform: weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)). Suits the ELU
// activations used throughout the stack.
template <typename Scalar>
Tensor<Scalar> he_uniform(const Shape& shape, Index fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  ArrayX<Scalar> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) {
    v[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
  }
  return Tensor<Scalar>::from_values(shape, std::move(v), true);
}

}  // namespace detail

template <typename Scalar>
class TcnEncoder {
 public:
  static constexpr Index kMelBins = 81;
  static constexpr Index kChannels = 16;
  static constexpr Index kMinFrames = 256;
  static constexpr int kDefaultTcnLayers = 8;
  static constexpr Scalar kDropoutRate = Scalar(0.1);
  static constexpr Scalar kBnMomentum = Scalar(0.9);
  static constexpr Scalar kBnEpsilon = Scalar(1e-5);

  explicit TcnEncoder(std::uint64_t seed = 0, int tcn_layers = kDefaultTcnLayers) {
    if (tcn_layers < 1 || tcn_layers > 16) {
      throw std::invalid_argument("encoder: tcn_layers out of range");
    }
    gamma_ = Tensor<Scalar>::filled({kMelBins}, Scalar(1), true);
    beta_ = Tensor<Scalar>::zeros({kMelBins}, true);
    running_mean_ = Tensor<Scalar>::zeros({kMelBins});
    running_var_ = Tensor<Scalar>::filled({kMelBins}, Scalar(1));

    auto conv_block = [&](Index cin, Index kh, Index kw, Index pool, int idx) {
      Rng rng = Rng::stream(seed, RngDomain::kInit, 0, idx);
      ConvBlock b;
      b.weight = detail::he_uniform<Scalar>({kChannels, cin, kh, kw}, cin * kh * kw, rng);
      b.bias = Tensor<Scalar>::zeros({kChannels}, true);
      b.pad_h = (kh - 1) / 2;  // same along time, valid along mel
      b.pad_w = 0;
      b.pool = pool;
      return b;
    };
    blocks_.push_back(conv_block(1, 3, 3, 3, 0));
    blocks_.push_back(conv_block(kChannels, 3, 3, 3, 1));
    blocks_.push_back(conv_block(kChannels, 1, 8, 1, 2));

    for (int k = 0; k < tcn_layers; ++k) {
      Rng rng = Rng::stream(seed, RngDomain::kInit, 0, 3 + k);
      TcnLayer l;
      l.weight = detail::he_uniform<Scalar>({kChannels, kChannels, 5}, kChannels * 5, rng);
      l.bias = Tensor<Scalar>::zeros({kChannels}, true);
      l.dilation = Index(1) << k;
      tcn_.push_back(std::move(l));
    }
  }

  // [batch x frames x 81] -> [batch x 16]
  Tensor<Scalar> encode(const Tensor<Scalar>& spec, Rng* dropout_rng = nullptr) {
    return mean_lastdim(encode_sequence(spec, dropout_rng));
  }

  // Pre-pooling frame sequence [batch x 16 x frames], for receptive-field
  // probing and diagnostics.
  Tensor<Scalar> encode_sequence(const Tensor<Scalar>& spec, Rng* dropout_rng = nullptr) {
    if (spec.rank() != 3 || spec.dim(2) != kMelBins) {
      throw TensorError("encode: expected [batch x frames x 81], got " +
                        shape_str(spec.shape()));
    }
    const Index n = spec.dim(0), frames = spec.dim(1);
    if (frames < kMinFrames) {
      throw TensorError("encode: needs at least " + std::to_string(kMinFrames) +
                        " frames, got " + std::to_string(frames));
    }
    if (training_ && dropout_rng == nullptr) {
      throw std::invalid_argument("encode: training mode needs a dropout rng");
    }
    Rng scratch = Rng::stream(0, RngDomain::kDropout);
    Rng& rng = dropout_rng ? *dropout_rng : scratch;

    auto x = reshape(spec, {n * frames, kMelBins});
    x = batchnorm_features(x, gamma_, beta_, running_mean_, running_var_, kBnMomentum,
                           kBnEpsilon, training_);
    auto h = reshape(x, {n, 1, frames, kMelBins});
    for (const ConvBlock& b : blocks_) {
      h = elu(conv2d(h, b.weight, b.bias, b.pad_h, b.pad_w));
      if (b.pool > 1) h = maxpool_lastdim(h, b.pool);
      h = dropout(h, kDropoutRate, rng, training_);
    }
    auto seq = reshape(h, {n, kChannels, frames});
    for (const TcnLayer& l : tcn_) {
      auto y = elu(conv1d_dilated(seq, l.weight, l.bias, l.dilation));
      y = spatial_dropout(y, kDropoutRate, rng, training_);
      seq = add(seq, y);
    }
    return seq;
  }

  void set_training(bool on) {
    if (on && frozen_) {
      throw std::logic_error("encoder: frozen; evaluation-only");
    }
    training_ = on;
  }
  bool is_training() const { return training_; }

  // Stops gradient flow into every parameter and pins evaluation behaviour
  // (running batch-norm statistics, no dropout).
  void freeze() {
    for (auto& nt : parameters()) {
      nt.tensor.node()->requires_grad = false;
      nt.tensor.drop_grad();
    }
    training_ = false;
    frozen_ = true;
  }
  bool is_frozen() const { return frozen_; }

  std::vector<NamedTensor<Scalar>> parameters() {
    std::vector<NamedTensor<Scalar>> out;
    out.push_back({"input_norm.gamma", gamma_});
    out.push_back({"input_norm.beta", beta_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "block" + std::to_string(i + 1) + ".conv.";
      out.push_back({p + "weight", blocks_[i].weight});
      out.push_back({p + "bias", blocks_[i].bias});
    }
    for (std::size_t i = 0; i < tcn_.size(); ++i) {
      const std::string p = "tcn" + std::to_string(i) + ".conv.";
      out.push_back({p + "weight", tcn_[i].weight});
      out.push_back({p + "bias", tcn_[i].bias});
    }
    return out;
  }

  // Everything a checkpoint must carry: parameters plus batch-norm running
  // statistics.
  std::vector<NamedTensor<Scalar>> state_tensors() {
    auto out = parameters();
    out.push_back({"input_norm.running_mean", running_mean_});
    out.push_back({"input_norm.running_var", running_var_});
    return out;
  }

  Index parameter_count() {
    Index total = 0;
    for (auto& nt : parameters()) total += nt.tensor.numel();
    return total;
  }

  // Temporal receptive field in frames, pre-pooling: 1 + the reach added by
  // each convolution ((k-1) * dilation along time).
  Index receptive_field() const {
    Index rf = 1;
    for (const ConvBlock& b : blocks_) rf += b.weight.dim(2) - 1;
    for (const TcnLayer& l : tcn_) rf += (l.weight.dim(2) - 1) * l.dilation;
    return rf;
  }

  int tcn_layer_count() const { return static_cast<int>(tcn_.size()); }

  std::string describe() const {
    std::ostringstream os;
    os << "input_norm:" << kMelBins;
    for (const ConvBlock& b : blocks_) {
      os << "|conv:" << shape_str(b.weight.shape()) << ",pad" << b.pad_h << "x" << b.pad_w;
      if (b.pool > 1) os << ",pool" << b.pool;
    }
    for (const TcnLayer& l : tcn_) {
      os << "|tcn:" << shape_str(l.weight.shape()) << ",dil" << l.dilation;
    }
    os << "|avgpool|embed:" << kChannels;
    return os.str();
  }

  std::uint64_t architecture_fingerprint() const { return fnv1a64(describe()); }

 private:
  struct ConvBlock {
    Tensor<Scalar> weight, bias;
    Index pad_h = 0, pad_w = 0, pool = 1;
  };
  struct TcnLayer {
    Tensor<Scalar> weight, bias;
    Index dilation = 1;
  };

  Tensor<Scalar> gamma_, beta_, running_mean_, running_var_;
  std::vector<ConvBlock> blocks_;
  std::vector<TcnLayer> tcn_;
  bool training_ = true;
  bool frozen_ = false;
};

// Affine map 16 -> 1: the pseudo-tempo read-out z. Deliberately without any
// output nonlinearity; near-zero z is handled by the training loss guard.
template <typename Scalar>
class ProjectionHead {
 public:
  static constexpr Index kEmbedDim = 16;

  explicit ProjectionHead(std::uint64_t seed = 0) {
    Rng rng = Rng::stream(seed, RngDomain::kInit, 1, 0);
    weight_ = detail::he_uniform<Scalar>({kEmbedDim, 1}, kEmbedDim, rng);
    bias_ = Tensor<Scalar>::zeros({1}, true);
  }

  // [batch x 16] -> [batch x 1]
  Tensor<Scalar> project(const Tensor<Scalar>& h) {
    return add_rowvec(matmul(h, weight_), bias_);
  }

  std::vector<NamedTensor<Scalar>> parameters() {
    return {{"proj.weight", weight_}, {"proj.bias", bias_}};
  }

  std::string describe() const { return "proj:16->1,affine"; }

 private:
  Tensor<Scalar> weight_, bias_;
};

// Affine map 16 -> 300 plus softmax: one class per integer BPM in [0, 300).
template <typename Scalar>
class TempoClassifierHead {
 public:
  static constexpr Index kEmbedDim = 16;
  static constexpr Index kClasses = 300;

  explicit TempoClassifierHead(std::uint64_t seed = 0) {
    Rng rng = Rng::stream(seed, RngDomain::kInit, 2, 0);
    weight_ = detail::he_uniform<Scalar>({kEmbedDim, kClasses}, kEmbedDim, rng);
    bias_ = Tensor<Scalar>::zeros({kClasses}, true);
  }

  // [batch x 16] -> [batch x 300] raw scores
  Tensor<Scalar> logits(const Tensor<Scalar>& h) {
    return add_rowvec(matmul(h, weight_), bias_);
  }

  // [batch x 16] -> [batch x 300] probabilities
  Tensor<Scalar> classify(const Tensor<Scalar>& h) {
    return softmax_lastdim(logits(h));
  }

  // [batch x 16] -> [batch x 300] log-probabilities (for cross-entropy)
  Tensor<Scalar> log_probabilities(const Tensor<Scalar>& h) {
    return log_softmax_lastdim(logits(h));
  }

  std::vector<NamedTensor<Scalar>> parameters() {
    return {{"classifier.weight", weight_}, {"classifier.bias", bias_}};
  }

  std::string describe() const { return "classifier:16->300,softmax"; }

 private:
  Tensor<Scalar> weight_, bias_;
};

}  // namespace equitempo
