#pragma once

#include <memory>
#include <optional>
#include <random>
#include <string>

#include "atmodist/nn/layers.hpp"

namespace atmodist::nn {

/// Pre-activation-free residual block: conv-BN-ReLU-conv-BN plus skip, then ReLU.
/// A 1x1 strided convolution followed by BN projects the skip when the channel
/// count or resolution changes.
template <typename S>
class ResidualBlock final : public Layer<S> {
 public:
  ResidualBlock(int in_ch, int out_ch, int stride, const std::string& name)
      : conv1_(in_ch, out_ch, 3, stride, 1, false, name + ".conv1"), bn1_(out_ch, name + ".bn1"),
        conv2_(out_ch, out_ch, 3, 1, 1, false, name + ".conv2"), bn2_(out_ch, name + ".bn2") {
    if (in_ch != out_ch || stride != 1) {
      proj_.emplace(in_ch, out_ch, 1, stride, 0, false, name + ".proj");
      proj_bn_.emplace(out_ch, name + ".proj_bn");
    }
  }

  void init_he(std::mt19937_64& rng) {
    conv1_.init_he(rng);
    conv2_.init_he(rng);
    if (proj_) proj_->init_he(rng);
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    Tensor<S> h = relu1_.forward(bn1_.forward(conv1_.forward(x, mode), mode), mode);
    h = bn2_.forward(conv2_.forward(h, mode), mode);
    const Tensor<S> skip = proj_ ? proj_bn_->forward(proj_->forward(x, mode), mode) : x;
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += skip.data()[i];
    return out_relu_.forward(h, mode);
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    const Tensor<S> gsum = out_relu_.backward(g);
    Tensor<S> dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(gsum)))));
    const Tensor<S> dskip = proj_ ? proj_->backward(proj_bn_->backward(gsum)) : gsum;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += dskip.data()[i];
    return dx;
  }

  void collect_params(std::vector<Param<S>*>& out) override {
    conv1_.collect_params(out);
    bn1_.collect_params(out);
    conv2_.collect_params(out);
    bn2_.collect_params(out);
    if (proj_) {
      proj_->collect_params(out);
      proj_bn_->collect_params(out);
    }
  }
  void collect_buffers(std::vector<aligned_vector<S>*>& out) override {
    bn1_.collect_buffers(out);
    bn2_.collect_buffers(out);
    if (proj_bn_) proj_bn_->collect_buffers(out);
  }
  std::string kind() const override { return "residual"; }

 private:
  Conv2d<S> conv1_;
  BatchNorm2d<S> bn1_;
  LeakyReLU<S> relu1_;
  Conv2d<S> conv2_;
  BatchNorm2d<S> bn2_;
  std::optional<Conv2d<S>> proj_;
  std::optional<BatchNorm2d<S>> proj_bn_;
  LeakyReLU<S> out_relu_;
};

/// Generator trunk block without normalisation: conv-LReLU-conv plus identity.
template <typename S>
class PlainResidualBlock final : public Layer<S> {
 public:
  PlainResidualBlock(int channels, S slope, const std::string& name)
      : conv1_(channels, channels, 3, 1, 1, true, name + ".conv1"), act_(slope),
        conv2_(channels, channels, 3, 1, 1, true, name + ".conv2") {}

  void init_he(std::mt19937_64& rng) {
    conv1_.init_he(rng);
    conv2_.init_he(rng);
    // Start near the identity map.
    for (auto& w : conv2_.weight().value) w *= S(0.1);
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    Tensor<S> h = conv2_.forward(act_.forward(conv1_.forward(x, mode), mode), mode);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += x.data()[i];
    return h;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> dx = conv1_.backward(act_.backward(conv2_.backward(g)));
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += g.data()[i];
    return dx;
  }

  void collect_params(std::vector<Param<S>*>& out) override {
    conv1_.collect_params(out);
    conv2_.collect_params(out);
  }
  std::string kind() const override { return "plain_residual"; }

 private:
  Conv2d<S> conv1_;
  LeakyReLU<S> act_;
  Conv2d<S> conv2_;
};

}  // namespace atmodist::nn
