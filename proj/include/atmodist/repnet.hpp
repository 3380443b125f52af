#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "atmodist/error.hpp"
#include "atmodist/nn/blocks.hpp"
#include "atmodist/nn/layers.hpp"
#include "atmodist/tensor.hpp"

namespace atmodist {

struct StageSpec {
  int blocks = 1;
  int channels = 16;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Architecture of the siamese representation network and its comparison head.
///
/// Stem: strided k x k convolution, BN, ReLU, strided 3x3 max-pool. Each stage
/// after the first halves the resolution with a strided convolution in its
/// first block. The head sees the two final feature maps stacked along the
/// channel axis, optionally reduces them with a 1x1 convolution, and ends in
/// `num_classes` logits.
struct RepNetConfig {
  int input_size = 32;
  int input_channels = 2;
  int stem_channels = 16;
  int stem_kernel = 8;
  int stem_stride = 2;
  int pool_kernel = 3;
  int pool_stride = 2;
  std::vector<StageSpec> stages{{1, 16}, {1, 32}};
  int head_reduce_channels = 0;  // 0 disables the 1x1 reduction
  std::vector<int> head_hidden{256};
  int num_classes = 8;
  std::string init = "he_normal";

  friend bool operator==(const RepNetConfig&, const RepNetConfig&) = default;
};

/// Spatial size of the metric-layer feature map; throws ConfigError when any
/// stage would shrink the map below one pixel.
inline int feature_map_size(const RepNetConfig& cfg) {
  if (cfg.input_size < 1 || cfg.input_channels < 1 || cfg.stem_channels < 1 || cfg.stem_kernel < 1 ||
      cfg.stem_stride < 1 || cfg.pool_kernel < 1 || cfg.pool_stride < 1 || cfg.num_classes < 1)
    throw ConfigError("repnet dimensions must be positive");
  if (cfg.stages.empty()) throw ConfigError("repnet needs at least one stage");
  if (cfg.init != "he_normal") throw ConfigError("unknown init scheme '" + cfg.init + "'");
  // Padding keeps every output at least 1x1, so a strided step on a map
  // smaller than its stride is what "below one pixel" means here.
  if (cfg.input_size < cfg.stem_stride) throw ConfigError("stem reduces spatial size below 1");
  int s = nn::conv_output_size(cfg.input_size, cfg.stem_kernel, cfg.stem_stride,
                               (cfg.stem_kernel - cfg.stem_stride) / 2);
  if (s < cfg.pool_stride) throw ConfigError("stem pooling reduces spatial size below 1");
  s = nn::conv_output_size(s, cfg.pool_kernel, cfg.pool_stride, cfg.pool_kernel / 2);
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    if (cfg.stages[i].blocks < 1 || cfg.stages[i].channels < 1) throw ConfigError("invalid stage spec");
    if (i == 0) continue;
    if (s < 2)
      throw ConfigError("stage " + std::to_string(i) + " would halve a " + std::to_string(s) + "x" +
                        std::to_string(s) + " map, reducing spatial size below 1");
    s = nn::conv_output_size(s, 3, 2, 1);
  }
  for (int h : cfg.head_hidden)
    if (h < 1) throw ConfigError("head widths must be positive");
  return s;
}

/// Siamese representation network plus comparison head. Both branches run
/// through the same parameter set: pairs are evaluated as one concatenated batch.
template <typename S>
class RepresentationModel {
 public:
  RepresentationModel(const RepNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    const int fmap = feature_map_size(cfg);
    std::mt19937_64 rng(seed);

    auto& stem = rep_.add(std::make_unique<nn::Conv2d<S>>(cfg.input_channels, cfg.stem_channels, cfg.stem_kernel,
                                                          cfg.stem_stride, (cfg.stem_kernel - cfg.stem_stride) / 2,
                                                          false, "stem.conv"));
    stem.init_he(rng);
    rep_.add(std::make_unique<nn::BatchNorm2d<S>>(cfg.stem_channels, "stem.bn"));
    rep_.add(nn::relu<S>());
    rep_.add(std::make_unique<nn::MaxPool2d<S>>(cfg.pool_kernel, cfg.pool_stride, cfg.pool_kernel / 2));
    int ch = cfg.stem_channels;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s)
      for (int b = 0; b < cfg.stages[s].blocks; ++b) {
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        auto& blk = rep_.add(std::make_unique<nn::ResidualBlock<S>>(
            ch, cfg.stages[s].channels, stride, "stage" + std::to_string(s) + ".block" + std::to_string(b)));
        blk.init_he(rng);
        ch = cfg.stages[s].channels;
      }
    metric_channels_ = ch;
    fmap_ = fmap;

    int head_ch = 2 * ch;
    if (cfg.head_reduce_channels > 0) {
      auto& red = head_.add(std::make_unique<nn::Conv2d<S>>(head_ch, cfg.head_reduce_channels, 1, 1, 0, false,
                                                            "head.reduce"));
      red.init_he(rng);
      head_.add(std::make_unique<nn::BatchNorm2d<S>>(cfg.head_reduce_channels, "head.reduce_bn"));
      head_.add(nn::relu<S>());
      head_ch = cfg.head_reduce_channels;
    }
    head_.add(std::make_unique<nn::Flatten<S>>());
    int width = head_ch * fmap * fmap;
    for (std::size_t i = 0; i < cfg.head_hidden.size(); ++i) {
      auto& fc = head_.add(std::make_unique<nn::Linear<S>>(width, cfg.head_hidden[i], "head.fc" + std::to_string(i)));
      fc.init_he(rng);
      head_.add(nn::relu<S>());
      width = cfg.head_hidden[i];
    }
    auto& out = head_.add(std::make_unique<nn::Linear<S>>(width, cfg.num_classes, "head.logits"));
    out.init_he(rng);
  }

  RepresentationModel(const RepresentationModel&) = delete;
  RepresentationModel& operator=(const RepresentationModel&) = delete;

  const RepNetConfig& config() const noexcept { return cfg_; }
  int metric_dim() const noexcept { return metric_channels_; }
  int feature_map() const noexcept { return fmap_; }
  int num_classes() const noexcept { return cfg_.num_classes; }

  std::vector<nn::Param<S>*> params() {
    std::vector<nn::Param<S>*> p;
    rep_.collect_params(p);
    head_.collect_params(p);
    return p;
  }
  std::vector<nn::Param<S>*> representation_params() {
    std::vector<nn::Param<S>*> p;
    rep_.collect_params(p);
    return p;
  }
  std::vector<aligned_vector<S>*> buffers() {
    std::vector<aligned_vector<S>*> b;
    rep_.collect_buffers(b);
    head_.collect_buffers(b);
    return b;
  }
  std::size_t parameter_count() { return nn::count_params(params()); }
  void zero_grad() { nn::zero_grads(params()); }

  /// Final residual-stage activations [C, N, h, w] for a batch of inputs.
  Tensor<S> feature_maps(const Tensor<S>& x, nn::Mode mode) {
    check_input(x);
    return rep_.forward(x, mode);
  }

  /// Metric-layer embedding: final activations averaged over space, [C, N, 1, 1].
  Tensor<S> embed(const Tensor<S>& x, nn::Mode mode) { return pool_.forward(feature_maps(x, mode), mode); }

  /// Gradient of a loss on embed() output with respect to the input batch.
  Tensor<S> backward_embed(const Tensor<S>& grad) { return rep_.backward(pool_.backward(grad)); }

  /// Logits [num_classes, B, 1, 1] for a batch of pairs.
  Tensor<S> forward_pairs(const Tensor<S>& a, const Tensor<S>& b, nn::Mode mode) {
    if (!a.same_shape(b)) throw InputError("pair batches differ: " + a.shape_string() + " vs " + b.shape_string());
    batch_ = a.batch();
    const Tensor<S> maps = feature_maps(concat_batch(a, b), mode);
    auto [ma, mb] = split_batch(maps, batch_);
    return head_.forward(concat_channels(ma, mb), mode);
  }

  /// Back-propagate logit gradients through head and both branches.
  void backward_pairs(const Tensor<S>& dlogits) {
    const Tensor<S> dstack = head_.backward(dlogits);
    auto [da, db] = split_channels(dstack, metric_channels_);
    rep_.backward(concat_batch(da, db));
  }

  /// Inference-mode embedding of a single patch.
  template <typename P>
  std::vector<S> represent(const P& patch) {
    const Tensor<S> e = embed(single(patch), nn::Mode::infer);
    return {e.data(), e.data() + e.size()};
  }

  /// Inference-mode logits for one pair.
  template <typename P>
  std::vector<S> classify_pair(const P& a, const P& b) {
    const Tensor<S> logits = forward_pairs(single(a), single(b), nn::Mode::infer);
    return {logits.data(), logits.data() + logits.size()};
  }

 private:
  template <typename P>
  Tensor<S> single(const P& patch) const {
    if (patch.height != cfg_.input_size || patch.width != cfg_.input_size || patch.channels != cfg_.input_channels)
      throw InputError("patch " + std::to_string(patch.height) + "x" + std::to_string(patch.width) + "x" +
                       std::to_string(patch.channels) + " does not match model input " +
                       std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) + "x" +
                       std::to_string(cfg_.input_channels));
    const P* one = &patch;
    return to_batch<S, P>(std::span<const P* const>(&one, 1));
  }

  void check_input(const Tensor<S>& x) const {
    if (x.channels() != cfg_.input_channels)
      throw InputError("input has " + std::to_string(x.channels()) + " channels, model expects " +
                       std::to_string(cfg_.input_channels));
  }

  RepNetConfig cfg_;
  nn::Sequential<S> rep_;
  nn::Sequential<S> head_;
  nn::GlobalAvgPool<S> pool_;
  int metric_channels_ = 0;
  int fmap_ = 0;
  int batch_ = 0;
};

inline nlohmann::json to_json(const RepNetConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) stages.push_back({{"blocks", s.blocks}, {"channels", s.channels}});
  return {{"input_size", c.input_size},     {"input_channels", c.input_channels},
          {"stem_channels", c.stem_channels}, {"stem_kernel", c.stem_kernel},
          {"stem_stride", c.stem_stride},   {"pool_kernel", c.pool_kernel},
          {"pool_stride", c.pool_stride},   {"stages", stages},
          {"head_reduce_channels", c.head_reduce_channels}, {"head_hidden", c.head_hidden},
          {"num_classes", c.num_classes},   {"init", c.init}};
}

inline RepNetConfig repnet_from_json(const nlohmann::json& j, RepNetConfig c = {}) {
  c.input_size = j.value("input_size", c.input_size);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.stem_channels = j.value("stem_channels", c.stem_channels);
  c.stem_kernel = j.value("stem_kernel", c.stem_kernel);
  c.stem_stride = j.value("stem_stride", c.stem_stride);
  c.pool_kernel = j.value("pool_kernel", c.pool_kernel);
  c.pool_stride = j.value("pool_stride", c.pool_stride);
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& s : j["stages"]) c.stages.push_back({s.at("blocks").get<int>(), s.at("channels").get<int>()});
  }
  c.head_reduce_channels = j.value("head_reduce_channels", c.head_reduce_channels);
  if (j.contains("head_hidden")) c.head_hidden = j["head_hidden"].get<std::vector<int>>();
  c.num_classes = j.value("num_classes", c.num_classes);
  c.init = j.value("init", c.init);
  return c;
}

}  // namespace atmodist
