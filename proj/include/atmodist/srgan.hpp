#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "atmodist/error.hpp"
#include "atmodist/losses.hpp"
#include "atmodist/nn/blocks.hpp"
#include "atmodist/nn/layers.hpp"
#include "atmodist/optim.hpp"
#include "atmodist/repnet.hpp"
#include "atmodist/sampler.hpp"

namespace atmodist {

enum class ContentLossKind { mse, representation };

inline std::string to_string(ContentLossKind k) { return k == ContentLossKind::mse ? "mse" : "rep"; }

inline ContentLossKind content_loss_from_string(const std::string& s) {
  if (s == "mse") return ContentLossKind::mse;
  if (s == "rep" || s == "representation") return ContentLossKind::representation;
  throw ConfigError("unknown content loss '" + s + "' (expected mse or rep)");
}

struct SRConfig {
  int scale = 4;
  ContentLossKind loss = ContentLossKind::mse;
  double alpha_cnt = 1.0;
  double alpha_adv = 1e-3;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int epochs = 6;
  int steps_per_epoch = 100;
  int batch_size = 16;
  int gen_channels = 32;
  int gen_blocks = 4;
  int disc_channels = 16;
  double slope = 0.2;     // leaky-ReLU slope in both networks
  int probe_points = 10;  // content-loss probes within the first epoch
  int probe_pairs = 64;
  std::uint64_t seed = 5;
};

inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

inline void validate(const SRConfig& c) {
  if (c.scale < 2 || !is_power_of_two(c.scale))
    throw ConfigError("SR scale must be a power of two >= 2, got " + std::to_string(c.scale));
  if (!(c.alpha_adv >= 0.0)) throw ConfigError("alpha_adv must be non-negative");
  if (!(c.alpha_cnt > 0.0)) throw ConfigError("alpha_cnt must be positive");
  if (!(c.learning_rate > 0.0)) throw ConfigError("SR learning rate must be positive");
  if (c.epochs < 1 || c.steps_per_epoch < 1 || c.batch_size < 1 || c.gen_channels < 1 || c.gen_blocks < 0 ||
      c.disc_channels < 1 || c.probe_points < 2 || c.probe_pairs < 1)
    throw ConfigError("SR counts must be positive (probe_points >= 2)");
}

/// Sub-pixel upscaling by 2: conv to 4C channels, pixel shuffle, leaky ReLU.
/// ICNR initialisation makes the four sub-kernels of every output channel
/// identical, so each 2x2 output block is constant at start.
template <typename S>
class UpscaleBlock final : public nn::Layer<S> {
 public:
  UpscaleBlock(int channels, S slope, const std::string& name)
      : conv_(channels, 4 * channels, 3, 1, 1, true, name + ".conv"), shuffle_(2), act_(slope) {}

  void init_icnr(std::mt19937_64& rng) {
    const int c = conv_.in_channels(), k = conv_.kernel();
    const std::size_t per_out = static_cast<std::size_t>(c) * k * k;
    std::vector<S> base(static_cast<std::size_t>(c) * per_out);
    nn::he_normal(base, c * k * k, rng);
    auto& w = conv_.weight().value;
    for (int o = 0; o < 4 * c; ++o)
      std::copy_n(base.begin() + static_cast<std::ptrdiff_t>((o / 4) * per_out), per_out,
                  w.begin() + static_cast<std::ptrdiff_t>(o * per_out));
  }

  /// Convolution plus shuffle, without the activation.
  Tensor<S> upsample(const Tensor<S>& x) { return shuffle_.forward(conv_.forward(x, nn::Mode::infer), nn::Mode::infer); }

  Tensor<S> forward(const Tensor<S>& x, nn::Mode mode) override {
    return act_.forward(shuffle_.forward(conv_.forward(x, mode), mode), mode);
  }
  Tensor<S> backward(const Tensor<S>& g) override { return conv_.backward(shuffle_.backward(act_.backward(g))); }
  void collect_params(std::vector<nn::Param<S>*>& out) override { conv_.collect_params(out); }
  std::string kind() const override { return "upscale"; }

 private:
  nn::Conv2d<S> conv_;
  nn::PixelShuffle<S> shuffle_;
  nn::LeakyReLU<S> act_;
};

/// SR generator: head conv, normalisation-free residual trunk with a global
/// skip, log2(scale) sub-pixel upscaling stages and an output conv.
template <typename S>
class Generator {
 public:
  Generator(const SRConfig& cfg, int channels, std::uint64_t seed)
      : channels_(channels),
        head_(channels, cfg.gen_channels, 3, 1, 1, true, "gen.head"),
        head_act_(static_cast<S>(cfg.slope)),
        trunk_conv_(cfg.gen_channels, cfg.gen_channels, 3, 1, 1, true, "gen.trunk_out"),
        tail_(cfg.gen_channels, channels, 3, 1, 1, true, "gen.tail") {
    validate(cfg);
    if (channels < 1) throw ConfigError("generator needs at least one channel");
    std::mt19937_64 rng(seed);
    head_.init_he(rng);
    for (int b = 0; b < cfg.gen_blocks; ++b)
      trunk_.add(std::make_unique<nn::PlainResidualBlock<S>>(cfg.gen_channels, static_cast<S>(cfg.slope),
                                                             "gen.block" + std::to_string(b)))
          .init_he(rng);
    trunk_conv_.init_he(rng);
    for (int s = cfg.scale; s > 1; s /= 2)
      up_.push_back(std::make_unique<UpscaleBlock<S>>(cfg.gen_channels, static_cast<S>(cfg.slope),
                                                      "gen.up" + std::to_string(up_.size())));
    for (auto& u : up_) u->init_icnr(rng);
    tail_.init_he(rng);
    for (auto& w : tail_.weight().value) w *= S(0.1);
  }

  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  Tensor<S> forward(const Tensor<S>& x, nn::Mode mode) {
    if (x.channels() != channels_) throw InputError("generator input has wrong channel count: " + x.shape_string());
    Tensor<S> h = head_act_.forward(head_.forward(x, mode), mode);
    Tensor<S> t = trunk_conv_.forward(trunk_.forward(h, mode), mode);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] += h.data()[i];
    for (auto& u : up_) t = u->forward(t, mode);
    return tail_.forward(t, mode);
  }

  Tensor<S> backward(const Tensor<S>& g) {
    Tensor<S> d = tail_.backward(g);
    for (auto it = up_.rbegin(); it != up_.rend(); ++it) d = (*it)->backward(d);
    Tensor<S> dh = trunk_.backward(trunk_conv_.backward(d));
    for (std::size_t i = 0; i < dh.size(); ++i) dh.data()[i] += d.data()[i];
    return head_.backward(head_act_.backward(dh));
  }

  std::vector<nn::Param<S>*> params() {
    std::vector<nn::Param<S>*> p;
    head_.collect_params(p);
    trunk_.collect_params(p);
    trunk_conv_.collect_params(p);
    for (auto& u : up_) u->collect_params(p);
    tail_.collect_params(p);
    return p;
  }
  std::vector<aligned_vector<S>*> buffers() { return {}; }
  void zero_grad() { nn::zero_grads(params()); }

  /// Count of batch-norm parameters (always zero: the generator is normalisation-free).
  std::size_t batchnorm_parameter_count() {
    std::size_t n = 0;
    for (auto* p : params())
      if (p->name.find("bn") != std::string::npos) n += p->size();
    return n;
  }

  std::size_t upscale_stages() const noexcept { return up_.size(); }
  UpscaleBlock<S>& upscale(std::size_t i) { return *up_.at(i); }
  int channels() const noexcept { return channels_; }

 private:
  int channels_;
  nn::Conv2d<S> head_;
  nn::LeakyReLU<S> head_act_;
  nn::Sequential<S> trunk_;
  nn::Conv2d<S> trunk_conv_;
  std::vector<std::unique_ptr<UpscaleBlock<S>>> up_;
  nn::Conv2d<S> tail_;
};

/// Convolutional critic ending in a single logit per sample. Strided convs
/// halve the resolution twice; global pooling makes it size-agnostic.
template <typename S>
class Discriminator {
 public:
  Discriminator(const SRConfig& cfg, int channels, std::uint64_t seed) {
    validate(cfg);
    std::mt19937_64 rng(seed);
    const int f = cfg.disc_channels;
    const S slope = static_cast<S>(cfg.slope);
    const int plan[4][3] = {{channels, f, 1}, {f, f, 2}, {f, 2 * f, 1}, {2 * f, 2 * f, 2}};
    for (int i = 0; i < 4; ++i) {
      net_.add(std::make_unique<nn::Conv2d<S>>(plan[i][0], plan[i][1], 3, plan[i][2], 1, true,
                                               "disc.conv" + std::to_string(i)))
          .init_he(rng);
      net_.add(std::make_unique<nn::LeakyReLU<S>>(slope));
    }
    net_.add(std::make_unique<nn::GlobalAvgPool<S>>());
    net_.add(std::make_unique<nn::Linear<S>>(2 * f, 1, "disc.logit")).init_he(rng);
  }

  Discriminator(const Discriminator&) = delete;
  Discriminator& operator=(const Discriminator&) = delete;

  /// Logits [1, N, 1, 1].
  Tensor<S> forward(const Tensor<S>& x, nn::Mode mode) { return net_.forward(x, mode); }
  Tensor<S> backward(const Tensor<S>& g) { return net_.backward(g); }

  /// Probability that each sample is real, in (0, 1).
  std::vector<double> probability(const Tensor<S>& x) {
    const Tensor<S> logits = forward(x, nn::Mode::infer);
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(logits.data()[i]);
    return p;
  }

  std::vector<nn::Param<S>*> params() {
    std::vector<nn::Param<S>*> p;
    net_.collect_params(p);
    return p;
  }
  void zero_grad() { nn::zero_grads(params()); }

 private:
  nn::Sequential<S> net_;
};

template <typename S>
struct SrModels {
  std::unique_ptr<Generator<S>> generator;
  std::unique_ptr<Discriminator<S>> discriminator;
};

/// Deterministically initialised generator/discriminator pair for `channels`-channel fields.
template <typename S>
SrModels<S> build_sr_models(const SRConfig& cfg, int channels) {
  validate(cfg);
  return {std::make_unique<Generator<S>>(cfg, channels, cfg.seed),
          std::make_unique<Discriminator<S>>(cfg, channels, cfg.seed + 1)};
}

/// Content loss value and its gradient with respect to the generated batch.
template <typename S>
struct ContentLoss {
  double loss = 0.0;
  Tensor<S> grad;
};

/// MSE, or alpha_cnt times the batch-mean squared l2 distance between
/// metric-layer embeddings of generated and target patches.
template <typename S>
ContentLoss<S> content_loss(const SRConfig& cfg, RepresentationModel<S>* model, const Tensor<S>& generated,
                            const Tensor<S>& target) {
  if (!generated.same_shape(target))
    throw InputError("content loss shapes differ: " + generated.shape_string() + " vs " + target.shape_string());
  ContentLoss<S> out;
  if (cfg.loss == ContentLossKind::mse) {
    std::tie(out.loss, out.grad) = mse_loss(generated, target);
    return out;
  }
  if (model == nullptr) throw ConfigError("representation content loss requires a trained representation model");
  const Tensor<S> et = model->embed(target, nn::Mode::infer);
  const Tensor<S> eg = model->embed(generated, nn::Mode::infer);  // cached for backward
  const int b = generated.batch();
  Tensor<S> de(eg.channels(), b, 1, 1);
  double sq = 0.0;
  for (int n = 0; n < b; ++n)
    for (int c = 0; c < eg.channels(); ++c) {
      const double d = static_cast<double>(eg(c, n, 0, 0)) - et(c, n, 0, 0);
      sq += d * d;
      de(c, n, 0, 0) = static_cast<S>(2.0 * cfg.alpha_cnt * d / b);
    }
  out.loss = cfg.alpha_cnt * sq / b;
  out.grad = model->backward_embed(de);
  model->zero_grad();
  return out;
}

struct SrEpochLog {
  int epoch = 0;
  double content = 0.0;
  double adversarial = 0.0;
  double discriminator = 0.0;
  double total = 0.0;
  friend bool operator==(const SrEpochLog&, const SrEpochLog&) = default;
};

struct SrCurves {
  std::vector<SrEpochLog> epochs;
  std::vector<int> probe_steps;       // step index at which each probe was taken
  std::vector<double> probe_content;  // content loss on the fixed probe batch
  friend bool operator==(const SrCurves&, const SrCurves&) = default;
};

inline void write_csv(const SrCurves& c, std::ostream& os) {
  os << "epoch,content,adversarial,discriminator,total\n" << std::setprecision(12);
  for (const auto& e : c.epochs)
    os << e.epoch << ',' << e.content << ',' << e.adversarial << ',' << e.discriminator << ',' << e.total << '\n';
}

namespace detail {

template <typename S>
std::pair<Tensor<S>, Tensor<S>> sr_batch(const std::vector<SrPair>& pairs, std::size_t begin, std::size_t end) {
  std::vector<const Patch<float>*> lo, hi;
  for (std::size_t i = begin; i < end; ++i) {
    lo.push_back(&pairs[i].low_res);
    hi.push_back(&pairs[i].high_res);
  }
  return {to_batch<S, Patch<float>>(std::span<const Patch<float>* const>(lo)),
          to_batch<S, Patch<float>>(std::span<const Patch<float>* const>(hi))};
}

}  // namespace detail

/// Adversarial SR training with alternating discriminator / generator Adam
/// steps. The generator minimises content + alpha_adv * BCE(D(G(x)), real).
/// A fixed probe batch is drawn first and its content loss is recorded at
/// `probe_points` evenly spaced steps of epoch one. On a non-finite loss the
/// generator is restored to the end of the last finished epoch and
/// DivergenceError is thrown.
template <typename S>
SrCurves train_sr(Generator<S>& gen, Discriminator<S>& disc, SrPairSampler& stream, const SRConfig& cfg,
                  RepresentationModel<S>* rep = nullptr,
                  const std::function<void(const SrEpochLog&)>& on_epoch = {}) {
  validate(cfg);
  if (cfg.loss == ContentLossKind::representation && rep == nullptr)
    throw ConfigError("representation content loss requires a trained representation model");
  auto gparams = gen.params();
  auto dparams = disc.params();
  Adam<S> gopt(gparams, cfg.learning_rate, cfg.beta1, cfg.beta2);
  Adam<S> dopt(dparams, cfg.learning_rate, cfg.beta1, cfg.beta2);

  const auto probe_set = stream.take(static_cast<std::size_t>(cfg.probe_pairs));
  const auto probe_batch = detail::sr_batch<S>(probe_set, 0, probe_set.size());
  auto probe = [&] {
    return content_loss(cfg, rep, gen.forward(probe_batch.first, nn::Mode::infer), probe_batch.second).loss;
  };

  SrCurves curves;
  std::vector<int> probe_at;
  for (int i = 0; i < cfg.probe_points; ++i)
    probe_at.push_back(static_cast<int>(std::lround(static_cast<double>(i) * cfg.steps_per_epoch /
                                                    (cfg.probe_points - 1))));
  std::size_t next_probe = 0;
  auto maybe_probe = [&](int epoch, int step) {
    while (epoch == 0 && next_probe < probe_at.size() && probe_at[next_probe] == step) {
      curves.probe_steps.push_back(step);
      curves.probe_content.push_back(probe());
      ++next_probe;
    }
  };

  std::vector<aligned_vector<S>> last_good;
  for (auto* p : gparams) last_good.push_back(p->value);
  auto diverged = [&](const std::string& what, int epoch) {
    for (std::size_t i = 0; i < gparams.size(); ++i) gparams[i]->value = last_good[i];
    throw DivergenceError("SR training diverged (" + what + ") in epoch " + std::to_string(epoch));
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    SrEpochLog log;
    log.epoch = epoch;
    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
      maybe_probe(epoch, step);
      const auto pairs = stream.take(static_cast<std::size_t>(cfg.batch_size));
      const auto [lo, hi] = detail::sr_batch<S>(pairs, 0, pairs.size());
      Tensor<S> fake = gen.forward(lo, nn::Mode::train);

      double adv = 0.0, dloss = 0.0;
      Tensor<S> adv_grad;
      if (cfg.alpha_adv > 0.0) {
        disc.zero_grad();
        auto [lreal, greal] = bce_with_logits(disc.forward(hi, nn::Mode::train), 1.0);
        disc.backward(greal);
        auto [lfake, gfake] = bce_with_logits(disc.forward(fake, nn::Mode::train), 0.0);
        disc.backward(gfake);
        dloss = lreal + lfake;
        if (!std::isfinite(dloss)) diverged("discriminator loss", epoch);
        try {
          gradient_norm(dparams);
        } catch (const DivergenceError&) {
          diverged("discriminator gradient", epoch);
        }
        dopt.step();

        auto [lg, gg] = bce_with_logits(disc.forward(fake, nn::Mode::train), 1.0);
        adv = lg;
        adv_grad = disc.backward(gg);
      }

      gen.zero_grad();
      auto content = content_loss(cfg, rep, fake, hi);
      if (!std::isfinite(content.loss) || !std::isfinite(adv)) diverged("generator loss", epoch);
      if (cfg.alpha_adv > 0.0)
        for (std::size_t i = 0; i < content.grad.size(); ++i)
          content.grad.data()[i] += static_cast<S>(cfg.alpha_adv) * adv_grad.data()[i];
      gen.backward(content.grad);
      try {
        gradient_norm(gparams);
      } catch (const DivergenceError&) {
        diverged("generator gradient", epoch);
      }
      gopt.step();

      log.content += content.loss;
      log.adversarial += adv;
      log.discriminator += dloss;
    }
    maybe_probe(epoch, cfg.steps_per_epoch);
    log.content /= cfg.steps_per_epoch;
    log.adversarial /= cfg.steps_per_epoch;
    log.discriminator /= cfg.steps_per_epoch;
    log.total = log.content + cfg.alpha_adv * log.adversarial;
    curves.epochs.push_back(log);
    for (std::size_t i = 0; i < gparams.size(); ++i) last_good[i] = gparams[i]->value;
    if (on_epoch) on_epoch(log);
  }
  return curves;
}

/// Run the generator over low-resolution patches in inference mode.
template <typename S>
std::vector<Patch<float>> super_resolve(Generator<S>& gen, const std::vector<Patch<float>>& low_res,
                                        int batch_size = 32) {
  std::vector<Patch<float>> out;
  out.reserve(low_res.size());
  for (std::size_t i = 0; i < low_res.size(); i += batch_size) {
    const std::size_t end = std::min(low_res.size(), i + static_cast<std::size_t>(batch_size));
    std::vector<const Patch<float>*> ptrs;
    for (std::size_t k = i; k < end; ++k) ptrs.push_back(&low_res[k]);
    const Tensor<S> y = gen.forward(to_batch<S, Patch<float>>(std::span<const Patch<float>* const>(ptrs)),
                                    nn::Mode::infer);
    for (int n = 0; n < y.batch(); ++n) {
      auto p = from_batch<Patch<float>>(y, n);
      for (float v : p.values)
        if (!std::isfinite(v)) throw DivergenceError("generator produced non-finite output");
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline nlohmann::json to_json(const SRConfig& c) {
  return {{"scale", c.scale},
          {"loss", to_string(c.loss)},
          {"alpha_cnt", c.alpha_cnt},
          {"alpha_adv", c.alpha_adv},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"batch_size", c.batch_size},
          {"gen_channels", c.gen_channels},
          {"gen_blocks", c.gen_blocks},
          {"disc_channels", c.disc_channels},
          {"slope", c.slope},
          {"probe_points", c.probe_points},
          {"probe_pairs", c.probe_pairs},
          {"seed", c.seed}};
}

inline SRConfig sr_config_from_json(const nlohmann::json& j, SRConfig c = {}) {
  c.scale = j.value("scale", c.scale);
  if (j.contains("loss")) c.loss = content_loss_from_string(j["loss"].get<std::string>());
  c.alpha_cnt = j.value("alpha_cnt", c.alpha_cnt);
  c.alpha_adv = j.value("alpha_adv", c.alpha_adv);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epochs = j.value("epochs", c.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.gen_channels = j.value("gen_channels", c.gen_channels);
  c.gen_blocks = j.value("gen_blocks", c.gen_blocks);
  c.disc_channels = j.value("disc_channels", c.disc_channels);
  c.slope = j.value("slope", c.slope);
  c.probe_points = j.value("probe_points", c.probe_points);
  c.probe_pairs = j.value("probe_pairs", c.probe_pairs);
  c.seed = j.value("seed", c.seed);
  return c;
}

}  // namespace atmodist
