#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "atmodist/error.hpp"
#include "atmodist/losses.hpp"
#include "atmodist/optim.hpp"
#include "atmodist/repnet.hpp"
#include "atmodist/sampler.hpp"

namespace atmodist {

struct TrainConfig {
  double momentum = 0.9;
  double learning_rate = 1e-1;
  double lr_min = 1e-5;
  double lr_decay = 0.1;
  int plateau_patience = 3;
  double plateau_threshold = 1e-4;
  double clip_norm = 5.0;
  double weight_decay = 1e-4;
  int batch_size = 64;
  int epochs = 30;              // full-stream epochs after the curriculum phase
  int batches_per_epoch = 500;  // fresh batches per full-stream epoch
  int eval_pairs = 2048;
  int curriculum_epochs = 20;
  int curriculum_batches = 2000;
  std::uint64_t seed = 3;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lr_min > 0.0 && c.lr_min <= c.learning_rate)) throw ConfigError("require 0 < lr_min <= learning_rate");
  if (!(c.clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(c.lr_decay > 0.0 && c.lr_decay < 1.0)) throw ConfigError("lr_decay must lie in (0, 1)");
  if (c.batch_size < 1 || c.epochs < 0 || c.batches_per_epoch < 1 || c.eval_pairs < 1 || c.curriculum_epochs < 0 ||
      c.curriculum_batches < 1 || c.plateau_patience < 1)
    throw ConfigError("training counts must be positive");
}

struct EpochLog {
  int epoch = 0;
  bool curriculum = false;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_loss = 0.0;
  double eval_acc = 0.0;
  double lr = 0.0;
  std::uint64_t data_digest = 0;  // fingerprint of the batches fed this epoch
  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  int best_epoch = -1;
  double best_eval_loss = std::numeric_limits<double>::infinity();
  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

inline void write_csv(const TrainLog& log, std::ostream& os) {
  os << "epoch,train_loss,train_acc,eval_loss,eval_acc,lr\n";
  os << std::setprecision(10);
  for (const auto& e : log.epochs)
    os << e.epoch << ',' << e.train_loss << ',' << e.train_acc << ',' << e.eval_loss << ',' << e.eval_acc << ','
       << e.lr << '\n';
}

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t digest(std::uint64_t h, const std::vector<PatchPairSample>& batch) {
  for (const auto& s : batch) {
    h = fnv1a(h, &s.lag_class, sizeof(s.lag_class));
    h = fnv1a(h, s.patch_a.values.data(), s.patch_a.values.size() * sizeof(float));
    h = fnv1a(h, s.patch_b.values.data(), s.patch_b.values.size() * sizeof(float));
  }
  return h;
}

template <typename S>
struct PairBatch {
  Tensor<S> a, b;
  std::vector<int> labels;
};

template <typename S>
PairBatch<S> make_batch(const std::vector<PatchPairSample>& samples, std::size_t begin, std::size_t end) {
  std::vector<const Patch<float>*> pa, pb;
  PairBatch<S> out;
  for (std::size_t i = begin; i < end; ++i) {
    pa.push_back(&samples[i].patch_a);
    pb.push_back(&samples[i].patch_b);
    out.labels.push_back(samples[i].lag_class);
  }
  out.a = to_batch<S, Patch<float>>(std::span<const Patch<float>* const>(pa));
  out.b = to_batch<S, Patch<float>>(std::span<const Patch<float>* const>(pb));
  return out;
}

}  // namespace detail

/// Parameter values plus running statistics of a model.
template <typename S>
struct ModelSnapshot {
  std::vector<aligned_vector<S>> params;
  std::vector<aligned_vector<S>> buffers;
};

template <typename S>
ModelSnapshot<S> snapshot(RepresentationModel<S>& model) {
  ModelSnapshot<S> s;
  for (auto* p : model.params()) s.params.push_back(p->value);
  for (auto* b : model.buffers()) s.buffers.push_back(*b);
  return s;
}

template <typename S>
void restore(RepresentationModel<S>& model, const ModelSnapshot<S>& s) {
  auto params = model.params();
  auto buffers = model.buffers();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.params[i];
  for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i] = s.buffers[i];
}

/// Mean loss and accuracy in inference mode over a fixed set of pairs.
template <typename S>
std::pair<double, double> evaluate(RepresentationModel<S>& model, const std::vector<PatchPairSample>& pairs,
                                   int batch_size) {
  double loss = 0.0;
  int correct = 0;
  for (std::size_t i = 0; i < pairs.size(); i += batch_size) {
    const std::size_t end = std::min(pairs.size(), i + static_cast<std::size_t>(batch_size));
    auto batch = detail::make_batch<S>(pairs, i, end);
    auto ce = cross_entropy(model.forward_pairs(batch.a, batch.b, nn::Mode::infer), std::span<const int>(batch.labels));
    loss += ce.loss * static_cast<double>(end - i);
    correct += ce.correct;
  }
  return {loss / pairs.size(), static_cast<double>(correct) / pairs.size()};
}

/// Temporal-distance classification training with curriculum pre-training.
///
/// Phase one repeats a fixed subset of `curriculum_batches` batches for
/// `curriculum_epochs` epochs. The learning rate and momentum buffers are then
/// reset and training continues on fresh batches from the stream. SGD with
/// momentum, decoupled-from-bias weight decay, global-norm clipping and a
/// plateau schedule on the eval loss are used throughout. On return the model
/// holds the parameters of the epoch with the lowest eval loss.
template <typename S>
TrainLog train_pretext(RepresentationModel<S>& model, PairSampler& train_stream, PairSampler& eval_stream,
                       const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  validate(cfg);
  auto params = model.params();
  SgdMomentum<S> opt(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
  PlateauScheduler sched(cfg.learning_rate, cfg.lr_min, cfg.lr_decay, cfg.plateau_patience, cfg.plateau_threshold);
  const auto eval_set = eval_stream.take(cfg.eval_pairs);

  TrainLog log;
  ModelSnapshot<S> best = snapshot(model);
  int epoch_index = 0;

  auto run_epoch = [&](const std::vector<PatchPairSample>& data, bool curriculum) {
    double loss_sum = 0.0;
    int correct = 0;
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < data.size(); i += cfg.batch_size) {
      const std::size_t end = std::min(data.size(), i + static_cast<std::size_t>(cfg.batch_size));
      auto batch = detail::make_batch<S>(data, i, end);
      model.zero_grad();
      auto ce = cross_entropy(model.forward_pairs(batch.a, batch.b, nn::Mode::train),
                              std::span<const int>(batch.labels));
      if (!std::isfinite(ce.loss)) throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch_index));
      model.backward_pairs(ce.grad);
      clip_gradient(params, cfg.clip_norm);
      opt.step();
      loss_sum += ce.loss * static_cast<double>(end - i);
      correct += ce.correct;
    }
    if (curriculum) h = detail::digest(h, data);
    EpochLog e;
    e.epoch = epoch_index++;
    e.curriculum = curriculum;
    e.train_loss = loss_sum / data.size();
    e.train_acc = static_cast<double>(correct) / data.size();
    e.lr = opt.learning_rate();
    e.data_digest = curriculum ? h : 0;
    std::tie(e.eval_loss, e.eval_acc) = evaluate(model, eval_set, cfg.batch_size);
    if (!std::isfinite(e.eval_loss)) throw DivergenceError("non-finite eval loss at epoch " + std::to_string(e.epoch));
    if (e.eval_loss < log.best_eval_loss) {
      log.best_eval_loss = e.eval_loss;
      log.best_epoch = e.epoch;
      best = snapshot(model);
    }
    opt.set_learning_rate(sched.step(e.eval_loss));
    log.epochs.push_back(e);
    if (on_epoch) on_epoch(e);
  };

  try {
    if (cfg.curriculum_epochs > 0) {
      const auto subset = train_stream.take(static_cast<std::size_t>(cfg.curriculum_batches) * cfg.batch_size);
      for (int ep = 0; ep < cfg.curriculum_epochs; ++ep) run_epoch(subset, true);
      sched.reset(cfg.learning_rate);
      opt.set_learning_rate(cfg.learning_rate);
      opt.reset_state();
    }
    for (int ep = 0; ep < cfg.epochs; ++ep)
      run_epoch(train_stream.take(static_cast<std::size_t>(cfg.batches_per_epoch) * cfg.batch_size), false);
  } catch (const DivergenceError&) {
    restore(model, best);
    throw;
  }
  restore(model, best);
  return log;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"momentum", c.momentum},
          {"learning_rate", c.learning_rate},
          {"lr_min", c.lr_min},
          {"lr_decay", c.lr_decay},
          {"plateau_patience", c.plateau_patience},
          {"plateau_threshold", c.plateau_threshold},
          {"clip_norm", c.clip_norm},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"batches_per_epoch", c.batches_per_epoch},
          {"eval_pairs", c.eval_pairs},
          {"curriculum_epochs", c.curriculum_epochs},
          {"curriculum_batches", c.curriculum_batches},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.momentum = j.value("momentum", c.momentum);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.plateau_threshold = j.value("plateau_threshold", c.plateau_threshold);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.batches_per_epoch = j.value("batches_per_epoch", c.batches_per_epoch);
  c.eval_pairs = j.value("eval_pairs", c.eval_pairs);
  c.curriculum_epochs = j.value("curriculum_epochs", c.curriculum_epochs);
  c.curriculum_batches = j.value("curriculum_batches", c.curriculum_batches);
  c.seed = j.value("seed", c.seed);
  return c;
}

}  // namespace atmodist
