#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "atmodist/error.hpp"
#include "atmodist/tensor.hpp"

namespace atmodist {

/// Numerically stable log(sum(exp(x))).
template <typename S>
double log_sum_exp(std::span<const S> x) {
  const double m = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (S v : x) s += std::exp(static_cast<double>(v) - m);
  return m + std::log(s);
}

/// Negative log-likelihood of `label` under softmax(logits).
template <typename S>
double cross_entropy(std::span<const S> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw InputError("label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) + ")");
  return log_sum_exp(logits) - static_cast<double>(logits[label]);
}

template <typename S>
std::vector<double> softmax(std::span<const S> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

template <typename S>
struct ClassificationLoss {
  double loss = 0.0;   // mean over the batch
  Tensor<S> grad;      // d loss / d logits
  int correct = 0;     // argmax hits
};

/// Mean softmax cross-entropy over a [classes, batch, 1, 1] logit tensor.
template <typename S>
ClassificationLoss<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  const int k = logits.channels(), b = logits.batch();
  if (static_cast<int>(labels.size()) != b) throw InputError("label count does not match batch");
  ClassificationLoss<S> out;
  out.grad = Tensor<S>(k, b, 1, 1);
  std::vector<S> col(k);
  for (int n = 0; n < b; ++n) {
    for (int c = 0; c < k; ++c) col[c] = logits(c, n, 0, 0);
    const int label = labels[n];
    out.loss += cross_entropy<S>(col, label);
    const auto p = softmax<S>(col);
    const int pred = static_cast<int>(std::max_element(col.begin(), col.end()) - col.begin());
    out.correct += pred == label;
    for (int c = 0; c < k; ++c) out.grad(c, n, 0, 0) = static_cast<S>((p[c] - (c == label ? 1.0 : 0.0)) / b);
  }
  out.loss /= b;
  return out;
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Mean binary cross-entropy of sigmoid(logits) against a constant target in {0, 1}.
template <typename S>
std::pair<double, Tensor<S>> bce_with_logits(const Tensor<S>& logits, double target) {
  Tensor<S> grad(logits.channels(), logits.batch(), logits.height(), logits.width());
  const double n = static_cast<double>(logits.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits.data()[i];
    loss += target * softplus(-x) + (1.0 - target) * softplus(x);
    grad.data()[i] = static_cast<S>((sigmoid(x) - target) / n);
  }
  return {loss / n, std::move(grad)};
}

/// Mean squared error and its gradient with respect to `pred`.
template <typename S>
std::pair<double, Tensor<S>> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  if (!pred.same_shape(target))
    throw InputError("mse shapes differ: " + pred.shape_string() + " vs " + target.shape_string());
  Tensor<S> grad(pred.channels(), pred.batch(), pred.height(), pred.width());
  const double n = static_cast<double>(pred.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred.data()[i]) - target.data()[i];
    loss += d * d;
    grad.data()[i] = static_cast<S>(2.0 * d / n);
  }
  return {loss / n, std::move(grad)};
}

}  // namespace atmodist
