#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"

#include "atmodist/error.hpp"
#include "atmodist/field_data.hpp"

namespace atmodist {

/// Moments of one channel before and after the signed-log compression.
struct ChannelMoments {
  double mu1 = 0.0;     // raw mean
  double sigma1 = 1.0;  // raw standard deviation
  double mu2 = 0.0;     // mean of the compressed field w
  double sigma2 = 1.0;  // standard deviation of w
  friend bool operator==(const ChannelMoments&, const ChannelMoments&) = default;
};

/// Per-channel signed-log normalisation
///   z = (x - mu1) / sigma1,  w = sign(z) log(1 + alpha |z|),  y = (w - mu2) / sigma2.
struct TransformSpec {
  double alpha = 0.2;
  std::vector<ChannelMoments> channels;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("transform alpha must be positive");
    for (const auto& m : channels)
      if (!(m.sigma1 > 0.0) || !(m.sigma2 > 0.0))
        throw ConfigError("transform standard deviations must be positive");
  }

  friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

/// Streaming mean/variance (Welford), population variance.
class RunningMoments {
 public:
  void push(double x) noexcept {
    ++n_;
    const double d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d * (x - mean_);
  }
  std::size_t count() const noexcept { return n_; }
  double mean() const noexcept { return mean_; }
  double variance() const noexcept { return n_ > 0 ? m2_ / static_cast<double>(n_) : 0.0; }
  double stddev() const noexcept { return std::sqrt(variance()); }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

inline double signed_log(double z, double alpha) noexcept {
  return std::copysign(std::log1p(alpha * std::abs(z)), z);
}

inline double signed_log_inverse(double w, double alpha) noexcept {
  return std::copysign(std::expm1(std::abs(w)) / alpha, w);
}

inline double forward(double x, const ChannelMoments& m, double alpha) noexcept {
  const double z = (x - m.mu1) / m.sigma1;
  return (signed_log(z, alpha) - m.mu2) / m.sigma2;
}

inline double inverse(double y, const ChannelMoments& m, double alpha) noexcept {
  const double w = y * m.sigma2 + m.mu2;
  return signed_log_inverse(w, alpha) * m.sigma1 + m.mu1;
}

inline double forward(double x, const TransformSpec& spec, int channel) {
  return forward(x, spec.channels.at(channel), spec.alpha);
}

inline double inverse(double y, const TransformSpec& spec, int channel) {
  return inverse(y, spec.channels.at(channel), spec.alpha);
}

/// Fit the moments over every value of every channel in the series.
inline TransformSpec fit_transform(const FieldSeries& series, double alpha = 0.2) {
  if (series.values.empty() || series.channels.empty()) throw DegenerateDataError("empty series");
  if (!(alpha > 0.0)) throw ConfigError("transform alpha must be positive");
  const int nc = series.n_channels();
  std::vector<RunningMoments> raw(nc), compressed(nc);
  for (std::size_t i = 0; i < series.values.size(); ++i) raw[i % nc].push(series.values[i]);

  TransformSpec spec;
  spec.alpha = alpha;
  spec.channels.resize(nc);
  for (int c = 0; c < nc; ++c) {
    if (!(raw[c].variance() > 0.0))
      throw DegenerateDataError("channel '" + series.channels[c] + "' has zero variance");
    spec.channels[c].mu1 = raw[c].mean();
    spec.channels[c].sigma1 = raw[c].stddev();
  }
  for (std::size_t i = 0; i < series.values.size(); ++i) {
    const auto& m = spec.channels[i % nc];
    compressed[i % nc].push(signed_log((series.values[i] - m.mu1) / m.sigma1, alpha));
  }
  for (int c = 0; c < nc; ++c) {
    if (!(compressed[c].variance() > 0.0))
      throw DegenerateDataError("channel '" + series.channels[c] + "' collapses under compression");
    spec.channels[c].mu2 = compressed[c].mean();
    spec.channels[c].sigma2 = compressed[c].stddev();
  }
  return spec;
}

/// Apply the forward mapping to a whole series (values become normalised units).
inline FieldSeries apply_forward(const FieldSeries& series, const TransformSpec& spec) {
  if (spec.channels.size() != series.channels.size())
    throw InputError("transform has " + std::to_string(spec.channels.size()) + " channels, series has " +
                     std::to_string(series.channels.size()));
  FieldSeries out = series;
  const int nc = series.n_channels();
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = static_cast<float>(forward(series.values[i], spec.channels[i % nc], spec.alpha));
  return out;
}

inline FieldSeries apply_inverse(const FieldSeries& series, const TransformSpec& spec) {
  if (spec.channels.size() != series.channels.size())
    throw InputError("transform/series channel mismatch");
  FieldSeries out = series;
  const int nc = series.n_channels();
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = static_cast<float>(inverse(series.values[i], spec.channels[i % nc], spec.alpha));
  return out;
}

inline nlohmann::json to_json(const TransformSpec& spec) {
  nlohmann::json ch = nlohmann::json::array();
  for (const auto& m : spec.channels)
    ch.push_back({{"mu1", m.mu1}, {"sigma1", m.sigma1}, {"mu2", m.mu2}, {"sigma2", m.sigma2}});
  return {{"alpha", spec.alpha}, {"channels", ch}};
}

inline TransformSpec transform_from_json(const nlohmann::json& j) {
  TransformSpec spec;
  try {
    spec.alpha = j.at("alpha").get<double>();
    for (const auto& c : j.at("channels"))
      spec.channels.push_back({c.at("mu1").get<double>(), c.at("sigma1").get<double>(),
                               c.at("mu2").get<double>(), c.at("sigma2").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad transform spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

}  // namespace atmodist
