#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "atmodist/error.hpp"
#include "atmodist/field_data.hpp"
#include "atmodist/tensor.hpp"
#include "atmodist/transform.hpp"

namespace atmodist {

struct SamplerConfig {
  int patch_size = 32;
  int pairs_per_timestep = 21;
  int max_lag_steps = 8;  // number of lag classes N
  double full_weight_band = 60.0;
  double fade_limit = 82.5;
  std::uint64_t seed = 11;
  int sr_scale = 4;
  int sr_patches_per_timestep = 180;
};

inline void validate(const SamplerConfig& cfg) {
  if (cfg.patch_size < 1) throw ConfigError("patch_size must be positive");
  if (cfg.pairs_per_timestep < 1) throw ConfigError("pairs_per_timestep must be positive");
  if (cfg.max_lag_steps < 1) throw ConfigError("max_lag_steps must be at least 1");
  if (!(cfg.full_weight_band >= 0.0 && cfg.full_weight_band < 90.0))
    throw ConfigError("full_weight_band must lie in [0, 90)");
  if (!(cfg.fade_limit > cfg.full_weight_band && cfg.fade_limit <= 90.0))
    throw ConfigError("fade_limit must exceed the band edge and not exceed 90");
  if (cfg.sr_scale < 1) throw ConfigError("sr_scale must be positive");
}

/// Acceptance probability of a patch whose centre sits at `lat_center` degrees:
/// one inside the band, a linear fade to zero at the fade limit, zero beyond.
inline double latitude_weight(double lat_center, const SamplerConfig& cfg) {
  const double a = std::abs(lat_center);
  if (a <= cfg.full_weight_band) return 1.0;
  if (a >= cfg.fade_limit) return 0.0;
  return (cfg.fade_limit - a) / (cfg.fade_limit - cfg.full_weight_band);
}

/// Two co-located patches `lag_class + 1` time steps apart, in transformed units.
struct PatchPairSample {
  Patch<float> patch_a;
  Patch<float> patch_b;
  int lag_class = 0;
  int time_a = 0;
  int time_b = 0;
  int lat_origin = 0;  // first row of the window
  int lon_origin = 0;  // first column, may wrap
  double lat_center = 0.0;
};

/// Cut a window starting at (row, col) at time t; longitude wraps.
inline Patch<float> extract_patch(const FieldSeries& s, int t, int row, int col, int size) {
  Patch<float> p(size, size, s.n_channels());
  for (int y = 0; y < size; ++y) {
    const int i = row + y;
    for (int x = 0; x < size; ++x) {
      const int j = (col + x) % s.n_lon;
      for (int c = 0; c < s.n_channels(); ++c) p.at(y, x, c) = s.at(t, i, j, c);
    }
  }
  return p;
}

/// Mean over non-overlapping factor x factor blocks.
inline Patch<float> average_pool(const Patch<float>& p, int factor) {
  if (factor < 1 || p.height % factor != 0 || p.width % factor != 0)
    throw ConfigError("patch " + std::to_string(p.height) + "x" + std::to_string(p.width) +
                      " is not divisible by scale factor " + std::to_string(factor));
  Patch<float> out(p.height / factor, p.width / factor, p.channels);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < p.channels; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += p.at(y * factor + dy, x * factor + dx, c);
        out.at(y, x, c) = static_cast<float>(acc * inv);
      }
  return out;
}

namespace detail {

// Shared machinery: transformed series, time range and latitude rejection sampling.
class WindowSampler {
 public:
  WindowSampler(const FieldSeries& series, const TransformSpec& spec, const SamplerConfig& cfg, int t_begin,
                int t_end, std::uint64_t seed)
      : cfg_(cfg), rng_(seed) {
    validate(cfg);
    series.validate();
    if (cfg.patch_size > series.n_lat || cfg.patch_size > series.n_lon)
      throw ConfigError("patch_size " + std::to_string(cfg.patch_size) + " exceeds grid " +
                        std::to_string(series.n_lat) + "x" + std::to_string(series.n_lon));
    if (t_begin < 0 || t_end > series.n_times || t_begin >= t_end)
      throw ConfigError("invalid sampling time range");
    data_ = apply_forward(series, spec);
    t_begin_ = t_begin;
    t_end_ = t_end;
    max_weight_ = 0.0;
    for (int r = 0; r <= series.n_lat - cfg.patch_size; ++r)
      max_weight_ = std::max(max_weight_, latitude_weight(center_latitude(r), cfg));
    if (max_weight_ <= 0.0) throw ConfigError("no patch origin has positive latitude weight");
  }

  double center_latitude(int row) const {
    return 0.5 * (data_.lat_coords[row] + data_.lat_coords[row + cfg_.patch_size - 1]);
  }

  // Row origin accepted with probability latitude_weight(centre).
  int draw_row() {
    std::uniform_int_distribution<int> row(0, data_.n_lat - cfg_.patch_size);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (;;) {
      const int r = row(rng_);
      if (u(rng_) < latitude_weight(center_latitude(r), cfg_)) return r;
    }
  }

  int draw_col() { return std::uniform_int_distribution<int>(0, data_.n_lon - 1)(rng_); }

  const FieldSeries& data() const noexcept { return data_; }
  const SamplerConfig& config() const noexcept { return cfg_; }
  std::mt19937_64& rng() noexcept { return rng_; }
  int t_begin() const noexcept { return t_begin_; }
  int t_end() const noexcept { return t_end_; }

 private:
  SamplerConfig cfg_;
  FieldSeries data_;
  std::mt19937_64 rng_;
  int t_begin_ = 0, t_end_ = 0;
  double max_weight_ = 0.0;
};

}  // namespace detail

/// Endless stream of lag-labelled patch pairs from times [t_begin, t_end).
///
/// Anchor times are visited in shuffled order; each anchor yields
/// `pairs_per_timestep` pairs with lags uniform on 1..N. The earlier/later
/// patch is assigned to slot a or b at random.
class PairSampler {
 public:
  PairSampler(const FieldSeries& series, const TransformSpec& spec, const SamplerConfig& cfg, int t_begin,
              int t_end)
      : PairSampler(series, spec, cfg, t_begin, t_end, cfg.seed) {}

  PairSampler(const FieldSeries& series, const TransformSpec& spec, const SamplerConfig& cfg, int t_begin,
              int t_end, std::uint64_t seed)
      : window_(series, spec, cfg, t_begin, t_end, seed) {
    if (t_end - t_begin <= cfg.max_lag_steps)
      throw ConfigError("time range of " + std::to_string(t_end - t_begin) +
                        " steps is not longer than max_lag_steps " + std::to_string(cfg.max_lag_steps));
    for (int t = t_begin; t + cfg.max_lag_steps < t_end; ++t) anchors_.push_back(t);
  }

  PatchPairSample next() {
    const auto& cfg = window_.config();
    if (emitted_ == 0) advance_anchor();
    emitted_ = (emitted_ + 1) % cfg.pairs_per_timestep;

    auto& rng = window_.rng();
    const int lag = std::uniform_int_distribution<int>(1, cfg.max_lag_steps)(rng);
    const int row = window_.draw_row();
    const int col = window_.draw_col();
    const bool swap = std::uniform_int_distribution<int>(0, 1)(rng) == 1;

    PatchPairSample s;
    s.time_a = anchor_;
    s.time_b = anchor_ + lag;
    if (swap) std::swap(s.time_a, s.time_b);
    s.lag_class = lag - 1;
    s.lat_origin = row;
    s.lon_origin = col;
    s.lat_center = window_.center_latitude(row);
    s.patch_a = extract_patch(window_.data(), s.time_a, row, col, cfg.patch_size);
    s.patch_b = extract_patch(window_.data(), s.time_b, row, col, cfg.patch_size);
    return s;
  }

  std::vector<PatchPairSample> take(std::size_t n) {
    std::vector<PatchPairSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(next());
    return out;
  }

  const FieldSeries& transformed() const noexcept { return window_.data(); }
  double center_latitude(int row) const { return window_.center_latitude(row); }

 private:
  void advance_anchor() {
    if (cursor_ == order_.size()) {
      order_ = anchors_;
      std::shuffle(order_.begin(), order_.end(), window_.rng());
      cursor_ = 0;
    }
    anchor_ = order_[cursor_++];
  }

  detail::WindowSampler window_;
  std::vector<int> anchors_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
  int anchor_ = 0;
  int emitted_ = 0;
};

/// One high-resolution patch and its average-pooled low-resolution version.
struct SrPair {
  Patch<float> low_res;
  Patch<float> high_res;
  int time = 0;
  int lat_origin = 0;
  int lon_origin = 0;
};

/// Endless stream of super-resolution training pairs drawn with the same
/// latitude weighting as the pretext sampler.
class SrPairSampler {
 public:
  SrPairSampler(const FieldSeries& series, const TransformSpec& spec, const SamplerConfig& cfg, int t_begin,
                int t_end, std::uint64_t seed)
      : window_(series, spec, cfg, t_begin, t_end, seed) {
    if (cfg.patch_size % cfg.sr_scale != 0)
      throw ConfigError("patch_size " + std::to_string(cfg.patch_size) + " is not divisible by scale " +
                        std::to_string(cfg.sr_scale));
    if (cfg.sr_patches_per_timestep < 1) throw ConfigError("sr_patches_per_timestep must be positive");
    for (int t = t_begin; t < t_end; ++t) times_.push_back(t);
  }

  SrPair next() {
    const auto& cfg = window_.config();
    if (emitted_ == 0) {
      if (cursor_ == order_.size()) {
        order_ = times_;
        std::shuffle(order_.begin(), order_.end(), window_.rng());
        cursor_ = 0;
      }
      time_ = order_[cursor_++];
    }
    emitted_ = (emitted_ + 1) % cfg.sr_patches_per_timestep;
    SrPair p;
    p.time = time_;
    p.lat_origin = window_.draw_row();
    p.lon_origin = window_.draw_col();
    p.high_res = extract_patch(window_.data(), time_, p.lat_origin, p.lon_origin, cfg.patch_size);
    p.low_res = average_pool(p.high_res, cfg.sr_scale);
    return p;
  }

  std::vector<SrPair> take(std::size_t n) {
    std::vector<SrPair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(next());
    return out;
  }

 private:
  detail::WindowSampler window_;
  std::vector<int> times_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
  int time_ = 0;
  int emitted_ = 0;
};

/// Pack patches as a field-format "series" (one patch per time index).
inline FieldSeries patches_to_series(const std::vector<Patch<float>>& patches,
                                     std::vector<std::string> channel_names) {
  if (patches.empty()) throw InputError("no patches to pack");
  const auto& p0 = patches.front();
  if (channel_names.size() != static_cast<std::size_t>(p0.channels))
    throw InputError("channel name count does not match patch channels");
  FieldSeries s;
  s.n_times = static_cast<int>(patches.size());
  s.n_lat = p0.height;
  s.n_lon = p0.width;
  s.channels = std::move(channel_names);
  s.time_step_hours = 1.0;
  s.lat_coords.resize(p0.height);
  s.lon_coords.resize(p0.width);
  for (int i = 0; i < p0.height; ++i) s.lat_coords[i] = i;
  for (int j = 0; j < p0.width; ++j) s.lon_coords[j] = j;
  s.values.reserve(p0.values.size() * patches.size());
  for (const auto& p : patches) {
    if (!p.same_shape(p0)) throw InputError("patches of different shapes");
    s.values.insert(s.values.end(), p.values.begin(), p.values.end());
  }
  return s;
}

inline std::vector<Patch<float>> series_to_patches(const FieldSeries& s) {
  std::vector<Patch<float>> out;
  out.reserve(s.n_times);
  for (int t = 0; t < s.n_times; ++t) {
    Patch<float> p(s.n_lat, s.n_lon, s.n_channels());
    const auto f = s.frame(t);
    std::copy(f.begin(), f.end(), p.values.begin());
    out.push_back(std::move(p));
  }
  return out;
}

/// Cache pairs in the field format: patch_a and patch_b interleaved along time,
/// labels and anchors in the sidecar under "pairs".
inline void save_pairs(const std::vector<PatchPairSample>& pairs, std::vector<std::string> channel_names,
                       const std::filesystem::path& path) {
  std::vector<Patch<float>> patches;
  nlohmann::json meta = nlohmann::json::array();
  for (const auto& p : pairs) {
    patches.push_back(p.patch_a);
    patches.push_back(p.patch_b);
    meta.push_back({{"lag_class", p.lag_class},
                    {"time_a", p.time_a},
                    {"time_b", p.time_b},
                    {"lat_origin", p.lat_origin},
                    {"lon_origin", p.lon_origin},
                    {"lat_center", p.lat_center}});
  }
  save_series(patches_to_series(patches, std::move(channel_names)), path);
  auto side = series_metadata(load_series(path));
  side["kind"] = "patch-pairs";
  side["pairs"] = meta;
  std::ofstream(sidecar_path(path)) << side.dump(2) << '\n';
}

inline std::vector<PatchPairSample> load_pairs(const std::filesystem::path& path) {
  const auto s = load_series(path);
  nlohmann::json side;
  {
    std::ifstream in(sidecar_path(path));
    side = nlohmann::json::parse(in);
  }
  if (!side.contains("pairs")) throw FormatError("sidecar has no pair metadata");
  const auto& meta = side["pairs"];
  if (meta.size() * 2 != static_cast<std::size_t>(s.n_times))
    throw FormatError("pair metadata count does not match patch count");
  const auto patches = series_to_patches(s);
  std::vector<PatchPairSample> out;
  for (std::size_t i = 0; i < meta.size(); ++i) {
    PatchPairSample p;
    p.patch_a = patches[2 * i];
    p.patch_b = patches[2 * i + 1];
    p.lag_class = meta[i].at("lag_class").get<int>();
    p.time_a = meta[i].at("time_a").get<int>();
    p.time_b = meta[i].at("time_b").get<int>();
    p.lat_origin = meta[i].at("lat_origin").get<int>();
    p.lon_origin = meta[i].at("lon_origin").get<int>();
    p.lat_center = meta[i].at("lat_center").get<double>();
    out.push_back(std::move(p));
  }
  return out;
}

inline nlohmann::json to_json(const SamplerConfig& c) {
  return {{"patch_size", c.patch_size},
          {"pairs_per_timestep", c.pairs_per_timestep},
          {"max_lag_steps", c.max_lag_steps},
          {"full_weight_band", c.full_weight_band},
          {"fade_limit", c.fade_limit},
          {"seed", c.seed},
          {"sr_scale", c.sr_scale},
          {"sr_patches_per_timestep", c.sr_patches_per_timestep}};
}

inline SamplerConfig sampler_config_from_json(const nlohmann::json& j, SamplerConfig c = {}) {
  c.patch_size = j.value("patch_size", c.patch_size);
  c.pairs_per_timestep = j.value("pairs_per_timestep", c.pairs_per_timestep);
  c.max_lag_steps = j.value("max_lag_steps", c.max_lag_steps);
  c.full_weight_band = j.value("full_weight_band", c.full_weight_band);
  c.fade_limit = j.value("fade_limit", c.fade_limit);
  c.seed = j.value("seed", c.seed);
  c.sr_scale = j.value("sr_scale", c.sr_scale);
  c.sr_patches_per_timestep = j.value("sr_patches_per_timestep", c.sr_patches_per_timestep);
  return c;
}

}  // namespace atmodist
