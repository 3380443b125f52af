#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "atmodist/error.hpp"

namespace atmodist {

/// Time series of multi-channel fields on an equiangular latitude-longitude grid.
///
/// Values are stored [time, lat, lon, channel]. Latitude rows run from north
/// to south; longitude is periodic.
struct FieldSeries {
  int n_times = 0;
  int n_lat = 0;
  int n_lon = 0;
  std::vector<std::string> channels;
  double time_step_hours = 3.0;
  std::vector<double> lat_coords;
  std::vector<double> lon_coords;
  std::vector<float> values;

  int n_channels() const noexcept { return static_cast<int>(channels.size()); }
  std::size_t frame_size() const noexcept {
    return static_cast<std::size_t>(n_lat) * n_lon * channels.size();
  }
  std::size_t index(int t, int lat, int lon, int c) const noexcept {
    return ((static_cast<std::size_t>(t) * n_lat + lat) * n_lon + lon) * channels.size() + c;
  }
  float at(int t, int lat, int lon, int c) const noexcept { return values[index(t, lat, lon, c)]; }
  float& at(int t, int lat, int lon, int c) noexcept { return values[index(t, lat, lon, c)]; }
  std::span<const float> frame(int t) const noexcept {
    return std::span<const float>(values).subspan(t * frame_size(), frame_size());
  }

  /// Throws FormatError when dimensions, coordinates or values are inconsistent.
  void validate() const {
    if (n_times < 1 || n_lat < 1 || n_lon < 1 || channels.empty())
      throw FormatError("empty series dimensions");
    if (!(time_step_hours > 0.0) || !std::isfinite(time_step_hours))
      throw FormatError("time_step_hours must be positive");
    if (lat_coords.size() != static_cast<std::size_t>(n_lat) ||
        lon_coords.size() != static_cast<std::size_t>(n_lon))
      throw FormatError("coordinate vectors do not match grid size");
    if (values.size() != frame_size() * n_times)
      throw FormatError("value count " + std::to_string(values.size()) + " does not match " +
                        std::to_string(frame_size() * n_times));
    for (float v : values)
      if (!std::isfinite(v)) throw FormatError("series contains NaN/Inf values");
  }

  friend bool operator==(const FieldSeries&, const FieldSeries&) = default;
};

/// Equiangular cell-centre latitudes, north to south.
inline std::vector<double> equiangular_latitudes(int n_lat) {
  std::vector<double> lat(n_lat);
  for (int i = 0; i < n_lat; ++i) lat[i] = 90.0 - (i + 0.5) * 180.0 / n_lat;
  return lat;
}

inline std::vector<double> equiangular_longitudes(int n_lon) {
  std::vector<double> lon(n_lon);
  for (int j = 0; j < n_lon; ++j) lon[j] = j * 360.0 / n_lon;
  return lon;
}

/// Parameters of the synthetic advection-diffusion stand-in for reanalysis data.
struct SyntheticConfig {
  std::uint64_t seed = 1;
  int n_lat = 64;
  int n_lon = 128;
  int n_times = 160;
  double advection_speed = 1.0;      // cells per step, eastward
  double smoothing_scale = 3.0;      // Gaussian sigma of injected noise, cells
  double noise_injection_rate = 0.05; // fraction of variance replaced per step
  double tail_strength = 1.0;        // sinh stretch; 0 keeps Gaussian marginals
  double time_step_hours = 3.0;
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

// Separable smoothing: periodic along longitude, reflecting along latitude.
inline std::vector<double> smooth(const std::vector<double>& in, int n_lat, int n_lon,
                                  const std::vector<double>& kernel) {
  const int r = static_cast<int>(kernel.size() / 2);
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int i = 0; i < n_lat; ++i)
    for (int j = 0; j < n_lon; ++j) {
      double acc = 0.0;
      for (int d = -r; d <= r; ++d) acc += kernel[d + r] * in[i * n_lon + ((j + d) % n_lon + n_lon) % n_lon];
      tmp[i * n_lon + j] = acc;
    }
  for (int i = 0; i < n_lat; ++i)
    for (int j = 0; j < n_lon; ++j) {
      double acc = 0.0;
      for (int d = -r; d <= r; ++d) {
        int ii = i + d;
        while (ii < 0 || ii >= n_lat) ii = ii < 0 ? -ii - 1 : 2 * n_lat - ii - 1;
        acc += kernel[d + r] * tmp[ii * n_lon + j];
      }
      out[i * n_lon + j] = acc;
    }
  return out;
}

// Smoothed white noise rescaled to unit variance.
inline std::vector<double> smooth_noise(std::mt19937_64& rng, int n_lat, int n_lon,
                                        const std::vector<double>& kernel) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> white(static_cast<std::size_t>(n_lat) * n_lon);
  for (auto& v : white) v = normal(rng);
  auto s = smooth(white, n_lat, n_lon, kernel);
  double k2 = 0.0;
  for (double w : kernel) k2 += w * w;
  const double scale = 1.0 / k2;  // 1 / sqrt((sum w^2)^2)
  for (auto& v : s) v *= scale;
  return s;
}

// Periodic zonal shift by a possibly fractional number of cells.
inline std::vector<double> advect(const std::vector<double>& in, int n_lat, int n_lon, double shift) {
  if (shift == 0.0) return in;
  const double fl = std::floor(shift);
  const double frac = shift - fl;
  const int whole = static_cast<int>(fl);
  std::vector<double> out(in.size());
  for (int i = 0; i < n_lat; ++i)
    for (int j = 0; j < n_lon; ++j) {
      const int j0 = ((j - whole) % n_lon + n_lon) % n_lon;
      const int j1 = ((j0 - 1) % n_lon + n_lon) % n_lon;
      out[i * n_lon + j] = (1.0 - frac) * in[i * n_lon + j0] + frac * in[i * n_lon + j1];
    }
  return out;
}

}  // namespace detail

inline void validate(const SyntheticConfig& cfg) {
  if (cfg.n_lat < 32 || cfg.n_lon < 32)
    throw ConfigError("synthetic grid must be at least 32x32, got " + std::to_string(cfg.n_lat) + "x" +
                      std::to_string(cfg.n_lon));
  if (cfg.n_times < 2) throw ConfigError("synthetic series needs at least 2 time steps");
  if (!(cfg.advection_speed >= 0.0) || !std::isfinite(cfg.advection_speed))
    throw ConfigError("advection_speed must be finite and non-negative");
  if (!(cfg.smoothing_scale >= 0.0)) throw ConfigError("smoothing_scale must be non-negative");
  if (!(cfg.noise_injection_rate >= 0.0 && cfg.noise_injection_rate <= 1.0))
    throw ConfigError("noise_injection_rate must lie in [0, 1]");
  if (!(cfg.tail_strength >= 0.0)) throw ConfigError("tail_strength must be non-negative");
  if (!(cfg.time_step_hours > 0.0)) throw ConfigError("time_step_hours must be positive");
}

/// Two-channel series of advected, Gaussian-smoothed noise with fresh noise
/// injected every step. Nearby frames are more correlated than distant ones;
/// a sinh stretch gives the marginals heavy tails.
inline FieldSeries generate_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  FieldSeries series;
  series.n_times = cfg.n_times;
  series.n_lat = cfg.n_lat;
  series.n_lon = cfg.n_lon;
  series.channels = {"vorticity", "divergence"};
  series.time_step_hours = cfg.time_step_hours;
  series.lat_coords = equiangular_latitudes(cfg.n_lat);
  series.lon_coords = equiangular_longitudes(cfg.n_lon);
  series.values.assign(series.frame_size() * cfg.n_times, 0.0f);

  const auto kernel = detail::gaussian_kernel(cfg.smoothing_scale);
  const double keep = std::sqrt(1.0 - cfg.noise_injection_rate);
  const double inject = std::sqrt(cfg.noise_injection_rate);
  const std::array<double, 2> amplitude{1.0, 0.5};
  const int nc = series.n_channels();

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::vector<double>> state(nc);
  for (int c = 0; c < nc; ++c) state[c] = detail::smooth_noise(rng, cfg.n_lat, cfg.n_lon, kernel);

  for (int t = 0; t < cfg.n_times; ++t) {
    if (t > 0) {
      for (int c = 0; c < nc; ++c) {
        auto moved = detail::advect(state[c], cfg.n_lat, cfg.n_lon, cfg.advection_speed);
        if (cfg.noise_injection_rate > 0.0) {
          const auto fresh = detail::smooth_noise(rng, cfg.n_lat, cfg.n_lon, kernel);
          for (std::size_t k = 0; k < moved.size(); ++k) moved[k] = keep * moved[k] + inject * fresh[k];
        }
        state[c] = std::move(moved);
      }
    }
    for (int i = 0; i < cfg.n_lat; ++i)
      for (int j = 0; j < cfg.n_lon; ++j)
        for (int c = 0; c < nc; ++c) {
          const double s = state[c][i * cfg.n_lon + j];
          const double k = cfg.tail_strength;
          const double x = k > 0.0 ? std::sinh(k * s) / k : s;
          series.at(t, i, j, c) = static_cast<float>(amplitude[c] * x);
        }
  }
  return series;
}

/// Metadata sidecar path for a value file.
inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

inline nlohmann::json series_metadata(const FieldSeries& s) {
  return {{"format", "atmodist-field"},
          {"version", 1},
          {"dtype", "float32-le"},
          {"order", "time,lat,lon,channel"},
          {"n_times", s.n_times},
          {"n_lat", s.n_lat},
          {"n_lon", s.n_lon},
          {"channels", s.channels},
          {"time_step_hours", s.time_step_hours},
          {"lat_coords", s.lat_coords},
          {"lon_coords", s.lon_coords}};
}

/// Write raw little-endian float32 values to `path` and metadata to `path`.json.
inline void save_series(const FieldSeries& series, const std::filesystem::path& path) {
  series.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream bin(path, std::ios::binary);
  if (!bin) throw FormatError("cannot open " + path.string() + " for writing");
  std::vector<unsigned char> bytes(series.values.size() * 4);
  for (std::size_t i = 0; i < series.values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(series.values[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  bin.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!bin) throw FormatError("failed writing " + path.string());
  std::ofstream meta(sidecar_path(path));
  if (!meta) throw FormatError("cannot open sidecar for " + path.string());
  meta << series_metadata(series).dump(2) << '\n';
}

inline FieldSeries load_series(const std::filesystem::path& path) {
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side)) throw FormatError("missing sidecar " + side.string());
  nlohmann::json meta;
  try {
    std::ifstream in(side);
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("unreadable sidecar " + side.string() + ": " + e.what());
  }
  FieldSeries s;
  try {
    if (meta.value("dtype", "float32-le") != "float32-le")
      throw FormatError("unsupported dtype " + meta["dtype"].get<std::string>());
    s.n_times = meta.at("n_times").get<int>();
    s.n_lat = meta.at("n_lat").get<int>();
    s.n_lon = meta.at("n_lon").get<int>();
    s.channels = meta.at("channels").get<std::vector<std::string>>();
    s.time_step_hours = meta.at("time_step_hours").get<double>();
    s.lat_coords = meta.at("lat_coords").get<std::vector<double>>();
    s.lon_coords = meta.at("lon_coords").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad sidecar " + side.string() + ": " + e.what());
  }
  if (s.n_times < 1 || s.n_lat < 1 || s.n_lon < 1 || s.channels.empty())
    throw FormatError("sidecar declares empty dimensions");

  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const std::size_t expected = s.frame_size() * s.n_times * 4;
  if (bytes.size() != expected)
    throw FormatError(path.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(bytes.size()));
  s.values.resize(expected / 4);
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    s.values[i] = std::bit_cast<float>(u);
  }
  s.validate();
  return s;
}

/// Contiguous time sub-range [begin, end) of a series.
inline FieldSeries slice_times(const FieldSeries& s, int begin, int end) {
  if (begin < 0 || end > s.n_times || begin >= end)
    throw ConfigError("invalid time slice [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  FieldSeries out = s;
  out.n_times = end - begin;
  out.values.assign(s.values.begin() + begin * s.frame_size(), s.values.begin() + end * s.frame_size());
  return out;
}

inline nlohmann::json to_json(const SyntheticConfig& c) {
  return {{"seed", c.seed},
          {"n_lat", c.n_lat},
          {"n_lon", c.n_lon},
          {"n_times", c.n_times},
          {"advection_speed", c.advection_speed},
          {"smoothing_scale", c.smoothing_scale},
          {"noise_injection_rate", c.noise_injection_rate},
          {"tail_strength", c.tail_strength},
          {"time_step_hours", c.time_step_hours}};
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j, SyntheticConfig c = {}) {
  c.seed = j.value("seed", c.seed);
  c.n_lat = j.value("n_lat", c.n_lat);
  c.n_lon = j.value("n_lon", c.n_lon);
  c.n_times = j.value("n_times", c.n_times);
  c.advection_speed = j.value("advection_speed", c.advection_speed);
  c.smoothing_scale = j.value("smoothing_scale", c.smoothing_scale);
  c.noise_injection_rate = j.value("noise_injection_rate", c.noise_injection_rate);
  c.tail_strength = j.value("tail_strength", c.tail_strength);
  c.time_step_hours = j.value("time_step_hours", c.time_step_hours);
  return c;
}

}  // namespace atmodist
