#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "atmodist/error.hpp"
#include "atmodist/tensor.hpp"

namespace atmodist {

/// Radially binned power spectrum; bin k collects wavevectors with round(|k|) == k.
struct SpectrumCurve {
  std::vector<int> wavenumber;
  std::vector<double> energy;      // mean power per wavevector in the bin
  std::vector<std::size_t> count;  // wavevectors per bin (per patch and channel)
};

namespace detail {

inline void check_patch_set(const std::vector<Patch<float>>& patches, const char* what) {
  if (patches.empty()) throw InputError(std::string(what) + ": empty patch set");
  for (const auto& p : patches)
    if (!p.same_shape(patches.front())) throw InputError(std::string(what) + ": patches differ in shape");
}

/// Signed frequency index of DFT bin i on a length-n axis.
inline int signed_frequency(int i, int n) { return i <= n / 2 ? i : i - n; }

/// 1-D DFT twiddle table, w[j*k mod n] = exp(-2 pi i j k / n).
inline std::vector<std::complex<double>> twiddles(int n) {
  std::vector<std::complex<double>> w(n);
  for (int k = 0; k < n; ++k) w[k] = std::polar(1.0, -2.0 * std::numbers::pi * k / n);
  return w;
}

}  // namespace detail

/// Isotropic energy spectrum averaged over patches and channels.
///
/// Each channel's 2-D DFT power |F(kx, ky)|^2 / (H W)^2 is binned by the
/// rounded wavevector magnitude. Bin 0 is the squared patch mean, so by
/// Parseval the sum over k >= 1 of energy * count equals the patch variance.
inline SpectrumCurve energy_spectrum(const std::vector<Patch<float>>& patches) {
  detail::check_patch_set(patches, "energy_spectrum");
  if (patches.front().height != patches.front().width) throw InputError("energy_spectrum: patches must be square");
  const int h = patches.front().height, w = patches.front().width, ch = patches.front().channels;
  const auto th = detail::twiddles(h), tw = detail::twiddles(w);
  const int kmax = static_cast<int>(std::lround(std::hypot(h / 2, w / 2)));
  SpectrumCurve out;
  out.wavenumber.resize(kmax + 1);
  out.energy.assign(kmax + 1, 0.0);
  out.count.assign(kmax + 1, 0);
  std::vector<int> bin(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int b = static_cast<int>(
          std::lround(std::hypot(detail::signed_frequency(y, h), detail::signed_frequency(x, w))));
      bin[y * w + x] = b;
      ++out.count[b];
    }
  for (int k = 0; k <= kmax; ++k) out.wavenumber[k] = k;

  std::vector<std::complex<double>> rows(static_cast<std::size_t>(h) * w), full(rows.size());
  const double norm = 1.0 / (static_cast<double>(h) * w * h * w);
  for (const auto& p : patches)
    for (int c = 0; c < ch; ++c) {
      // Separable DFT: along x, then along y.
      for (int y = 0; y < h; ++y)
        for (int kx = 0; kx < w; ++kx) {
          std::complex<double> s = 0.0;
          for (int x = 0; x < w; ++x) s += static_cast<double>(p.at(y, x, c)) * tw[(kx * x) % w];
          rows[y * w + kx] = s;
        }
      for (int ky = 0; ky < h; ++ky)
        for (int kx = 0; kx < w; ++kx) {
          std::complex<double> s = 0.0;
          for (int y = 0; y < h; ++y) s += rows[y * w + kx] * th[(ky * y) % h];
          full[ky * w + kx] = s;
        }
      for (std::size_t i = 0; i < full.size(); ++i) out.energy[bin[i]] += std::norm(full[i]) * norm;
    }
  const double sets = static_cast<double>(patches.size()) * ch;
  for (int k = 0; k <= kmax; ++k)
    if (out.count[k] > 0) out.energy[k] /= sets * out.count[k];
  return out;
}

/// Empirical semivariogram gamma(d) = E[(z(s + h) - z(s))^2] / 2.
struct VariogramCurve {
  std::vector<double> distance;     // bin centre in grid cells
  std::vector<double> gamma;
  std::vector<std::size_t> n_pairs;
};

/// Mean per-channel variance (population) across a patch set.
inline double pooled_variance(const std::vector<Patch<float>>& patches) {
  detail::check_patch_set(patches, "pooled_variance");
  const int ch = patches.front().channels;
  double acc = 0.0;
  for (int c = 0; c < ch; ++c) {
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (const auto& p : patches)
      for (int y = 0; y < p.height; ++y)
        for (int x = 0; x < p.width; ++x) {
          const double v = p.at(y, x, c);
          s += v;
          s2 += v * v;
          ++n;
        }
    const double m = s / n;
    acc += s2 / n - m * m;
  }
  return acc / ch;
}

/// Semivariogram along one fixed direction (dy, dx): gamma at h = 1..max_lag
/// for offsets h * (dy, dx), pooled over patches and channels.
inline VariogramCurve directional_semivariogram(const std::vector<Patch<float>>& patches, int dy, int dx,
                                                int max_lag) {
  detail::check_patch_set(patches, "semivariogram");
  if (max_lag < 1 || (dy == 0 && dx == 0)) throw ConfigError("semivariogram needs max_lag >= 1 and a direction");
  VariogramCurve out;
  const auto& ref = patches.front();
  for (int h = 1; h <= max_lag; ++h) {
    const int oy = h * dy, ox = h * dx;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : patches)
      for (int c = 0; c < ref.channels; ++c)
        for (int y = std::max(0, -oy); y < std::min(ref.height, ref.height - oy); ++y)
          for (int x = std::max(0, -ox); x < std::min(ref.width, ref.width - ox); ++x) {
            const double d = static_cast<double>(p.at(y + oy, x + ox, c)) - p.at(y, x, c);
            sum += d * d;
            ++n;
          }
    out.distance.push_back(h * std::hypot(dy, dx));
    out.gamma.push_back(n ? sum / (2.0 * n) : 0.0);
    out.n_pairs.push_back(n);
  }
  return out;
}

/// Isotropic semivariogram from the horizontal, vertical and both diagonal
/// directions, binned into `n_bins` equal bins on (0, max_lag] after a leading
/// zero-distance entry. Values are divided by `scale` (e.g. the truth
/// variance) so different sets compare.
inline VariogramCurve semivariogram(const std::vector<Patch<float>>& patches, int max_lag, int n_bins,
                                    double scale = 1.0) {
  detail::check_patch_set(patches, "semivariogram");
  if (max_lag < 1 || n_bins < 1) throw ConfigError("semivariogram needs max_lag >= 1 and n_bins >= 1");
  if (max_lag >= std::min(patches.front().height, patches.front().width))
    throw ConfigError("semivariogram max_lag must be below the patch size");
  if (!(scale > 0.0)) throw ConfigError("semivariogram scale must be positive");
  const auto& ref = patches.front();
  const double width = static_cast<double>(max_lag) / n_bins;
  std::vector<double> sum(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  const int dirs[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
  for (const auto& dir : dirs)
    for (int h = 1; h <= max_lag; ++h) {
      const int oy = h * dir[0], ox = h * dir[1];
      const double dist = std::hypot(oy, ox);
      if (dist > max_lag + 1e-12) break;
      const int b = std::min(n_bins - 1, static_cast<int>(std::ceil(dist / width - 1e-12)) - 1);
      for (const auto& p : patches)
        for (int c = 0; c < ref.channels; ++c)
          for (int y = std::max(0, -oy); y < std::min(ref.height, ref.height - oy); ++y)
            for (int x = std::max(0, -ox); x < std::min(ref.width, ref.width - ox); ++x) {
              const double d = static_cast<double>(p.at(y + oy, x + ox, c)) - p.at(y, x, c);
              sum[b] += d * d;
              ++count[b];
            }
    }
  VariogramCurve out;
  out.distance.push_back(0.0);  // zero-offset bin: self pairs
  out.gamma.push_back(0.0);
  out.n_pairs.push_back(patches.size() * ref.channels * ref.height * ref.width);
  for (int b = 0; b < n_bins; ++b) {
    out.distance.push_back((b + 0.5) * width);
    out.gamma.push_back(count[b] ? sum[b] / (2.0 * count[b]) / scale : 0.0);
    out.n_pairs.push_back(count[b]);
  }
  return out;
}

/// One reconstruction compared against the truth.
struct PredictionStats {
  std::string name;
  SpectrumCurve spectrum;
  VariogramCurve variogram;
  double log_spectrum_gap = 0.0;    // l2 distance of log energies over k >= 1
  double upper_spectrum_gap = 0.0;  // same, restricted to the upper half of wavenumbers
  double variogram_gap = 0.0;       // l2 distance of normalised variograms over non-empty bins
};

struct CompareReport {
  SpectrumCurve truth_spectrum;
  VariogramCurve truth_variogram;
  std::vector<PredictionStats> predictions;

  const PredictionStats& at(const std::string& name) const {
    for (const auto& p : predictions)
      if (p.name == name) return p;
    throw InputError("no prediction named '" + name + "' in report");
  }
};

namespace detail {

inline double log_spectrum_gap(const SpectrumCurve& truth, const SpectrumCurve& pred, int k_begin) {
  double s = 0.0;
  const int kmax = static_cast<int>(truth.energy.size()) - 1;
  constexpr double floor = 1e-30;
  for (int k = std::max(1, k_begin); k <= kmax; ++k) {
    if (truth.count[k] == 0) continue;
    const double d = std::log(std::max(pred.energy[k], floor)) - std::log(std::max(truth.energy[k], floor));
    s += d * d;
  }
  return std::sqrt(s);
}

inline double variogram_gap(const VariogramCurve& truth, const VariogramCurve& pred) {
  double s = 0.0;
  for (std::size_t i = 0; i < truth.gamma.size(); ++i) {
    if (truth.n_pairs[i] == 0) continue;
    const double d = pred.gamma[i] - truth.gamma[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace detail

/// Compare named reconstructions against the truth. All variograms are
/// normalised by the truth variance.
inline CompareReport compare_report(const std::vector<Patch<float>>& truth,
                                    const std::vector<std::pair<std::string, std::vector<Patch<float>>>>& preds,
                                    int max_lag, int n_bins) {
  detail::check_patch_set(truth, "compare_report");
  CompareReport r;
  r.truth_spectrum = energy_spectrum(truth);
  const double var = pooled_variance(truth);
  if (!(var > 0.0)) throw DegenerateDataError("truth patches have zero variance");
  r.truth_variogram = semivariogram(truth, max_lag, n_bins, var);
  const int kmax = static_cast<int>(r.truth_spectrum.energy.size()) - 1;
  for (const auto& [name, set] : preds) {
    if (set.size() != truth.size()) throw InputError("compare_report: '" + name + "' differs in patch count");
    detail::check_patch_set(set, "compare_report");
    if (!set.front().same_shape(truth.front())) throw InputError("compare_report: '" + name + "' differs in shape");
    PredictionStats p;
    p.name = name;
    p.spectrum = energy_spectrum(set);
    p.variogram = semivariogram(set, max_lag, n_bins, var);
    p.log_spectrum_gap = detail::log_spectrum_gap(r.truth_spectrum, p.spectrum, 1);
    p.upper_spectrum_gap = detail::log_spectrum_gap(r.truth_spectrum, p.spectrum, kmax / 2 + 1);
    p.variogram_gap = detail::variogram_gap(r.truth_variogram, p.variogram);
    r.predictions.push_back(std::move(p));
  }
  return r;
}

inline CompareReport compare_report(const std::vector<Patch<float>>& truth, const std::vector<Patch<float>>& mse,
                                    const std::vector<Patch<float>>& rep, int max_lag, int n_bins) {
  return compare_report(truth, {{"mse", mse}, {"rep", rep}}, max_lag, n_bins);
}

inline nlohmann::json to_json(const CompareReport& r) {
  nlohmann::json log_gap, upper_gap, vario_gap;
  for (const auto& p : r.predictions) {
    log_gap[p.name] = p.log_spectrum_gap;
    upper_gap[p.name] = p.upper_spectrum_gap;
    vario_gap[p.name] = p.variogram_gap;
  }
  return {{"log_spectrum_gap", log_gap}, {"upper_half_log_spectrum_gap", upper_gap}, {"variogram_gap", vario_gap}};
}

/// Write spectrum.csv, variogram.csv, summary.json and plot.gp into `dir`.
/// `extra` is merged into the summary.
inline void write_report(const CompareReport& r, const std::filesystem::path& dir,
                         const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "spectrum.csv");
    os << "wavenumber,truth";
    for (const auto& p : r.predictions) os << ',' << p.name;
    os << ",count\n" << std::setprecision(12);
    for (std::size_t k = 1; k < r.truth_spectrum.energy.size(); ++k) {
      os << k << ',' << r.truth_spectrum.energy[k];
      for (const auto& p : r.predictions) os << ',' << p.spectrum.energy[k];
      os << ',' << r.truth_spectrum.count[k] << '\n';
    }
  }
  {
    std::ofstream os(dir / "variogram.csv");
    os << "distance,truth";
    for (const auto& p : r.predictions) os << ',' << p.name;
    os << ",pairs\n" << std::setprecision(12);
    for (std::size_t i = 0; i < r.truth_variogram.gamma.size(); ++i) {
      os << r.truth_variogram.distance[i] << ',' << r.truth_variogram.gamma[i];
      for (const auto& p : r.predictions) os << ',' << p.variogram.gamma[i];
      os << ',' << r.truth_variogram.n_pairs[i] << '\n';
    }
  }
  nlohmann::json summary = to_json(r);
  summary.update(extra);
  std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';

  // Columns: 1 = abscissa, 2 = truth, 3.. = predictions, last = counts.
  const int last = 3 + static_cast<int>(r.predictions.size());
  std::ofstream gp(dir / "plot.gp");
  gp << "set datafile separator ','\n"
        "set terminal pngcairo size 1200,500\n"
        "set output 'comparison.png'\n"
        "set multiplot layout 1,2\n"
        "set title 'Energy spectrum'\nset logscale xy\nset xlabel 'wavenumber'\n"
        "plot 'spectrum.csv' skip 1 u 1:2 w l t 'truth'";
  for (std::size_t i = 0; i < r.predictions.size(); ++i)
    gp << ", '' skip 1 u 1:" << 3 + i << " w l t '" << r.predictions[i].name << "'";
  gp << "\nunset logscale\n"
        "set title 'Semivariogram (normalised)'\nset xlabel 'distance [cells]'\n"
        "plot 'variogram.csv' skip 1 u 1:($"
     << last << " > 0 ? $2 : NaN) w lp t 'truth'";
  for (std::size_t i = 0; i < r.predictions.size(); ++i)
    gp << ", '' skip 1 u 1:($" << last << " > 0 ? $" << 3 + i << " : NaN) w lp t '" << r.predictions[i].name << "'";
  gp << "\nunset multiplot\n";
}

}  // namespace atmodist
