#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "atmodist/error.hpp"
#include "atmodist/repnet.hpp"
#include "atmodist/sampler.hpp"
#include "atmodist/transform.hpp"

namespace atmodist {

/// l2 distance between the metric-layer embeddings of two patches.
template <typename S, typename P>
double rep_distance(RepresentationModel<S>& model, const P& a, const P& b) {
  if (!a.same_shape(b)) throw InputError("rep_distance: patch shapes differ");
  const auto ea = model.represent(a);
  const auto eb = model.represent(b);
  double sq = 0.0;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    const double d = static_cast<double>(ea[i]) - eb[i];
    sq += d * d;
  }
  return std::sqrt(sq);
}

/// Mean squared difference over all elements of two patches.
template <typename P>
double mse_distance(const P& a, const P& b) {
  if (!a.same_shape(b)) throw InputError("mse_distance: patch shapes differ");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = static_cast<double>(a.values[i]) - b.values[i];
    sq += d * d;
  }
  return sq / static_cast<double>(a.values.size());
}

enum class DistanceKind {
  representation,          // ||e(a) - e(b)||
  representation_squared,  // ||e(a) - e(b)||^2, the unscaled content loss
  mse,
};

inline std::string to_string(DistanceKind k) {
  switch (k) {
    case DistanceKind::representation: return "rep";
    case DistanceKind::representation_squared: return "rep-sq";
    case DistanceKind::mse: return "mse";
  }
  return "?";
}

inline DistanceKind distance_kind_from_string(const std::string& s) {
  if (s == "rep") return DistanceKind::representation;
  if (s == "rep-sq") return DistanceKind::representation_squared;
  if (s == "mse") return DistanceKind::mse;
  throw ConfigError("unknown distance metric '" + s + "' (expected rep, rep-sq or mse)");
}

/// Per-lag mean and standard deviation of a distance; lag t = 1..N.
struct DistanceProfile {
  std::vector<int> lags;
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::size_t> n_samples;

  int max_lag() const noexcept { return static_cast<int>(lags.size()); }
};

/// Accumulates distances per lag and checks coverage.
class ProfileBuilder {
 public:
  explicit ProfileBuilder(int max_lag) : moments_(max_lag) {
    if (max_lag < 1) throw ConfigError("profile needs at least one lag");
  }

  void add(int lag_class, double distance) {
    if (lag_class < 0 || lag_class >= static_cast<int>(moments_.size()))
      throw InputError("lag class " + std::to_string(lag_class) + " outside profile");
    moments_[lag_class].push(distance);
  }

  DistanceProfile finish() const {
    DistanceProfile p;
    std::string missing;
    for (std::size_t t = 0; t < moments_.size(); ++t) {
      if (moments_[t].count() == 0) missing += (missing.empty() ? "" : ",") + std::to_string(t + 1);
      p.lags.push_back(static_cast<int>(t) + 1);
      p.mean.push_back(moments_[t].mean());
      p.stddev.push_back(moments_[t].stddev());
      p.n_samples.push_back(moments_[t].count());
    }
    if (!missing.empty()) throw IncompleteProfileError("no samples for lags " + missing);
    return p;
  }

 private:
  std::vector<RunningMoments> moments_;
};

/// Profile of the MSE between the two patches of each pair.
inline DistanceProfile mse_profile(const std::vector<PatchPairSample>& pairs, int max_lag) {
  ProfileBuilder b(max_lag);
  for (const auto& p : pairs) b.add(p.lag_class, mse_distance(p.patch_a, p.patch_b));
  return b.finish();
}

/// Profile of a representation distance, embedding pairs in inference-mode batches.
template <typename S>
DistanceProfile distance_profile(RepresentationModel<S>& model, const std::vector<PatchPairSample>& pairs,
                                 int max_lag, DistanceKind kind, int batch_size = 128) {
  if (kind == DistanceKind::mse) return mse_profile(pairs, max_lag);
  ProfileBuilder b(max_lag);
  for (std::size_t i = 0; i < pairs.size(); i += batch_size) {
    const std::size_t end = std::min(pairs.size(), i + static_cast<std::size_t>(batch_size));
    std::vector<const Patch<float>*> pa, pb;
    for (std::size_t k = i; k < end; ++k) {
      pa.push_back(&pairs[k].patch_a);
      pb.push_back(&pairs[k].patch_b);
    }
    const auto ea = model.embed(to_batch<S, Patch<float>>(std::span<const Patch<float>* const>(pa)), nn::Mode::infer);
    const auto eb = model.embed(to_batch<S, Patch<float>>(std::span<const Patch<float>* const>(pb)), nn::Mode::infer);
    for (std::size_t k = 0; k < end - i; ++k) {
      double sq = 0.0;
      for (int c = 0; c < ea.channels(); ++c) {
        const double d = static_cast<double>(ea(c, static_cast<int>(k), 0, 0)) - eb(c, static_cast<int>(k), 0, 0);
        sq += d * d;
      }
      b.add(pairs[i + k].lag_class, kind == DistanceKind::representation ? std::sqrt(sq) : sq);
    }
  }
  return b.finish();
}

inline void write_csv(const DistanceProfile& p, std::ostream& os) {
  os << "lag,mean,std,n\n" << std::setprecision(17);
  for (std::size_t t = 0; t < p.lags.size(); ++t)
    os << p.lags[t] << ',' << p.mean[t] << ',' << p.stddev[t] << ',' << p.n_samples[t] << '\n';
}

/// Ranks starting at 1, ties receiving their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + j) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InputError("spearman needs two equal-length series of length >= 2");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

/// Spearman correlation between lag and mean distance of a profile.
inline double lag_spearman(const DistanceProfile& p) {
  return spearman(std::vector<double>(p.lags.begin(), p.lags.end()), p.mean);
}

/// Golden-section minimisation of a unimodal function on [lo, hi], in long double.
inline long double golden_section_minimize(const std::function<long double(long double)>& f, long double lo,
                                           long double hi, long double rel_tol = 1e-14L, int max_iter = 400) {
  const long double inv_phi = (std::sqrt(5.0L) - 1.0L) / 2.0L;
  long double a = lo, b = hi;
  long double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  long double fc = f(c), fd = f(d);
  for (int i = 0; i < max_iter && (b - a) > rel_tol * std::abs(c + d) * 0.5L; ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  return (a + b) / 2.0L;
}

struct ContentLossScale {
  double alpha_cnt = 1.0;
  double numeric_alpha = 1.0;  // golden-section cross-check
  int tail_begin = 0;          // first lag of the fitted tail
  int tail_end = 0;            // last lag (inclusive)
};

/// Least-squares scale matching the long-lag tail of `c` to `m`:
///   alpha = sum c_t m_t / sum c_t^2  over t = floor(N/2) .. N.
inline ContentLossScale fit_alpha_cnt(const DistanceProfile& c, const DistanceProfile& m) {
  const int n = c.max_lag();
  if (n != m.max_lag() || n < 1) throw InputError("profiles must share the same number of lags");
  ContentLossScale out;
  out.tail_begin = std::max(1, n / 2);
  out.tail_end = n;
  double cm = 0.0, cc = 0.0;
  for (int t = out.tail_begin; t <= n; ++t) {
    cm += c.mean[t - 1] * m.mean[t - 1];
    cc += c.mean[t - 1] * c.mean[t - 1];
  }
  if (!(cc > 0.0)) throw DegenerateDataError("content-loss profile tail is all zero");
  out.alpha_cnt = cm / cc;
  auto objective = [&](long double a) {
    long double s = 0.0L;
    for (int t = out.tail_begin; t <= n; ++t) {
      const long double r = a * c.mean[t - 1] - m.mean[t - 1];
      s += r * r;
    }
    return s;
  };
  out.numeric_alpha = static_cast<double>(golden_section_minimize(objective, 1e-6L, 1e6L));
  return out;
}

}  // namespace atmodist
