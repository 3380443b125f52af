#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>

#include <fftw3.h>
#include <gtest/gtest.h>

#include "atmodist/eval_stats.hpp"
#include "test_support.hpp"

using namespace atmodist;

namespace {

std::vector<Patch<float>> noise_patches(int count, int size, int channels, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::vector<Patch<float>> out;
  for (int i = 0; i < count; ++i) out.push_back(atmodist::testing::random_patch(size, size, channels, rng, sd));
  return out;
}

double patch_variance(const std::vector<Patch<float>>& ps) {
  // Mean over patches and channels of the within-patch population variance.
  double acc = 0;
  int sets = 0;
  for (const auto& p : ps)
    for (int c = 0; c < p.channels; ++c) {
      double s = 0, s2 = 0;
      for (int y = 0; y < p.height; ++y)
        for (int x = 0; x < p.width; ++x) {
          s += p.at(y, x, c);
          s2 += double(p.at(y, x, c)) * p.at(y, x, c);
        }
      const double n = p.height * p.width;
      acc += s2 / n - (s / n) * (s / n);
      ++sets;
    }
  return acc / sets;
}

}  // namespace

TEST(EnergySpectrum, PureModeLandsInItsBin) {
  const int n = 16;
  Patch<float> p(n, n, 1);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) p.at(y, x, 0) = static_cast<float>(std::cos(2 * std::numbers::pi * 3 * x / n));
  const auto s = energy_spectrum({p});
  for (std::size_t k = 0; k < s.energy.size(); ++k) {
    if (k == 3) continue;
    EXPECT_LT(s.energy[k], 1e-12) << k;
  }
  // Variance 1/2 shared by the (0, +-3) wavevectors, averaged over the bin.
  EXPECT_NEAR(s.energy[3] * s.count[3], 0.5, 1e-6);
}

TEST(EnergySpectrum, ParsevalOverNonZeroBins) {
  auto ps = noise_patches(6, 12, 2, 3, 2.0);
  for (auto& p : ps)
    for (auto& v : p.values) v += 1.5f;
  const auto s = energy_spectrum(ps);
  double sum = 0;
  for (std::size_t k = 1; k < s.energy.size(); ++k) sum += s.energy[k] * s.count[k];
  EXPECT_NEAR(sum, patch_variance(ps), 1e-6 * patch_variance(ps));
}

TEST(EnergySpectrum, MatchesFftwReference) {
  const int n = 10;
  const auto ps = noise_patches(3, n, 2, 4);
  const auto s = energy_spectrum(ps);

  std::vector<double> energy(s.energy.size(), 0.0);
  std::vector<int> count(s.energy.size(), 0);
  fftw_complex* in = fftw_alloc_complex(n * n);
  fftw_complex* out = fftw_alloc_complex(n * n);
  fftw_plan plan = fftw_plan_dft_2d(n, n, in, out, FFTW_FORWARD, FFTW_ESTIMATE);
  for (const auto& p : ps)
    for (int c = 0; c < 2; ++c) {
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          in[y * n + x][0] = p.at(y, x, c);
          in[y * n + x][1] = 0.0;
        }
      fftw_execute(plan);
      for (int ky = 0; ky < n; ++ky)
        for (int kx = 0; kx < n; ++kx) {
          const int fy = ky <= n / 2 ? ky : ky - n, fx = kx <= n / 2 ? kx : kx - n;
          const auto b = static_cast<std::size_t>(std::lround(std::hypot(fy, fx)));
          const double pw = out[ky * n + kx][0] * out[ky * n + kx][0] + out[ky * n + kx][1] * out[ky * n + kx][1];
          energy[b] += pw / (double(n) * n * n * n);
          if (&p == &ps.front() && c == 0) ++count[b];
        }
    }
  fftw_destroy_plan(plan);
  fftw_free(in);
  fftw_free(out);
  for (std::size_t k = 0; k < energy.size(); ++k) {
    ASSERT_EQ(static_cast<int>(s.count[k]), count[k]);
    if (count[k] == 0) continue;
    EXPECT_NEAR(s.energy[k], energy[k] / (ps.size() * 2 * count[k]), 1e-10) << k;
  }
}

TEST(EnergySpectrum, WhiteNoiseIsFlat) {
  const int n = 16;
  const auto ps = noise_patches(2000, n, 2, 5);
  const auto s = energy_spectrum(ps);
  const double level = 1.0 / (n * n);
  for (std::size_t k = 1; k < s.energy.size(); ++k) {
    if (s.count[k] == 0) continue;
    EXPECT_NEAR(s.energy[k] / level, 1.0, 0.05) << "k=" << k;
  }
}

TEST(EnergySpectrum, RejectsNonSquareAndMixedShapes) {
  EXPECT_THROW(energy_spectrum({Patch<float>(8, 6, 1)}), InputError);
  EXPECT_THROW(energy_spectrum({Patch<float>(8, 8, 1), Patch<float>(6, 6, 1)}), InputError);
  EXPECT_THROW(energy_spectrum({}), InputError);
}

TEST(Semivariogram, MatchesBruteForceAllPairs) {
  const int n = 8, max_lag = 6, n_bins = 3;
  const auto ps = noise_patches(2, n, 2, 6);
  const auto v = semivariogram(ps, max_lag, n_bins);

  const double width = double(max_lag) / n_bins;
  std::vector<double> sum(n_bins, 0.0);
  std::vector<std::size_t> cnt(n_bins, 0);
  const int dirs[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
  for (const auto& p : ps)
    for (int c = 0; c < 2; ++c)
      for (int y0 = 0; y0 < n; ++y0)
        for (int x0 = 0; x0 < n; ++x0)
          for (int y1 = 0; y1 < n; ++y1)
            for (int x1 = 0; x1 < n; ++x1) {
              const int oy = y1 - y0, ox = x1 - x0;
              bool along = false;
              for (const auto& d : dirs)
                for (int h = 1; h <= n; ++h) along |= (oy == h * d[0] && ox == h * d[1]);
              const double dist = std::hypot(oy, ox);
              if (!along || dist > max_lag + 1e-12) continue;
              int b = 0;
              while (dist > (b + 1) * width + 1e-12) ++b;
              const double diff = double(p.at(y1, x1, c)) - p.at(y0, x0, c);
              sum[b] += diff * diff;
              ++cnt[b];
            }
  ASSERT_EQ(v.gamma.size(), static_cast<std::size_t>(n_bins + 1));
  EXPECT_EQ(v.distance[0], 0.0);
  EXPECT_EQ(v.gamma[0], 0.0);
  for (int b = 0; b < n_bins; ++b) {
    EXPECT_EQ(v.n_pairs[b + 1], cnt[b]);
    EXPECT_NEAR(v.gamma[b + 1], sum[b] / (2.0 * cnt[b]), 1e-10);
    EXPECT_DOUBLE_EQ(v.distance[b + 1], (b + 0.5) * width);
  }
}

TEST(Semivariogram, LinearRampGivesHalfSquaredLag) {
  Patch<float> p(10, 10, 1);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) p.at(y, x, 0) = static_cast<float>(x);
  const auto along = directional_semivariogram({p}, 0, 1, 5);
  const auto across = directional_semivariogram({p}, 1, 0, 5);
  for (int h = 1; h <= 5; ++h) {
    EXPECT_DOUBLE_EQ(along.gamma[h - 1], h * h / 2.0);
    EXPECT_EQ(across.gamma[h - 1], 0.0);
    EXPECT_EQ(along.n_pairs[h - 1], static_cast<std::size_t>(10 * (10 - h)));
  }
}

TEST(Semivariogram, ConstantShiftInvariance) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> ud(-8, 8);
  Patch<float> p(9, 9, 2);
  for (auto& v : p.values) v = static_cast<float>(ud(rng));
  Patch<float> q = p;
  for (auto& v : q.values) v += 5.0f;
  EXPECT_EQ(semivariogram({p}, 4, 4).gamma, semivariogram({q}, 4, 4).gamma);
}

TEST(Semivariogram, ConfigErrors) {
  const auto ps = noise_patches(1, 8, 1, 8);
  EXPECT_THROW(semivariogram(ps, 8, 4), ConfigError);
  EXPECT_THROW(semivariogram(ps, 0, 4), ConfigError);
  EXPECT_THROW(semivariogram(ps, 4, 4, 0.0), ConfigError);
  EXPECT_THROW(directional_semivariogram(ps, 0, 0, 2), ConfigError);
}

TEST(CompareReport, IdenticalSetsHaveZeroGaps) {
  const auto truth = noise_patches(4, 16, 2, 9);
  const auto r = compare_report(truth, truth, truth, 6, 6);
  for (const char* name : {"mse", "rep"}) {
    EXPECT_EQ(r.at(name).log_spectrum_gap, 0.0);
    EXPECT_EQ(r.at(name).upper_spectrum_gap, 0.0);
    EXPECT_EQ(r.at(name).variogram_gap, 0.0);
  }
  EXPECT_THROW(r.at("other"), InputError);
}

TEST(CompareReport, SmoothedPredictionLosesHighFrequencies) {
  const auto truth = noise_patches(8, 16, 1, 10);
  std::vector<Patch<float>> blurred;
  for (const auto& p : truth) {
    Patch<float> b(16, 16, 1);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        b.at(y, x, 0) = 0.25f * (p.at(y, x, 0) + p.at(y, (x + 1) % 16, 0) + p.at((y + 1) % 16, x, 0) +
                                 p.at((y + 1) % 16, (x + 1) % 16, 0));
    blurred.push_back(b);
  }
  const auto r = compare_report(truth, {{"blur", blurred}}, 6, 6);
  const auto& s = r.at("blur").spectrum;
  const auto& t = r.truth_spectrum;
  EXPECT_LT(s.energy.back(), 0.5 * t.energy.back());
  EXPECT_GT(r.at("blur").upper_spectrum_gap, 0.0);
  EXPECT_GT(r.at("blur").variogram_gap, 0.0);
}

TEST(CompareReport, InputErrors) {
  const auto truth = noise_patches(3, 8, 1, 11);
  EXPECT_THROW(compare_report(truth, {{"x", noise_patches(2, 8, 1, 12)}}, 4, 4), InputError);
  EXPECT_THROW(compare_report(truth, {{"x", noise_patches(3, 6, 1, 12)}}, 4, 4), InputError);
  std::vector<Patch<float>> flat(3, Patch<float>(8, 8, 1, 1.0f));
  EXPECT_THROW(compare_report(flat, {{"x", flat}}, 4, 4), DegenerateDataError);
}

TEST(CompareReport, WritesCurvesAndSummary) {
  atmodist::testing::TempDir dir("report");
  const auto truth = noise_patches(3, 16, 1, 13);
  const auto r = compare_report(truth, truth, noise_patches(3, 16, 1, 14), 6, 6);
  write_report(r, dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir / "spectrum.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "variogram.csv"));
  std::ifstream is(dir / "spectrum.csv");
  std::string header;
  std::getline(is, header);
  EXPECT_NE(header.find("truth"), std::string::npos) << header;
}
