#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fedmsa/estimator_stats.hpp"
#include "fedmsa/experiment.hpp"

using namespace fedmsa;

namespace {

struct ExactMoments {
  double mean = 0.0;
  double variance = 0.0;
};

// Scalar, noise-free, one sample per batch: enumerate every client sequence.
// avg: s = (1/L) sum_{n=0}^{N-1} prod_{i<=n} (1 - h_i / L) v
// rand: N' uniform on {0..N-1}, (N/L) prod_{i<=N'} (1 - h_i / L) v
ExactMoments enumerate_avg(const std::vector<double>& h, double L, std::size_t N, double v) {
  const std::size_t depth = N - 1;
  std::size_t outcomes = 1;
  for (std::size_t i = 0; i < depth; ++i) outcomes *= h.size();
  double m1 = 0.0;
  double m2 = 0.0;
  for (std::size_t code = 0; code < outcomes; ++code) {
    std::size_t c = code;
    double prod = 1.0;
    double sum = 1.0;
    for (std::size_t i = 0; i < depth; ++i) {
      prod *= 1.0 - h[c % h.size()] / L;
      c /= h.size();
      sum += prod;
    }
    const double out = sum * v / L;
    m1 += out / static_cast<double>(outcomes);
    m2 += out * out / static_cast<double>(outcomes);
  }
  return {m1, m2 - m1 * m1};
}

ExactMoments enumerate_rand(const std::vector<double>& h, double L, std::size_t N, double v) {
  double m1 = 0.0;
  double m2 = 0.0;
  for (std::size_t depth = 0; depth < N; ++depth) {
    std::size_t outcomes = 1;
    for (std::size_t i = 0; i < depth; ++i) outcomes *= h.size();
    const double w = 1.0 / (static_cast<double>(N) * static_cast<double>(outcomes));
    for (std::size_t code = 0; code < outcomes; ++code) {
      std::size_t c = code;
      double prod = 1.0;
      for (std::size_t i = 0; i < depth; ++i) {
        prod *= 1.0 - h[c % h.size()] / L;
        c /= h.size();
      }
      const double out = static_cast<double>(N) / L * prod * v;
      m1 += w * out;
      m2 += w * out * out;
    }
  }
  return {m1, m2 - m1 * m1};
}

}  // namespace

TEST(MonteCarloMoments, ConstantDraw) {
  const auto mom = monte_carlo_moments([](Stream&) { return Vector{0.1, 3.0}; }, 50, Stream(1, 1));
  EXPECT_EQ(mom.mean, (Vector{0.1, 3.0}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(mom.covariance(i, j), 0.0);
  EXPECT_EQ(mom.trials, 50u);
  EXPECT_DOUBLE_EQ(mom.standard_error_scale, 1.0 / std::sqrt(50.0));
}

TEST(MonteCarloMoments, TwoPointDraw) {
  const std::size_t n = 200000;
  const auto mom = monte_carlo_moments(
      [](Stream& s) { return Vector{s.coin() ? 2.0 : 0.0}; }, n, Stream(2, 1));
  // Var of {0,2} is 1 and the sample variance has sd sqrt((mu4 - 1) / n) = 0.
  EXPECT_NEAR(mom.mean[0], 1.0, 5.0 / std::sqrt(static_cast<double>(n)));
  EXPECT_NEAR(mom.covariance(0, 0), 1.0, 1e-2);
}

TEST(MonteCarloMoments, AverageOfTwoHalvesVariance) {
  const std::size_t n = 200000;
  const auto mom = monte_carlo_moments(
      [](Stream& s) {
        const double a = s.coin() ? 2.0 : 0.0;
        const double b = s.coin() ? 2.0 : 0.0;
        return Vector{0.5 * (a + b)};
      },
      n, Stream(3, 1));
  // Values {0,1,2} w.p. {1/4,1/2,1/4}: var 0.5, fourth central moment 0.5.
  const double se = std::sqrt((0.5 - 0.25) / static_cast<double>(n));
  EXPECT_NEAR(mom.covariance(0, 0), 0.5, 5 * se);
}

TEST(MonteCarloMoments, DimensionChangeIsShapeError) {
  EXPECT_THROW(monte_carlo_moments(
                   [](Stream& s) { return s.coin() ? Vector{1.0} : Vector{1.0, 2.0}; }, 100,
                   Stream(4, 1)),
               ShapeError);
}

TEST(MonteCarloMoments, ReplicateAveragingScalesCovariance) {
  const std::size_t n = 100000;
  const std::size_t k = 4;
  auto draw = [](Stream& s) { return Vector{s.normal() * 2.0, s.normal() + s.uniform()}; };
  const auto single = monte_carlo_moments(draw, n, Stream(5, 1));
  const auto avg = monte_carlo_moments(
      [&](Stream& s) {
        Vector acc = draw(s);
        for (std::size_t i = 1; i < k; ++i) acc += draw(s);
        return acc / static_cast<double>(k);
      },
      n, Stream(5, 2));
  for (std::size_t i = 0; i < 2; ++i) {
    const double expected = single.covariance(i, i) / static_cast<double>(k);
    // Relative sd of a Gaussian-like sample variance is sqrt(2/n).
    EXPECT_NEAR(avg.covariance(i, i), expected, 5 * expected * std::sqrt(2.0 / n) * 2);
  }
}

TEST(MonteCarloDraws, IndependentOfThreadCount) {
  auto draw = [](Stream& s) { return Vector{s.normal(), s.uniform()}; };
  const auto a = monte_carlo_draws(draw, 1000, Stream(6, 1), 1);
  const auto b = monte_carlo_draws(draw, 1000, Stream(6, 1), 4);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(CovarianceOrder, Examples) {
  const auto r1 = check_covariance_order(Matrix{{1, 0}, {0, 1}}, Matrix{{0.5, 0}, {0, 0.5}}, 0.0);
  EXPECT_TRUE(r1.pass);
  EXPECT_NEAR(r1.witness, 0.5, 1e-12);
  const Matrix same{{2, 1}, {1, 3}};
  const auto r2 = check_covariance_order(same, same, 0.0);
  EXPECT_TRUE(r2.pass);
  EXPECT_NEAR(r2.witness, 0.0, 1e-12);
  const auto r3 = check_covariance_order(Matrix(2, 2), Matrix::identity(2), 0.0);
  EXPECT_FALSE(r3.pass);
  EXPECT_NEAR(r3.witness, -1.0, 1e-12);
  EXPECT_THROW(check_covariance_order(Matrix(2, 2), Matrix(3, 3), 0.0), ShapeError);
}

TEST(EstimatorOrder, ZeroNoise) {
  HessianSampler sampler({Matrix{{0.8, 0.1}, {0.1, 0.5}}}, 0.0);
  const auto cfg = config_for(sampler, 0.4, 1.0, 4, 1);
  const auto rep = verify_est_order(sampler, cfg, Vector{1, 1}, 1000, Stream(7, 1));
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.averaged.covariance.trace(), 0.0);
  // Est1 still varies through its random truncation index.
  EXPECT_GT(rep.random_index.covariance.trace(), 0.0);
}

TEST(EstimatorOrder, DimOneEnumerationMatchesMonteCarlo) {
  const std::vector<double> h{0.5, 1.5};
  HessianSampler sampler({Matrix{{0.5}}, Matrix{{1.5}}}, 0.0);
  const auto cfg = config_for(sampler, 0.5, 2.0, 2, 1);
  const Vector v{1.0};
  const auto rep = verify_est_order(sampler, cfg, v, 100000, Stream(8, 1));
  const auto est1 = enumerate_rand(h, 2.0, 2, 1.0);
  const auto est2 = enumerate_avg(h, 2.0, 2, 1.0);
  EXPECT_NEAR(est1.mean, est2.mean, 1e-15);
  EXPECT_GT(est1.variance, est2.variance);
  EXPECT_NEAR(rep.random_index.covariance(0, 0), est1.variance, 1e-3);
  EXPECT_NEAR(rep.averaged.covariance(0, 0), est2.variance, 1e-3);
  EXPECT_TRUE(rep.pass);
  EXPECT_NEAR(rep.witness, est1.variance - est2.variance, 2e-3);
}

TEST(EstimatorOrder, DeeperEnumerationStillOrdered) {
  const std::vector<double> h{0.4, 1.0, 1.6};
  for (std::size_t N = 1; N <= 6; ++N) {
    const auto e1 = enumerate_rand(h, 2.0, N, 1.0);
    const auto e2 = enumerate_avg(h, 2.0, N, 1.0);
    EXPECT_NEAR(e1.mean, e2.mean, 1e-12);
    EXPECT_GE(e1.variance, e2.variance - 1e-15);
  }
}

TEST(EstimatorOrder, GridPassesWithSlack) {
  const auto cells = expand_grid({1, 2, 5}, {1.5, 4.0, 10.0}, {0.1, 0.5}, 8, 2, 1.0);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto rep = verify_order_cell(cells[i], 20000, 5.0, Stream(9, i), Stream(10, i));
    EXPECT_TRUE(rep.pass) << "cell " << i << " witness " << rep.witness << " slack " << rep.slack;
  }
}
