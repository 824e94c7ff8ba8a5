#pragma once

// Monte-Carlo moment estimation and the covariance-ordering check between the
// two stochastic Neumann estimators.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedmsa/errors.hpp"
#include "fedmsa/neumann.hpp"
#include "fedmsa/numerics.hpp"
#include "fedmsa/parallel.hpp"
#include "fedmsa/rng.hpp"

namespace fedmsa {

struct MomentReport {
  Vector mean;
  Matrix covariance;  // unbiased, divisor trials - 1
  std::size_t trials = 0;
  double standard_error_scale = 0.0;  // 1 / sqrt(trials)
};

// Runs `draw(stream)` for each trial on the substream root.derive(kTrial, t).
// Results do not depend on `threads`.
template <typename Draw>
std::vector<Vector> monte_carlo_draws(Draw&& draw, std::size_t trials, const Stream& root,
                                      std::size_t threads = 1) {
  std::vector<Vector> out(trials);
  parallel_for(trials, threads, [&](std::size_t t) {
    Stream s = root.derive(StreamTag::kTrial, t);
    out[t] = draw(s);
  });
  return out;
}

// Mean and unbiased covariance. The mean is accumulated relative to the first
// draw so constant draws give exactly zero covariance.
inline MomentReport moments_of(const std::vector<Vector>& draws) {
  if (draws.size() < 2) throw Error("moments_of: need at least 2 trials");
  const std::size_t d = draws.front().size();
  for (const auto& x : draws)
    if (x.size() != d) throw ShapeError("moments_of: draw dimension changed between trials");
  const double n = static_cast<double>(draws.size());
  const Vector& anchor = draws.front();
  Vector shift(d);
  for (const auto& x : draws)
    for (std::size_t i = 0; i < d; ++i) shift[i] += x[i] - anchor[i];
  Vector mean = anchor;
  mean.add_scaled(1.0 / n, shift);

  Matrix cov(d, d);
  Vector dev(d);
  for (const auto& x : draws) {
    for (std::size_t i = 0; i < d; ++i) dev[i] = x[i] - mean[i];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i; j < d; ++j) cov(i, j) += dev[i] * dev[j];
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      cov(i, j) /= (n - 1.0);
      cov(j, i) = cov(i, j);
    }
  return MomentReport{std::move(mean), std::move(cov), draws.size(), 1.0 / std::sqrt(n)};
}

template <typename Draw>
MomentReport monte_carlo_moments(Draw&& draw, std::size_t trials, const Stream& root,
                                 std::size_t threads = 1) {
  if (trials < 2) throw Error("monte_carlo_moments: need at least 2 trials");
  return moments_of(monte_carlo_draws(std::forward<Draw>(draw), trials, root, threads));
}

struct ScalarEstimate {
  double value = 0.0;
  double standard_error = 0.0;
};

// E||X - E X||^2 estimated as the mean of ||x_t - mean||^2 (scaled by
// n/(n-1)), with the standard error of that mean.
inline ScalarEstimate total_variance(const std::vector<Vector>& draws, const Vector& mean) {
  const double n = static_cast<double>(draws.size());
  std::vector<double> sq;
  sq.reserve(draws.size());
  double acc = 0.0;
  for (const auto& x : draws) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mean[i]) * (x[i] - mean[i]);
    sq.push_back(s);
    acc += s;
  }
  const double avg = acc / n;
  double var = 0.0;
  for (double s : sq) var += (s - avg) * (s - avg);
  var /= (n - 1.0);
  const double correction = n / (n - 1.0);
  return {avg * correction, correction * std::sqrt(var / n)};
}

struct OrderCheck {
  bool pass = false;
  double witness = 0.0;  // lambda_min(cov_high - cov_low)
};

inline OrderCheck check_covariance_order(const Matrix& cov_high, const Matrix& cov_low,
                                         double slack) {
  if (cov_high.rows() != cov_low.rows() || cov_high.cols() != cov_low.cols())
    throw ShapeError("check_covariance_order: shape mismatch");
  require_symmetric(cov_high, "check_covariance_order");
  require_symmetric(cov_low, "check_covariance_order");
  if (!(slack >= 0.0)) throw Error("check_covariance_order: slack must be non-negative");
  const double witness = min_eigenvalue_symmetric(cov_high - cov_low);
  return {witness >= -slack, witness};
}

struct EstimatorOrderReport {
  MomentReport random_index;   // Est1
  MomentReport averaged;       // Est2
  double witness = 0.0;
  double slack = 0.0;
  double trace_gap = 0.0;      // tr(Cov1 - Cov2)
  bool pass = false;
};

// Cov(Est1) >= Cov(Est2) in the PSD order, up to slack = c * tr(Cov1) / sqrt(trials).
// The two estimators use independent substreams of `rng`.
inline EstimatorOrderReport verify_est_order(const HessianSampler& sampler,
                                             const NeumannConfig& cfg, const Vector& v,
                                             std::size_t trials, const Stream& rng,
                                             double slack_constant = 5.0,
                                             std::size_t threads = 1) {
  EstimatorOrderReport r;
  r.random_index = monte_carlo_moments(
      [&](Stream& s) { return stochastic_ihvp_rand(sampler, cfg, v, s); }, trials,
      rng.derive({1}), threads);
  r.averaged = monte_carlo_moments(
      [&](Stream& s) { return stochastic_ihvp_avg(sampler, cfg, v, s); }, trials,
      rng.derive({2}), threads);
  r.slack = slack_constant * r.random_index.covariance.trace() / std::sqrt(static_cast<double>(trials));
  const auto order = check_covariance_order(r.random_index.covariance, r.averaged.covariance, r.slack);
  r.witness = order.witness;
  r.trace_gap = r.random_index.covariance.trace() - r.averaged.covariance.trace();
  r.pass = order.pass && r.trace_gap >= -r.slack;
  return r;
}

}  // namespace fedmsa
