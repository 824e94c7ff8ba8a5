#pragma once

// Comparison algorithms sharing the engine's metric schema.

#include <cstddef>
#include <vector>

#include "fedmsa/errors.hpp"
#include "fedmsa/msa.hpp"
#include "fedmsa/rng.hpp"

namespace fedmsa {

// Plain (non-federated) stochastic approximation. Each update draws `batch`
// samples, each from a uniformly chosen client, so the estimates target the
// population mappings:
//   x <- x - alpha p(x, Z; xi),   z^n <- z^n - beta_n s^n(z^{n-1}, z^n; zeta).
// The update schedule mirrors run_fedmsa (1 update in round 0, K afterwards)
// so rows with equal `updates` are directly comparable. No communication.
inline RunTrajectory run_centralized_msa(const MsaProblem& problem, const HyperParams& hp) {
  problem.validate();
  hp.validate(problem);
  const std::size_t N = problem.num_sequences();
  const Stream root(hp.seed, 1);
  Vector x = problem.x0;
  Sequence z = problem.z0;
  RunTrajectory traj;
  std::size_t updates = 0;

  for (std::size_t r = 0; r < hp.R; ++r) {
    const std::size_t K = r == 0 ? 1 : hp.K;
    const Stream round_rng = root.derive(StreamTag::kRound, r);
    const double alpha = hp.alpha_for(K);
    const auto betas = hp.betas_for(K);
    for (std::size_t k = 1; k <= K; ++k) {
      const Stream step = round_rng.derive(StreamTag::kLocalStep, k);
      Vector h(problem.x_dim);
      Sequence q;
      for (auto d : problem.z_dims) q.emplace_back(d);
      for (std::size_t b = 0; b < hp.batch; ++b) {
        Stream pick = step.derive(StreamTag::kSelect, b);
        const auto m = static_cast<std::size_t>(pick.uniform_index(problem.num_clients));
        const Stream base = step.derive(StreamTag::kClient, b);
        h += detail::batch_outer(problem.p, m, x, z, base, 1);
        for (std::size_t n = 1; n <= N; ++n)
          q[n - 1] += detail::batch_inner(problem, m, n, x, z, base, 1);
      }
      const double w = 1.0 / static_cast<double>(hp.batch);
      x.add_scaled(-alpha * w, h);
      for (std::size_t n = 0; n < N; ++n) z[n].add_scaled(-betas[n] * w, q[n]);
      if (!detail::finite_point(x, z))
        throw DivergenceError(r, "non-finite iterate after update " + std::to_string(updates + k));
    }
    updates += K;
    traj.rounds.push_back(make_record(problem, r, updates, 0, x, z));
  }
  traj.final_x = x;
  traj.final_z = z;
  traj.report_x = x;
  traj.report_z = z;
  traj.report_round = hp.R;
  return traj;
}

// run_fedmsa with the selected client's local loop holding the indirect part
// of P and the inner directions at their round-start values, so with no direct
// term the K local steps repeat one identical step. Only problems that expose
// a direct/indirect split (bilevel) are accepted.
inline RunTrajectory run_frozen_indirect(const MsaProblem& problem, const HyperParams& hp,
                                         std::size_t threads = 1) {
  if (!problem.split)
    throw UnsupportedProblemError("frozen-indirect baseline requires a bilevel problem, got '" +
                                  problem.name + "'");
  return detail::run_federated(problem, hp, LocalRule::kFrozenIndirect, threads);
}

}  // namespace fedmsa
