#pragma once

// Multi-sequence stochastic approximation: problem abstraction and the
// federated engine (momentum global directions, uniform client selection,
// local SARAH-corrected updates).
//
// A problem consists of an outer mapping P and N inner mappings S^n, each
// split across M clients. The engine looks for (x, z^1..z^N) with
//     P(x, Z) = 0,   S^n(z^{n-1}, z^n) = 0  (z^0 = x).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedmsa/errors.hpp"
#include "fedmsa/numerics.hpp"
#include "fedmsa/parallel.hpp"
#include "fedmsa/rng.hpp"

namespace fedmsa {

using Sequence = std::vector<Vector>;  // z^1 .. z^N

// Identifies one stochastic sample. Evaluating an oracle twice with the same
// token must use the same sample, which is how the engine evaluates a mapping
// at the current and previous iterate with a shared sample.
class SampleToken {
 public:
  explicit SampleToken(Stream s) : stream_(s) {}
  Stream stream() const { return stream_; }

 private:
  Stream stream_;
};

struct MsaProblem {
  using OuterOracle =
      std::function<Vector(std::size_t m, const Vector& x, const Sequence& z, const SampleToken&)>;
  // n is 1-based; prev = z^{n-1} (x when n == 1), cur = z^n.
  using InnerOracle = std::function<Vector(std::size_t m, std::size_t n, const Vector& prev,
                                           const Vector& cur, const SampleToken&)>;
  using ExactOuter = std::function<Vector(const Vector& x, const Sequence& z)>;
  using FixedPoint = std::function<Vector(std::size_t n, const Vector& prev)>;

  // Bilevel problems expose P^m = direct + indirect so a baseline can freeze
  // the indirect part. direct(t) + indirect(t) must equal p(t) for every token.
  struct IndirectSplit {
    OuterOracle direct;
    OuterOracle indirect;
  };

  std::string name;
  std::size_t num_clients = 1;
  std::size_t x_dim = 0;
  std::vector<std::size_t> z_dims;

  OuterOracle p;
  InnerOracle s;
  ExactOuter exact_p;       // (1/M) sum_m P^m, noise free
  FixedPoint fixed_point;   // empty when unavailable
  std::optional<Vector> x_star;
  std::optional<IndirectSplit> split;

  Vector x0;
  Sequence z0;

  std::size_t num_sequences() const noexcept { return z_dims.size(); }

  void validate() const {
    if (num_clients == 0) throw ConstructionError(name + ": no clients");
    if (x_dim == 0) throw ConstructionError(name + ": x dimension is zero");
    if (!p || !s) throw ConstructionError(name + ": missing stochastic oracles");
    if (x0.size() != x_dim) throw ShapeError(name + ": x0 has wrong dimension");
    if (z0.size() != z_dims.size()) throw ShapeError(name + ": z0 has wrong sequence count");
    for (std::size_t n = 0; n < z_dims.size(); ++n)
      if (z0[n].size() != z_dims[n]) throw ShapeError(name + ": z0 block has wrong dimension");
  }
};

enum class ReportMode { kFinalIterate, kUniformRandomIterate };

// kPerStep: alpha and betas are the step sizes of every local update.
// kPerRound: they are a per-round budget split evenly over the round's local
// steps (alpha / K_r), so runs with different K move equally far per round
// along a fixed direction.
enum class StepScaling { kPerStep, kPerRound };

struct HyperParams {
  double alpha = 0.1;
  std::vector<double> betas{0.1};
  double rho = 1.0;
  std::size_t K = 1;
  std::size_t R = 1;
  std::size_t batch = 1;
  std::size_t warm_start_batch = 0;  // 0 means 32 * batch
  std::uint64_t seed = 0;
  ReportMode report_mode = ReportMode::kFinalIterate;
  StepScaling step_scaling = StepScaling::kPerStep;
  // Experimental: more than one selected client per round, local results
  // averaged. Defaults to the single-client rule.
  std::size_t clients_per_round = 1;

  bool operator==(const HyperParams&) const = default;

  // Step sizes for a round that performs `steps` local updates.
  double alpha_for(std::size_t steps) const {
    return step_scaling == StepScaling::kPerRound ? alpha / static_cast<double>(steps) : alpha;
  }
  std::vector<double> betas_for(std::size_t steps) const {
    if (step_scaling == StepScaling::kPerStep) return betas;
    std::vector<double> out = betas;
    for (auto& b : out) b /= static_cast<double>(steps);
    return out;
  }

  std::size_t effective_warm_start_batch() const {
    return warm_start_batch == 0 ? 32 * batch : warm_start_batch;
  }

  void validate(const MsaProblem& problem) const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be >= 0");
    if (betas.size() != problem.num_sequences())
      throw ConfigError("expected " + std::to_string(problem.num_sequences()) +
                        " step sizes beta, got " + std::to_string(betas.size()));
    for (double b : betas)
      if (!(b >= 0.0) || !std::isfinite(b)) throw ConfigError("beta must be >= 0");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
    if (K == 0) throw ConfigError("K must be >= 1");
    if (batch == 0) throw ConfigError("batch must be >= 1");
    if (clients_per_round == 0 || clients_per_round > problem.num_clients)
      throw ConfigError("clients_per_round must lie in [1, M]");
  }
};

struct Directions {
  Vector h;
  Sequence q;
};

struct ServerState {
  std::size_t round = 0;
  Vector x;
  Sequence z;
  Vector x_prev;
  Sequence z_prev;
  Directions prev;  // h_{r-1}, q_{r-1}

  static ServerState initial(const MsaProblem& problem) {
    ServerState s;
    s.x = problem.x0;
    s.z = problem.z0;
    s.x_prev = problem.x0;
    s.z_prev = problem.z0;
    s.prev.h = Vector(problem.x_dim);
    for (auto d : problem.z_dims) s.prev.q.emplace_back(d);
    return s;
  }
};

struct StationarityReport {
  std::optional<double> norm_p_sq;     // ||P(x)||^2 along the fixed-point chain
  std::optional<double> sum_z_gap_sq;  // sum_n ||z^n - z^{n,*}(z^{n-1})||^2
  bool partial = false;

  double value() const {
    if (partial) return std::numeric_limits<double>::quiet_NaN();
    return *norm_p_sq + *sum_z_gap_sq;
  }
};

struct RoundRecord {
  std::size_t round = 0;
  std::size_t updates = 0;  // cumulative iterate updates
  std::size_t comms = 0;    // cumulative server-client communications
  StationarityReport metric;
  std::optional<double> dist_to_xstar;
};

struct RunTrajectory {
  std::vector<RoundRecord> rounds;
  Vector final_x;
  Sequence final_z;
  Vector report_x;
  Sequence report_z;
  std::size_t report_round = 0;
  std::size_t report_step = 0;
};

struct LocalStep {
  Vector x;
  Sequence z;
  Directions dirs;  // direction applied at this step
};

struct LocalResult {
  Vector x;
  Sequence z;
  std::vector<LocalStep> steps;
};

// How the selected client refreshes its directions between local steps.
enum class LocalRule {
  kSarah,  // full correction of every mapping
  // Nothing that depends on the inner variables is re-evaluated: the indirect
  // part of P and the inner directions keep their round-start values, and
  // only the direct part of P is corrected.
  kFrozenIndirect,
};

// Stationarity ||P(x)||^2 + sum_n ||z^n - z^{n,*}(z^{n-1})||^2 with z^0 = x.
// P(x) is evaluated along the fixed-point chain z^{1,*}(x), z^{2,*}(z^{1,*}), ...
inline StationarityReport stationarity_metric(const MsaProblem& problem, const Vector& x,
                                              const Sequence& z) {
  StationarityReport out;
  if (!problem.fixed_point) {
    out.partial = true;
    return out;
  }
  double gap = 0.0;
  Sequence chain;
  Vector chain_prev = x;
  for (std::size_t n = 1; n <= problem.num_sequences(); ++n) {
    const Vector& prev = n == 1 ? x : z[n - 2];
    gap += squared_norm(z[n - 1] - problem.fixed_point(n, prev));
    chain.push_back(problem.fixed_point(n, chain_prev));
    chain_prev = chain.back();
  }
  out.sum_z_gap_sq = gap;
  if (problem.exact_p)
    out.norm_p_sq = squared_norm(problem.exact_p(x, chain));
  else
    out.partial = true;
  return out;
}

namespace detail {

inline SampleToken oracle_token(const Stream& base, std::size_t mapping, std::size_t b) {
  return SampleToken(base.derive({static_cast<std::uint64_t>(StreamTag::kOracle), mapping, b}));
}

// Minibatch estimate of client m's P^m: mean over `batch` tokens.
template <typename Oracle>
Vector batch_outer(const Oracle& oracle, std::size_t m, const Vector& x, const Sequence& z,
                   const Stream& base, std::size_t batch) {
  Vector acc = oracle(m, x, z, oracle_token(base, 0, 0));
  for (std::size_t b = 1; b < batch; ++b) acc += oracle(m, x, z, oracle_token(base, 0, b));
  if (batch > 1) acc /= static_cast<double>(batch);
  return acc;
}

inline Vector batch_inner(const MsaProblem& problem, std::size_t m, std::size_t n,
                          const Vector& x, const Sequence& z, const Stream& base,
                          std::size_t batch) {
  const Vector& prev = n == 1 ? x : z[n - 2];
  const Vector& cur = z[n - 1];
  Vector acc = problem.s(m, n, prev, cur, oracle_token(base, n, 0));
  for (std::size_t b = 1; b < batch; ++b) acc += problem.s(m, n, prev, cur, oracle_token(base, n, b));
  if (batch > 1) acc /= static_cast<double>(batch);
  return acc;
}

inline bool finite_point(const Vector& x, const Sequence& z) {
  if (!all_finite(x)) return false;
  for (const auto& zn : z)
    if (!all_finite(zn)) return false;
  return true;
}

}  // namespace detail

// Client-side momentum rule, averaged over clients in ascending id order:
//   h^m = p^m(x_r, Z_r; xi) + (1 - rho) (h_{r-1} - p^m(x_{r-1}, Z_{r-1}; xi))
// and likewise for every q^n with one shared sample per mapping.
inline Directions global_directions(const MsaProblem& problem, const ServerState& state,
                                    double rho, std::size_t batch, const Stream& round_rng,
                                    std::size_t threads = 1) {
  const std::size_t M = problem.num_clients;
  const std::size_t N = problem.num_sequences();
  std::vector<Directions> per_client(M);
  parallel_for(M, threads, [&](std::size_t m) {
    const Stream base = round_rng.derive(StreamTag::kClient, m);
    Directions d;
    d.h = detail::batch_outer(problem.p, m, state.x, state.z, base, batch);
    if (rho < 1.0) {
      Vector correction = state.prev.h;
      correction -= detail::batch_outer(problem.p, m, state.x_prev, state.z_prev, base, batch);
      d.h.add_scaled(1.0 - rho, correction);
    }
    for (std::size_t n = 1; n <= N; ++n) {
      Vector qn = detail::batch_inner(problem, m, n, state.x, state.z, base, batch);
      if (rho < 1.0) {
        Vector correction = state.prev.q[n - 1];
        correction -= detail::batch_inner(problem, m, n, state.x_prev, state.z_prev, base, batch);
        qn.add_scaled(1.0 - rho, correction);
      }
      d.q.push_back(std::move(qn));
    }
    per_client[m] = std::move(d);
  });
  Directions avg = per_client[0];
  for (std::size_t m = 1; m < M; ++m) {
    avg.h += per_client[m].h;
    for (std::size_t n = 0; n < N; ++n) avg.q[n] += per_client[m].q[n];
  }
  if (M > 1) {
    avg.h /= static_cast<double>(M);
    for (auto& qn : avg.q) qn /= static_cast<double>(M);
  }
  return avg;
}

// K local steps on one client starting from the global directions. The first
// step reuses the global directions unchanged (the current and previous local
// iterates coincide there); later steps apply
//   h_k = p(cur; xi_k) + h_{k-1} - p(prev; xi_k)
// with one fresh sample shared between both evaluations.
inline LocalResult local_msa(const MsaProblem& problem, std::size_t client,
                             const Directions& init, const Vector& x, const Sequence& z,
                             double alpha, const std::vector<double>& betas, std::size_t K,
                             std::size_t batch, const Stream& rng, std::size_t round = 0,
                             LocalRule rule = LocalRule::kSarah) {
  if (client >= problem.num_clients) throw ConfigError("local_msa: client id out of range");
  if (rule != LocalRule::kSarah && !problem.split)
    throw UnsupportedProblemError("frozen-indirect rule needs a bilevel problem with a direct/indirect split");
  const std::size_t N = problem.num_sequences();
  LocalResult out;
  out.steps.reserve(K);
  Directions dirs = init;
  Vector prev_x = x;
  Sequence prev_z = z;
  Vector cur_x = x;
  Sequence cur_z = z;
  for (std::size_t k = 1; k <= K; ++k) {
    if (k > 1) {
      const Stream base = rng.derive(StreamTag::kLocalStep, k);
      const auto& outer = rule == LocalRule::kSarah ? problem.p : problem.split->direct;
      Vector dh = detail::batch_outer(outer, client, cur_x, cur_z, base, batch);
      dh -= detail::batch_outer(outer, client, prev_x, prev_z, base, batch);
      dirs.h += dh;
      for (std::size_t n = 1; n <= N && rule == LocalRule::kSarah; ++n) {
        Vector dq = detail::batch_inner(problem, client, n, cur_x, cur_z, base, batch);
        dq -= detail::batch_inner(problem, client, n, prev_x, prev_z, base, batch);
        dirs.q[n - 1] += dq;
      }
    }
    out.steps.push_back(LocalStep{cur_x, cur_z, dirs});
    prev_x = cur_x;
    prev_z = cur_z;
    cur_x.add_scaled(-alpha, dirs.h);
    for (std::size_t n = 0; n < N; ++n) cur_z[n].add_scaled(-betas[n], dirs.q[n]);
    if (!detail::finite_point(cur_x, cur_z))
      throw DivergenceError(round, "non-finite iterate after local step " + std::to_string(k));
  }
  out.x = std::move(cur_x);
  out.z = std::move(cur_z);
  return out;
}

inline RoundRecord make_record(const MsaProblem& problem, std::size_t round, std::size_t updates,
                               std::size_t comms, const Vector& x, const Sequence& z) {
  RoundRecord rec;
  rec.round = round;
  rec.updates = updates;
  rec.comms = comms;
  rec.metric = stationarity_metric(problem, x, z);
  if (problem.x_star) rec.dist_to_xstar = norm(x - *problem.x_star);
  return rec;
}

namespace detail {

inline RunTrajectory run_federated(const MsaProblem& problem, const HyperParams& hp,
                                   LocalRule rule, std::size_t threads) {
  problem.validate();
  hp.validate(problem);
  const Stream root(hp.seed, 0);
  ServerState state = ServerState::initial(problem);
  RunTrajectory traj;
  traj.report_x = state.x;
  traj.report_z = state.z;

  // Report index drawn up front: round uniform on [R], step uniform on the
  // local steps that round actually performs (round 0 runs a single step).
  std::size_t report_round = 0;
  std::size_t report_step = 1;
  if (hp.report_mode == ReportMode::kUniformRandomIterate && hp.R > 0) {
    Stream pick = root.derive(StreamTag::kReport, 0);
    report_round = static_cast<std::size_t>(pick.uniform_index(hp.R));
    const std::size_t steps = report_round == 0 ? 1 : hp.K;
    report_step = 1 + static_cast<std::size_t>(pick.uniform_index(steps));
  }

  std::size_t updates = 0;
  for (std::size_t r = 0; r < hp.R; ++r) {
    const bool warm = r == 0;
    const double rho = warm ? 1.0 : hp.rho;
    const std::size_t K = warm ? 1 : hp.K;
    const std::size_t batch = warm ? hp.effective_warm_start_batch() : hp.batch;
    const Stream round_rng = root.derive(StreamTag::kRound, r);

    state.round = r;
    Directions dirs = global_directions(problem, state, rho, batch,
                                        round_rng.derive(StreamTag::kGlobalDirection, 0), threads);
    if (!all_finite(dirs.h)) throw DivergenceError(r, "non-finite global direction");

    Stream select = round_rng.derive(StreamTag::kSelect, 0);
    std::vector<std::size_t> chosen;
    if (hp.clients_per_round == 1) {
      chosen.push_back(static_cast<std::size_t>(select.uniform_index(problem.num_clients)));
    } else {
      std::vector<std::size_t> ids(problem.num_clients);
      for (std::size_t m = 0; m < ids.size(); ++m) ids[m] = m;
      select.shuffle(ids);
      chosen.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(hp.clients_per_round));
    }

    Vector next_x(problem.x_dim);
    Sequence next_z;
    for (auto d : problem.z_dims) next_z.emplace_back(d);
    for (std::size_t c = 0; c < chosen.size(); ++c) {
      // Local samples depend on the round and selection slot, not on which
      // client was picked.
      LocalResult local = local_msa(problem, chosen[c], dirs, state.x, state.z, hp.alpha_for(K),
                                    hp.betas_for(K), K, hp.batch,
                                    round_rng.derive(StreamTag::kLocalStep, c), r, rule);
      if (c == 0 && r == report_round && hp.report_mode == ReportMode::kUniformRandomIterate) {
        const auto& step = local.steps[report_step - 1];
        traj.report_x = step.x;
        traj.report_z = step.z;
      }
      if (chosen.size() == 1) {
        next_x = std::move(local.x);
        next_z = std::move(local.z);
      } else {
        next_x += local.x;
        for (std::size_t n = 0; n < next_z.size(); ++n) next_z[n] += local.z[n];
      }
    }
    if (chosen.size() > 1) {
      next_x /= static_cast<double>(chosen.size());
      for (auto& zn : next_z) zn /= static_cast<double>(chosen.size());
    }

    updates += K;
    state.x_prev = std::move(state.x);
    state.z_prev = std::move(state.z);
    state.x = std::move(next_x);
    state.z = std::move(next_z);
    state.prev = std::move(dirs);
    traj.rounds.push_back(make_record(problem, r, updates, 2 * (r + 1), state.x, state.z));
  }

  traj.final_x = state.x;
  traj.final_z = state.z;
  if (hp.report_mode == ReportMode::kFinalIterate || hp.R == 0) {
    traj.report_x = state.x;
    traj.report_z = state.z;
    traj.report_round = hp.R;
    traj.report_step = 0;
  } else {
    traj.report_round = report_round;
    traj.report_step = report_step;
  }
  return traj;
}

}  // namespace detail

// Runs R rounds of the federated multi-sequence engine. Round 0 uses rho = 1,
// K = 1 and the warm-start batch. Results depend only on (problem, hp), never
// on `threads`.
inline RunTrajectory run_fedmsa(const MsaProblem& problem, const HyperParams& hp,
                                std::size_t threads = 1) {
  return detail::run_federated(problem, hp, LocalRule::kSarah, threads);
}

}  // namespace fedmsa
