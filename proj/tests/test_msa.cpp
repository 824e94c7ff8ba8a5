#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fedmsa/baselines.hpp"
#include "fedmsa/datagen.hpp"
#include "fedmsa/instances.hpp"
#include "fedmsa/msa.hpp"

using namespace fedmsa;

namespace {

QuadraticBilevelInstance small_bilevel(double tau, double sigma, std::uint64_t seed = 1,
                                       std::size_t M = 4) {
  BilevelGenOptions o;
  o.M = M;
  o.d1 = 3;
  o.d2 = 4;
  o.tau = tau;
  o.seed = seed;
  o.sigma_f = sigma;
  o.sigma_g = sigma;
  return gen_quadratic_bilevel(o);
}

// Client P^m written from the instance data: D_m x + B_m^T v.
Vector client_p(const QuadraticBilevelInstance& inst, std::size_t m, const Vector& x,
                const Vector& z) {
  const auto& c = inst.clients[m];
  Vector v(inst.d2);
  for (std::size_t i = 0; i < inst.d2; ++i) v[i] = z[inst.d2 + i];
  return c.D * x + c.B.transpose() * v;
}

Vector random_vector(Stream& rng, std::size_t n) {
  Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

HyperParams basic_hp(std::size_t R, std::size_t K, double step) {
  HyperParams hp;
  hp.alpha = step;
  hp.betas = {step};
  hp.rho = 1.0;
  hp.R = R;
  hp.K = K;
  hp.seed = 3;
  return hp;
}

void expect_vectors_near(const Vector& a, const Vector& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

TEST(GlobalDirections, RhoOneIgnoresHistory) {
  const auto inst = small_bilevel(0.2, 0.3);
  const auto problem = bilevel_to_msa(inst);
  Stream rng(1, 1);
  ServerState a = ServerState::initial(problem);
  a.x = random_vector(rng, 3);
  a.z = {random_vector(rng, 8)};
  ServerState b = a;
  b.x_prev = random_vector(rng, 3);
  b.z_prev = {random_vector(rng, 8)};
  b.prev.h = random_vector(rng, 3);
  b.prev.q = {random_vector(rng, 8)};
  const Stream round(5, 5);
  const auto da = global_directions(problem, a, 1.0, 2, round);
  const auto db = global_directions(problem, b, 1.0, 2, round);
  EXPECT_EQ(da.h, db.h);
  EXPECT_EQ(da.q[0], db.q[0]);
}

TEST(GlobalDirections, RhoOneNoiselessIsClientAverage) {
  const auto inst = small_bilevel(0.2, 0.0);
  const auto problem = bilevel_to_msa(inst);
  Stream rng(2, 1);
  ServerState s = ServerState::initial(problem);
  s.x = random_vector(rng, 3);
  s.z = {random_vector(rng, 8)};
  const auto d = global_directions(problem, s, 1.0, 1, Stream(6, 6));
  Vector expected(3);
  for (std::size_t m = 0; m < inst.num_clients(); ++m) expected += client_p(inst, m, s.x, s.z[0]);
  expected /= static_cast<double>(inst.num_clients());
  expect_vectors_near(d.h, expected, 1e-13);
}

TEST(GlobalDirections, RhoZeroTelescopesToExactMapping) {
  const auto inst = small_bilevel(0.2, 0.0);
  const auto problem = bilevel_to_msa(inst);
  Stream rng(3, 1);
  ServerState s = ServerState::initial(problem);
  s.x_prev = random_vector(rng, 3);
  s.z_prev = {random_vector(rng, 8)};
  s.prev.h = problem.exact_p(s.x_prev, s.z_prev);
  for (std::size_t r = 0; r < 10; ++r) {
    s.x = random_vector(rng, 3);
    s.z = {random_vector(rng, 8)};
    const auto d = global_directions(problem, s, 0.0, 1, Stream(7, r));
    expect_vectors_near(d.h, problem.exact_p(s.x, s.z), 1e-12);
    s.x_prev = s.x;
    s.z_prev = s.z;
    s.prev = d;
  }
}

TEST(GlobalDirections, StationaryIterateIsExponentialAveraging) {
  const auto inst = small_bilevel(0.3, 0.5);
  const auto problem = bilevel_to_msa(inst);
  Stream rng(4, 1);
  ServerState s = ServerState::initial(problem);
  s.x = random_vector(rng, 3);
  s.z = {random_vector(rng, 8)};
  s.x_prev = s.x;
  s.z_prev = s.z;
  s.prev.h = random_vector(rng, 3);
  s.prev.q = {random_vector(rng, 8)};
  const Stream round(8, 8);
  const auto fresh = global_directions(problem, s, 1.0, 1, round);
  for (double rho : {0.0, 0.3, 0.9}) {
    const auto d = global_directions(problem, s, rho, 1, round);
    expect_vectors_near(d.h, rho * fresh.h + (1 - rho) * s.prev.h, 1e-13);
    expect_vectors_near(d.q[0], rho * fresh.q[0] + (1 - rho) * s.prev.q[0], 1e-13);
  }
}

TEST(GlobalDirections, UnbiasedWithRhoOne) {
  const auto inst = small_bilevel(0.2, 0.5);
  const auto problem = bilevel_to_msa(inst);
  Stream rng(5, 1);
  ServerState s = ServerState::initial(problem);
  s.x = random_vector(rng, 3);
  s.z = {random_vector(rng, 8)};
  const std::size_t n = 10000;
  std::vector<Vector> draws;
  for (std::size_t t = 0; t < n; ++t)
    draws.push_back(global_directions(problem, s, 1.0, 1, Stream(9, t)).h);
  Vector mean(3);
  for (const auto& d : draws) mean += d;
  mean /= static_cast<double>(n);
  const Vector exact = problem.exact_p(s.x, s.z);
  for (std::size_t i = 0; i < 3; ++i) {
    double var = 0.0;
    for (const auto& d : draws) var += (d[i] - mean[i]) * (d[i] - mean[i]);
    var /= static_cast<double>(n - 1);
    EXPECT_LE(std::abs(mean[i] - exact[i]), 4 * std::sqrt(var / n));
  }
}

TEST(LocalMsa, SingleStepUsesGlobalDirection) {
  const auto inst = small_bilevel(0.2, 0.4);
  const auto problem = bilevel_to_msa(inst);
  Stream rng(6, 1);
  const Vector x = random_vector(rng, 3);
  const Sequence z{random_vector(rng, 8)};
  Directions d{random_vector(rng, 3), {random_vector(rng, 8)}};
  const auto out = local_msa(problem, 1, d, x, z, 0.1, {0.2}, 1, 1, Stream(1, 1));
  EXPECT_EQ(out.x, x - 0.1 * d.h);
  EXPECT_EQ(out.z[0], z[0] - 0.2 * d.q[0]);
  ASSERT_EQ(out.steps.size(), 1u);
  EXPECT_EQ(out.steps[0].dirs.h, d.h);
}

TEST(LocalMsa, NoiselessSarahTelescope) {
  const auto inst = small_bilevel(0.3, 0.0);
  const auto problem = bilevel_to_msa(inst);
  Stream rng(7, 1);
  const Vector x = random_vector(rng, 3);
  const Sequence z{random_vector(rng, 8)};
  Directions d{random_vector(rng, 3), {random_vector(rng, 8)}};
  const std::size_t m = 2;
  const auto out = local_msa(problem, m, d, x, z, 0.05, {0.1}, 6, 1, Stream(2, 2));
  const Vector p0 = client_p(inst, m, x, z[0]);
  for (const auto& step : out.steps) {
    const Vector expected = client_p(inst, m, step.x, step.z[0]) + d.h - p0;
    expect_vectors_near(step.dirs.h, expected, 1e-12);
  }
}

TEST(LocalMsa, ZeroStepsLeaveIterateUnchanged) {
  const auto inst = small_bilevel(0.3, 0.5);
  const auto problem = bilevel_to_msa(inst);
  Stream rng(8, 1);
  const Vector x = random_vector(rng, 3);
  const Sequence z{random_vector(rng, 8)};
  Directions d{random_vector(rng, 3), {random_vector(rng, 8)}};
  const auto out = local_msa(problem, 0, d, x, z, 0.0, {0.0}, 5, 2, Stream(3, 3));
  EXPECT_EQ(out.x, x);
  EXPECT_EQ(out.z[0], z[0]);
  // Shared samples at an unchanged point cancel exactly.
  EXPECT_EQ(out.steps.back().dirs.h, d.h);
}

TEST(LocalMsa, IndirectComponentTracksV) {
  BilevelGenOptions o;
  o.M = 3;
  o.d1 = 3;
  o.d2 = 3;
  o.pure_indirect = true;
  o.seed = 4;
  const auto problem = bilevel_to_msa(gen_quadratic_bilevel(o));
  Stream rng(9, 1);
  const Vector x = random_vector(rng, 3);
  const Sequence z{random_vector(rng, 6)};
  Directions d{random_vector(rng, 3), {random_vector(rng, 6)}};
  const auto full = local_msa(problem, 0, d, x, z, 0.05, {0.2}, 4, 1, Stream(4, 4));
  const auto frozen = local_msa(problem, 0, d, x, z, 0.05, {0.2}, 4, 1, Stream(4, 4), 0,
                                LocalRule::kFrozenIndirect);
  for (std::size_t k = 1; k < 4; ++k) {
    EXPECT_NE(full.steps[k].dirs.h, full.steps[k - 1].dirs.h);
    EXPECT_EQ(frozen.steps[k].dirs.h, d.h);
  }
}

TEST(LocalMsa, RejectsBadClient) {
  const auto problem = bilevel_to_msa(toy_bilevel());
  Directions d{Vector(1), {Vector(2)}};
  EXPECT_THROW(local_msa(problem, 1, d, Vector(1), {Vector(2)}, 0.1, {0.1}, 1, 1, Stream()),
               ConfigError);
}

TEST(Stationarity, ToyExamples) {
  const auto problem = bilevel_to_msa(toy_bilevel());
  const auto at_one = stationarity_metric(problem, Vector{1.0}, {Vector{1.0, 1.0}});
  EXPECT_FALSE(at_one.partial);
  EXPECT_DOUBLE_EQ(at_one.value(), 1.0);
  EXPECT_DOUBLE_EQ(stationarity_metric(problem, Vector{0.0}, {Vector{0.0, 0.0}}).value(), 0.0);
  const double delta = 0.37;
  EXPECT_NEAR(stationarity_metric(problem, Vector{0.0}, {Vector{0.0, delta}}).value(),
              delta * delta, 1e-15);
}

TEST(Stationarity, MissingGroundTruthIsFlagged) {
  auto problem = bilevel_to_msa(toy_bilevel());
  problem.fixed_point = nullptr;
  const auto rep = stationarity_metric(problem, Vector{1.0}, {Vector{1.0, 1.0}});
  EXPECT_TRUE(rep.partial);
  EXPECT_TRUE(std::isnan(rep.value()));
}

TEST(RunFedmsa, ToyMatchesReferenceLinearIteration) {
  const auto problem = bilevel_to_msa(toy_bilevel());
  HyperParams hp = basic_hp(1000, 1, 0.1);
  const auto traj = run_fedmsa(problem, hp);

  // Reference: with one noiseless client the direction is always P = v, so
  // x <- x - a v,  w <- w - b (w - x),  v <- v - b (v - w).
  double x = 1.0;
  double w = 0.0;
  double v = 0.0;
  std::size_t first_below = 0;
  for (std::size_t r = 0; r < hp.R; ++r) {
    const double nx = x - 0.1 * v;
    const double nw = w - 0.1 * (w - x);
    const double nv = v - 0.1 * (v - w);
    x = nx;
    w = nw;
    v = nv;
    // P along the fixed-point chain is x and the inner target is (x, x).
    const double metric = x * x + (w - x) * (w - x) + (v - x) * (v - x);
    EXPECT_NEAR(traj.rounds[r].metric.value(), metric, 1e-12 * (1 + metric));
    if (first_below == 0 && metric < 1e-6) first_below = r;
  }
  EXPECT_GT(first_below, 0u);
  EXPECT_LT(traj.rounds.back().metric.value(), 1e-6);
  EXPECT_NEAR(traj.final_x[0], x, 1e-12);
}

TEST(RunFedmsa, IdenticalClientsMatchSingleClient) {
  HyperParams hp = basic_hp(50, 3, 0.1);
  hp.rho = 0.5;
  const auto one = run_fedmsa(bilevel_to_msa(toy_bilevel(1)), hp);
  const auto many = run_fedmsa(bilevel_to_msa(toy_bilevel(5)), hp);
  for (std::size_t r = 0; r < 50; ++r)
    EXPECT_NEAR(one.rounds[r].metric.value(), many.rounds[r].metric.value(), 1e-13);
}

TEST(RunFedmsa, ZeroRounds) {
  const auto problem = bilevel_to_msa(toy_bilevel(1, 0.7));
  const auto traj = run_fedmsa(problem, basic_hp(0, 4, 0.1));
  EXPECT_TRUE(traj.rounds.empty());
  EXPECT_EQ(traj.report_x, problem.x0);
  EXPECT_EQ(traj.report_z[0], problem.z0[0]);
}

TEST(RunFedmsa, CountsUpdatesAndCommunication) {
  const auto traj = run_fedmsa(bilevel_to_msa(toy_bilevel()), basic_hp(6, 4, 0.05));
  for (std::size_t r = 0; r < 6; ++r) {
    EXPECT_EQ(traj.rounds[r].round, r);
    EXPECT_EQ(traj.rounds[r].updates, 1 + 4 * r);
    EXPECT_EQ(traj.rounds[r].comms, 2 * (r + 1));
  }
}

TEST(RunFedmsa, DeterministicAcrossThreadCounts) {
  const auto problem = bilevel_to_msa(small_bilevel(0.3, 0.5, 2, 10));
  HyperParams hp = basic_hp(30, 4, 0.05);
  hp.rho = 0.3;
  hp.batch = 2;
  const auto a = run_fedmsa(problem, hp, 1);
  const auto b = run_fedmsa(problem, hp, 4);
  EXPECT_EQ(a.final_x, b.final_x);
  EXPECT_EQ(a.final_z[0], b.final_z[0]);
  for (std::size_t r = 0; r < 30; ++r)
    EXPECT_EQ(a.rounds[r].metric.value(), b.rounds[r].metric.value());
}

TEST(RunFedmsa, NoiselessFixedPointDoesNotMove) {
  const auto inst = small_bilevel(0.0, 0.0, 5);
  auto problem = bilevel_to_msa(inst);
  problem.x0 = *problem.x_star;
  problem.z0 = {problem.fixed_point(1, problem.x0)};
  HyperParams hp = basic_hp(20, 3, 0.1);
  hp.rho = 0.5;
  const auto traj = run_fedmsa(problem, hp);
  expect_vectors_near(traj.final_x, problem.x0, 1e-12);
  expect_vectors_near(traj.final_z[0], problem.z0[0], 1e-12);
}

TEST(RunFedmsa, StationarityDecreasesAfterFirstRoundOnBenignInstance) {
  BilevelGenOptions o;
  o.M = 10;
  o.d1 = 5;
  o.d2 = 5;
  o.seed = 3;
  const auto inst = gen_quadratic_bilevel(o);
  const double lhat = operator_norm(bilevel_client_jacobian(inst, inst.clients[0]));
  const auto problem = bilevel_to_msa(inst);
  const double step = 1.0 / (2.0 * lhat);
  HyperParams hp = basic_hp(300, 1, step);
  const auto traj = run_fedmsa(problem, hp);
  for (std::size_t r = 2; r < traj.rounds.size(); ++r)
    EXPECT_LE(traj.rounds[r].metric.value(), traj.rounds[r - 1].metric.value() * (1 + 1e-12))
        << "round " << r;
}

TEST(RunFedmsa, DivergenceReportsRound) {
  const auto problem = bilevel_to_msa(toy_bilevel());
  // The linear map has spectral radius > 1 once alpha is this large.
  HyperParams hp = basic_hp(5000, 1, 10.0);
  try {
    run_fedmsa(problem, hp);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GT(e.round(), 0u);
    EXPECT_LT(e.round(), 5000u);
  }
}

TEST(RunFedmsa, UniformReportPointIsALocalIterate) {
  const auto problem = bilevel_to_msa(small_bilevel(0.1, 0.2));
  HyperParams hp = basic_hp(12, 3, 0.05);
  hp.report_mode = ReportMode::kUniformRandomIterate;
  const auto a = run_fedmsa(problem, hp);
  const auto b = run_fedmsa(problem, hp);
  EXPECT_EQ(a.report_x, b.report_x);
  EXPECT_LT(a.report_round, 12u);
  EXPECT_GE(a.report_step, 1u);
  EXPECT_LE(a.report_step, a.report_round == 0 ? 1u : 3u);
}

TEST(HyperParams, Validation) {
  const auto problem = bilevel_to_msa(toy_bilevel());
  HyperParams hp = basic_hp(1, 1, 0.1);
  EXPECT_NO_THROW(hp.validate(problem));
  HyperParams bad = hp;
  bad.betas = {0.1, 0.1};
  EXPECT_THROW(bad.validate(problem), ConfigError);
  bad = hp;
  bad.rho = 1.5;
  EXPECT_THROW(bad.validate(problem), ConfigError);
  bad = hp;
  bad.K = 0;
  EXPECT_THROW(bad.validate(problem), ConfigError);
  bad = hp;
  bad.clients_per_round = 2;
  EXPECT_THROW(bad.validate(problem), ConfigError);
}

TEST(HyperParams, PerRoundScalingSplitsTheBudget) {
  HyperParams hp;
  hp.alpha = 0.6;
  hp.betas = {0.3, 0.9};
  EXPECT_EQ(hp.alpha_for(3), 0.6);
  hp.step_scaling = StepScaling::kPerRound;
  EXPECT_DOUBLE_EQ(hp.alpha_for(3), 0.2);
  EXPECT_DOUBLE_EQ(hp.betas_for(3)[1], 0.3);
}
