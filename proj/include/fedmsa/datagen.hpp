#pragma once

// Heterogeneity-controlled client partitions and synthetic instance
// generators.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fedmsa/errors.hpp"
#include "fedmsa/instances.hpp"
#include "fedmsa/numerics.hpp"
#include "fedmsa/rng.hpp"

namespace fedmsa {

// Samples are numbered class by class: class i owns the contiguous index
// range [n_0 + ... + n_{i-1}, n_0 + ... + n_i).
struct Partition {
  std::vector<std::vector<std::size_t>> client_indices;
  double q = 0.0;
  std::vector<std::size_t> class_counts;

  std::size_t num_clients() const noexcept { return client_indices.size(); }
  std::size_t total() const {
    return std::accumulate(class_counts.begin(), class_counts.end(), std::size_t{0});
  }
  std::size_t class_of(std::size_t index) const {
    std::size_t offset = 0;
    for (std::size_t c = 0; c < class_counts.size(); ++c) {
      offset += class_counts[c];
      if (index < offset) return c;
    }
    throw ShapeError("Partition::class_of: index out of range");
  }
};

// Equal client sizes floor(n / C), remainder to the lowest ids.
inline std::vector<std::size_t> equal_client_sizes(std::size_t n, std::size_t C) {
  std::vector<std::size_t> sizes(C, n / C);
  for (std::size_t i = 0; i < n % C; ++i) ++sizes[i];
  return sizes;
}

// Client i first takes min(ceil(q * size_i), n_i) random samples of class i;
// the remaining slots are filled, client by client in id order, from a
// uniformly shuffled pool of everything not yet assigned.
inline Partition heterogeneous_partition(const std::vector<std::size_t>& class_counts,
                                         std::size_t C, double q, Stream rng) {
  if (C == 0) throw ConfigError("heterogeneous_partition: need at least one client");
  if (class_counts.size() != C)
    throw ConfigError("heterogeneous_partition: client count " + std::to_string(C) +
                      " must equal the number of classes " +
                      std::to_string(class_counts.size()));
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("heterogeneous_partition: q must lie in [0, 1]");
  Partition part;
  part.q = q;
  part.class_counts = class_counts;
  const std::size_t n = part.total();
  if (n < C)
    throw ConfigError("heterogeneous_partition: " + std::to_string(n) +
                      " samples cannot fill " + std::to_string(C) + " clients");
  const auto sizes = equal_client_sizes(n, C);

  std::vector<bool> taken(n, false);
  part.client_indices.resize(C);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < C; ++i) {
    // The small epsilon keeps exact products such as 0.5 * 4 from rounding up.
    const auto want = static_cast<std::size_t>(
        std::ceil(q * static_cast<double>(sizes[i]) - 1e-9));
    const std::size_t take = std::min({want, class_counts[i], sizes[i]});
    std::vector<std::size_t> members(class_counts[i]);
    std::iota(members.begin(), members.end(), offset);
    Stream s = rng.derive(StreamTag::kPartition, i);
    s.shuffle(members);
    for (std::size_t j = 0; j < take; ++j) {
      part.client_indices[i].push_back(members[j]);
      taken[members[j]] = true;
    }
    offset += class_counts[i];
  }

  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < n; ++j)
    if (!taken[j]) pool.push_back(j);
  Stream s = rng.derive(StreamTag::kPartition, C);
  s.shuffle(pool);
  std::size_t next = 0;
  for (std::size_t i = 0; i < C; ++i)
    while (part.client_indices[i].size() < sizes[i]) part.client_indices[i].push_back(pool[next++]);
  for (auto& c : part.client_indices) std::sort(c.begin(), c.end());
  return part;
}

// Splits every client uniformly into `factor` sub-clients of near-equal size.
inline std::vector<std::vector<std::size_t>> sub_split(
    const std::vector<std::vector<std::size_t>>& clients, std::size_t factor, Stream rng) {
  if (factor == 0) throw ConfigError("sub_split: factor must be >= 1");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t c = 0; c < clients.size(); ++c) {
    if (clients[c].size() < factor)
      throw ConfigError("sub_split: client " + std::to_string(c) + " has fewer samples than the split factor");
    auto members = clients[c];
    Stream s = rng.derive(StreamTag::kPartition, c);
    s.shuffle(members);
    const auto sizes = equal_client_sizes(members.size(), factor);
    std::size_t pos = 0;
    for (auto sz : sizes) {
      std::vector<std::size_t> sub(members.begin() + static_cast<std::ptrdiff_t>(pos),
                                   members.begin() + static_cast<std::ptrdiff_t>(pos + sz));
      std::sort(sub.begin(), sub.end());
      out.push_back(std::move(sub));
      pos += sz;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Risk-averse regression data
// ---------------------------------------------------------------------------

struct RiskAverseDataset {
  std::vector<Vector> a;
  std::vector<double> b;
  Vector x_star;
};

// x* ~ N(0, I_d); a_i ~ N(0, Sigma) with Sigma = M M^T / d; b_i = (a_i^T x*)^2
// plus N(0, 0.001) label noise unless zero_noise is set.
inline RiskAverseDataset gen_risk_averse_dataset(std::size_t d, std::size_t n,
                                                 std::uint64_t x_star_seed,
                                                 std::uint64_t data_seed,
                                                 bool zero_noise = false) {
  if (d == 0 || n == 0) throw ConfigError("gen_risk_averse_dataset: need d >= 1 and n >= 1");
  RiskAverseDataset out;
  Stream xs(x_star_seed, static_cast<std::uint64_t>(StreamTag::kInstance));
  out.x_star = Vector(d);
  for (std::size_t j = 0; j < d; ++j) out.x_star[j] = xs.normal();

  Stream data(data_seed, static_cast<std::uint64_t>(StreamTag::kData));
  Stream mix = data.derive({0});
  Matrix factor(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) factor(i, j) = mix.normal();
  // a = M g / sqrt(d) has covariance M M^T / d.
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double noise_sd = std::sqrt(0.001);
  out.a.reserve(n);
  out.b.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Stream s = data.derive(StreamTag::kData, i);
    Vector g(d);
    for (std::size_t j = 0; j < d; ++j) g[j] = s.normal();
    Vector ai = factor * g;
    ai *= scale;
    const double proj = dot(ai, out.x_star);
    double bi = proj * proj;
    const double noise = s.normal();
    if (!zero_noise) bi += noise_sd * noise;
    out.a.push_back(std::move(ai));
    out.b.push_back(bi);
  }
  return out;
}

struct RiskAverseOptions {
  std::size_t d = 10;
  std::size_t n = 1000;
  std::uint64_t x_star_seed = 1;
  std::uint64_t data_seed = 2;
  bool zero_noise = false;
  double lambda = 1.0;
  double delta = 1e-3;
  bool squared_risk = true;
  std::size_t clients = 10;
  double q = 0.0;
  std::uint64_t partition_seed = 3;
  std::size_t sub_split = 1;
  // x0 = x* + init_scale * N(0, I) (the loss only identifies x* up to sign).
  double init_scale = 1.0;
  std::uint64_t init_seed = 4;

  bool operator==(const RiskAverseOptions&) const = default;
};

// Classes for the partition are quantile bins of the label b: the samples are
// sorted by b and cut into `clients` bins of near-equal size.
inline RiskAverseMcoInstance make_risk_averse_instance(const RiskAverseOptions& o) {
  if (o.clients == 0) throw ConfigError("risk-averse: clients must be >= 1");
  if (o.n < o.clients * std::max<std::size_t>(o.sub_split, 1))
    throw ConfigError("risk-averse: fewer samples than clients");
  auto data = gen_risk_averse_dataset(o.d, o.n, o.x_star_seed, o.data_seed, o.zero_noise);

  std::vector<std::size_t> order(o.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return data.b[i] < data.b[j]; });
  const auto counts = equal_client_sizes(o.n, o.clients);
  const Stream prng(o.partition_seed, static_cast<std::uint64_t>(StreamTag::kPartition));
  const Partition part = heterogeneous_partition(counts, o.clients, o.q, prng.derive({0}));
  auto clients = part.client_indices;
  if (o.sub_split > 1) clients = sub_split(clients, o.sub_split, prng.derive({1}));
  for (auto& c : clients) {
    for (auto& i : c) i = order[i];
    std::sort(c.begin(), c.end());
  }

  RiskAverseMcoInstance inst;
  inst.d = o.d;
  inst.a = std::move(data.a);
  inst.b = std::move(data.b);
  inst.lambda = o.lambda;
  inst.delta = o.delta;
  inst.squared_risk = o.squared_risk;
  inst.partition = std::move(clients);
  inst.x_star = data.x_star;
  Stream init(o.init_seed, static_cast<std::uint64_t>(StreamTag::kInit));
  inst.x0 = data.x_star;
  for (std::size_t j = 0; j < o.d; ++j) inst.x0[j] += o.init_scale * init.normal();
  inst.validate();
  return inst;
}

// ---------------------------------------------------------------------------
// Quadratic bilevel instances
// ---------------------------------------------------------------------------

struct BilevelGenOptions {
  std::size_t M = 10;
  std::size_t d1 = 5;
  std::size_t d2 = 5;
  double tau = 0.0;
  double mu_g = 1.0;
  double L_g = 4.0;
  std::uint64_t seed = 0;
  // Singular values of the mean coupling Bbar lie in [b_min, b_max].
  double b_min = 0.5;
  double b_max = 1.5;
  // Outer curvature: C_m has spectrum in [c_min, c_max], D_m = d_scale * I.
  double c_min = 0.5;
  double c_max = 1.0;
  double d_scale = 0.1;
  bool pure_indirect = false;  // D_m = 0, so P carries no direct term
  double sigma_f = 0.0;
  double sigma_g = 0.0;

  bool operator==(const BilevelGenOptions&) const = default;
};

namespace detail {

// Random orthogonal matrix from the eigenvectors of a Gaussian symmetric one.
inline Matrix random_orthogonal(Stream& rng, std::size_t n) {
  return symmetric_eigen(gaussian_symmetric(rng, n)).vectors;
}

// Random SPD matrix whose spectrum spans [lo, hi], endpoints included.
inline Matrix random_spd_band(Stream& rng, std::size_t n, double lo, double hi) {
  Vector spec(n);
  spec[0] = lo;
  if (n > 1) spec[n - 1] = hi;
  for (std::size_t i = 1; i + 1 < n; ++i) spec[i] = lo + (hi - lo) * rng.uniform();
  return symmetrized(from_eigen(random_orthogonal(rng, n), spec));
}

// rows x cols matrix U diag(s) V^T with singular values spanning [lo, hi].
inline Matrix random_coupling(Stream& rng, std::size_t rows, std::size_t cols, double lo,
                              double hi) {
  const std::size_t r = std::min(rows, cols);
  const Matrix U = random_orthogonal(rng, rows);
  const Matrix V = random_orthogonal(rng, cols);
  Vector sv(r);
  sv[0] = hi;
  if (r > 1) sv[r - 1] = lo;
  for (std::size_t i = 1; i + 1 < r; ++i) sv[i] = lo + (hi - lo) * rng.uniform();
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < r; ++k) acc += U(i, k) * sv[k] * V(j, k);
      out(i, j) = acc;
    }
  return out;
}

// Zero-mean perturbations with unit spectral norm (before centering). For a
// single client the perturbation is identically zero.
template <typename Draw>
std::vector<Matrix> centered_perturbations(std::size_t M, Draw draw) {
  std::vector<Matrix> out;
  for (std::size_t m = 0; m < M; ++m) {
    Matrix e = draw(m);
    const double s = operator_norm(e);
    if (s > 0.0) e *= 1.0 / s;
    out.push_back(std::move(e));
  }
  Matrix mean = out.front();
  for (std::size_t m = 1; m < M; ++m) mean += out[m];
  mean *= 1.0 / static_cast<double>(M);
  for (auto& e : out) e -= mean;
  return out;
}

// Clips the spectrum of a symmetric matrix to [lo, hi].
inline Matrix project_band(const Matrix& a, double lo, double hi) {
  auto eig = symmetric_eigen(symmetrized(a));
  for (std::size_t i = 0; i < eig.values.size(); ++i)
    eig.values[i] = std::clamp(eig.values[i], lo, hi);
  return symmetrized(from_eigen(eig.vectors, eig.values));
}

}  // namespace detail

// Jacobian of client m's joint mapping (P, S_1, S_2) with respect to
// (x, w, v), assembled densely.
inline Matrix bilevel_client_jacobian(const QuadraticBilevelInstance& inst, const BilevelClient& c) {
  const std::size_t d1 = inst.d1;
  const std::size_t d2 = inst.d2;
  const std::size_t n = d1 + 2 * d2;
  Matrix J(n, n);
  for (std::size_t i = 0; i < d1; ++i) {
    for (std::size_t j = 0; j < d1; ++j) J(i, j) = c.D(i, j);
    for (std::size_t j = 0; j < d2; ++j) J(i, d1 + d2 + j) = c.B(j, i);
  }
  for (std::size_t i = 0; i < d2; ++i) {
    for (std::size_t j = 0; j < d1; ++j) J(d1 + i, j) = -c.B(i, j);
    for (std::size_t j = 0; j < d2; ++j) {
      J(d1 + i, d1 + j) = c.A(i, j);
      J(d1 + d2 + i, d1 + j) = -c.C(i, j);
      J(d1 + d2 + i, d1 + d2 + j) = c.A(i, j);
    }
  }
  return J;
}

// max_m ||J^m - mean_m J^m|| (spectral norm).
inline double measured_heterogeneity(const QuadraticBilevelInstance& inst) {
  std::vector<Matrix> jac;
  for (const auto& c : inst.clients) jac.push_back(bilevel_client_jacobian(inst, c));
  Matrix mean = jac.front();
  for (std::size_t m = 1; m < jac.size(); ++m) mean += jac[m];
  mean *= 1.0 / static_cast<double>(jac.size());
  double worst = 0.0;
  for (const auto& j : jac) worst = std::max(worst, operator_norm(j - mean));
  return worst;
}

// Mean inner Hessian with spectrum in [mu_g + tau, L_g - tau], so that every
// perturbed A_m = Abar + tau E_m (||E_m|| <= 1 before centering) stays inside
// [mu_g, L_g]; a final spectral clip guards against the centering step.
inline QuadraticBilevelInstance gen_quadratic_bilevel(const BilevelGenOptions& o) {
  if (o.M == 0 || o.d1 == 0 || o.d2 == 0) throw ConfigError("gen_quadratic_bilevel: empty shape");
  if (!(o.mu_g > 0.0) || !(o.mu_g <= o.L_g))
    throw ConstructionError("gen_quadratic_bilevel: need 0 < mu_g <= L_g");
  if (!(o.tau >= 0.0)) throw ConstructionError("gen_quadratic_bilevel: tau must be >= 0");
  if (2.0 * o.tau > o.L_g - o.mu_g)
    throw ConstructionError("gen_quadratic_bilevel: tau = " + std::to_string(o.tau) +
                            " is too large for the band [" + std::to_string(o.mu_g) + ", " +
                            std::to_string(o.L_g) + "]; need 2 tau <= L_g - mu_g");
  if (!(o.b_min >= 0.0) || !(o.b_min <= o.b_max))
    throw ConstructionError("gen_quadratic_bilevel: need 0 <= b_min <= b_max");
  if (!(o.c_min >= 0.0) || !(o.c_min <= o.c_max) || !(o.d_scale >= 0.0))
    throw ConstructionError("gen_quadratic_bilevel: invalid outer curvature");

  const Stream root(o.seed, static_cast<std::uint64_t>(StreamTag::kInstance));
  Stream base = root.derive({0});
  const Matrix Abar = detail::random_spd_band(base, o.d2, o.mu_g + o.tau, o.L_g - o.tau);
  const Matrix Bbar = detail::random_coupling(base, o.d2, o.d1, o.b_min, o.b_max);
  const Vector cbar = detail::gaussian_vector(base, o.d2);
  const Matrix C = o.c_max > 0.0 ? detail::random_spd_band(base, o.d2, o.c_min, o.c_max)
                                 : Matrix(o.d2, o.d2);
  const Vector t = detail::gaussian_vector(base, o.d2);
  const Matrix D = o.pure_indirect ? Matrix(o.d1, o.d1) : Matrix::identity(o.d1) * o.d_scale;

  const auto EA = detail::centered_perturbations(o.M, [&](std::size_t m) {
    Stream s = root.derive({1, m});
    return detail::gaussian_symmetric(s, o.d2);
  });
  const auto EB = detail::centered_perturbations(o.M, [&](std::size_t m) {
    Stream s = root.derive({2, m});
    return detail::gaussian_matrix(s, o.d2, o.d1);
  });
  std::vector<Vector> ec;
  Vector ec_mean(o.d2);
  for (std::size_t m = 0; m < o.M; ++m) {
    Stream s = root.derive({3, m});
    Vector e = detail::gaussian_vector(s, o.d2);
    const double nrm = norm(e);
    if (nrm > 0.0) e /= nrm;
    ec_mean += e;
    ec.push_back(std::move(e));
  }
  ec_mean /= static_cast<double>(o.M);

  QuadraticBilevelInstance inst;
  inst.d1 = o.d1;
  inst.d2 = o.d2;
  inst.tau = o.tau;
  inst.mu_g = o.mu_g;
  inst.L_g = o.L_g;
  inst.sigma_f = o.sigma_f;
  inst.sigma_g = o.sigma_g;
  for (std::size_t m = 0; m < o.M; ++m) {
    BilevelClient c;
    c.A = Abar;
    if (o.tau > 0.0) {
      c.A.add_scaled(o.tau, EA[m]);
      c.A = detail::project_band(c.A, o.mu_g, o.L_g);
    }
    c.B = Bbar;
    c.B.add_scaled(o.tau, EB[m]);
    c.c = cbar;
    c.c.add_scaled(o.tau, ec[m] - ec_mean);
    c.C = C;
    c.t = t;
    c.D = D;
    inst.clients.push_back(std::move(c));
  }
  inst.x0 = Vector(o.d1);
  inst.validate();
  inst.heterogeneity = o.M == 1 || o.tau == 0.0 ? 0.0 : measured_heterogeneity(inst);
  return inst;
}

}  // namespace fedmsa
