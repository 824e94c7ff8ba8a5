#pragma once

// Concrete multi-sequence problems:
//  * a federated quadratic bilevel problem with closed-form ground truth,
//  * the three-level risk-averse compositional problem on regression data.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedmsa/errors.hpp"
#include "fedmsa/msa.hpp"
#include "fedmsa/numerics.hpp"
#include "fedmsa/rng.hpp"

namespace fedmsa {

// ---------------------------------------------------------------------------
// Quadratic bilevel
//
//   g^m(x, w) = 1/2 w^T A_m w - w^T (B_m x + c_m)
//   f^m(x, w) = 1/2 (w - t_m)^T C_m (w - t_m) + 1/2 x^T D_m x
//
// Mapped to an N = 1 problem with z = [w; v]:
//   S^m(x, z) = [ grad_w g^m ; hess_w g^m v - grad_w f^m ]
//             = [ A_m w - B_m x - c_m ; A_m v - C_m (w - t_m) ]
//   P^m(x, z) = grad_x f^m - hess_xw g^m v = D_m x + B_m^T v
// so that P(x, w*(x), v*(x)) is the hypergradient of f(x) = mean_m f^m(x, w*(x)).
// ---------------------------------------------------------------------------

struct BilevelClient {
  Matrix A;  // d2 x d2, SPD
  Matrix B;  // d2 x d1
  Vector c;  // d2
  Matrix C;  // d2 x d2, PSD
  Vector t;  // d2
  Matrix D;  // d1 x d1, PSD
};

struct QuadraticBilevelInstance {
  std::size_t d1 = 0;
  std::size_t d2 = 0;
  std::vector<BilevelClient> clients;
  double sigma_f = 0.0;  // gradient noise scale
  double sigma_g = 0.0;  // Hessian noise scale
  // Generation metadata.
  double tau = 0.0;
  double mu_g = 0.0;
  double L_g = 0.0;
  double heterogeneity = 0.0;  // measured max_m ||J^m - J||
  Vector x0;                   // empty means zeros

  std::size_t num_clients() const noexcept { return clients.size(); }

  Matrix mean_A() const { return mean_of([](const BilevelClient& c) { return c.A; }); }
  Matrix mean_B() const { return mean_of([](const BilevelClient& c) { return c.B; }); }
  Matrix mean_C() const { return mean_of([](const BilevelClient& c) { return c.C; }); }
  Matrix mean_D() const { return mean_of([](const BilevelClient& c) { return c.D; }); }
  Vector mean_c() const {
    Vector acc(d2);
    for (const auto& cl : clients) acc += cl.c;
    return acc / static_cast<double>(clients.size());
  }
  // mean_m C_m t_m
  Vector mean_Ct() const {
    Vector acc(d2);
    for (const auto& cl : clients) acc += cl.C * cl.t;
    return acc / static_cast<double>(clients.size());
  }

  void validate() const {
    if (clients.empty()) throw ConstructionError("bilevel instance has no clients");
    for (const auto& cl : clients) {
      if (cl.A.rows() != d2 || cl.A.cols() != d2 || cl.B.rows() != d2 || cl.B.cols() != d1 ||
          cl.c.size() != d2 || cl.C.rows() != d2 || cl.C.cols() != d2 || cl.t.size() != d2 ||
          cl.D.rows() != d1 || cl.D.cols() != d1)
        throw ShapeError("bilevel client data has inconsistent dimensions");
      if (!is_symmetric(cl.A) || !is_symmetric(cl.C) || !is_symmetric(cl.D))
        throw ShapeError("bilevel client A, C, D must be symmetric");
    }
    if (!x0.empty() && x0.size() != d1) throw ShapeError("bilevel x0 has wrong dimension");
    try {
      (void)cholesky(symmetrized(mean_A()));
    } catch (const DefinitenessError&) {
      throw ConstructionError("mean inner Hessian is not SPD");
    }
  }

  // Inner solution w*(x) = Abar^{-1} (Bbar x + cbar).
  Vector w_star(const Vector& x) const {
    return solve_spd(symmetrized(mean_A()), mean_B() * x + mean_c());
  }

  // Root of the second S-block at w: Abar v = mean_m C_m (w - t_m).
  Vector v_root(const Vector& w) const {
    return solve_spd(symmetrized(mean_A()), mean_C() * w - mean_Ct());
  }

  Vector v_star(const Vector& x) const { return v_root(w_star(x)); }

  double objective(const Vector& x) const {
    const Vector w = w_star(x);
    double acc = 0.0;
    for (const auto& cl : clients) {
      const Vector r = w - cl.t;
      acc += 0.5 * dot(r, cl.C * r) + 0.5 * dot(x, cl.D * x);
    }
    return acc / static_cast<double>(clients.size());
  }

  // Hessian of the reduced objective, D + G^T C G with G = Abar^{-1} Bbar.
  Matrix reduced_hessian() const {
    const Matrix Abar = symmetrized(mean_A());
    const Matrix Bbar = mean_B();
    const Matrix l = cholesky(Abar);
    Matrix G(d2, d1);
    for (std::size_t j = 0; j < d1; ++j) {
      const Vector col = cholesky_solve(l, Bbar.column(j));
      for (std::size_t i = 0; i < d2; ++i) G(i, j) = col[i];
    }
    return symmetrized(mean_D() + G.transpose() * mean_C() * G);
  }

  // Minimizer of the reduced objective when its Hessian is SPD.
  std::optional<Vector> minimizer() const {
    const Matrix H = reduced_hessian();
    const Vector grad0 = mean_B().transpose() * v_root(w_star(Vector(d1)));
    try {
      return -solve_spd(H, grad0);
    } catch (const DefinitenessError&) {
      return std::nullopt;
    }
  }

 private:
  template <typename Get>
  Matrix mean_of(Get get) const {
    Matrix acc = get(clients.front());
    for (std::size_t m = 1; m < clients.size(); ++m) acc += get(clients[m]);
    acc *= 1.0 / static_cast<double>(clients.size());
    return acc;
  }
};

// Exact hypergradient via the implicit function theorem: two SPD solves (w*,
// then the linear system for v) and grad = Dbar x + Bbar^T v.
inline Vector closed_form_hypergradient(const QuadraticBilevelInstance& inst, const Vector& x) {
  inst.validate();
  if (x.size() != inst.d1) throw ShapeError("closed_form_hypergradient: dimension mismatch");
  const Vector v = inst.v_star(x);
  return inst.mean_D() * x + transpose_times(inst.mean_B(), v);
}

namespace detail {

inline Matrix gaussian_matrix(Stream& rng, std::size_t rows, std::size_t cols) {
  Matrix g(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) g(i, j) = rng.normal();
  return g;
}

inline Matrix gaussian_symmetric(Stream& rng, std::size_t n) {
  Matrix g(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      g(i, j) = rng.normal();
      g(j, i) = g(i, j);
    }
  return g;
}

inline Vector gaussian_vector(Stream& rng, std::size_t n) {
  Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

}  // namespace detail

// Noise draws for one sample token of the bilevel oracles. Sub-streams keep
// the direct and indirect parts of P independent of each other.
namespace detail {

inline Vector bilevel_direct(const QuadraticBilevelInstance& inst, std::size_t m,
                             const Vector& x, const SampleToken& tok) {
  const auto& cl = inst.clients[m];
  Vector out = cl.D * x;
  if (inst.sigma_f > 0.0) {
    Stream s = tok.stream().derive({1});
    out.add_scaled(inst.sigma_f, gaussian_vector(s, inst.d1));
  }
  return out;
}

inline Vector bilevel_indirect(const QuadraticBilevelInstance& inst, std::size_t m,
                               const Vector& v, const SampleToken& tok) {
  const auto& cl = inst.clients[m];
  if (inst.sigma_g > 0.0) {
    Stream s = tok.stream().derive({2});
    Matrix Bt = cl.B;
    Bt.add_scaled(inst.sigma_g, gaussian_matrix(s, inst.d2, inst.d1));
    return transpose_times(Bt, v);
  }
  return transpose_times(cl.B, v);
}

inline Vector bilevel_inner(const QuadraticBilevelInstance& inst, std::size_t m,
                            const Vector& x, const Vector& z, const SampleToken& tok) {
  const auto& cl = inst.clients[m];
  const Vector w = slice(z, 0, inst.d2);
  const Vector v = slice(z, inst.d2, inst.d2);
  Matrix A = cl.A;
  Matrix B = cl.B;
  Vector grad_noise(inst.d2);
  if (inst.sigma_g > 0.0) {
    Stream s = tok.stream().derive({3});
    A.add_scaled(inst.sigma_g, gaussian_symmetric(s, inst.d2));
    B.add_scaled(inst.sigma_g, gaussian_matrix(s, inst.d2, inst.d1));
  }
  if (inst.sigma_f > 0.0) {
    Stream s = tok.stream().derive({4});
    grad_noise = gaussian_vector(s, inst.d2) * inst.sigma_f;
  }
  Vector s1 = A * w - B * x - cl.c;
  Vector s2 = A * v - cl.C * (w - cl.t) - grad_noise;
  return concat(s1, s2);
}

}  // namespace detail

inline MsaProblem bilevel_to_msa(const QuadraticBilevelInstance& instance) {
  instance.validate();
  auto inst = std::make_shared<const QuadraticBilevelInstance>(instance);
  const std::size_t d1 = inst->d1;
  const std::size_t d2 = inst->d2;

  MsaProblem p;
  p.name = "quadratic-bilevel";
  p.num_clients = inst->num_clients();
  p.x_dim = d1;
  p.z_dims = {2 * d2};

  MsaProblem::IndirectSplit split;
  split.direct = [inst](std::size_t m, const Vector& x, const Sequence&, const SampleToken& tok) {
    return detail::bilevel_direct(*inst, m, x, tok);
  };
  split.indirect = [inst, d2](std::size_t m, const Vector&, const Sequence& z,
                              const SampleToken& tok) {
    return detail::bilevel_indirect(*inst, m, slice(z[0], d2, d2), tok);
  };
  p.p = [inst, d2](std::size_t m, const Vector& x, const Sequence& z, const SampleToken& tok) {
    Vector out = detail::bilevel_direct(*inst, m, x, tok);
    out += detail::bilevel_indirect(*inst, m, slice(z[0], d2, d2), tok);
    return out;
  };
  p.split = std::move(split);
  p.s = [inst](std::size_t m, std::size_t n, const Vector& prev, const Vector& cur,
               const SampleToken& tok) {
    if (n != 1) throw ShapeError("bilevel problem has a single inner sequence");
    return detail::bilevel_inner(*inst, m, prev, cur, tok);
  };

  const Matrix Dbar = inst->mean_D();
  const Matrix Bbar = inst->mean_B();
  p.exact_p = [Dbar, Bbar, d2](const Vector& x, const Sequence& z) {
    return Dbar * x + transpose_times(Bbar, slice(z[0], d2, d2));
  };
  p.fixed_point = [inst](std::size_t n, const Vector& x) {
    if (n != 1) throw ShapeError("bilevel problem has a single inner sequence");
    const Vector w = inst->w_star(x);
    return concat(w, inst->v_root(w));
  };
  p.x_star = inst->minimizer();
  p.x0 = inst->x0.empty() ? Vector(d1) : inst->x0;
  p.z0 = {Vector(2 * d2)};
  return p;
}

// 1-D toy: g = 1/2 (w - x)^2 (up to an x-only term), f = 1/2 w^2, so
// w*(x) = v*(x) = x and grad f(x) = x.
inline QuadraticBilevelInstance toy_bilevel(std::size_t clients = 1, double x0 = 1.0) {
  QuadraticBilevelInstance inst;
  inst.d1 = 1;
  inst.d2 = 1;
  inst.mu_g = 1.0;
  inst.L_g = 1.0;
  for (std::size_t m = 0; m < clients; ++m)
    inst.clients.push_back(BilevelClient{Matrix{{1.0}}, Matrix{{1.0}}, Vector{0.0},
                                         Matrix{{1.0}}, Vector{0.0}, Matrix{{0.0}}});
  inst.x0 = Vector{x0};
  return inst;
}

// ---------------------------------------------------------------------------
// Risk-averse three-level composition
//
//   U(x; i)   = (b_i - (a_i^T x)^2)^2
//   f0(x)     = (x, mean_i U(x; i))                     R^d     -> R^{d+1}
//   f1(x, y)  = (y, mean_i r(U(x; i) - y))              R^{d+1} -> R^2
//   f2(u, s)  = u + lambda sqrt(s + delta)              R^2     -> R
// with r(t) = max(0, t)^2 (or max(0, t) when squared_risk is false).
// ---------------------------------------------------------------------------

struct RiskAverseMcoInstance {
  std::size_t d = 0;
  std::vector<Vector> a;
  std::vector<double> b;
  double lambda = 1.0;
  double delta = 1e-3;
  bool squared_risk = true;
  std::vector<std::vector<std::size_t>> partition;  // client -> sample indices
  std::optional<Vector> x_star;
  Vector x0;  // empty means zeros

  std::size_t num_samples() const noexcept { return a.size(); }
  std::size_t num_clients() const noexcept { return partition.size(); }

  void validate() const {
    if (d == 0) throw ConstructionError("risk-averse instance: d must be >= 1");
    if (a.empty() || a.size() != b.size())
      throw ConstructionError("risk-averse instance: dataset is empty or ragged");
    for (const auto& ai : a)
      if (ai.size() != d) throw ShapeError("risk-averse instance: feature dimension mismatch");
    if (!(delta > 0.0)) throw ConstructionError("risk-averse instance: delta must be > 0");
    if (!(lambda >= 0.0)) throw ConstructionError("risk-averse instance: lambda must be >= 0");
    if (partition.empty()) throw ConstructionError("risk-averse instance: empty client partition");
    for (const auto& part : partition) {
      if (part.empty()) throw ConstructionError("risk-averse instance: client with no samples");
      for (auto i : part)
        if (i >= a.size()) throw ConstructionError("risk-averse instance: sample index out of range");
    }
    if (x_star && x_star->size() != d) throw ShapeError("risk-averse instance: x* dimension");
    if (!x0.empty() && x0.size() != d) throw ShapeError("risk-averse instance: x0 dimension");
  }

  double loss(const Vector& x, std::size_t i) const {
    const double s = dot(a[i], x);
    const double r = b[i] - s * s;
    return r * r;
  }

  // grad U(x; i) = -4 s (b - s^2) a
  Vector loss_grad(const Vector& x, std::size_t i) const {
    const double s = dot(a[i], x);
    return a[i] * (-4.0 * s * (b[i] - s * s));
  }

  double risk(double t) const {
    if (t <= 0.0) return 0.0;
    return squared_risk ? t * t : t;
  }
  // Derivative of the risk term; 0 at the kink.
  double risk_derivative(double t) const {
    if (t <= 0.0) return 0.0;
    return squared_risk ? 2.0 * t : 1.0;
  }

  // f0 averaged over the given samples.
  template <typename Indices>
  Vector level0(const Vector& x, const Indices& idx) const {
    double acc = 0.0;
    std::size_t count = 0;
    for (auto i : idx) {
      acc += loss(x, i);
      ++count;
    }
    Vector out(d + 1);
    for (std::size_t j = 0; j < d; ++j) out[j] = x[j];
    out[d] = acc / static_cast<double>(count);
    return out;
  }

  template <typename Indices>
  Vector level1(const Vector& z1, const Indices& idx) const {
    const Vector x = slice(z1, 0, d);
    const double y = z1[d];
    double acc = 0.0;
    std::size_t count = 0;
    for (auto i : idx) {
      acc += risk(loss(x, i) - y);
      ++count;
    }
    return Vector{y, acc / static_cast<double>(count)};
  }

  // The second argument is clamped at zero so the square root stays real when
  // a tracked estimate dips below zero.
  double level2(const Vector& z2) const {
    return z2[0] + lambda * std::sqrt(std::max(z2[1], 0.0) + delta);
  }
  Vector level2_grad(const Vector& z2) const {
    return Vector{1.0, lambda / (2.0 * std::sqrt(std::max(z2[1], 0.0) + delta))};
  }

  // J0^T g for g in R^{d+1}: g_x + g_u * mean grad U(x).
  template <typename Indices>
  Vector level0_vjp(const Vector& x, const Vector& g, const Indices& idx) const {
    Vector grad(d);
    std::size_t count = 0;
    for (auto i : idx) {
      grad += loss_grad(x, i);
      ++count;
    }
    Vector out = slice(g, 0, d);
    out.add_scaled(g[d] / static_cast<double>(count), grad);
    return out;
  }

  // J1^T g for g in R^2 at z1 = (x, y).
  template <typename Indices>
  Vector level1_vjp(const Vector& z1, const Vector& g, const Indices& idx) const {
    const Vector x = slice(z1, 0, d);
    const double y = z1[d];
    Vector gx(d);
    double gy = 0.0;
    std::size_t count = 0;
    for (auto i : idx) {
      const double rp = risk_derivative(loss(x, i) - y);
      if (rp != 0.0) {
        gx.add_scaled(rp, loss_grad(x, i));
        gy -= rp;
      }
      ++count;
    }
    const double w = g[1] / static_cast<double>(count);
    Vector out(d + 1);
    for (std::size_t j = 0; j < d; ++j) out[j] = w * gx[j];
    out[d] = g[0] + w * gy;
    return out;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(a.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }

  // Full-data objective f2(f1(f0(x))).
  double composite_value(const Vector& x) const {
    const auto idx = all_indices();
    return level2(level1(level0(x, idx), idx));
  }

  // Full-data gradient via the Jacobian chain along the exact fixed points.
  Vector composite_gradient(const Vector& x) const {
    const auto idx = all_indices();
    const Vector z1 = level0(x, idx);
    const Vector z2 = level1(z1, idx);
    return level0_vjp(x, level1_vjp(z1, level2_grad(z2), idx), idx);
  }
};

inline MsaProblem mco_to_msa(const RiskAverseMcoInstance& instance) {
  instance.validate();
  auto inst = std::make_shared<const RiskAverseMcoInstance>(instance);
  const std::size_t d = inst->d;

  // One uniformly drawn sample of client m per level.
  auto pick = [inst](std::size_t m, Stream& s) {
    const auto& part = inst->partition[m];
    return std::array<std::size_t, 1>{part[static_cast<std::size_t>(s.uniform_index(part.size()))]};
  };

  MsaProblem p;
  p.name = "risk-averse-mco";
  p.num_clients = inst->num_clients();
  p.x_dim = d;
  p.z_dims = {d + 1, 2};
  p.p = [inst, pick](std::size_t m, const Vector& x, const Sequence& z, const SampleToken& tok) {
    Stream s0 = tok.stream().derive({0});
    Stream s1 = tok.stream().derive({1});
    const auto i0 = pick(m, s0);
    const auto i1 = pick(m, s1);
    const Vector g1 = inst->level1_vjp(z[0], inst->level2_grad(z[1]), i1);
    return inst->level0_vjp(x, g1, i0);
  };
  p.s = [inst, pick](std::size_t m, std::size_t n, const Vector& prev, const Vector& cur,
                     const SampleToken& tok) {
    Stream s = tok.stream().derive({n});
    const auto idx = pick(m, s);
    if (n == 1) return cur - inst->level0(prev, idx);
    if (n == 2) return cur - inst->level1(prev, idx);
    throw ShapeError("risk-averse problem has two inner sequences");
  };
  p.exact_p = [inst](const Vector& x, const Sequence& z) {
    Vector acc(inst->d);
    for (const auto& part : inst->partition) {
      const Vector g1 = inst->level1_vjp(z[0], inst->level2_grad(z[1]), part);
      acc += inst->level0_vjp(x, g1, part);
    }
    return acc / static_cast<double>(inst->num_clients());
  };
  const auto all = inst->all_indices();
  p.fixed_point = [inst, all](std::size_t n, const Vector& prev) {
    if (n == 1) return inst->level0(prev, all);
    if (n == 2) return inst->level1(prev, all);
    throw ShapeError("risk-averse problem has two inner sequences");
  };
  p.x_star = inst->x_star;
  p.x0 = inst->x0.empty() ? Vector(d) : inst->x0;
  // Trackers start consistent with x0.
  const Vector z1 = inst->level0(p.x0, all);
  p.z0 = {z1, inst->level1(z1, all)};
  return p;
}

}  // namespace fedmsa
