#pragma once

// Truncated Neumann series for H^{-1} v and the two stochastic
// inverse-Hessian-vector-product estimators built from sampled Hessians,
// together with closed-form bias / variance bounds.
//
// Index convention: a configuration with N rounds produces s_{N-1}, an
// estimate of HI[N-1] v where
//     HI[N] = (1/L) * sum_{n=0}^{N} (I - H/L)^n.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fedmsa/errors.hpp"
#include "fedmsa/numerics.hpp"
#include "fedmsa/rng.hpp"

namespace fedmsa {

struct NeumannConfig {
  double L = 1.0;   // series scaling (smoothness)
  double mu = 1.0;  // strong convexity
  std::size_t N = 1;
  std::size_t B = 1;
  double sigma2 = 0.0;      // per-sample Hessian noise, E||noise||^2
  double sigma_bar2 = 0.0;  // inter-client variance, E||H_i - H||^2

  double kappa() const { return L / mu; }
  double xi() const { return (sigma2 + sigma_bar2) / (static_cast<double>(B) * L * L); }

  void validate() const {
    if (!(mu > 0.0) || !(mu <= L))
      throw ConstructionError("NeumannConfig: need 0 < mu <= L (mu=" + std::to_string(mu) +
                              ", L=" + std::to_string(L) + ")");
    if (N < 1) throw ConstructionError("NeumannConfig: N must be >= 1");
    if (B < 1) throw ConstructionError("NeumannConfig: B must be >= 1");
    if (!(sigma2 >= 0.0) || !(sigma_bar2 >= 0.0))
      throw ConstructionError("NeumannConfig: noise levels must be non-negative");
  }
};

// Draws noisy Hessian samples  H_i + s * scale * E_j  where the client i is
// uniform, s is a fair sign and E_j is drawn uniformly from a fixed family of
// symmetric matrices with unit operator norm. Every sample therefore has
// ||noise||^2 = scale^2 exactly, so sigma2() is known rather than bounded.
class HessianSampler {
 public:
  HessianSampler(std::vector<Matrix> client_hessians, double noise_scale)
      : clients_(std::move(client_hessians)), noise_scale_(noise_scale) {
    if (clients_.empty()) throw ConstructionError("HessianSampler: no clients");
    if (!(noise_scale_ >= 0.0)) throw ConstructionError("HessianSampler: negative noise scale");
    const std::size_t d = clients_.front().rows();
    if (d == 0) throw ShapeError("HessianSampler: empty Hessian");
    mean_ = Matrix(d, d);
    for (const auto& h : clients_) {
      if (h.rows() != d || h.cols() != d)
        throw ShapeError("HessianSampler: client Hessians must share one square shape");
      require_symmetric(h, "HessianSampler");
      mean_ += h;
    }
    mean_ *= 1.0 / static_cast<double>(clients_.size());
    mean_ = symmetrized(mean_);
    for (std::size_t i = 0; i < d; ++i) {
      Matrix e(d, d);
      e(i, i) = 1.0;
      directions_.push_back(std::move(e));
    }
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j) {
        Matrix e(d, d);
        e(i, j) = 1.0;
        e(j, i) = 1.0;
        directions_.push_back(std::move(e));
      }
    double acc = 0.0;
    for (const auto& h : clients_) {
      const double dev = operator_norm(h - mean_);
      acc += dev * dev;
    }
    sigma_bar2_ = acc / static_cast<double>(clients_.size());
  }

  std::size_t dim() const noexcept { return mean_.rows(); }
  std::size_t num_clients() const noexcept { return clients_.size(); }
  const Matrix& client_hessian(std::size_t i) const { return clients_.at(i); }
  const Matrix& mean_hessian() const noexcept { return mean_; }
  double noise_scale() const noexcept { return noise_scale_; }

  double sigma2() const noexcept { return noise_scale_ * noise_scale_; }
  double sigma_bar2() const noexcept { return sigma_bar2_; }

  // Throws unless every client Hessian and the mean lie in the band [mu, L].
  void require_band(double mu, double L, double tol = 1e-9) const {
    auto check = [&](const Matrix& h, const std::string& who) {
      const auto eig = symmetric_eigen(h);
      if (eig.values[0] < mu - tol || eig.values[eig.values.size() - 1] > L + tol)
        throw ConstructionError("HessianSampler: " + who + " spectrum outside [mu, L]");
    };
    for (std::size_t i = 0; i < clients_.size(); ++i)
      check(clients_[i], "client " + std::to_string(i));
    check(mean_, "mean Hessian");
  }

  // Adds one sample (client + noise) into `acc` with weight w.
  void accumulate_sample(Stream& rng, double w, Matrix& acc) const {
    const auto client = static_cast<std::size_t>(rng.uniform_index(clients_.size()));
    acc.add_scaled(w, clients_[client]);
    if (noise_scale_ > 0.0) {
      const auto dir = static_cast<std::size_t>(rng.uniform_index(directions_.size()));
      acc.add_scaled(w * noise_scale_ * rng.sign(), directions_[dir]);
    }
  }

  Matrix draw(Stream& rng) const {
    Matrix h(dim(), dim());
    accumulate_sample(rng, 1.0, h);
    return h;
  }

  // Average of `batch` independent samples drawn with replacement.
  Matrix draw_batch(Stream& rng, std::size_t batch) const {
    Matrix h(dim(), dim());
    const double w = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) accumulate_sample(rng, w, h);
    return h;
  }

 private:
  std::vector<Matrix> clients_;
  Matrix mean_;
  double noise_scale_;
  double sigma_bar2_ = 0.0;
  std::vector<Matrix> directions_;
};

inline NeumannConfig config_for(const HessianSampler& sampler, double mu, double L,
                                std::size_t N, std::size_t B) {
  NeumannConfig cfg{L, mu, N, B, sampler.sigma2(), sampler.sigma_bar2()};
  cfg.validate();
  return cfg;
}

namespace detail {

// p <- v/L + (I - H/L) p
inline void neumann_step(const Matrix& h, double L, const Vector& v, Vector& p) {
  Vector hp = h * p;
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = v[i] / L + p[i] - hp[i] / L;
}

// u <- (I - H/L) u
inline void contraction_step(const Matrix& h, double L, Vector& u) {
  Vector hu = h * u;
  for (std::size_t i = 0; i < u.size(); ++i) u[i] -= hu[i] / L;
}

inline void require_dims(const Matrix& h, const Vector& v, const char* who) {
  if (!h.square() || h.rows() != v.size())
    throw ShapeError(std::string(who) + ": Hessian " + std::to_string(h.rows()) + "x" +
                     std::to_string(h.cols()) + " vs vector " + std::to_string(v.size()));
}

}  // namespace detail

// HI[N] v via p_0 = v/L, p_n = v/L + (I - H/L) p_{n-1}.
inline Vector truncated_neumann_exact(const Matrix& H, double L, const Vector& v,
                                      std::size_t N) {
  detail::require_dims(H, v, "truncated_neumann_exact");
  require_symmetric(H, "truncated_neumann_exact");
  if (!(L > 0.0)) throw Error("truncated_neumann_exact: L must be positive");
  Vector p = v / L;
  for (std::size_t n = 1; n <= N; ++n) detail::neumann_step(H, L, v, p);
  return p;
}

// Draws `count` independent batch-averaged Hessians H^_1 .. H^_count.
inline std::vector<Matrix> draw_batch_hessians(const HessianSampler& sampler, std::size_t count,
                                               std::size_t batch, Stream& rng) {
  std::vector<Matrix> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) out.push_back(sampler.draw_batch(rng, batch));
  return out;
}

// (1/L) sum_{n=0}^{count} Q^_n v with Q^_n = (I - H^_1/L) ... (I - H^_n/L),
// evaluated by the p-recursion. H^_1 is the outermost factor, so the
// recursion consumes the batches from last to first.
inline Vector neumann_sum_recursive(const std::vector<Matrix>& batches, double L,
                                    const Vector& v) {
  Vector p = v / L;
  for (std::size_t n = batches.size(); n-- > 0;) {
    detail::require_dims(batches[n], v, "neumann_sum_recursive");
    detail::neumann_step(batches[n], L, v, p);
  }
  return p;
}

// Same quantity as neumann_sum_recursive, built term by term from the
// explicit products.
inline Vector neumann_sum_products(const std::vector<Matrix>& batches, double L,
                                   const Vector& v) {
  Vector s = v / L;
  for (std::size_t n = 1; n <= batches.size(); ++n) {
    Vector u = v;
    for (std::size_t i = n; i-- > 0;) {
      detail::require_dims(batches[i], v, "neumann_sum_products");
      detail::contraction_step(batches[i], L, u);
    }
    s.add_scaled(1.0 / L, u);
  }
  return s;
}

// Averaged-partial-sum estimator: N-1 fresh batches, returns s_{N-1}.
inline Vector stochastic_ihvp_avg(const HessianSampler& sampler, const NeumannConfig& cfg,
                                  const Vector& v, Stream& rng) {
  cfg.validate();
  if (v.size() != sampler.dim()) throw ShapeError("stochastic_ihvp_avg: dimension mismatch");
  const auto batches = draw_batch_hessians(sampler, cfg.N - 1, cfg.B, rng);
  return neumann_sum_recursive(batches, cfg.L, v);
}

// Random-index estimator: N' ~ Unif{0..N-1}, returns (N/L) Q^_{N'} v built
// from N' fresh batches.
inline Vector stochastic_ihvp_rand(const HessianSampler& sampler, const NeumannConfig& cfg,
                                   const Vector& v, Stream& rng) {
  cfg.validate();
  if (v.size() != sampler.dim()) throw ShapeError("stochastic_ihvp_rand: dimension mismatch");
  const auto depth = static_cast<std::size_t>(rng.uniform_index(cfg.N));
  Vector u = v;
  if (depth > 0) {
    const auto batches = draw_batch_hessians(sampler, depth, cfg.B, rng);
    for (std::size_t i = depth; i-- > 0;) detail::contraction_step(batches[i], cfg.L, u);
  }
  return u * (static_cast<double>(cfg.N) / cfg.L);
}

// ||E[s_{N-1}] - H^{-1} v|| / ||v|| <= (1/mu)(1 - 1/kappa)^N
inline double bias_bound(const NeumannConfig& cfg) {
  cfg.validate();
  return std::pow(1.0 - 1.0 / cfg.kappa(), static_cast<double>(cfg.N)) / cfg.mu;
}

// E||s_{N-1} - E s_{N-1}||^2 / ||v||^2 <= N^2 ((1 + Xi)^N - 1) / L^2
inline double variance_bound_general(const NeumannConfig& cfg) {
  cfg.validate();
  const double n = static_cast<double>(cfg.N);
  return n * n * std::expm1(n * std::log1p(cfg.xi())) / (cfg.L * cfg.L);
}

// 8 kappa^3 Xi / L^2, valid only when Xi * kappa <= 1/4.
inline double variance_bound_small_noise(const NeumannConfig& cfg) {
  cfg.validate();
  const double k = cfg.kappa();
  const double xi = cfg.xi();
  if (xi * k > 0.25)
    throw RegimeError("variance_bound_small_noise requires Xi*kappa <= 1/4 (Xi*kappa=" +
                      std::to_string(xi * k) + ")");
  return 8.0 * k * k * k * xi / (cfg.L * cfg.L);
}

inline bool small_noise_regime(const NeumannConfig& cfg) {
  return cfg.xi() * cfg.kappa() <= 0.25;
}

}  // namespace fedmsa
