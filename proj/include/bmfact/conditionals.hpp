#pragma once

#include <cmath>
#include <stdexcept>

#include "bmfact/linalg.hpp"
#include "bmfact/priors.hpp"
#include "bmfact/state.hpp"

namespace bmfact {

// Conditional posteriors of the Gaussian layer. Given the latent surfaces
// these are exact conjugate conditionals; each builder returns the
// distribution so that draws and moment checks share one code path.
//
// All builders add `ridge` to the precision diagonal before factorizing.
// A factor whose total loading energy is (numerically) zero has a singular
// conditional precision; the ridge keeps the draw defined and callers are
// told via the degenerate flag.

inline constexpr double kDegenerateEnergy = 1e-12;

/// Posterior of vec(Lambda_i), column-major. The likelihood cross-product
/// (F_A (x) F_T)'(F_A (x) F_T) is formed as (F_A'F_A) (x) (F_T'F_T).
inline DenseGaussian loading_conditional(const ModelState& state, const PriorSpec& prior,
                                         Index i, double ridge) {
  const Index q = state.n_time_factors(), r = state.n_age_factors();
  const double inv_s2 = 1.0 / state.sigma2(i);
  const Matrix gram_t = state.time_factors.transpose() * state.time_factors;
  const Matrix gram_a = state.age_factors.transpose() * state.age_factors;
  Matrix precision = kron(gram_a, gram_t) * inv_s2;
  for (Index rr = 0; rr < r; ++rr)
    for (Index qq = 0; qq < q; ++qq)
      precision(rr * q + qq, rr * q + qq) += 1.0 / prior.loading_var(qq, rr) + ridge;
  const Matrix cross = state.time_factors.transpose() * state.latent[i] * state.age_factors;
  Vector canonical = Eigen::Map<const Vector>(cross.data(), q * r) * inv_s2;
  return DenseGaussian(std::move(precision), std::move(canonical));
}

namespace detail {

inline Vector rw_precision_diag(Index m, double inv_tau, bool anchored, double ridge) {
  Vector d = Vector::Constant(m, 2.0 * inv_tau);
  d(0) = inv_tau;
  d(m - 1) = inv_tau;
  if (anchored) d(0) += inv_tau;
  d.array() += ridge;
  return d;
}

}  // namespace detail

/// Posterior of age factor column r given everything else. The likelihood
/// precision is a scalar multiple of the identity, so the full precision
/// stays tridiagonal and the draw is a banded solve.
inline TridiagGaussian age_factor_conditional(const ModelState& state, const PriorSpec& prior,
                                              Index r, double ridge,
                                              bool* degenerate = nullptr) {
  const Index a = state.n_ages();
  const double inv_tau = 1.0 / state.tau_age(r);
  double energy = 0.0;
  Vector canonical = Vector::Zero(a);
  for (Index i = 0; i < state.n_populations(); ++i) {
    const Vector u = state.time_factors * state.loadings[i].col(r);
    // Working observations: remove every age factor except r.
    Matrix partial = state.latent[i] - fitted_mean(state, i);
    partial.noalias() += u * state.age_factors.col(r).transpose();
    const double inv_s2 = 1.0 / state.sigma2(i);
    canonical.noalias() += inv_s2 * (partial.transpose() * u);
    energy += inv_s2 * u.squaredNorm();
  }
  if (degenerate) *degenerate = energy < kDegenerateEnergy;
  Vector diag = detail::rw_precision_diag(a, inv_tau, prior.anchor_age_level, ridge);
  diag.array() += energy;
  Vector sub = Vector::Constant(a - 1, -inv_tau);
  return TridiagGaussian(std::move(diag), std::move(sub), std::move(canonical));
}

/// Posterior of time factor column q; the drift contributes the canonical
/// shift (kappa/tau) * (-1, 0, ..., 0, 1)'.
inline TridiagGaussian time_factor_conditional(const ModelState& state, const PriorSpec& prior,
                                               Index q, double ridge,
                                               bool* degenerate = nullptr) {
  const Index t = state.n_years();
  const double inv_tau = 1.0 / state.tau_time(q);
  double energy = 0.0;
  Vector canonical = drift_canonical_shift(state.drift(q), state.tau_time(q), t);
  for (Index i = 0; i < state.n_populations(); ++i) {
    const Vector v = state.age_factors * state.loadings[i].row(q).transpose();
    Matrix partial = state.latent[i] - fitted_mean(state, i);
    partial.noalias() += state.time_factors.col(q) * v.transpose();
    const double inv_s2 = 1.0 / state.sigma2(i);
    canonical.noalias() += inv_s2 * (partial * v);
    energy += inv_s2 * v.squaredNorm();
  }
  if (degenerate) *degenerate = energy < kDegenerateEnergy;
  Vector diag = detail::rw_precision_diag(t, inv_tau, prior.anchor_time_level, ridge);
  diag.array() += energy;
  Vector sub = Vector::Constant(t - 1, -inv_tau);
  return TridiagGaussian(std::move(diag), std::move(sub), std::move(canonical));
}

struct ScalarGaussian {
  double mean = 0.0;
  double variance = 0.0;
};

/// Posterior of the drift kappa_q given the factor path and tau.
inline ScalarGaussian drift_conditional(const ModelState& state, const PriorSpec& prior,
                                        Index q) {
  const Index t = state.n_years();
  if (t < 2) throw std::invalid_argument("drift_conditional: need T >= 2");
  const double tau = state.tau_time(q);
  double sum_diff = 0.0;
  for (Index k = 1; k < t; ++k)
    sum_diff += state.time_factors(k, q) - state.time_factors(k - 1, q);
  ScalarGaussian out;
  if (prior.flat_drift) {
    out.mean = sum_diff / static_cast<double>(t - 1);
    out.variance = tau / static_cast<double>(t - 1);
  } else {
    const double prec = static_cast<double>(t - 1) / tau + 1.0 / prior.drift_var;
    const double canon = sum_diff / tau + prior.drift_mean / prior.drift_var;
    out.mean = canon / prec;
    out.variance = 1.0 / prec;
  }
  return out;
}

struct InverseGammaParams {
  double shape = 0.0;
  double scale = 0.0;
};

inline InverseGammaParams tau_time_conditional(const ModelState& state, const PriorSpec& prior,
                                               Index q) {
  const Index t = state.n_years();
  if (t < 2) throw std::invalid_argument("tau_time_conditional: need T >= 2");
  InverseGammaParams p;
  p.shape = 0.5 * static_cast<double>(t - 1);
  p.scale = 0.0;
  for (Index k = 1; k < t; ++k) {
    const double d = state.time_factors(k, q) - state.time_factors(k - 1, q) - state.drift(q);
    p.scale += 0.5 * d * d;
  }
  if (prior.anchor_time_level) {
    p.shape += 0.5;
    p.scale += 0.5 * state.time_factors(0, q) * state.time_factors(0, q);
  }
  if (!prior.jeffreys_tau_time) {
    p.shape += prior.tau_time_shape;
    p.scale += prior.tau_time_scale;
  }
  return p;
}

inline InverseGammaParams tau_age_conditional(const ModelState& state, const PriorSpec& prior,
                                              Index r) {
  const Index a = state.n_ages();
  if (a < 2) throw std::invalid_argument("tau_age_conditional: need A >= 2");
  InverseGammaParams p;
  p.shape = 0.5 * static_cast<double>(a - 1);
  p.scale = 0.0;
  for (Index k = 1; k < a; ++k) {
    const double d = state.age_factors(k, r) - state.age_factors(k - 1, r);
    p.scale += 0.5 * d * d;
  }
  if (prior.anchor_age_level) {
    p.shape += 0.5;
    p.scale += 0.5 * state.age_factors(0, r) * state.age_factors(0, r);
  }
  if (!prior.jeffreys_tau_age) {
    p.shape += prior.tau_age_shape;
    p.scale += prior.tau_age_scale;
  }
  return p;
}

/// Posterior of sigma_i^2 from the Gaussian layer residuals. All cells of
/// the (imputed) latent surface enter; held-out cells carry latent values
/// drawn from their prior conditional, which keeps this conditional exact
/// for the augmented model.
inline InverseGammaParams sigma2_conditional(const ModelState& state, const PriorSpec& prior,
                                             Index i) {
  InverseGammaParams p;
  const Matrix resid = state.latent[i] - fitted_mean(state, i);
  p.shape = prior.sigma2_shape +
            0.5 * static_cast<double>(state.n_years() * state.n_ages());
  p.scale = prior.sigma2_scale + 0.5 * resid.squaredNorm();
  return p;
}

}  // namespace bmfact
