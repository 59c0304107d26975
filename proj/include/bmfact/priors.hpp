#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

#include "bmfact/kvconfig.hpp"
#include "bmfact/types.hpp"

namespace bmfact {

/// Hyperparameters and factor counts. Defaults reproduce the improper
/// reference setup: flat drift and time-factor level, intrinsic random-walk
/// age prior, Jeffreys priors on both smoothing variances. The proper
/// alternatives (anchored levels, inverse-gamma smoothing priors, Gaussian
/// drift prior) exist so the model can be forward-simulated, e.g. for
/// sampler self-checks.
struct PriorSpec {
  int n_time_factors = 1;  // Q
  int n_age_factors = 1;   // R

  double sigma2_shape = 2.5;  // c0
  double sigma2_scale = 1.5;  // C0

  Matrix loading_prior_var;  // Q x R elementwise prior variances; empty = all 1

  bool flat_drift = true;
  double drift_mean = 0.0;
  double drift_var = 1.0;

  bool anchor_time_level = false;  // N(0, tau_T) on the first time-factor value
  bool anchor_age_level = false;   // N(0, tau_A) on the first age-factor value

  bool jeffreys_tau_time = true;
  double tau_time_shape = 1.0;
  double tau_time_scale = 0.1;
  bool jeffreys_tau_age = true;
  double tau_age_shape = 1.0;
  double tau_age_scale = 0.1;

  double loading_var(Index q, Index r) const {
    return loading_prior_var.size() == 0 ? 1.0 : loading_prior_var(q, r);
  }

  void validate() const {
    if (n_time_factors < 1 || n_age_factors < 1)
      throw std::invalid_argument("prior: Q and R must be >= 1");
    if (!(sigma2_shape > 0.0) || !(sigma2_scale > 0.0))
      throw std::invalid_argument("prior: c0 and C0 must be positive");
    if (loading_prior_var.size() != 0) {
      if (loading_prior_var.rows() != n_time_factors ||
          loading_prior_var.cols() != n_age_factors)
        throw std::invalid_argument("prior: loading variance matrix must be Q x R");
      if (!(loading_prior_var.array() > 0.0).all())
        throw std::invalid_argument("prior: loading variances must be positive");
    }
    if (!flat_drift && !(drift_var > 0.0))
      throw std::invalid_argument("prior: drift variance must be positive");
    if (!jeffreys_tau_time && (!(tau_time_shape > 0.0) || !(tau_time_scale > 0.0)))
      throw std::invalid_argument("prior: tau_T hyperparameters must be positive");
    if (!jeffreys_tau_age && (!(tau_age_shape > 0.0) || !(tau_age_scale > 0.0)))
      throw std::invalid_argument("prior: tau_A hyperparameters must be positive");
  }

  static PriorSpec from_kv(const KvMap& kv) {
    PriorSpec p;
    p.n_time_factors = kv_get(kv, "q", p.n_time_factors);
    p.n_age_factors = kv_get(kv, "r", p.n_age_factors);
    p.sigma2_shape = kv_get(kv, "c0", p.sigma2_shape);
    p.sigma2_scale = kv_get(kv, "C0", p.sigma2_scale);
    if (kv_has(kv, "loading_prior_var"))
      p.loading_prior_var = Matrix::Constant(p.n_time_factors, p.n_age_factors,
                                             kv_get(kv, "loading_prior_var", 1.0));
    p.flat_drift = kv_get(kv, "flat_drift", p.flat_drift);
    p.drift_mean = kv_get(kv, "drift_mean", p.drift_mean);
    p.drift_var = kv_get(kv, "drift_var", p.drift_var);
    p.anchor_time_level = kv_get(kv, "anchor_time_level", p.anchor_time_level);
    p.anchor_age_level = kv_get(kv, "anchor_age_level", p.anchor_age_level);
    p.jeffreys_tau_time = kv_get(kv, "jeffreys_tau_time", p.jeffreys_tau_time);
    p.tau_time_shape = kv_get(kv, "tau_time_shape", p.tau_time_shape);
    p.tau_time_scale = kv_get(kv, "tau_time_scale", p.tau_time_scale);
    p.jeffreys_tau_age = kv_get(kv, "jeffreys_tau_age", p.jeffreys_tau_age);
    p.tau_age_shape = kv_get(kv, "tau_age_shape", p.tau_age_shape);
    p.tau_age_scale = kv_get(kv, "tau_age_scale", p.tau_age_scale);
    p.validate();
    return p;
  }

  KvMap to_kv() const {
    KvMap kv;
    auto put = [&](const std::string& k, double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      kv[k] = os.str();
    };
    kv["q"] = std::to_string(n_time_factors);
    kv["r"] = std::to_string(n_age_factors);
    put("c0", sigma2_shape);
    put("C0", sigma2_scale);
    if (loading_prior_var.size() != 0) put("loading_prior_var", loading_prior_var(0, 0));
    kv["flat_drift"] = flat_drift ? "true" : "false";
    put("drift_mean", drift_mean);
    put("drift_var", drift_var);
    kv["anchor_time_level"] = anchor_time_level ? "true" : "false";
    kv["anchor_age_level"] = anchor_age_level ? "true" : "false";
    kv["jeffreys_tau_time"] = jeffreys_tau_time ? "true" : "false";
    put("tau_time_shape", tau_time_shape);
    put("tau_time_scale", tau_time_scale);
    kv["jeffreys_tau_age"] = jeffreys_tau_age ? "true" : "false";
    put("tau_age_shape", tau_age_shape);
    put("tau_age_scale", tau_age_scale);
    return kv;
  }
};

/// First-order random-walk precision on a chain of length M: tridiagonal,
/// diag (1,2,...,2,1), off-diagonal -1. Intrinsic (rank M-1); equals D'D for
/// the (M-1) x M first-difference matrix D.
struct RwPrecision {
  Index dim = 0;
  Matrix matrix;
};

inline RwPrecision build_rw_precision(Index m) {
  if (m < 2) throw std::invalid_argument("build_rw_precision: need M >= 2");
  RwPrecision p;
  p.dim = m;
  p.matrix = Matrix::Zero(m, m);
  for (Index k = 0; k < m; ++k) p.matrix(k, k) = (k == 0 || k == m - 1) ? 1.0 : 2.0;
  for (Index k = 0; k + 1 < m; ++k) {
    p.matrix(k, k + 1) = -1.0;
    p.matrix(k + 1, k) = -1.0;
  }
  return p;
}

/// First-difference matrix D ((M-1) x M) with D f = (f_2-f_1, ..., f_M-f_{M-1}).
inline Matrix first_difference_matrix(Index m) {
  if (m < 2) throw std::invalid_argument("first_difference_matrix: need M >= 2");
  Matrix d = Matrix::Zero(m - 1, m);
  for (Index k = 0; k + 1 < m; ++k) {
    d(k, k) = -1.0;
    d(k, k + 1) = 1.0;
  }
  return d;
}

struct IcarConditional {
  double mean = 0.0;
  double variance = 0.0;
};

/// Full conditional of value x (0-based) under the intrinsic CAR prior on a
/// chain: mean is the neighbor average, variance tau/n_x.
inline IcarConditional icar_conditional(const Vector& f, Index x, double tau) {
  const Index a = f.size();
  if (a < 2) throw std::invalid_argument("icar_conditional: need length >= 2");
  if (x < 0 || x >= a) throw std::invalid_argument("icar_conditional: index out of range");
  if (!(tau > 0.0)) throw std::invalid_argument("icar_conditional: tau must be positive");
  IcarConditional out;
  if (x == 0) {
    out.mean = f(1);
    out.variance = tau;
  } else if (x == a - 1) {
    out.mean = f(a - 2);
    out.variance = tau;
  } else {
    out.mean = 0.5 * (f(x - 1) + f(x + 1));
    out.variance = 0.5 * tau;
  }
  return out;
}

/// Canonical-mean contribution of the random-walk-with-drift prior:
/// (kappa/tau) * (-1, 0, ..., 0, 1)'.
inline Vector drift_canonical_shift(double kappa, double tau, Index t) {
  if (t < 2) throw std::invalid_argument("drift_canonical_shift: need T >= 2");
  if (!(tau > 0.0)) throw std::invalid_argument("drift_canonical_shift: tau must be positive");
  Vector h = Vector::Zero(t);
  h(0) = -kappa / tau;
  h(t - 1) = kappa / tau;
  return h;
}

}  // namespace bmfact
