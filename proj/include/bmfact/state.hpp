#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "bmfact/types.hpp"

namespace bmfact {

/// One full parameter configuration of the latent factor model: everything
/// the sampler mutates.
struct ModelState {
  Matrix time_factors;            // T x Q
  Matrix age_factors;             // A x R
  std::vector<Matrix> loadings;   // per population, Q x R
  std::vector<Matrix> latent;     // per population, T x A
  Vector drift;                   // Q
  Vector tau_time;                // Q
  Vector tau_age;                 // R
  Vector sigma2;                  // N

  Index n_populations() const { return static_cast<Index>(latent.size()); }
  Index n_years() const { return time_factors.rows(); }
  Index n_ages() const { return age_factors.rows(); }
  Index n_time_factors() const { return time_factors.cols(); }
  Index n_age_factors() const { return age_factors.cols(); }

  void validate() const {
    const Index n = n_populations();
    const Index t = n_years(), a = n_ages(), q = n_time_factors(), r = n_age_factors();
    if (n == 0 || t == 0 || a == 0 || q == 0 || r == 0)
      throw std::invalid_argument("state: empty dimension");
    if (static_cast<Index>(loadings.size()) != n || sigma2.size() != n)
      throw std::invalid_argument("state: population dimension mismatch");
    if (drift.size() != q || tau_time.size() != q || tau_age.size() != r)
      throw std::invalid_argument("state: factor dimension mismatch");
    for (Index i = 0; i < n; ++i) {
      if (loadings[i].rows() != q || loadings[i].cols() != r)
        throw std::invalid_argument("state: loading dimension mismatch");
      if (latent[i].rows() != t || latent[i].cols() != a)
        throw std::invalid_argument("state: latent dimension mismatch");
    }
    if (!(tau_time.array() > 0.0).all() || !(tau_age.array() > 0.0).all() ||
        !(sigma2.array() > 0.0).all())
      throw std::invalid_argument("state: variance parameters must be positive");
  }
};

/// Latent mean surface of population i: F_T Lambda_i F_A'.
inline Matrix fitted_mean(const ModelState& state, Index i) {
  return state.time_factors * state.loadings[i] * state.age_factors.transpose();
}

/// log P(y | rate = offset * e^z), including the log y! term.
inline double poisson_loglik_cell(std::int64_t y, double offset, double z) {
  if (y < 0) throw std::invalid_argument("poisson_loglik_cell: negative count");
  if (!(offset > 0.0)) throw std::invalid_argument("poisson_loglik_cell: nonpositive offset");
  const double yd = static_cast<double>(y);
  return yd * (std::log(offset) + z) - offset * std::exp(z) - std::lgamma(yd + 1.0);
}

}  // namespace bmfact
