#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "bmfact/conditionals.hpp"
#include "bmfact/kvconfig.hpp"
#include "bmfact/panel.hpp"
#include "bmfact/parallel.hpp"
#include "bmfact/priors.hpp"
#include "bmfact/rng.hpp"
#include "bmfact/state.hpp"

namespace bmfact {

/// Per-cell proposal scales and acceptance bookkeeping for the latent
/// Metropolis updates. Scales adapt in batches toward the target rate and
/// are frozen once the adaptation horizon (the burn-in) has passed.
struct AdaptState {
  std::vector<Eigen::ArrayXXd> log_step;
  std::vector<Eigen::ArrayXXi> batch_accepts;
  std::vector<Eigen::ArrayXXi> batch_proposals;
  std::vector<Eigen::Array<long long, Eigen::Dynamic, Eigen::Dynamic>> accept_counts;
  std::vector<Eigen::Array<long long, Eigen::Dynamic, Eigen::Dynamic>> proposal_counts;
  std::vector<Eigen::Array<long long, Eigen::Dynamic, Eigen::Dynamic>> post_accepts;
  std::vector<Eigen::Array<long long, Eigen::Dynamic, Eigen::Dynamic>> post_proposals;
  double target_accept = 0.44;
  int batch_size = 50;
  long long adaptation_horizon = 0;
  long long completed_batches = 0;

  static AdaptState create(Index n, Index t, Index a, long long horizon,
                           double initial_log_step = 0.0, double target = 0.44,
                           int batch = 50) {
    if (!(target > 0.0 && target < 1.0))
      throw std::invalid_argument("adapt: target acceptance must lie in (0, 1)");
    AdaptState s;
    s.target_accept = target;
    s.batch_size = batch;
    s.adaptation_horizon = horizon;
    s.log_step.assign(n, Eigen::ArrayXXd::Constant(t, a, initial_log_step));
    s.batch_accepts.assign(n, Eigen::ArrayXXi::Zero(t, a));
    s.batch_proposals.assign(n, Eigen::ArrayXXi::Zero(t, a));
    using CountArray = Eigen::Array<long long, Eigen::Dynamic, Eigen::Dynamic>;
    s.accept_counts.assign(n, CountArray::Zero(t, a));
    s.proposal_counts.assign(n, CountArray::Zero(t, a));
    s.post_accepts.assign(n, CountArray::Zero(t, a));
    s.post_proposals.assign(n, CountArray::Zero(t, a));
    return s;
  }

  /// Batch step: move each cell's log scale by min(0.05, 1/sqrt(b)) toward
  /// the target acceptance rate, then reset the batch counters.
  void apply_batch() {
    ++completed_batches;
    const double delta =
        std::min(0.05, 1.0 / std::sqrt(static_cast<double>(completed_batches)));
    for (std::size_t i = 0; i < log_step.size(); ++i) {
      for (Index c = 0; c < log_step[i].size(); ++c) {
        const int prop = batch_proposals[i](c);
        if (prop == 0) continue;
        const double rate = static_cast<double>(batch_accepts[i](c)) / prop;
        log_step[i](c) += rate > target_accept ? delta : -delta;
      }
      batch_accepts[i].setZero();
      batch_proposals[i].setZero();
    }
  }
};

struct SamplerConfig {
  long long n_iterations = 25000;
  long long n_burnin = 7500;
  long long thin = 1;
  std::uint64_t rng_seed = 1;
  double ridge = 1e-8;
  double tau_floor = 1e-10;
  int n_threads = 1;
  bool retain_factors = false;
  long long predictive_stride = 10;
  bool adapt_latent = true;
  double initial_log_step = 0.0;
  double target_accept = 0.44;
  int adapt_batch = 50;

  long long n_retained() const { return (n_iterations - n_burnin) / thin; }

  void validate() const {
    if (n_iterations < 1 || n_burnin < 0 || n_burnin >= n_iterations)
      throw std::invalid_argument("sampler: need 0 <= n_burnin < n_iterations");
    if (thin < 1) throw std::invalid_argument("sampler: thin must be >= 1");
    if (predictive_stride < 1)
      throw std::invalid_argument("sampler: predictive_stride must be >= 1");
    if (!(ridge >= 0.0)) throw std::invalid_argument("sampler: ridge must be >= 0");
  }

  static SamplerConfig from_kv(const KvMap& kv) {
    SamplerConfig c;
    c.n_iterations = kv_get(kv, "n_iterations", c.n_iterations);
    c.n_burnin = kv_get(kv, "n_burnin", c.n_burnin);
    c.thin = kv_get(kv, "thin", c.thin);
    c.rng_seed = static_cast<std::uint64_t>(
        kv_get(kv, "rng_seed", static_cast<long long>(c.rng_seed)));
    c.ridge = kv_get(kv, "ridge", c.ridge);
    c.tau_floor = kv_get(kv, "tau_floor", c.tau_floor);
    c.n_threads = kv_get(kv, "n_threads", c.n_threads);
    c.retain_factors = kv_get(kv, "retain_factors", c.retain_factors);
    c.predictive_stride = kv_get(kv, "predictive_stride", c.predictive_stride);
    c.adapt_latent = kv_get(kv, "adapt_latent", c.adapt_latent);
    c.initial_log_step = kv_get(kv, "initial_log_step", c.initial_log_step);
    c.target_accept = kv_get(kv, "target_accept", c.target_accept);
    c.adapt_batch = kv_get(kv, "adapt_batch", c.adapt_batch);
    c.validate();
    return c;
  }

  KvMap to_kv() const {
    KvMap kv;
    auto put = [&](const std::string& k, double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      kv[k] = os.str();
    };
    kv["n_iterations"] = std::to_string(n_iterations);
    kv["n_burnin"] = std::to_string(n_burnin);
    kv["thin"] = std::to_string(thin);
    kv["rng_seed"] = std::to_string(rng_seed);
    put("ridge", ridge);
    put("tau_floor", tau_floor);
    kv["n_threads"] = std::to_string(n_threads);
    kv["retain_factors"] = retain_factors ? "true" : "false";
    kv["predictive_stride"] = std::to_string(predictive_stride);
    kv["adapt_latent"] = adapt_latent ? "true" : "false";
    put("initial_log_step", initial_log_step);
    put("target_accept", target_accept);
    kv["adapt_batch"] = std::to_string(adapt_batch);
    return kv;
  }
};

struct ChainDiagnostics {
  long long nonfinite_proposals = 0;
  long long degenerate_factor_updates = 0;
  long long tau_floor_events = 0;
  long long svd_padded_columns = 0;
  double mean_accept_rate = 0.0;
  double share_accept_in_band = 0.0;  // share of cells with post-adaptation rate in [0.2, 0.6]
};

/// Thinned posterior draws plus streaming summaries. Scalar blocks are kept
/// per draw; fitted surfaces are tracked as running mean/variance to bound
/// memory, and factor draws are retained only on request.
struct DrawStore {
  Index n_populations = 0, n_years = 0, n_ages = 0;
  int n_time_factors = 0, n_age_factors = 0;
  SamplerConfig config;
  PriorSpec prior;
  std::vector<std::string> population_labels;
  std::vector<int> year_labels, age_labels;
  std::string input_digest;

  long long n_draws = 0;
  Matrix sigma2_draws;    // draws x N
  Matrix tau_time_draws;  // draws x Q
  Matrix tau_age_draws;   // draws x R
  Matrix drift_draws;     // draws x Q
  Vector loglik_draws;    // draws

  std::vector<Matrix> fitted_mean_avg, fitted_mean_m2;
  std::vector<Matrix> predictive_log1p_sum;
  long long n_predictive_draws = 0;

  bool has_heldout = false;
  std::vector<Matrix> heldout_log1p_sum, heldout_lse_max, heldout_lse_sum;
  long long n_heldout_draws = 0;

  bool has_factor_draws = false;
  std::vector<Matrix> time_factor_draws, age_factor_draws;
  std::vector<std::vector<Matrix>> loading_draws;

  ChainDiagnostics diagnostics;
  std::string error;  // nonempty if the chain aborted early

  Matrix fitted_sd(Index i) const {
    if (n_draws < 2) return Matrix::Zero(n_years, n_ages);
    return (fitted_mean_m2[i].array() / static_cast<double>(n_draws - 1)).sqrt().matrix();
  }

  Matrix predictive_log1p_mean(Index i) const {
    if (n_predictive_draws == 0) return Matrix::Zero(n_years, n_ages);
    return predictive_log1p_sum[i] / static_cast<double>(n_predictive_draws);
  }

  Matrix heldout_log1p_mean(Index i) const {
    if (n_heldout_draws == 0) return Matrix::Zero(n_years, n_ages);
    return heldout_log1p_sum[i] / static_cast<double>(n_heldout_draws);
  }

  /// Per-cell log predictive score at held-out cells (NaN elsewhere).
  Matrix heldout_lps(Index i) const {
    Matrix out = Matrix::Constant(n_years, n_ages, std::numeric_limits<double>::quiet_NaN());
    if (n_heldout_draws == 0) return out;
    for (Index c = 0; c < out.size(); ++c) {
      const double mx = heldout_lse_max[i](c);
      if (std::isfinite(mx))
        out(c) = mx + std::log(heldout_lse_sum[i](c)) -
                 std::log(static_cast<double>(n_heldout_draws));
    }
    return out;
  }
};

struct LatentStats {
  long long proposals = 0, accepts = 0, nonfinite = 0;
};

/// One Metropolis sweep over the latent surface of population i. Observed
/// cells take a random-walk step targeting the Poisson-lognormal cell
/// posterior; masked cells are exact draws from N(fitted, sigma_i^2).
inline LatentStats update_latent_z(ModelState& state, const CountPanel& panel,
                                   AdaptState& adapt, bool adapting, Index i, Rng& rng) {
  LatentStats stats;
  const Matrix fitted = fitted_mean(state, i);
  Matrix& z = state.latent[i];
  const CountMatrix& counts = panel.counts[i];
  const Matrix& offsets = panel.offsets[i];
  const BoolArray& mask = panel.mask[i];
  auto& log_step = adapt.log_step[i];
  const double sigma = std::sqrt(state.sigma2(i));
  const double inv_2s2 = 0.5 / state.sigma2(i);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  for (Index x = 0; x < z.cols(); ++x) {
    for (Index t = 0; t < z.rows(); ++t) {
      const double m = fitted(t, x);
      if (!mask(t, x)) {
        z(t, x) = m + sigma * normal(rng);
        continue;
      }
      const double y = static_cast<double>(counts(t, x));
      const double offset = offsets(t, x);
      const double cur = z(t, x);
      const double prop = cur + std::exp(log_step(t, x)) * normal(rng);
      const double dc = cur - m, dp = prop - m;
      const double log_ratio = y * (prop - cur) - offset * (std::exp(prop) - std::exp(cur)) -
                               (dp * dp - dc * dc) * inv_2s2;
      ++stats.proposals;
      bool accept = false;
      if (!std::isfinite(log_ratio)) {
        ++stats.nonfinite;
      } else if (log_ratio >= 0.0 || std::log(unif(rng)) < log_ratio) {
        accept = true;
        z(t, x) = prop;
        ++stats.accepts;
      }
      adapt.proposal_counts[i](t, x) += 1;
      if (accept) adapt.accept_counts[i](t, x) += 1;
      if (adapting) {
        adapt.batch_proposals[i](t, x) += 1;
        if (accept) adapt.batch_accepts[i](t, x) += 1;
      } else {
        adapt.post_proposals[i](t, x) += 1;
        if (accept) adapt.post_accepts[i](t, x) += 1;
      }
    }
  }
  return stats;
}

inline void update_loadings(ModelState& state, const PriorSpec& prior, Index i, double ridge,
                            Rng& rng) {
  const DenseGaussian cond = loading_conditional(state, prior, i, ridge);
  const Vector draw = cond.sample(rng);
  state.loadings[i] = Eigen::Map<const Matrix>(draw.data(), state.n_time_factors(),
                                               state.n_age_factors());
}

/// Returns true when the update hit the degenerate (zero loading energy)
/// corner and relied on the ridge.
inline bool update_age_factor(ModelState& state, const PriorSpec& prior, Index r, double ridge,
                              Rng& rng) {
  bool degenerate = false;
  const TridiagGaussian cond = age_factor_conditional(state, prior, r, ridge, &degenerate);
  state.age_factors.col(r) = cond.sample(rng);
  return degenerate;
}

inline bool update_time_factor(ModelState& state, const PriorSpec& prior, Index q, double ridge,
                               Rng& rng) {
  bool degenerate = false;
  const TridiagGaussian cond = time_factor_conditional(state, prior, q, ridge, &degenerate);
  state.time_factors.col(q) = cond.sample(rng);
  return degenerate;
}

inline void update_drift(ModelState& state, const PriorSpec& prior, Index q, Rng& rng) {
  const ScalarGaussian cond = drift_conditional(state, prior, q);
  std::normal_distribution<double> normal(cond.mean, std::sqrt(cond.variance));
  state.drift(q) = normal(rng);
}

/// Draws all smoothing variances; returns the number of floor events
/// (degenerate zero-scale conditionals skipped, value clamped to the floor).
inline int update_smoothing_variances(ModelState& state, const PriorSpec& prior,
                                      double tau_floor, Rng& rng) {
  int floor_events = 0;
  auto draw_one = [&](double& tau, const InverseGammaParams& p) {
    if (p.scale <= 0.0) {
      tau = std::max(tau, tau_floor);
      ++floor_events;
      return;
    }
    tau = draw_inverse_gamma(rng, p.shape, p.scale);
    if (tau < tau_floor) {
      tau = tau_floor;
      ++floor_events;
    }
  };
  for (Index q = 0; q < state.n_time_factors(); ++q)
    draw_one(state.tau_time(q), tau_time_conditional(state, prior, q));
  for (Index r = 0; r < state.n_age_factors(); ++r)
    draw_one(state.tau_age(r), tau_age_conditional(state, prior, r));
  return floor_events;
}

inline void update_noise_variances(ModelState& state, const PriorSpec& prior, Index i,
                                   Rng& rng) {
  const InverseGammaParams p = sigma2_conditional(state, prior, i);
  state.sigma2(i) = draw_inverse_gamma(rng, p.shape, p.scale);
}

/// Two-step starting values: latent surfaces from shifted log counts, factor
/// matrices from mode-wise SVDs, loadings by least squares, scale parameters
/// from residual moments. Rank-deficient modes are padded with small random
/// columns; the number of padded columns is reported through `n_padded`.
inline ModelState initialize_auto(const CountPanel& panel, const PriorSpec& prior, Rng& rng,
                                  long long* n_padded = nullptr) {
  const Index n = panel.n_populations(), t = panel.n_years(), a = panel.n_ages();
  const Index q = prior.n_time_factors, r = prior.n_age_factors;
  if (q > t || r > a)
    throw std::invalid_argument("initialize_auto: factor counts exceed grid dimensions");
  ModelState state;
  state.latent.resize(n);
  for (Index i = 0; i < n; ++i)
    state.latent[i] = ((panel.counts[i].cast<double>().array() + 0.5) /
                       panel.offsets[i].array())
                          .log()
                          .matrix();

  Matrix mode_time(t, n * a), mode_age(a, n * t);
  for (Index i = 0; i < n; ++i) {
    mode_time.middleCols(i * a, a) = state.latent[i];
    mode_age.middleCols(i * t, t) = state.latent[i].transpose();
  }
  long long padded = 0;
  std::normal_distribution<double> normal;
  auto leading_left = [&](const Matrix& unfolding, Index want) {
    Eigen::BDCSVD<Matrix> svd(unfolding, Eigen::ComputeThinU);
    const Vector& sv = svd.singularValues();
    const double tol = sv.size() == 0 ? 0.0
                                      : sv(0) * 1e-12 *
                                            static_cast<double>(std::max(unfolding.rows(),
                                                                         unfolding.cols()));
    Index rank = 0;
    while (rank < sv.size() && sv(rank) > tol && rank < want) ++rank;
    Matrix cols(unfolding.rows(), want);
    cols.leftCols(rank) = svd.matrixU().leftCols(rank);
    for (Index k = rank; k < want; ++k) {
      ++padded;
      for (Index row = 0; row < cols.rows(); ++row) cols(row, k) = 1e-3 * normal(rng);
    }
    return cols;
  };
  state.time_factors = leading_left(mode_time, q);
  state.age_factors = leading_left(mode_age, r);
  if (n_padded) *n_padded = padded;

  const auto gram_t = (state.time_factors.transpose() * state.time_factors).eval();
  const auto gram_a = (state.age_factors.transpose() * state.age_factors).eval();
  const Eigen::LDLT<Matrix> ldlt_t(gram_t), ldlt_a(gram_a);
  state.loadings.resize(n);
  state.sigma2.resize(n);
  for (Index i = 0; i < n; ++i) {
    const Matrix cross = state.time_factors.transpose() * state.latent[i] * state.age_factors;
    state.loadings[i] = ldlt_t.solve(ldlt_a.solve(cross.transpose()).transpose());
    const double rss =
        (state.latent[i] - fitted_mean(state, i)).squaredNorm() / static_cast<double>(t * a);
    state.sigma2(i) = std::max(rss, 1e-6);
  }

  state.drift.resize(q);
  state.tau_time.resize(q);
  for (Index k = 0; k < q; ++k) {
    const Vector diff = state.time_factors.col(k).tail(t - 1) -
                        state.time_factors.col(k).head(t - 1);
    state.drift(k) = diff.mean();
    state.tau_time(k) =
        std::max((diff.array() - state.drift(k)).square().sum() /
                     std::max<double>(1.0, static_cast<double>(diff.size() - 1)),
                 1e-6);
  }
  state.tau_age.resize(r);
  for (Index k = 0; k < r; ++k) {
    const Vector diff =
        state.age_factors.col(k).tail(a - 1) - state.age_factors.col(k).head(a - 1);
    state.tau_age(k) = std::max(
        diff.array().square().sum() / std::max<double>(1.0, static_cast<double>(diff.size() - 1)),
        1e-6);
  }
  state.validate();
  return state;
}

/// Data-augmentation Gibbs sampler. One sweep updates, in order: latent
/// surfaces, loadings, age factors, time factors, drifts, smoothing
/// variances, noise variances. Population-indexed blocks may run on worker
/// threads; every block draws from a stream derived from (seed, iteration,
/// population), so results depend only on (seed, config).
class Sampler {
 public:
  Sampler(CountPanel panel, PriorSpec prior, SamplerConfig config,
          std::optional<ModelState> init = std::nullopt)
      : panel_(std::move(panel)), prior_(std::move(prior)), config_(config) {
    panel_.validate();
    prior_.validate();
    config_.validate();
    master_rng_ = make_stream(config_.rng_seed, 3, 0);
    long long padded = 0;
    state_ = init ? std::move(*init) : initialize_auto(panel_, prior_, master_rng_, &padded);
    diagnostics_.svd_padded_columns = padded;
    state_.validate();
    if (state_.n_populations() != panel_.n_populations() ||
        state_.n_years() != panel_.n_years() || state_.n_ages() != panel_.n_ages() ||
        state_.n_time_factors() != prior_.n_time_factors ||
        state_.n_age_factors() != prior_.n_age_factors)
      throw std::invalid_argument("sampler: state does not match panel/prior dimensions");
    adapt_ = AdaptState::create(panel_.n_populations(), panel_.n_years(), panel_.n_ages(),
                                config_.adapt_latent ? config_.n_burnin : 0,
                                config_.initial_log_step, config_.target_accept,
                                config_.adapt_batch);
    pop_rngs_.resize(panel_.n_populations(), Rng{});
    refresh_count_caches();
  }

  const CountPanel& panel() const { return panel_; }
  const ModelState& state() const { return state_; }
  ModelState& state() { return state_; }
  AdaptState& adapt_state() { return adapt_; }
  const ChainDiagnostics& diagnostics() const { return diagnostics_; }
  long long iteration() const { return iteration_; }

  /// Replaces the observed counts (dimensions and mask unchanged).
  void set_counts(std::vector<CountMatrix> counts) {
    if (counts.size() != panel_.counts.size())
      throw std::invalid_argument("sampler: count replacement has wrong population count");
    panel_.counts = std::move(counts);
    panel_.validate();
    refresh_count_caches();
  }

  void sweep() {
    const Index n = panel_.n_populations();
    for (Index i = 0; i < n; ++i) pop_rngs_[i] = make_stream(config_.rng_seed, 0, iteration_, i);
    const bool adapting = config_.adapt_latent && iteration_ < adapt_.adaptation_horizon;

    std::vector<LatentStats> stats(n);
    parallel_for(n, config_.n_threads, [&](long long i) {
      stats[i] = update_latent_z(state_, panel_, adapt_, adapting, i, pop_rngs_[i]);
    });
    for (const auto& s : stats) diagnostics_.nonfinite_proposals += s.nonfinite;

    parallel_for(n, config_.n_threads,
                 [&](long long i) { update_loadings(state_, prior_, i, config_.ridge, pop_rngs_[i]); });

    for (Index r = 0; r < state_.n_age_factors(); ++r)
      if (update_age_factor(state_, prior_, r, config_.ridge, master_rng_))
        ++diagnostics_.degenerate_factor_updates;
    for (Index q = 0; q < state_.n_time_factors(); ++q)
      if (update_time_factor(state_, prior_, q, config_.ridge, master_rng_))
        ++diagnostics_.degenerate_factor_updates;
    if (state_.n_years() >= 2)
      for (Index q = 0; q < state_.n_time_factors(); ++q)
        update_drift(state_, prior_, q, master_rng_);
    diagnostics_.tau_floor_events +=
        update_smoothing_variances(state_, prior_, config_.tau_floor, master_rng_);
    parallel_for(n, config_.n_threads,
                 [&](long long i) { update_noise_variances(state_, prior_, i, pop_rngs_[i]); });

    if (adapting && (iteration_ + 1) % adapt_.batch_size == 0) adapt_.apply_batch();
    ++iteration_;
  }

  DrawStore run() {
    DrawStore store = make_store();
    const long long planned = config_.n_retained();
    try {
      for (long long it = 0; it < config_.n_iterations; ++it) {
        sweep();
        const long long post = iteration_ - config_.n_burnin;
        if (post >= 1 && post % config_.thin == 0) record(store);
      }
    } catch (const std::runtime_error& e) {
      store.error = e.what();
    }
    if (store.n_draws < planned) {
      store.sigma2_draws.conservativeResize(store.n_draws, Eigen::NoChange);
      store.tau_time_draws.conservativeResize(store.n_draws, Eigen::NoChange);
      store.tau_age_draws.conservativeResize(store.n_draws, Eigen::NoChange);
      store.drift_draws.conservativeResize(store.n_draws, Eigen::NoChange);
      store.loglik_draws.conservativeResize(store.n_draws);
    }
    finalize_diagnostics(store);
    return store;
  }

 private:
  DrawStore make_store() const {
    DrawStore store;
    store.n_populations = panel_.n_populations();
    store.n_years = panel_.n_years();
    store.n_ages = panel_.n_ages();
    store.n_time_factors = prior_.n_time_factors;
    store.n_age_factors = prior_.n_age_factors;
    store.config = config_;
    store.prior = prior_;
    store.population_labels = panel_.population_labels;
    store.year_labels = panel_.year_labels;
    store.age_labels = panel_.age_labels;
    const long long planned = config_.n_retained();
    store.sigma2_draws.resize(planned, store.n_populations);
    store.tau_time_draws.resize(planned, store.n_time_factors);
    store.tau_age_draws.resize(planned, store.n_age_factors);
    store.drift_draws.resize(planned, store.n_time_factors);
    store.loglik_draws.resize(planned);
    store.fitted_mean_avg.assign(store.n_populations, Matrix::Zero(store.n_years, store.n_ages));
    store.fitted_mean_m2.assign(store.n_populations, Matrix::Zero(store.n_years, store.n_ages));
    store.predictive_log1p_sum.assign(store.n_populations,
                                      Matrix::Zero(store.n_years, store.n_ages));
    for (Index i = 0; i < panel_.n_populations(); ++i)
      if (!panel_.mask[i].all()) store.has_heldout = true;
    if (store.has_heldout) {
      store.heldout_log1p_sum.assign(store.n_populations,
                                     Matrix::Zero(store.n_years, store.n_ages));
      store.heldout_lse_max.assign(
          store.n_populations,
          Matrix::Constant(store.n_years, store.n_ages,
                           -std::numeric_limits<double>::infinity()));
      store.heldout_lse_sum.assign(store.n_populations,
                                   Matrix::Zero(store.n_years, store.n_ages));
    }
    store.has_factor_draws = config_.retain_factors;
    if (config_.retain_factors) {
      store.time_factor_draws.reserve(planned);
      store.age_factor_draws.reserve(planned);
      store.loading_draws.reserve(planned);
    }
    return store;
  }

  void record(DrawStore& store) {
    const long long s = store.n_draws;
    store.sigma2_draws.row(s) = state_.sigma2.transpose();
    store.tau_time_draws.row(s) = state_.tau_time.transpose();
    store.tau_age_draws.row(s) = state_.tau_age.transpose();
    store.drift_draws.row(s) = state_.drift.transpose();

    const Index n = panel_.n_populations();
    std::vector<double> loglik_parts(n, 0.0);
    const bool do_predictive = s % config_.predictive_stride == 0;
    parallel_for(n, config_.n_threads, [&](long long i) {
      const Matrix fitted = fitted_mean(state_, i);
      // Welford update of the per-cell fitted-surface moments.
      const Matrix delta = fitted - store.fitted_mean_avg[i];
      store.fitted_mean_avg[i].noalias() += delta / static_cast<double>(s + 1);
      store.fitted_mean_m2[i].array() +=
          delta.array() * (fitted - store.fitted_mean_avg[i]).array();

      loglik_parts[i] =
          const_loglik_[i] +
          (mask_double_[i].array() *
           (counts_double_[i].array() * state_.latent[i].array() -
            panel_.offsets[i].array() * state_.latent[i].array().exp()))
              .sum();

      Rng rng = make_stream(config_.rng_seed, 1, s, i);
      const double sigma = std::sqrt(state_.sigma2(i));
      std::normal_distribution<double> normal;
      if (do_predictive) {
        for (Index x = 0; x < store.n_ages; ++x) {
          for (Index t = 0; t < store.n_years; ++t) {
            const double z_rep = fitted(t, x) + sigma * normal(rng);
            std::poisson_distribution<std::int64_t> pois(panel_.offsets[i](t, x) *
                                                         std::exp(std::min(z_rep, 30.0)));
            store.predictive_log1p_sum[i](t, x) += log1p_count(pois(rng));
          }
        }
      }
      if (store.has_heldout && !panel_.mask[i].all()) {
        for (Index x = 0; x < store.n_ages; ++x) {
          for (Index t = 0; t < store.n_years; ++t) {
            if (panel_.mask[i](t, x)) continue;
            const double z = state_.latent[i](t, x);
            std::poisson_distribution<std::int64_t> pois(panel_.offsets[i](t, x) *
                                                         std::exp(std::min(z, 30.0)));
            store.heldout_log1p_sum[i](t, x) += log1p_count(pois(rng));
            const double ll = counts_double_[i](t, x) *
                                  (std::log(panel_.offsets[i](t, x)) + z) -
                              panel_.offsets[i](t, x) * std::exp(z) - log_fact_[i](t, x);
            double& mx = store.heldout_lse_max[i](t, x);
            double& sum = store.heldout_lse_sum[i](t, x);
            if (ll <= mx) {
              sum += std::exp(ll - mx);
            } else {
              sum = sum * std::exp(mx - ll) + 1.0;
              mx = ll;
            }
          }
        }
      }
    });
    double loglik = 0.0;
    for (double part : loglik_parts) loglik += part;
    store.loglik_draws(s) = loglik;
    if (do_predictive) ++store.n_predictive_draws;
    if (store.has_heldout) ++store.n_heldout_draws;
    if (config_.retain_factors) {
      store.time_factor_draws.push_back(state_.time_factors);
      store.age_factor_draws.push_back(state_.age_factors);
      store.loading_draws.push_back(state_.loadings);
    }
    ++store.n_draws;
  }

  void finalize_diagnostics(DrawStore& store) {
    long long accepts = 0, proposals = 0, in_band = 0, cells = 0;
    for (Index i = 0; i < panel_.n_populations(); ++i) {
      const auto& acc = adapt_.post_proposals[i].sum() > 0 ? adapt_.post_accepts[i]
                                                           : adapt_.accept_counts[i];
      const auto& prop = adapt_.post_proposals[i].sum() > 0 ? adapt_.post_proposals[i]
                                                            : adapt_.proposal_counts[i];
      for (Index c = 0; c < acc.size(); ++c) {
        if (prop(c) == 0) continue;
        ++cells;
        accepts += acc(c);
        proposals += prop(c);
        const double rate = static_cast<double>(acc(c)) / static_cast<double>(prop(c));
        if (rate >= 0.2 && rate <= 0.6) ++in_band;
      }
    }
    diagnostics_.mean_accept_rate =
        proposals > 0 ? static_cast<double>(accepts) / static_cast<double>(proposals) : 0.0;
    diagnostics_.share_accept_in_band =
        cells > 0 ? static_cast<double>(in_band) / static_cast<double>(cells) : 0.0;
    store.diagnostics = diagnostics_;
  }

  void refresh_count_caches() {
    const Index n = panel_.n_populations();
    counts_double_.resize(n);
    mask_double_.resize(n);
    log_fact_.resize(n);
    const_loglik_.assign(n, 0.0);
    for (Index i = 0; i < n; ++i) {
      counts_double_[i] = panel_.counts[i].cast<double>();
      mask_double_[i] = panel_.mask[i].cast<double>().matrix();
      log_fact_[i] = counts_double_[i].unaryExpr(
          [](double y) { return std::lgamma(y + 1.0); });
      const_loglik_[i] =
          (mask_double_[i].array() *
           (counts_double_[i].array() * panel_.offsets[i].array().log() - log_fact_[i].array()))
              .sum();
    }
  }

  CountPanel panel_;
  PriorSpec prior_;
  SamplerConfig config_;
  ModelState state_;
  AdaptState adapt_;
  Rng master_rng_;
  std::vector<Rng> pop_rngs_;
  long long iteration_ = 0;
  ChainDiagnostics diagnostics_;
  std::vector<Matrix> counts_double_, mask_double_, log_fact_;
  std::vector<double> const_loglik_;
};

inline DrawStore run_chain(const CountPanel& panel, const PriorSpec& prior,
                           const SamplerConfig& config,
                           std::optional<ModelState> init = std::nullopt) {
  Sampler sampler(panel, prior, config, std::move(init));
  return sampler.run();
}

}  // namespace bmfact
