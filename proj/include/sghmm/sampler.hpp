#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sghmm/adaptivity.hpp"
#include "sghmm/common.hpp"
#include "sghmm/gradient.hpp"
#include "sghmm/hmm.hpp"

// SG-RLD updates for the expanded-mean transition matrix and for emission
// parameters, assembled into the buffered minibatch sampler and a
// full-gradient batch baseline.
//
// Transition update (per entry, D = Ahat, Q = 0, Gamma = 1 per coordinate):
//   Ahat <- Ahat - eps [Ahat . grad + 1] + N(0, eps (2 Ahat - eps Bhat))
// followed by reflection to |Ahat|; the simplex parameter is recovered as
// A = |Ahat| / column sum. Gaussian emissions use D = Sigma for the mean and
// D = Sigma (x) Sigma with a +Sigma drift for the covariance, rejecting
// non-PD proposals. Log-normal emissions step (mu, ln sigma) with the
// diagonal Fisher-inverse metric.

namespace sghmm {

struct SamplerConfig {
  int K = 1;
  std::string family = "gaussian";  // "gaussian" | "lognormal"
  long L = 2;
  long batch_count = 10;
  double eps = 1e-4;             // emission-block step size
  double eps_transition = 0.1;   // transition-block step size
  long n_iter = 500;             // outer iterations
  long n_steps = 5;              // inner steps per block
  enum class BufferMode { Adaptive, Fixed, None };
  BufferMode buffer_mode = BufferMode::Adaptive;
  long fixed_B = 0;
  double delta = 1e-3;
  double delta0 = 2.0;
  long B_max = 50;
  long reestimate_every = 50;
  long lyapunov_iters = 2000;
  std::uint64_t seed = 1;
  long thin = 1;
  bool averaging = true;        // inner-loop averaging; off for ablation runs
  bool estimate_noise = false;  // empirical Bhat from within-minibatch variance
  bool prior_only = false;      // drop the data term (stationarity checks)
  bool iid_mode = false;        // tie transition columns: mixture baseline
  Prior prior = Prior::flat();
  double decay_gamma = 0.0;  // eps_t = eps (1 + t/decay_b)^(-gamma) when > 0
  double decay_b = 1000.0;
  std::optional<std::vector<Emission>> init_emissions;  // overrides k-means init
  std::function<void(long, long)> progress;             // (outer iteration, n_iter)
};

struct TraceSample {
  long iter = 0;
  double wall_ms = 0.0;
  Matrix A;
  std::vector<Emission> emissions;
  double log_pred = std::numeric_limits<double>::quiet_NaN();
};

struct AdaptationRecord {
  long iter = 0;
  long B = 0;
  double nu = 1.0;
  double lyapunov = 0.0;
  bool warning = false;
};

struct Trace {
  std::vector<TraceSample> samples;
  std::vector<AdaptationRecord> adaptation;
  long eps_shrink_events = 0;  // steps where the noise guard shrank eps
  long sigma_rejections = 0;   // non-PD covariance proposals kept at the old value
};

struct SamplerState {
  Matrix A_hat;                      // entries kept > 0 by reflection
  std::vector<Emission> emissions;
  double step_size = 0.0;
  Matrix noise_cov_A;                // per-entry Bhat for the transition block
  std::vector<Vector> noise_cov_em;  // per-state diagonal Bhat over (mu coords | mu, ln sigma)
  long iteration = 0;
  Rng rng;
  long eps_shrink_events = 0;
};

inline Matrix normalize_transition(const Matrix& A_hat) {
  Matrix A = A_hat.cwiseAbs();
  for (int j = 0; j < A.cols(); ++j) {
    double s = A.col(j).sum();
    if (!(s > 0.0))
      throw NumericError("normalize_transition: degenerate state " + std::to_string(j) +
                         " (all-zero column)");
    A.col(j) /= s;
  }
  return A;
}

namespace detail {

inline double normal_draw(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return n(rng);
}

}  // namespace detail

// One elementwise expanded-mean update of the transition block. grad must be
// the potential gradient with respect to the current Ahat. The step size is
// shrunk when an entry's 2 Ahat - eps Bhat would go negative, so noise is
// never drawn from a negative variance.
inline void sgld_step_transition(SamplerState& st, const Matrix& grad, double eps) {
  if (!grad.allFinite()) throw NumericError("sgld_step_transition: non-finite gradient");
  const int K = static_cast<int>(st.A_hat.rows());
  const bool has_bhat = st.noise_cov_A.size() > 0;
  if (has_bhat) {
    double shrunk = eps;
    for (int i = 0; i < K; ++i)
      for (int j = 0; j < K; ++j)
        if (st.noise_cov_A(i, j) > 0.0)
          shrunk = std::min(shrunk, 0.9 * 2.0 * st.A_hat(i, j) / st.noise_cov_A(i, j));
    if (shrunk < eps) ++st.eps_shrink_events;
    eps = shrunk;
  }
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      double bhat = has_bhat ? st.noise_cov_A(i, j) : 0.0;
      double var = eps * (2.0 * st.A_hat(i, j) - eps * bhat);
      if (var < 0.0)
        throw NumericError("sgld_step_transition: negative noise variance slipped past guard");
      double noise = std::sqrt(var) * detail::normal_draw(st.rng);
      double v = st.A_hat(i, j) - eps * (st.A_hat(i, j) * grad(i, j) + 1.0) + noise;
      v = std::abs(v);  // reflection; A = |Ahat|/colsum is invariant to the sign
      if (v == 0.0) v = 1e-10;
      st.A_hat(i, j) = v;
    }
  ++st.iteration;
}

// Tied-column variant for the i.i.d. mixture baseline: a single weight vector
// what drives every column, its gradient is the column sum of the full one.
inline void sgld_step_mixture_weights(SamplerState& st, const Matrix& grad, double eps) {
  const int K = static_cast<int>(st.A_hat.rows());
  Vector what = st.A_hat.col(0);
  Vector g = grad.rowwise().sum();
  for (int i = 0; i < K; ++i) {
    double var = eps * 2.0 * what(i);
    double v = what(i) - eps * (what(i) * g(i) + 1.0) + std::sqrt(var) * detail::normal_draw(st.rng);
    v = std::abs(v);
    if (v == 0.0) v = 1e-10;
    what(i) = v;
  }
  st.A_hat = what * Eigen::RowVectorXd::Ones(K);
  ++st.iteration;
}

// Riemannian update for one Gaussian state. Returns false when the proposed
// covariance was rejected (kept at its previous value).
inline bool sgld_step_gaussian(SamplerState& st, int k, const GaussianGradient& grad, double eps) {
  auto& em = std::get<GaussianEmission>(st.emissions[k]);
  const int d = static_cast<int>(em.mu.size());

  Eigen::LLT<Matrix> llt(em.sigma);
  if (llt.info() != Eigen::Success)
    throw NumericError("sgld_step_gaussian: current covariance not positive definite");
  Matrix L = llt.matrixL();

  const bool has_bhat =
      k < static_cast<int>(st.noise_cov_em.size()) && st.noise_cov_em[k].size() >= d;
  auto mu_noise_cov = [&](double e) {
    Matrix c = e * 2.0 * em.sigma;
    if (has_bhat) c -= e * e * em.sigma * st.noise_cov_em[k].head(d).asDiagonal() * em.sigma;
    return c;
  };
  Eigen::LLT<Matrix> mu_llt(mu_noise_cov(eps));
  while (mu_llt.info() != Eigen::Success) {
    eps *= 0.5;
    ++st.eps_shrink_events;
    if (eps < 1e-300) throw NumericError("sgld_step_gaussian: noise covariance irreparably non-PSD");
    mu_llt.compute(mu_noise_cov(eps));
  }
  Vector z(d);
  for (int i = 0; i < d; ++i) z(i) = detail::normal_draw(st.rng);
  Vector new_mu = em.mu - eps * (em.sigma * grad.d_mu) + mu_llt.matrixL() * z;

  // Sigma: D = Sigma (x) Sigma, Gamma drift +Sigma, noise L W L^T (its
  // covariance is Sigma (x) Sigma); the Bhat correction is not applied to
  // this block.
  Matrix W(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) W(i, j) = detail::normal_draw(st.rng);
  Matrix noise = std::sqrt(2.0 * eps) * L * W * L.transpose();
  Matrix raw = em.sigma - eps * (em.sigma * grad.d_sigma * em.sigma + em.sigma) + noise;
  Matrix prop = 0.5 * (raw + raw.transpose());

  em.mu = new_mu;
  Eigen::LLT<Matrix> prop_llt(prop);
  bool accepted = prop_llt.info() == Eigen::Success && prop.diagonal().minCoeff() > 0.0;
  if (accepted) em.sigma = prop;
  ++st.iteration;
  return accepted;
}

// Riemannian update for one log-normal state in (mu, ln sigma) coordinates,
// metric diag(sigma^2, 1/2). The prior's change of measure to ln sigma
// contributes the -1 drift when the prior is a density over sigma.
inline void sgld_step_lognormal(SamplerState& st, int k, const LogNormalGradient& grad, double eps,
                                bool prior_on_sigma) {
  auto& em = std::get<LogNormalEmission>(st.emissions[k]);
  double bmu = 0.0, bs = 0.0;
  if (k < static_cast<int>(st.noise_cov_em.size()) && st.noise_cov_em[k].size() == 2) {
    bmu = st.noise_cov_em[k](0);
    bs = st.noise_cov_em[k](1);
  }
  double sig2 = em.sigma * em.sigma;
  double var_mu = eps * (2.0 * sig2 - eps * bmu);
  double var_s = eps * (1.0 - eps * bs);
  while (var_mu < 0.0 || var_s < 0.0) {
    eps *= 0.5;
    ++st.eps_shrink_events;
    if (eps < 1e-300) throw NumericError("sgld_step_lognormal: noise variance irreparably negative");
    var_mu = eps * (2.0 * sig2 - eps * bmu);
    var_s = eps * (1.0 - eps * bs);
  }
  double d_s = em.sigma * grad.d_sigma + (prior_on_sigma ? -1.0 : 0.0);
  double new_mu = em.mu - eps * sig2 * grad.d_mu + std::sqrt(var_mu) * detail::normal_draw(st.rng);
  double new_s = std::log(em.sigma) - eps * 0.5 * d_s + std::sqrt(var_s) * detail::normal_draw(st.rng);
  em.mu = new_mu;
  em.sigma = std::exp(new_s);
  ++st.iteration;
}

namespace detail {

inline std::vector<Emission> kmeans_init(const ObservationSequence& y, int K,
                                         const std::string& family, Rng& rng) {
  const long T = y.T();
  const int d = family == "lognormal" ? 1 : y.dim();
  const long n = std::min<long>(T, 4000);
  Matrix pts(d, n);
  for (long i = 0; i < n; ++i) {
    long t = i * T / n;
    if (family == "lognormal") {
      double v = y.data(0, t);
      pts(0, i) = std::log(std::max(v, 1e-300));
    } else {
      pts.col(i) = y.data.col(t);
    }
  }

  std::uniform_int_distribution<long> pick(0, n - 1);
  Matrix centers(d, K);
  for (int k = 0; k < K; ++k) centers.col(k) = pts.col(pick(rng));
  std::vector<int> assign(n, 0);
  for (int iter = 0; iter < 15; ++iter) {
    for (long i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        double dist = (pts.col(i) - centers.col(k)).squaredNorm();
        if (dist < best) {
          best = dist;
          assign[i] = k;
        }
      }
    }
    for (int k = 0; k < K; ++k) {
      Vector sum = Vector::Zero(d);
      long cnt = 0;
      for (long i = 0; i < n; ++i)
        if (assign[i] == k) {
          sum += pts.col(i);
          ++cnt;
        }
      centers.col(k) = cnt > 0 ? Vector(sum / cnt) : Vector(pts.col(pick(rng)));
    }
  }

  Vector mean = pts.rowwise().mean();
  Matrix cov = Matrix::Zero(d, d);
  for (long i = 0; i < n; ++i) {
    Vector z = pts.col(i) - mean;
    cov += z * z.transpose();
  }
  cov /= static_cast<double>(std::max<long>(n - 1, 1));
  cov += (1e-3 * cov.trace() / d + 1e-9) * Matrix::Identity(d, d);

  std::vector<Emission> out;
  out.reserve(K);
  for (int k = 0; k < K; ++k) {
    if (family == "lognormal") {
      double sd = std::sqrt(std::max(cov(0, 0), 1e-2));
      out.push_back(LogNormalEmission{centers(0, k), sd});
    } else {
      out.push_back(GaussianEmission{centers.col(k), cov});
    }
  }
  return out;
}

struct EmissionRunningMean {
  std::vector<Emission> sum;
  long n = 0;

  void accumulate(const std::vector<Emission>& e) {
    if (n == 0) {
      sum = e;
      n = 1;
      return;
    }
    for (std::size_t k = 0; k < sum.size(); ++k) {
      if (auto* g = std::get_if<GaussianEmission>(&sum[k])) {
        const auto& o = std::get<GaussianEmission>(e[k]);
        g->mu += o.mu;
        g->sigma += o.sigma;
      } else {
        auto& l = std::get<LogNormalEmission>(sum[k]);
        const auto& o = std::get<LogNormalEmission>(e[k]);
        l.mu += o.mu;
        l.sigma += o.sigma;
      }
    }
    ++n;
  }
  std::vector<Emission> mean() const {
    std::vector<Emission> out = sum;
    for (auto& e : out) {
      if (auto* g = std::get_if<GaussianEmission>(&e)) {
        g->mu /= static_cast<double>(n);
        g->sigma /= static_cast<double>(n);
      } else {
        auto& l = std::get<LogNormalEmission>(e);
        l.mu /= static_cast<double>(n);
        l.sigma /= static_cast<double>(n);
      }
    }
    return out;
  }
};

// Empirical Bhat from the spread of single-window gradient estimates: the
// batch gradient is the mean of the per-window ones, so the variance of the
// preconditioned drift is D^2 var(mean) per coordinate. Diagonal blocks only;
// the Gaussian Sigma block stays uncorrected.
inline void estimate_bhat(const HmmParams& p, const ObservationSequence& y, const Prior& prior,
                          const Minibatch& batch, const std::string& family, SamplerState& st) {
  const double R = static_cast<double>(batch.windows.size());
  if (R < 2) return;
  std::vector<PotentialGradient> parts;
  parts.reserve(batch.windows.size());
  for (const auto& w : batch.windows) {
    Minibatch one;
    one.windows.push_back(w);
    one.log_prob = batch.log_prob;
    parts.push_back(stochastic_gradient(p, prior, y, one, true));
  }
  const int K = p.K;
  const double denom = R * (R - 1.0);

  Matrix mean_a = Matrix::Zero(K, K);
  for (auto& pg : parts) mean_a += rescale_to_expanded(pg.dA_hat, st.A_hat);
  mean_a /= R;
  Matrix var_a = Matrix::Zero(K, K);
  for (auto& pg : parts) {
    Matrix z = rescale_to_expanded(pg.dA_hat, st.A_hat) - mean_a;
    var_a += z.cwiseProduct(z);
  }
  st.noise_cov_A = st.A_hat.cwiseProduct(st.A_hat).cwiseProduct(var_a) / denom;

  st.noise_cov_em.assign(K, Vector());
  for (int k = 0; k < K; ++k) {
    if (family == "lognormal") {
      double m0 = 0, m1 = 0, v0 = 0, v1 = 0;
      for (auto& pg : parts) {
        auto& lg = std::get<LogNormalGradient>(pg.d_emissions[k]);
        m0 += lg.d_mu;
        m1 += lg.d_sigma;
      }
      m0 /= R;
      m1 /= R;
      for (auto& pg : parts) {
        auto& lg = std::get<LogNormalGradient>(pg.d_emissions[k]);
        v0 += (lg.d_mu - m0) * (lg.d_mu - m0);
        v1 += (lg.d_sigma - m1) * (lg.d_sigma - m1);
      }
      const auto& em = std::get<LogNormalEmission>(st.emissions[k]);
      double s2 = em.sigma * em.sigma;
      Vector b(2);
      b(0) = s2 * s2 * v0 / denom;
      b(1) = 0.25 * s2 * v1 / denom;
      st.noise_cov_em[k] = b;
    } else {
      const auto& em = std::get<GaussianEmission>(st.emissions[k]);
      const int d = static_cast<int>(em.mu.size());
      Vector m = Vector::Zero(d), v = Vector::Zero(d);
      for (auto& pg : parts) m += std::get<GaussianGradient>(pg.d_emissions[k]).d_mu;
      m /= R;
      for (auto& pg : parts) {
        Vector z = std::get<GaussianGradient>(pg.d_emissions[k]).d_mu - m;
        v += z.cwiseProduct(z);
      }
      st.noise_cov_em[k] = v / denom;
    }
  }
}

// Shared driver for the minibatch sampler and the batch baseline. grad_fn
// computes the potential gradient at the given parameters.
template <typename GradFn>
Trace run_sampler_loop(const ObservationSequence& y, const SamplerConfig& cfg, GradFn&& grad_fn,
                       bool minibatched) {
  if (cfg.K < 1) throw ValidationError("sampler config: K must be >= 1");
  if (cfg.n_steps < 1) throw ValidationError("sampler config: n_steps must be >= 1");
  if (cfg.thin < 1) throw ValidationError("sampler config: thin must be >= 1");
  if (cfg.family != "gaussian" && cfg.family != "lognormal")
    throw ValidationError("sampler config: unknown family " + cfg.family);

  const long T = y.T();
  SamplerState st;
  st.rng = make_rng(cfg.seed, 1);
  st.A_hat = Matrix::Constant(cfg.K, cfg.K, 1.0 / cfg.K);
  st.emissions = cfg.init_emissions ? *cfg.init_emissions
                                    : detail::kmeans_init(y, cfg.K, cfg.family, st.rng);
  st.step_size = cfg.eps;

  Vector pi0 = Vector::Constant(cfg.K, 1.0 / cfg.K);
  auto params_now = [&](const Matrix& A) {
    HmmParams p;
    p.K = cfg.K;
    p.A = A;
    p.emissions = st.emissions;
    p.pi0 = pi0;
    return p;
  };

  Trace trace;
  long B = cfg.buffer_mode == SamplerConfig::BufferMode::Fixed ? cfg.fixed_B : 0;
  double nu = 1.0;
  const bool prior_on_sigma = cfg.prior.emissions == Prior::Emissions::StdNormal;

  auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  for (long n = 0; n < cfg.n_iter; ++n) {
    if (cfg.progress) cfg.progress(n, cfg.n_iter);
    double eps_em = cfg.eps;
    double eps_tr = cfg.eps_transition;
    if (cfg.decay_gamma > 0.0) {
      double f = std::pow(1.0 + static_cast<double>(n) / cfg.decay_b, -cfg.decay_gamma);
      eps_em *= f;
      eps_tr *= f;
    }
    st.step_size = eps_em;

    if (minibatched && !cfg.prior_only && n % cfg.reestimate_every == 0) {
      Matrix A = normalize_transition(st.A_hat);
      AdaptationRecord rec;
      rec.iter = n;
      GapPolicy gp = gap_policy(A, cfg.L, B, T);
      nu = gp.nu;
      if (cfg.buffer_mode == SamplerConfig::BufferMode::Adaptive) {
        auto lyap = estimate_lyapunov(params_now(A), y, cfg.lyapunov_iters,
                                      cfg.seed + 7919 * static_cast<std::uint64_t>(n + 1));
        auto pol = buffer_length(lyap, cfg.delta, cfg.delta0, cfg.B_max);
        long feasible_B = std::max<long>(0, (T - (2 * cfg.L + 1)) / 2 - 1);
        B = std::min(pol.B, feasible_B);
        rec.lyapunov = lyap.exponent;
        rec.warning = pol.warning;
        gp = gap_policy(A, cfg.L, B, T);
        nu = gp.nu;
      } else if (cfg.buffer_mode == SamplerConfig::BufferMode::None) {
        B = 0;
      }
      rec.B = B;
      rec.nu = nu;
      trace.adaptation.push_back(rec);
    }

    auto next_batch = [&]() -> Minibatch {
      std::uniform_int_distribution<std::uint64_t> sub(0);
      return sample_minibatch(T, cfg.L, B, static_cast<long>(std::ceil(nu)), cfg.batch_count,
                              sub(st.rng));
    };
    Minibatch batch;
    if (minibatched && !cfg.prior_only) batch = next_batch();

    auto gradient_at = [&](const Matrix& Acur) -> PotentialGradient {
      HmmParams p = params_now(Acur);
      if (cfg.prior_only) {
        PotentialGradient g = zero_gradient(p);
        for (int k = 0; k < cfg.K; ++k) {
          EmissionGradient pg = cfg.prior.gradient(p.emissions[k]);
          axpy(g.d_emissions[k], -1.0, pg);
        }
        return g;
      }
      try {
        return grad_fn(p, batch);
      } catch (const NumericError&) {
        if (!minibatched) throw;
        batch = next_batch();  // one resample for an impossible window
        try {
          return grad_fn(p, batch);
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " (outer iteration " + std::to_string(n) +
                             ", after window resample)");
        }
      }
    };

    if (cfg.estimate_noise && minibatched && !cfg.prior_only)
      detail::estimate_bhat(params_now(normalize_transition(st.A_hat)), y, cfg.prior, batch,
                            cfg.family, st);

    // Transition block.
    Matrix a_sum = Matrix::Zero(cfg.K, cfg.K);
    for (long s = 0; s < cfg.n_steps; ++s) {
      Matrix Acur = normalize_transition(st.A_hat);
      PotentialGradient g = gradient_at(Acur);
      Matrix g_hat = rescale_to_expanded(g.dA_hat, st.A_hat);
      if (cfg.iid_mode)
        sgld_step_mixture_weights(st, g_hat, eps_tr);
      else
        sgld_step_transition(st, g_hat, eps_tr);
      a_sum += st.A_hat;
    }
    if (cfg.averaging) st.A_hat = a_sum / static_cast<double>(cfg.n_steps);

    // Emission block at the refreshed transition estimate.
    Matrix A_fixed = normalize_transition(st.A_hat);
    detail::EmissionRunningMean em_mean;
    for (long s = 0; s < cfg.n_steps; ++s) {
      PotentialGradient g = gradient_at(A_fixed);
      for (int k = 0; k < cfg.K; ++k) {
        if (cfg.family == "gaussian") {
          if (!sgld_step_gaussian(st, k, std::get<GaussianGradient>(g.d_emissions[k]), eps_em))
            ++trace.sigma_rejections;
        } else {
          sgld_step_lognormal(st, k, std::get<LogNormalGradient>(g.d_emissions[k]), eps_em,
                              prior_on_sigma);
        }
      }
      em_mean.accumulate(st.emissions);
    }
    if (cfg.averaging) st.emissions = em_mean.mean();

    if (n % cfg.thin == 0) {
      TraceSample smp;
      smp.iter = n;
      smp.wall_ms = elapsed_ms();
      smp.A = normalize_transition(st.A_hat);
      smp.emissions = st.emissions;
      trace.samples.push_back(std::move(smp));
    }
  }
  trace.eps_shrink_events = st.eps_shrink_events;
  return trace;
}

}  // namespace detail

// Alg.-2 sampler: periodically re-estimate B and nu, sample a gap-respecting
// minibatch, run N_steps inner updates per block and carry the averages.
inline Trace run_sg_mcmc(const ObservationSequence& y, const SamplerConfig& cfg) {
  return detail::run_sampler_loop(
      y, cfg,
      [&](const HmmParams& p, const Minibatch& batch) {
        return stochastic_gradient(p, cfg.prior, y, batch, /*use_buffers=*/true);
      },
      /*minibatched=*/true);
}

// Full-gradient baseline: identical updates driven by the exact gradient.
inline Trace run_batch_rld(const ObservationSequence& y, const SamplerConfig& cfg) {
  return detail::run_sampler_loop(
      y, cfg,
      [&](const HmmParams& p, const Minibatch&) { return full_gradient(p, cfg.prior, y); },
      /*minibatched=*/false);
}

}  // namespace sghmm
