#pragma once

#include <string>
#include <vector>

#include "sghmm/common.hpp"
#include "sghmm/hmm.hpp"

// Full and minibatch estimators of the potential gradient
// grad U = -d ln p(y | theta) / d theta - d ln p(theta) / d theta.
//
// The likelihood gradient factorizes over windows of observations. Within a
// window, left and right messages are propagated to every timestep and each
// term is the pairwise-marginal analogue
//     (q_{t+1})_i P_ii(y_t) (pi_{t-1})_j / (q_{t+1}^T P(y_t) A pi_{t-1}),
// accumulated in one fused pass with shared per-step normalizers. Transition
// gradients are reported in expanded-mean coordinates (A = |Ahat| / colsum)
// at the reference point Ahat = A; rescale_to_expanded maps them to an
// arbitrary Ahat.

namespace sghmm {

struct SubsequenceWindow {
  long tau = 0;  // center observation index (0-based)
  long L = 0;    // half-width; the window covers tau-L .. tau+L
  long B = 0;    // buffer length on each side

  long begin() const { return tau - L; }
  long end() const { return tau + L + 1; }
  long length() const { return 2 * L + 1; }
  long buffer_begin() const { return tau - L - B; }
  long buffer_end() const { return tau + L + 1 + B; }
};

inline void validate(const SubsequenceWindow& w, long T) {
  if (w.L < 0 || w.B < 0) throw ValidationError("SubsequenceWindow: L and B must be >= 0");
  if (w.buffer_begin() < 0 || w.buffer_end() > T)
    throw ValidationError("SubsequenceWindow: buffered extent [" +
                          std::to_string(w.buffer_begin()) + ", " +
                          std::to_string(w.buffer_end()) + ") out of range for T=" +
                          std::to_string(T));
}

struct Minibatch {
  std::vector<SubsequenceWindow> windows;
  double log_prob = 0.0;  // ln p(S~) of the sequential sampling scheme
};

struct PotentialGradient {
  Matrix dA_hat;                            // K x K, expanded-mean coordinates
  std::vector<EmissionGradient> d_emissions;  // one per state

  void add(const PotentialGradient& other) {
    dA_hat += other.dA_hat;
    for (std::size_t k = 0; k < d_emissions.size(); ++k)
      axpy(d_emissions[k], 1.0, other.d_emissions[k]);
  }
};

inline PotentialGradient zero_gradient(const HmmParams& p) {
  PotentialGradient g;
  g.dA_hat = Matrix::Zero(p.K, p.K);
  g.d_emissions.reserve(p.K);
  for (const auto& e : p.emissions) g.d_emissions.push_back(zero_gradient_like(e));
  return g;
}

// Priors are a log-density + gradient pair so non-conjugate choices are
// first-class. The transition prior is flat on Ahat throughout (the
// experiments use a non-informative flat prior); emission priors are either
// flat or iid standard normals on the family's scalar parameters (Gaussian:
// mean components only; log-normal: mu and sigma).
struct Prior {
  enum class Emissions { Flat, StdNormal };
  Emissions emissions = Emissions::Flat;

  static Prior flat() { return Prior{}; }
  static Prior std_normal_emissions() { return Prior{Emissions::StdNormal}; }

  double log_density(const HmmParams& p) const {
    if (emissions == Emissions::Flat) return 0.0;
    double lp = 0.0;
    auto add_scalar = [&lp](double v) { lp += -0.5 * v * v - 0.5 * std::log(2.0 * M_PI); };
    for (const auto& e : p.emissions) {
      if (const auto* g = std::get_if<GaussianEmission>(&e)) {
        for (int i = 0; i < g->mu.size(); ++i) add_scalar(g->mu(i));
      } else {
        const auto& l = std::get<LogNormalEmission>(e);
        add_scalar(l.mu);
        add_scalar(l.sigma);
      }
    }
    return lp;
  }

  // d ln p(phi) / d phi for one state's emission parameters.
  EmissionGradient gradient(const Emission& e) const {
    EmissionGradient g = zero_gradient_like(e);
    if (emissions == Emissions::Flat) return g;
    if (const auto* ge = std::get_if<GaussianEmission>(&e)) {
      GaussianGradient& gg = std::get<GaussianGradient>(g);
      gg.d_mu = -ge->mu;
    } else {
      const auto& le = std::get<LogNormalEmission>(e);
      LogNormalGradient& lg = std::get<LogNormalGradient>(g);
      lg.d_mu = -le.mu;
      lg.d_sigma = -le.sigma;
    }
    return g;
  }
};

namespace detail {

// Per-window sums: R_ij = sum_t (q_{t+1})_i P_ii(y_t) (pi_{t-1})_j / Z_t and
// the responsibility-weighted emission scores. All per-step normalizers
// cancel inside the ratios, so only normalized directions are propagated.
struct WindowAccum {
  Matrix R;
  std::vector<EmissionGradient> emission_score;  // sum_t gamma_t(k) * score_k(y_t)
};

inline WindowAccum accumulate_window(const HmmParams& p, const ObservationSequence& y,
                                     long w0, long w1, const Vector& left,
                                     const Vector& right, long tau_for_error) {
  const long n = w1 - w0;
  WindowAccum acc;
  acc.R = Matrix::Zero(p.K, p.K);
  acc.emission_score.reserve(p.K);
  for (const auto& e : p.emissions) acc.emission_score.push_back(zero_gradient_like(e));

  // Right messages propagated to every t: bnext[i] is the normalized
  // direction of p(y_{t+1:} | x_t) for t = w0 + i.
  std::vector<Vector> bnext(n);
  Vector b = right;
  bnext[n - 1] = b;
  for (long i = n - 1; i >= 1; --i) {
    sghmm::detail::backward_step(p, y.at(w0 + i), b, w0 + i);
    bnext[i - 1] = b;
  }

  Vector a = left;  // normalized direction of p(x_{t-1} | y before the window)
  for (long i = 0; i < n; ++i) {
    const long t = w0 + i;
    Vector yt = y.at(t);
    Vector w = p.A * a;
    Vector ld = emission_log_densities(p, yt);
    double m = ld.maxCoeff();
    if (!std::isfinite(m))
      throw NumericError("impossible observation in window tau=" + std::to_string(tau_for_error) +
                         " at t=" + std::to_string(t));
    Vector e = (ld.array() - m).exp();
    Vector u = bnext[i].cwiseProduct(e);
    double z = u.dot(w);
    if (!(z > 0.0) || !std::isfinite(z))
      throw NumericError("window likelihood vanished (tau=" + std::to_string(tau_for_error) +
                         ", t=" + std::to_string(t) + ")");
    acc.R.noalias() += (u * a.transpose()) / z;
    Vector gamma = u.cwiseProduct(w) / z;  // posterior of x_t given the window
    for (int k = 0; k < p.K; ++k) {
      if (gamma(k) == 0.0) continue;
      axpy(acc.emission_score[k], gamma(k), grad_log_density(p.emissions[k], yt));
    }
    a = e.cwiseProduct(w);
    a /= a.sum();
  }
  return acc;
}

// Projects d ln p / dA onto expanded-mean coordinates at Ahat = A:
// d ln p / dAhat_ij = R_ij - sum_k A_kj R_kj.
inline Matrix to_expanded_reference(const Matrix& R, const Matrix& A) {
  Eigen::RowVectorXd c = (A.array() * R.array()).colwise().sum();
  return R - Vector::Ones(A.rows()) * c;
}

// Folds one window's sums into a potential gradient with the given weight.
inline void fold_window(const HmmParams& p, const WindowAccum& acc, double weight,
                        PotentialGradient& out) {
  out.dA_hat.noalias() -= weight * to_expanded_reference(acc.R, p.A);
  for (int k = 0; k < p.K; ++k) axpy(out.d_emissions[k], -weight, acc.emission_score[k]);
}

}  // namespace detail

// Negative partial of this window's log-likelihood contribution with respect
// to Ahat (before the D = Ahat preconditioning), boundary messages taken from
// the window's own buffers.
inline Matrix transition_gradient_term(const HmmParams& p, const ObservationSequence& y,
                                       const SubsequenceWindow& w) {
  validate(w, y.T());
  Vector left = forward_predictive(p, y, w.buffer_begin(), w.begin(), p.pi0).v;
  Vector right = backward_likelihood(p, y, w.end(), w.buffer_end()).v;
  auto acc = detail::accumulate_window(p, y, w.begin(), w.end(), left, right, w.tau);
  return -detail::to_expanded_reference(acc.R, p.A);
}

// Negative partial with respect to state k's emission parameters; the per-t
// weights are the normalized posteriors of x_t given the buffered boundaries.
inline EmissionGradient emission_gradient_term(const HmmParams& p, const ObservationSequence& y,
                                               const SubsequenceWindow& w, int k) {
  validate(w, y.T());
  if (k < 0 || k >= p.K) throw ValidationError("emission_gradient_term: state out of range");
  Vector left = forward_predictive(p, y, w.buffer_begin(), w.begin(), p.pi0).v;
  Vector right = backward_likelihood(p, y, w.end(), w.buffer_end()).v;
  auto acc = detail::accumulate_window(p, y, w.begin(), w.end(), left, right, w.tau);
  EmissionGradient g = acc.emission_score[k];
  scale(g, -1.0);
  return g;
}

// Exact potential gradient over a partition into length-(2L+1) windows (one
// shorter terminal window when T is not divisible). The result telescopes to
// the full-sequence derivative, so it is independent of the partition; the
// default is a single whole-sequence window.
inline PotentialGradient full_gradient(const HmmParams& p, const Prior& prior,
                                       const ObservationSequence& y, long L = -1) {
  validate(p);
  const long T = y.T();
  PotentialGradient out = zero_gradient(p);

  std::vector<std::pair<long, long>> spans;
  if (L < 0) {
    spans.emplace_back(0, T);
  } else {
    const long len = 2 * L + 1;
    for (long s = 0; s < T; s += len) spans.emplace_back(s, std::min(T, s + len));
  }

  if (spans.size() == 1) {
    auto acc = detail::accumulate_window(p, y, 0, T, p.pi0, Vector::Ones(p.K), 0);
    detail::fold_window(p, acc, 1.0, out);
  } else {
    ForwardSweep fs = forward_sweep(p, y);
    BackwardSweep bs = backward_sweep(p, y);
    std::vector<PotentialGradient> parts(spans.size(), zero_gradient(p));
    parallel_for(spans.size(), [&](std::size_t i) {
      auto [s, e] = spans[i];
      auto acc = detail::accumulate_window(p, y, s, e, fs.filt[s], bs.like[e], (s + e) / 2);
      detail::fold_window(p, acc, 1.0, parts[i]);
    });
    for (const auto& part : parts) out.add(part);  // fixed order keeps runs bit-identical
  }

  for (int k = 0; k < p.K; ++k) {
    EmissionGradient pg = prior.gradient(p.emissions[k]);
    axpy(out.d_emissions[k], -1.0, pg);
  }
  return out;
}

// Minibatch estimator. With use_buffers the boundary messages are propagated
// over each window's buffers from pi0 and the all-ones vector (B = 0 plugs
// them in directly); without it they are exact full-prefix/suffix messages.
// The likelihood part is scaled by T / (total window length), the coverage
// fraction of Eq. (10)'s sampling scheme.
inline PotentialGradient stochastic_gradient(const HmmParams& p, const Prior& prior,
                                             const ObservationSequence& y,
                                             const Minibatch& batch, bool use_buffers) {
  validate(p);
  const long T = y.T();
  if (batch.windows.empty()) throw ValidationError("stochastic_gradient: empty minibatch");
  if (!std::isfinite(batch.log_prob))
    throw ValidationError("stochastic_gradient: non-finite minibatch log_prob");
  long covered = 0;
  for (const auto& w : batch.windows) {
    validate(w, T);
    covered += w.length();
  }
  const double scale = static_cast<double>(T) / static_cast<double>(covered);

  std::vector<PotentialGradient> parts(batch.windows.size(), zero_gradient(p));
  parallel_for(batch.windows.size(), [&](std::size_t i) {
    const auto& w = batch.windows[i];
    Vector left, right;
    if (use_buffers) {
      left = forward_predictive(p, y, w.buffer_begin(), w.begin(), p.pi0).v;
      right = backward_likelihood(p, y, w.end(), w.buffer_end()).v;
    } else {
      left = forward_predictive(p, y, 0, w.begin(), p.pi0).v;
      right = backward_likelihood(p, y, w.end(), T).v;
    }
    auto acc = detail::accumulate_window(p, y, w.begin(), w.end(), left, right, w.tau);
    detail::fold_window(p, acc, scale, parts[i]);
  });

  PotentialGradient out = zero_gradient(p);
  for (const auto& part : parts) out.add(part);
  for (int k = 0; k < p.K; ++k) {
    EmissionGradient pg = prior.gradient(p.emissions[k]);
    axpy(out.d_emissions[k], -1.0, pg);
  }

  if (!out.dA_hat.allFinite())
    throw NumericError("stochastic_gradient: non-finite transition gradient");
  for (const auto& g : out.d_emissions)
    if (!gradient_finite(g)) throw NumericError("stochastic_gradient: non-finite emission gradient");
  return out;
}

// Maps a reference-coordinate transition gradient (computed at Ahat = A) to
// the partial at an arbitrary positive Ahat: multiply column j by
// 1 / sum_i Ahat_ij.
inline Matrix rescale_to_expanded(const Matrix& dA_ref, const Matrix& A_hat) {
  Matrix out = dA_ref;
  for (int j = 0; j < A_hat.cols(); ++j) {
    double s = A_hat.col(j).cwiseAbs().sum();
    if (!(s > 0.0)) throw NumericError("rescale_to_expanded: zero column in Ahat");
    out.col(j) /= s;
  }
  return out;
}

}  // namespace sghmm
