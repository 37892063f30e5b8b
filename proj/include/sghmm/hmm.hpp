#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "sghmm/common.hpp"
#include "sghmm/emissions.hpp"

// HMM data model and the normalized matrix-product primitives everything else
// is built from.
//
// The marginal likelihood is p(y | theta) = 1^T P(y_T) A ... P(y_1) A pi0
// with P(y_t) diagonal, P_kk(y_t) = p(y_t | x_t = k). Products are evaluated
// with per-step normalization so nothing underflows over millions of steps:
// forward vectors are normalized to sum 1 (probability semantics), backward
// vectors are max-normalized, and log normalizers are carried separately.

namespace sghmm {

struct HmmParams {
  int K = 0;                        // state count
  Matrix A;                         // K x K, column-stochastic: A(i,j) = Pr(x_t=i | x_{t-1}=j)
  std::vector<Emission> emissions;  // K entries
  Vector pi0;                       // initial state distribution

  int dim() const { return emissions.empty() ? 0 : sghmm::dim(emissions.front()); }
};

struct ObservationSequence {
  Matrix data;  // d x T, one column per timestep

  long T() const { return data.cols(); }
  int dim() const { return static_cast<int>(data.rows()); }
  Vector at(long t) const { return data.col(t); }
};

// One side of a buffered boundary: a normalized direction plus the log of the
// factor that was divided out. The unnormalized message is exp(log_norm) * v.
struct Message {
  Vector v;
  double log_norm = 0.0;
};

struct MessagePair {
  Vector pi;                // forward predictive direction, sums to 1
  double log_norm_pi = 0.0;
  Vector q;                 // right likelihood direction, max entry 1
  double log_norm_q = 0.0;
};

inline void validate(const HmmParams& p) {
  if (p.K < 1) throw ValidationError("HmmParams: K must be >= 1");
  if (p.A.rows() != p.K || p.A.cols() != p.K)
    throw ValidationError("HmmParams: A must be K x K");
  if (p.A.minCoeff() < 0.0) throw ValidationError("HmmParams: A has negative entries");
  for (int j = 0; j < p.K; ++j) {
    if (std::abs(p.A.col(j).sum() - 1.0) > 1e-12)
      throw ValidationError("HmmParams: column " + std::to_string(j) +
                            " of A does not sum to 1 within 1e-12");
  }
  if (p.pi0.size() != p.K) throw ValidationError("HmmParams: pi0 must have K entries");
  if (p.pi0.minCoeff() < 0.0) throw ValidationError("HmmParams: pi0 has negative entries");
  if (std::abs(p.pi0.sum() - 1.0) > 1e-12)
    throw ValidationError("HmmParams: pi0 does not sum to 1 within 1e-12");
  if (static_cast<int>(p.emissions.size()) != p.K)
    throw ValidationError("HmmParams: emissions must have exactly K entries");
  for (const auto& e : p.emissions) validate(e);
  for (const auto& e : p.emissions)
    if (sghmm::dim(e) != p.dim())
      throw ValidationError("HmmParams: emission dimensions differ across states");
}

inline void validate(const ObservationSequence& y) {
  if (y.T() < 1) throw ValidationError("ObservationSequence: T must be >= 1");
  if (!y.data.allFinite()) throw ValidationError("ObservationSequence: non-finite entries");
}

// Log emission densities of y_t under every state, the diagonal of ln P(y_t).
inline Vector emission_log_densities(const HmmParams& p, const Vector& yt) {
  Vector ld(p.K);
  for (int k = 0; k < p.K; ++k) ld(k) = log_density(p.emissions[k], yt);
  return ld;
}

namespace detail {

// v <- normalize(P(y_t) A v); returns the log of the divided-out factor.
// Densities enter through their logs so an individually underflowing P_kk
// cannot zero the whole step.
inline double forward_step(const HmmParams& p, const Vector& yt, Vector& v, long t_for_error) {
  Vector w = p.A * v;
  Vector ld = emission_log_densities(p, yt);
  double m = ld.maxCoeff();
  if (!std::isfinite(m))
    throw NumericError("impossible observation: all emission densities vanish at t=" +
                       std::to_string(t_for_error));
  Vector u = (ld.array() - m).exp() * w.array();
  double s = u.sum();
  if (!(s > 0.0) || !std::isfinite(s))
    throw NumericError("forward message collapsed to zero at t=" + std::to_string(t_for_error));
  v = u / s;
  return m + std::log(s);
}

// v <- normalize_max(A^T P(y_t) v), the adjoint step.
inline double backward_step(const HmmParams& p, const Vector& yt, Vector& v, long t_for_error) {
  Vector ld = emission_log_densities(p, yt);
  double m = ld.maxCoeff();
  if (!std::isfinite(m))
    throw NumericError("impossible observation: all emission densities vanish at t=" +
                       std::to_string(t_for_error));
  Vector u = p.A.transpose() * ((ld.array() - m).exp() * v.array()).matrix();
  double s = u.maxCoeff();
  if (!(s > 0.0) || !std::isfinite(s))
    throw NumericError("backward message collapsed to zero at t=" + std::to_string(t_for_error));
  v = u / s;
  return m + std::log(s);
}

}  // namespace detail

// Applies the factors P(y_t) A for t in [from, to) to init, left to right.
// With init = pi0 and from = 0 this reproduces the exact normalized forward
// message (the filter) after consuming to observations; an empty range is the
// identity. Unnormalized result = exp(log_norm) * v.
inline Message forward_predictive(const HmmParams& p, const ObservationSequence& y,
                                  long from, long to, const Vector& init) {
  if (from < 0 || to < from || to > y.T())
    throw ValidationError("forward_predictive: index range out of bounds");
  if (init.size() != p.K) throw ValidationError("forward_predictive: init has wrong size");
  Message msg{init, 0.0};
  double s0 = msg.v.sum();
  if (!(s0 > 0.0)) throw ValidationError("forward_predictive: init is not a probability vector");
  for (long t = from; t < to; ++t)
    msg.log_norm += detail::forward_step(p, y.at(t), msg.v, t);
  return msg;
}

// Adjoint product over [from, to): q = A^T P(y_from) ... A^T P(y_{to-1}) 1,
// i.e. q_i = p(y_{from:to-1} | previous state = i), max-normalized. An empty
// range returns the all-ones vector.
inline Message backward_likelihood(const HmmParams& p, const ObservationSequence& y,
                                   long from, long to) {
  if (from < 0 || to < from || to > y.T())
    throw ValidationError("backward_likelihood: index range out of bounds");
  Message msg{Vector::Ones(p.K), 0.0};
  for (long t = to - 1; t >= from; --t)
    msg.log_norm += detail::backward_step(p, y.at(t), msg.v, t);
  return msg;
}

// ln p(y | theta). The forward vector is renormalized to sum 1 at every step,
// so the accumulated normalizer at t = T is exactly the log marginal.
inline double log_marginal_likelihood(const HmmParams& p, const ObservationSequence& y) {
  validate(p);
  return forward_predictive(p, y, 0, y.T(), p.pi0).log_norm;
}

// Normalized forward messages at every prefix: filt[t] is the state
// distribution after consuming y[0..t), cum_log_norm[t] = ln p(y[0..t)).
struct ForwardSweep {
  std::vector<Vector> filt;
  std::vector<double> cum_log_norm;
};

inline ForwardSweep forward_sweep(const HmmParams& p, const ObservationSequence& y) {
  ForwardSweep fs;
  const long T = y.T();
  fs.filt.resize(T + 1);
  fs.cum_log_norm.resize(T + 1);
  fs.filt[0] = p.pi0;
  fs.cum_log_norm[0] = 0.0;
  Vector v = p.pi0;
  double ln = 0.0;
  for (long t = 0; t < T; ++t) {
    ln += detail::forward_step(p, y.at(t), v, t);
    fs.filt[t + 1] = v;
    fs.cum_log_norm[t + 1] = ln;
  }
  return fs;
}

// Max-normalized right messages at every suffix: like[t] covers y[t..T).
struct BackwardSweep {
  std::vector<Vector> like;
  std::vector<double> cum_log_norm;
};

inline BackwardSweep backward_sweep(const HmmParams& p, const ObservationSequence& y) {
  BackwardSweep bs;
  const long T = y.T();
  bs.like.resize(T + 1);
  bs.cum_log_norm.resize(T + 1);
  bs.like[T] = Vector::Ones(p.K);
  bs.cum_log_norm[T] = 0.0;
  Vector v = Vector::Ones(p.K);
  double ln = 0.0;
  for (long t = T - 1; t >= 0; --t) {
    ln += detail::backward_step(p, y.at(t), v, t);
    bs.like[t] = v;
    bs.cum_log_norm[t] = ln;
  }
  return bs;
}

struct SimulationResult {
  ObservationSequence observations;
  std::vector<int> latent_states;  // x_1..x_T, the emitting states
};

inline SimulationResult simulate(const HmmParams& p, long T, std::uint64_t rng_seed) {
  validate(p);
  if (T < 1) throw ValidationError("simulate: T must be >= 1");
  Rng rng = make_rng(rng_seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  auto draw = [&](const Vector& probs) {
    double u = unif(rng);
    for (int i = 0; i < probs.size() - 1; ++i) {
      u -= probs(i);
      if (u < 0.0) return i;
    }
    return static_cast<int>(probs.size()) - 1;
  };

  SimulationResult out;
  out.latent_states.resize(T);
  out.observations.data.resize(p.dim(), T);
  int x = draw(p.pi0);
  for (long t = 0; t < T; ++t) {
    x = draw(p.A.col(x));
    out.latent_states[t] = x;
    out.observations.data.col(t) = sample(p.emissions[x], rng);
  }
  return out;
}

// Relabels states by perm (new index i takes old state perm[i]). Marginal
// likelihood is invariant under this map.
inline HmmParams permute_states(const HmmParams& p, const std::vector<int>& perm) {
  HmmParams out;
  out.K = p.K;
  out.A.resize(p.K, p.K);
  out.pi0.resize(p.K);
  out.emissions.resize(p.K);
  for (int i = 0; i < p.K; ++i) {
    out.pi0(i) = p.pi0(perm[i]);
    out.emissions[i] = p.emissions[perm[i]];
    for (int j = 0; j < p.K; ++j) out.A(i, j) = p.A(perm[i], perm[j]);
  }
  return out;
}

}  // namespace sghmm
