#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "sghmm/common.hpp"
#include "sghmm/gradient.hpp"
#include "sghmm/hmm.hpp"

// Estimates how fast the normalized random map v -> P(y) A v forgets its
// initial condition (Lyapunov exponent), turns that into a buffer length
// B = ceil(ln(delta/delta0) / L), estimates the chain's mixing time
// nu = 1 / (1 - |lambda_2|), and draws minibatches of windows whose buffered
// extents stay at least nu indices apart.

namespace sghmm {

struct LyapunovEstimate {
  double exponent = 0.0;  // expected < 0 for contracting systems
  long n_samples = 0;
  double std_error = 0.0;
};

struct BufferPolicy {
  long B = 0;
  double delta = 1e-3;
  double delta0 = 2.0;
  bool warning = false;  // set when the estimate was non-contracting or B hit B_max
};

struct GapPolicy {
  double nu = 1.0;       // mixing-time estimate, >= 1
  long min_gap = 0;      // minimum distance between window centers: 2(L+B) + ceil(nu)
  double lambda2 = 0.0;  // second largest eigenvalue modulus
  bool capped = false;   // nu hit the T/10 cap
};

// Contraction rates below this ratio per step are indistinguishable from
// roundoff once the separation is renormalized; they are floored here.
constexpr double kLyapunovResolution = 1e-13;

namespace detail {

// Forward map for the Lyapunov iteration. Observations are drawn from the
// whole sequence, so a concentrated vector can meet an observation whose
// likelihood underflows against every reachable state; the density ratios and
// the result are floored to keep the map total. The floor only matters for
// contraction beyond kLyapunovResolution.
inline void lyapunov_step(const HmmParams& p, const Vector& yt, Vector& v) {
  Vector w = p.A * v;
  Vector ld = emission_log_densities(p, yt);
  double m = ld.maxCoeff();
  Vector u = (ld.array() - m).cwiseMax(-690.0).exp() * w.array();
  u.array() += 1e-290;
  v = u / u.sum();
}

}  // namespace detail

// Two-trajectory estimate of the top Lyapunov exponent of the random forward
// map: propagate a vector and a perturbed copy (separation eta), renormalize
// the separation each step, and average the log growth. Observations are
// drawn uniformly from the data (mu_y); the invariant measure is tracked by
// the propagated trajectory after burn-in.
inline LyapunovEstimate estimate_lyapunov(const HmmParams& p, const ObservationSequence& y,
                                          long n_iter, std::uint64_t rng_seed,
                                          long burn_in = -1) {
  validate(p);
  if (p.K == 1) return {kNegInf, std::max<long>(n_iter, 1), 0.0};
  if (burn_in < 0) burn_in = n_iter / 10;
  if (n_iter <= burn_in)
    throw ValidationError("estimate_lyapunov: n_iter must exceed the burn-in");

  const double eta = 1e-8;
  Rng rng = make_rng(rng_seed, 17);
  std::uniform_int_distribution<long> pick(0, y.T() - 1);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);

  auto random_tangent = [&]() {
    Vector u(p.K);
    for (int i = 0; i < p.K; ++i) u(i) = unif(rng);
    u.array() -= u.mean();  // keep perturbations inside the simplex plane
    double n2 = u.norm();
    return n2 > 0 ? Vector(u / n2) : Vector(Vector::Unit(p.K, 0) - Vector::Constant(p.K, 1.0 / p.K));
  };

  Vector v = Vector::Constant(p.K, 1.0 / p.K);
  Vector w = v + eta * random_tangent();
  w = w.cwiseMax(0.0);
  w /= w.sum();

  std::vector<double> logs;
  logs.reserve(n_iter - burn_in);
  for (long it = 0; it < n_iter; ++it) {
    Vector yt = y.at(pick(rng));
    detail::lyapunov_step(p, yt, v);
    detail::lyapunov_step(p, yt, w);
    double d = (w - v).norm();
    double ratio = std::max(d / eta, kLyapunovResolution);
    if (it >= burn_in) logs.push_back(std::log(ratio));
    if (d > 0.0) {
      w = v + (eta / d) * (w - v);
    } else {
      w = v + eta * random_tangent();
      w = w.cwiseMax(0.0);
      w /= w.sum();
    }
  }

  LyapunovEstimate est;
  est.n_samples = static_cast<long>(logs.size());
  double mean = 0.0;
  for (double x : logs) mean += x;
  mean /= static_cast<double>(logs.size());
  est.exponent = mean;

  // Standard error from batch means to absorb serial correlation.
  const int n_batches = std::min<long>(20, est.n_samples);
  if (n_batches >= 2) {
    std::vector<double> bm(n_batches, 0.0);
    long per = est.n_samples / n_batches;
    for (int b = 0; b < n_batches; ++b) {
      for (long i = 0; i < per; ++i) bm[b] += logs[b * per + i];
      bm[b] /= static_cast<double>(per);
    }
    double var = 0.0;
    for (double x : bm) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n_batches - 1);
    est.std_error = std::sqrt(var / n_batches);
  }
  return est;
}

inline BufferPolicy buffer_length(const LyapunovEstimate& est, double delta = 1e-3,
                                  double delta0 = 2.0, long B_max = 50) {
  if (!(delta > 0.0) || delta > delta0)
    throw ValidationError("buffer_length: need 0 < delta <= delta0");
  BufferPolicy pol;
  pol.delta = delta;
  pol.delta0 = delta0;
  if (est.exponent >= 0.0) {
    pol.B = B_max;
    pol.warning = true;
    return pol;
  }
  double raw = std::ceil(std::log(delta / delta0) / est.exponent);  // -inf exponent -> 0
  pol.B = static_cast<long>(raw);
  if (pol.B < 1) pol.B = 1;
  if (pol.B > B_max) {
    pol.B = B_max;
    pol.warning = true;
  }
  return pol;
}

inline double second_eigenvalue_modulus(const Matrix& A) {
  if (A.rows() == 1) return 0.0;
  Eigen::EigenSolver<Matrix> es(A, /*computeEigenvectors=*/false);
  std::vector<double> mods(A.rows());
  for (int i = 0; i < A.rows(); ++i) mods[i] = std::abs(es.eigenvalues()(i));
  std::sort(mods.begin(), mods.end(), std::greater<>());
  return mods[1];
}

// nu = 1 / (1 - |lambda_2|); +inf for a non-mixing chain.
inline double mixing_time(const Matrix& A) {
  double l2 = second_eigenvalue_modulus(A);
  if (l2 >= 1.0 - 1e-15) return std::numeric_limits<double>::infinity();
  return 1.0 / (1.0 - l2);
}

inline GapPolicy gap_policy(const Matrix& A, long L, long B, long T) {
  GapPolicy g;
  g.lambda2 = second_eigenvalue_modulus(A);
  g.nu = mixing_time(A);
  double cap = std::max(1.0, static_cast<double>(T) / 10.0);
  if (!(g.nu <= cap)) {
    g.nu = cap;
    g.capped = true;
  }
  if (g.nu < 1.0) g.nu = 1.0;
  g.min_gap = 2 * (L + B) + static_cast<long>(std::ceil(g.nu));
  return g;
}

namespace detail {

// Appendix-C bookkeeping: the overlap correction for the n-th drawn center.
// Terms measuring proximity to the sequence ends and to previously drawn
// centers are summed when they fall below 2*nu + 3L + 3B. Positions enter
// 1-based. This rule is implemented as specified, not derived.
inline long overlap_correction(long tau, const std::vector<long>& prev, long T, long L, long B,
                               long nu) {
  const long threshold = 2 * nu + 3 * L + 3 * B;
  std::vector<long> terms;
  terms.push_back(tau + 1);      // distance to the start
  terms.push_back(T - tau - 1);  // distance to the end
  long best_left = -1, best_right = -1;
  for (long q : prev) {
    if (q < tau) {
      long d = tau - q - L - B;
      if (best_left < 0 || d < best_left) best_left = d;
    } else {
      long d = q - tau - L - B;
      if (best_right < 0 || d < best_right) best_right = d;
    }
  }
  if (best_left >= 0) terms.push_back(best_left);
  if (best_right >= 0) terms.push_back(best_right);

  long min_term = *std::min_element(terms.begin(), terms.end());
  if (min_term >= threshold) return 0;
  long sum = 0;
  for (long v : terms)
    if (v < threshold) sum += v;
  return sum;
}

}  // namespace detail

// Draws `count` windows sequentially, each center uniform over the positions
// that keep the buffered extent in range and all centers >= 2(L+B)+nu apart.
// log_prob accumulates the Appendix-C product prod_n (2L+1) / |S_n|.
inline Minibatch sample_minibatch(long T, long L, long B, long nu, long count,
                                  std::uint64_t rng_seed) {
  if (L < 0 || B < 0 || nu < 1 || count < 1)
    throw ValidationError("sample_minibatch: need L, B >= 0, nu >= 1, count >= 1");
  const long lo = L + B;
  const long hi = T - 1 - L - B;
  const long gap = 2 * (L + B) + nu;
  if (hi < lo)
    throw CapacityError("sample_minibatch: no window with buffers fits in T=" + std::to_string(T),
                        0);
  const long max_feasible = (hi - lo) / gap + 1;
  if (count > max_feasible)
    throw CapacityError("sample_minibatch: cannot host " + std::to_string(count) +
                            " windows; max feasible count is " + std::to_string(max_feasible),
                        max_feasible);

  Rng rng = make_rng(rng_seed, 23);
  std::uniform_int_distribution<long> anywhere(lo, hi);
  const long Lp = 2 * L + 1;

  for (int attempt = 0; attempt < 20; ++attempt) {
    std::vector<long> centers;
    double log_prob = 0.0;
    double avail = static_cast<double>(T);  // |S_0| = T
    bool ok = true;

    for (long n = 0; n < count; ++n) {
      if (avail < static_cast<double>(Lp)) {
        ok = false;
        break;
      }
      log_prob += std::log(static_cast<double>(Lp) / avail);

      auto legal = [&](long tau) {
        for (long q : centers)
          if (std::abs(tau - q) < gap) return false;
        return true;
      };
      long tau = -1;
      for (int tries = 0; tries < 64; ++tries) {
        long cand = anywhere(rng);
        if (legal(cand)) {
          tau = cand;
          break;
        }
      }
      if (tau < 0) {
        std::vector<long> pool;
        for (long cand = lo; cand <= hi; ++cand)
          if (legal(cand)) pool.push_back(cand);
        if (pool.empty()) {
          ok = false;
          break;
        }
        std::uniform_int_distribution<std::size_t> pickp(0, pool.size() - 1);
        tau = pool[pickp(rng)];
      }

      long l_overlap = detail::overlap_correction(tau, centers, T, L, B, nu);
      centers.push_back(tau);
      avail -= static_cast<double>(gap + l_overlap);  // |S_n| recursion
    }

    if (ok) {
      Minibatch batch;
      batch.log_prob = log_prob;
      for (long tau : centers) batch.windows.push_back(SubsequenceWindow{tau, L, B});
      return batch;
    }
  }
  throw CapacityError("sample_minibatch: batch kept stranding capacity; reduce count",
                      std::max<long>(1, max_feasible / 2));
}

}  // namespace sghmm
