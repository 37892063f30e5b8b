#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "sghmm/common.hpp"
#include "sghmm/hmm.hpp"
#include "sghmm/sampler.hpp"

// Metrics and experiment logic: k-step-ahead predictive likelihood,
// transition-matrix error (optionally minimized over state relabelings),
// held-out model selection scores, the i.i.d. mixture baseline, and the
// synthetic benchmark datasets with their constants embedded verbatim.

namespace sghmm {

// ln p(y_{t+1:t+k} | y_{1:t}, theta): propagate the exact filter to t, then
// accumulate the normalizers of the next k steps. k = 0 gives 0.
inline double k_step_predictive(const HmmParams& p, const ObservationSequence& y, long t,
                                long k) {
  if (t < 0 || k < 0 || t + k > y.T())
    throw ValidationError("k_step_predictive: window [t+1, t+k] out of range");
  Message filt = forward_predictive(p, y, 0, t, p.pi0);
  return forward_predictive(p, y, t, t + k, filt.v).log_norm;
}

struct PredictiveReport {
  long horizon = 10;
  std::vector<double> values;  // per-evaluation-point log predictive
  double mean = 0.0;
  double se = 0.0;
  double model_wall_ms = 0.0;  // wall clock spent producing the evaluated model
};

// Shares one forward sweep across all evaluation points.
inline PredictiveReport predictive_report(const HmmParams& p, const ObservationSequence& y,
                                          const std::vector<long>& points, long horizon) {
  if (horizon < 1) throw ValidationError("predictive_report: horizon must be >= 1");
  PredictiveReport rep;
  rep.horizon = horizon;
  ForwardSweep fs = forward_sweep(p, y);
  rep.values.reserve(points.size());
  for (long t : points) {
    if (t < 0 || t + horizon > y.T())
      throw ValidationError("predictive_report: evaluation point out of range");
    rep.values.push_back(forward_predictive(p, y, t, t + horizon, fs.filt[t]).log_norm);
  }
  double sum = std::accumulate(rep.values.begin(), rep.values.end(), 0.0);
  rep.mean = sum / static_cast<double>(rep.values.size());
  double var = 0.0;
  for (double v : rep.values) var += (v - rep.mean) * (v - rep.mean);
  if (rep.values.size() > 1) {
    var /= static_cast<double>(rep.values.size() - 1);
    rep.se = std::sqrt(var / static_cast<double>(rep.values.size()));
  }
  return rep;
}

// n evenly spaced evaluation points in [first, T - horizon].
inline std::vector<long> evaluation_points(long first, long T, long horizon, long n = 100) {
  long last = T - horizon;
  if (last < first) throw ValidationError("evaluation_points: tail too short for the horizon");
  std::vector<long> pts;
  pts.reserve(n);
  for (long i = 0; i < n; ++i)
    pts.push_back(first + (last - first) * i / std::max<long>(n - 1, 1));
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

struct TransitionError {
  double error = 0.0;
  std::string norm = "frobenius";
};

// Frobenius error, optionally minimized over simultaneous row/column state
// relabelings (exhaustive; K is small in every experiment here).
inline TransitionError transition_error(const Matrix& A_est, const Matrix& A_ref,
                                        bool align_labels = false) {
  if (A_est.rows() != A_ref.rows() || A_est.cols() != A_ref.cols())
    throw ValidationError("transition_error: shape mismatch");
  TransitionError out;
  if (!align_labels) {
    out.error = (A_est - A_ref).norm();
    return out;
  }
  out.norm = "frobenius_aligned";
  const int K = static_cast<int>(A_est.rows());
  if (K > 9) throw ValidationError("transition_error: exhaustive alignment limited to K <= 9");
  std::vector<int> perm(K);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int i = 0; i < K; ++i)
      for (int j = 0; j < K; ++j) {
        double d = A_est(perm[i], perm[j]) - A_ref(i, j);
        s += d * d;
      }
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  out.error = std::sqrt(best);
  return out;
}

// Mixture-model fit that ignores temporal structure: every transition column
// is tied to one weight vector, everything else runs through the same SG-RLD
// machinery.
inline Trace iid_baseline_fit(const ObservationSequence& y, int K, SamplerConfig cfg) {
  cfg.K = K;
  cfg.iid_mode = true;
  cfg.buffer_mode = SamplerConfig::BufferMode::None;
  return run_sg_mcmc(y, cfg);
}

// ln( mean_s p(y_test | theta_s) ), computed in log space over the trace
// samples provided (burn-in discarding is the caller's choice).
inline double model_selection_score(const ObservationSequence& y_test, const Trace& trace) {
  if (trace.samples.empty()) throw ValidationError("model_selection_score: empty trace");
  std::vector<double> lls;
  lls.reserve(trace.samples.size());
  for (const auto& s : trace.samples) {
    HmmParams p;
    p.K = static_cast<int>(s.A.rows());
    p.A = s.A;
    p.emissions = s.emissions;
    p.pi0 = Vector::Constant(p.K, 1.0 / p.K);
    lls.push_back(log_marginal_likelihood(p, y_test));
  }
  return log_sum_exp(lls) - std::log(static_cast<double>(lls.size()));
}

enum class DatasetKind { DD, RC, LOGNORMAL };

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "dd") return DatasetKind::DD;
  if (s == "rc") return DatasetKind::RC;
  if (s == "lognormal") return DatasetKind::LOGNORMAL;
  throw ValidationError("unknown dataset kind: " + s + " (expected dd | rc | lognormal)");
}

namespace detail {

// Benchmark constants as printed. The DD matrix is row-convention
// (row i lists the transitions out of state i) and is transposed into the
// column-stochastic layout; the RC matrix is already column-stochastic.
inline const double kA_DD[8][8] = {
    {.999, .001, 0, 0, 0, 0, 0, 0},
    {0, .999, .001, 0, 0, 0, 0, 0},
    {0, 0, .999, .001, 0, 0, 0, 0},
    {0, 0, 0, .999, .001, 0, 0, 0},
    {0, 0, 0, 0, .999, .001, 0, 0},
    {0, 0, 0, 0, 0, .999, .001, 0},
    {0, 0, 0, 0, 0, 0, .999, .001},
    {.001, 0, 0, 0, 0, 0, 0, .999},
};

inline const double kMu_DD[8][2] = {{0, 20},  {20, 0},  {-30, -30}, {30, -30},
                                    {-20, 0}, {0, -20}, {30, 30},   {-30, 30}};

inline const double kA_RC[8][8] = {
    {.01, 0, .85, 0, 0, 0, 0, 1},
    {.99, .01, 0, 0, 0, 0, 0, 0},
    {0, .99, 0, 0, 0, 0, 0, 0},
    {0, 0, .15, 0, 0, 0, 0, 0},
    {0, 0, 0, 1, .01, 0, .85, 0},
    {0, 0, 0, 0, .99, .01, 0, 0},
    {0, 0, 0, 0, 0, .99, 0, 0},
    {0, 0, 0, 0, 0, 0, .15, 0},
};

inline const double kMu_RC[8][2] = {{-50, 0},   {30, -30}, {30, 30}, {-100, -10},
                                    {40, -40}, {-65, 0},  {40, 40}, {100, 10}};

inline const double kA_LOGNORMAL[2][2] = {{.1, .9}, {.9, .1}};
inline const double kMu_LOGNORMAL[2] = {0.0, 4.0};
inline const double kSigma_LOGNORMAL[2] = {2.0, 2.0};

}  // namespace detail

// Checksum over the embedded constants, frozen in tests to guard against
// accidental edits.
inline std::uint64_t dataset_constants_checksum(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::DD: {
      std::uint64_t h = fnv1a(detail::kA_DD, sizeof(detail::kA_DD));
      return fnv1a(detail::kMu_DD, sizeof(detail::kMu_DD), h);
    }
    case DatasetKind::RC: {
      std::uint64_t h = fnv1a(detail::kA_RC, sizeof(detail::kA_RC));
      return fnv1a(detail::kMu_RC, sizeof(detail::kMu_RC), h);
    }
    case DatasetKind::LOGNORMAL: {
      std::uint64_t h = fnv1a(detail::kA_LOGNORMAL, sizeof(detail::kA_LOGNORMAL));
      h = fnv1a(detail::kMu_LOGNORMAL, sizeof(detail::kMu_LOGNORMAL), h);
      return fnv1a(detail::kSigma_LOGNORMAL, sizeof(detail::kSigma_LOGNORMAL), h);
    }
  }
  throw ValidationError("dataset_constants_checksum: bad kind");
}

inline HmmParams dataset_params(DatasetKind kind) {
  HmmParams p;
  switch (kind) {
    case DatasetKind::DD: {
      p.K = 8;
      p.A.resize(8, 8);
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) p.A(i, j) = detail::kA_DD[j][i];
      for (int k = 0; k < 8; ++k) {
        Vector mu(2);
        mu << detail::kMu_DD[k][0], detail::kMu_DD[k][1];
        p.emissions.push_back(GaussianEmission{mu, Matrix::Identity(2, 2)});
      }
      break;
    }
    case DatasetKind::RC: {
      p.K = 8;
      p.A.resize(8, 8);
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) p.A(i, j) = detail::kA_RC[i][j];
      // Columns are renormalized; anything beyond roundoff would mean the
      // constant no longer matches the printed matrix.
      for (int j = 0; j < 8; ++j) {
        double s = p.A.col(j).sum();
        if (std::abs(s - 1.0) > 1e-12)
          throw ValidationError("RC transition constant: column " + std::to_string(j) +
                                " sums to " + std::to_string(s));
        p.A.col(j) /= s;
      }
      for (int k = 0; k < 8; ++k) {
        Vector mu(2);
        mu << detail::kMu_RC[k][0], detail::kMu_RC[k][1];
        p.emissions.push_back(GaussianEmission{mu, 20.0 * Matrix::Identity(2, 2)});
      }
      break;
    }
    case DatasetKind::LOGNORMAL: {
      p.K = 2;
      p.A.resize(2, 2);
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) p.A(i, j) = detail::kA_LOGNORMAL[i][j];
      for (int k = 0; k < 2; ++k)
        p.emissions.push_back(
            LogNormalEmission{detail::kMu_LOGNORMAL[k], detail::kSigma_LOGNORMAL[k]});
      break;
    }
  }
  p.pi0 = Vector::Constant(p.K, 1.0 / p.K);
  validate(p);
  return p;
}

struct Dataset {
  ObservationSequence observations;
  HmmParams truth;
  std::vector<int> latent_states;
};

inline Dataset make_dataset(DatasetKind kind, long T, std::uint64_t seed) {
  Dataset ds;
  ds.truth = dataset_params(kind);
  SimulationResult sim = simulate(ds.truth, T, seed);
  ds.observations = std::move(sim.observations);
  ds.latent_states = std::move(sim.latent_states);
  return ds;
}

}  // namespace sghmm
