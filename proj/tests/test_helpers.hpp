#pragma once

// Shared random-instance generators for the test suites. Transition entries
// are bounded away from zero so finite differences across the |Ahat| kink
// never straddle it.

#include "sghmm/eval.hpp"
#include "sghmm/hmm.hpp"

namespace testgen {

using sghmm::HmmParams;
using sghmm::Matrix;
using sghmm::ObservationSequence;
using sghmm::Rng;
using sghmm::Vector;

inline Matrix random_stochastic(int K, Rng& rng, double min_entry = 0.05) {
  std::uniform_real_distribution<double> u(min_entry, 1.0);
  Matrix A(K, K);
  for (int j = 0; j < K; ++j) {
    for (int i = 0; i < K; ++i) A(i, j) = u(rng);
    A.col(j) /= A.col(j).sum();
  }
  return A;
}

inline HmmParams random_gaussian_params(int K, int d, Rng& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::uniform_real_distribution<double> s(0.4, 1.5);
  HmmParams p;
  p.K = K;
  p.A = random_stochastic(K, rng);
  p.pi0 = random_stochastic(K, rng).col(0);
  for (int k = 0; k < K; ++k) {
    Vector mu(d);
    for (int i = 0; i < d; ++i) mu(i) = u(rng);
    Matrix R(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) R(i, j) = 0.4 * u(rng);
    Matrix sigma = R * R.transpose() + s(rng) * Matrix::Identity(d, d);
    sigma = 0.5 * (sigma + sigma.transpose());
    p.emissions.push_back(sghmm::GaussianEmission{mu, sigma});
  }
  validate(p);
  return p;
}

inline HmmParams random_lognormal_params(int K, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.5);
  std::uniform_real_distribution<double> s(0.5, 2.0);
  HmmParams p;
  p.K = K;
  p.A = random_stochastic(K, rng);
  p.pi0 = random_stochastic(K, rng).col(0);
  for (int k = 0; k < K; ++k) p.emissions.push_back(sghmm::LogNormalEmission{u(rng), s(rng)});
  validate(p);
  return p;
}

inline ObservationSequence simulate_obs(const HmmParams& p, long T, std::uint64_t seed) {
  return sghmm::simulate(p, T, seed).observations;
}

}  // namespace testgen
