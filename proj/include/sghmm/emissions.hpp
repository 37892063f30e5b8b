#pragma once

#include <cmath>
#include <string>
#include <variant>

#include "sghmm/common.hpp"

// Emission families behind one value-semantic interface (std::variant +
// visitors): log-density, score, Fisher-derived metric, validity, sampling.
// HMM code never branches on the concrete family.

namespace sghmm {

struct GaussianEmission {
  Vector mu;     // d-vector mean
  Matrix sigma;  // d x d covariance, symmetric positive definite
};

struct LogNormalEmission {
  double mu = 0.0;     // location of ln y
  double sigma = 1.0;  // scale of ln y, > 0; density supported on y > 0
};

using Emission = std::variant<GaussianEmission, LogNormalEmission>;

// Score of ln p(y | phi) laid out to match the family's parameter record.
struct GaussianGradient {
  Vector d_mu;
  Matrix d_sigma;
};

struct LogNormalGradient {
  double d_mu = 0.0;
  double d_sigma = 0.0;
};

using EmissionGradient = std::variant<GaussianGradient, LogNormalGradient>;

inline int dim(const Emission& e) {
  return std::visit(
      [](const auto& f) -> int {
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, GaussianEmission>)
          return static_cast<int>(f.mu.size());
        else
          return 1;
      },
      e);
}

inline std::string family_name(const Emission& e) {
  return std::holds_alternative<GaussianEmission>(e) ? "gaussian" : "lognormal";
}

inline void validate(const Emission& e) {
  std::visit(
      [](const auto& f) {
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, GaussianEmission>) {
          if (f.mu.size() == 0) throw ValidationError("gaussian emission: empty mean");
          if (f.sigma.rows() != f.mu.size() || f.sigma.cols() != f.mu.size())
            throw ValidationError("gaussian emission: sigma shape does not match mu");
          if ((f.sigma - f.sigma.transpose()).cwiseAbs().maxCoeff() > 1e-12)
            throw ValidationError("gaussian emission: sigma not symmetric within 1e-12");
          Eigen::SelfAdjointEigenSolver<Matrix> es(f.sigma);
          if (es.eigenvalues().minCoeff() <= 0.0)
            throw ValidationError("gaussian emission: sigma not positive definite");
        } else {
          if (!(f.sigma > 0.0)) throw ValidationError("lognormal emission: sigma must be > 0");
          if (!std::isfinite(f.mu) || !std::isfinite(f.sigma))
            throw ValidationError("lognormal emission: non-finite parameter");
        }
      },
      e);
}

inline bool in_support(const Emission& e, const Vector& y) {
  if (std::holds_alternative<LogNormalEmission>(e)) return y(0) > 0.0;
  return true;
}

// Returns -inf for out-of-support y; callers treat that as an impossible
// observation rather than an error.
inline double log_density(const Emission& e, const Vector& y) {
  return std::visit(
      [&](const auto& f) -> double {
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, GaussianEmission>) {
          const auto d = static_cast<double>(f.mu.size());
          Eigen::LLT<Matrix> llt(f.sigma);
          if (llt.info() != Eigen::Success)
            throw NumericError("gaussian log_density: covariance not positive definite");
          Vector z = y - f.mu;
          Vector w = llt.matrixL().solve(z);
          double log_det = 0.0;
          for (int i = 0; i < f.sigma.rows(); ++i)
            log_det += 2.0 * std::log(llt.matrixL()(i, i));
          return -0.5 * (d * std::log(2.0 * M_PI) + log_det + w.squaredNorm());
        } else {
          double v = y(0);
          if (!(v > 0.0)) return kNegInf;
          double z = (std::log(v) - f.mu) / f.sigma;
          return -std::log(v * f.sigma) - 0.5 * std::log(2.0 * M_PI) - 0.5 * z * z;
        }
      },
      e);
}

inline EmissionGradient grad_log_density(const Emission& e, const Vector& y) {
  return std::visit(
      [&](const auto& f) -> EmissionGradient {
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, GaussianEmission>) {
          Eigen::LLT<Matrix> llt(f.sigma);
          if (llt.info() != Eigen::Success)
            throw NumericError("gaussian grad_log_density: singular covariance");
          Vector z = y - f.mu;
          Vector si_z = llt.solve(z);
          Matrix si = llt.solve(Matrix::Identity(f.sigma.rows(), f.sigma.cols()));
          GaussianGradient g;
          g.d_mu = si_z;
          g.d_sigma = 0.5 * (si_z * si_z.transpose() - si);
          return g;
        } else {
          double v = y(0);
          if (!(v > 0.0)) throw NumericError("lognormal grad_log_density: y out of support");
          double r = std::log(v) - f.mu;
          LogNormalGradient g;
          g.d_mu = r / (f.sigma * f.sigma);
          g.d_sigma = -1.0 / f.sigma + r * r / (f.sigma * f.sigma * f.sigma);
          return g;
        }
      },
      e);
}

inline Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Inverse Fisher information over the family's flattened parameter vector,
// block-diagonal: Gaussian (mu, vec(Sigma)) -> blkdiag(Sigma, Sigma (x) Sigma);
// log-normal (mu, sigma) -> diag(sigma^2, sigma^2/2).
inline Matrix natural_metric(const Emission& e) {
  return std::visit(
      [](const auto& f) -> Matrix {
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, GaussianEmission>) {
          const int d = static_cast<int>(f.mu.size());
          Matrix m = Matrix::Zero(d + d * d, d + d * d);
          m.topLeftCorner(d, d) = f.sigma;
          m.bottomRightCorner(d * d, d * d) = kronecker(f.sigma, f.sigma);
          return m;
        } else {
          Matrix m = Matrix::Zero(2, 2);
          m(0, 0) = f.sigma * f.sigma;
          m(1, 1) = 0.5 * f.sigma * f.sigma;
          return m;
        }
      },
      e);
}

inline Vector sample(const Emission& e, Rng& rng) {
  std::normal_distribution<double> stdnorm(0.0, 1.0);
  return std::visit(
      [&](const auto& f) -> Vector {
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, GaussianEmission>) {
          Eigen::LLT<Matrix> llt(f.sigma);
          Vector z(f.mu.size());
          for (int i = 0; i < z.size(); ++i) z(i) = stdnorm(rng);
          return f.mu + llt.matrixL() * z;
        } else {
          Vector y(1);
          y(0) = std::exp(f.mu + f.sigma * stdnorm(rng));
          return y;
        }
      },
      e);
}

// Accumulator arithmetic used by the gradient estimators.
inline EmissionGradient zero_gradient_like(const Emission& e) {
  return std::visit(
      [](const auto& f) -> EmissionGradient {
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, GaussianEmission>) {
          GaussianGradient g;
          g.d_mu = Vector::Zero(f.mu.size());
          g.d_sigma = Matrix::Zero(f.sigma.rows(), f.sigma.cols());
          return g;
        } else {
          return LogNormalGradient{};
        }
      },
      e);
}

inline void axpy(EmissionGradient& acc, double w, const EmissionGradient& g) {
  if (auto* a = std::get_if<GaussianGradient>(&acc)) {
    const auto& b = std::get<GaussianGradient>(g);
    a->d_mu += w * b.d_mu;
    a->d_sigma += w * b.d_sigma;
  } else {
    auto& a2 = std::get<LogNormalGradient>(acc);
    const auto& b = std::get<LogNormalGradient>(g);
    a2.d_mu += w * b.d_mu;
    a2.d_sigma += w * b.d_sigma;
  }
}

inline void scale(EmissionGradient& g, double w) {
  if (auto* a = std::get_if<GaussianGradient>(&g)) {
    a->d_mu *= w;
    a->d_sigma *= w;
  } else {
    auto& a2 = std::get<LogNormalGradient>(g);
    a2.d_mu *= w;
    a2.d_sigma *= w;
  }
}

inline bool gradient_finite(const EmissionGradient& g) {
  if (const auto* a = std::get_if<GaussianGradient>(&g))
    return a->d_mu.allFinite() && a->d_sigma.allFinite();
  const auto& a2 = std::get<LogNormalGradient>(g);
  return std::isfinite(a2.d_mu) && std::isfinite(a2.d_sigma);
}

}  // namespace sghmm
