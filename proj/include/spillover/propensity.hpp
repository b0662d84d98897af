#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spillover/data.hpp"
#include "spillover/errors.hpp"
#include "spillover/feature_map.hpp"

namespace spillover {

/// Gauss-Hermite rule for weight exp(-x^2), nodes/weights via Golub-Welsch on
/// the Jacobi matrix. Weights kept in logs.
struct GaussHermiteRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd log_weights;
};

inline const GaussHermiteRule& gauss_hermite(int n) {
  static std::map<int, GaussHermiteRule> cache;
  static std::mutex mutex;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  if (n < 1) throw ConfigError("quadrature node count must be >= 1");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double off = std::sqrt(static_cast<double>(i) / 2.0);
    jacobi(i, i - 1) = off;
    jacobi(i - 1, i) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jacobi);
  GaussHermiteRule rule;
  rule.nodes = es.eigenvalues();
  rule.log_weights.resize(n);
  const double log_sqrt_pi = 0.5 * std::log(M_PI);
  for (int q = 0; q < n; ++q) {
    const double v0 = es.eigenvectors()(0, q);
    rule.log_weights[q] = log_sqrt_pi + 2.0 * std::log(std::fabs(v0));
  }
  return cache.emplace(n, std::move(rule)).first->second;
}

namespace detail {

inline double softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

/// log Bernoulli(a | expit(eta)); stable for large |eta|.
inline double bernoulli_log(double eta, int a) {
  return -softplus(a ? -eta : eta);
}

inline double expit(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log integral of prod_j Bern(a_j | expit(eta_j + b)) * N(b; 0, sigma^2) db,
/// by Gauss-Hermite quadrature recentred at the integrand mode with curvature
/// rescaling. sigma == 0 collapses to the plain product at b = 0.
inline double group_log_prob_eta(const Eigen::VectorXd& eta,
                                 std::span<const std::int8_t> a, double sigma,
                                 int nodes) {
  const Eigen::Index n = eta.size();
  if (sigma < 1e-10) {
    double ll = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      ll += bernoulli_log(eta[j], a[static_cast<std::size_t>(j)]);
    }
    return ll;
  }
  const double inv_var = 1.0 / (sigma * sigma);
  auto joint = [&](double b) {
    double v = -0.5 * b * b * inv_var;
    for (Eigen::Index j = 0; j < n; ++j) {
      v += bernoulli_log(eta[j] + b, a[static_cast<std::size_t>(j)]);
    }
    return v;
  };
  // Newton for the mode of the (concave) joint log density.
  double b = 0.0;
  for (int it = 0; it < 100; ++it) {
    double g1 = -b * inv_var, g2 = -inv_var;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double p = expit(eta[j] + b);
      g1 += static_cast<double>(a[static_cast<std::size_t>(j)]) - p;
      g2 -= p * (1.0 - p);
    }
    double step = -g1 / g2;
    if (step > 10.0) step = 10.0;
    if (step < -10.0) step = -10.0;
    b += step;
    if (std::fabs(step) < 1e-12 * (1.0 + std::fabs(b))) break;
  }
  double curv = inv_var;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double p = expit(eta[j] + b);
    curv += p * (1.0 - p);
  }
  const double scale = 1.0 / std::sqrt(curv);

  const GaussHermiteRule& rule = gauss_hermite(nodes);
  const double sqrt2s = std::sqrt(2.0) * scale;
  double lse_max = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd terms(rule.nodes.size());
  for (Eigen::Index q = 0; q < rule.nodes.size(); ++q) {
    const double x = rule.nodes[q];
    terms[q] = rule.log_weights[q] + x * x + joint(b + sqrt2s * x);
    lse_max = std::max(lse_max, terms[q]);
  }
  double sum = 0.0;
  for (Eigen::Index q = 0; q < terms.size(); ++q) {
    sum += std::exp(terms[q] - lse_max);
  }
  // 1/(sigma*sqrt(2*pi)) normal density constant and the du = sqrt(2)*s*dx
  // change of variables.
  return lse_max + std::log(sum) + std::log(sqrt2s) - std::log(sigma) -
         0.5 * std::log(2.0 * M_PI);
}

}  // namespace detail

struct PropensityFitInfo {
  bool converged = false;
  double loglik = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  bool sigma_boundary = false;  // random-effect scale driven to ~0
  std::string message;
};

struct PropensityOptions {
  bool fix_sigma_zero = false;  // plain logistic likelihood, no random effect
  int quad_nodes = 21;
  int max_iterations = 500;
  double gradient_tol = 1e-6;
  double rel_loglik_tol = 1e-10;
  double initial_sigma = 0.5;
};

/// Mixed-effects logistic propensity model: per-individual linear predictor
/// from `features` plus a group-level normal random intercept of scale
/// exp(log_sigma_b), integrated out of every group probability.
struct PropensityModel {
  FeatureMap features;
  Eigen::VectorXd gamma;  // fixed-effect coefficients, features.dimension()
  double log_sigma_b = -std::numeric_limits<double>::infinity();
  bool random_effect = true;
  int quad_nodes = 21;
  std::optional<double> f_floor;  // optional weight-stabilization clamp on f
  PropensityFitInfo fit_info;

  double sigma_b() const {
    return random_effect ? std::exp(log_sigma_b) : 0.0;
  }
  Eigen::Index parameter_count() const {
    return gamma.size() + (random_effect ? 1 : 0);
  }
  std::vector<std::string> parameter_names() const {
    auto names = features.term_names();
    if (random_effect) names.push_back("log_sigma_b");
    return names;
  }
};

struct GroupLikelihood {
  double log_prob;
  int quadrature_nodes_used;
};

inline void require_converged(const PropensityModel& m) {
  if (!m.fit_info.converged) {
    throw ContractError("propensity model has not converged; refusing to use it");
  }
}

/// Group treatment-vector log probability at explicit parameter values, for
/// an arbitrary treatment vector.
inline double group_log_prob_params(const FeatureMap& features,
                                    const Eigen::VectorXd& gamma,
                                    double log_sigma, bool random_effect,
                                    int quad_nodes, const GroupRecord& g,
                                    std::span<const std::int8_t> treat) {
  const Eigen::Index n = g.size();
  Eigen::VectorXd eta(n);
  Eigen::VectorXd row(features.dimension());
  for (Eigen::Index j = 0; j < n; ++j) {
    features.row(g, j, treat, row);
    eta[j] = row.dot(gamma);
  }
  const double sigma = random_effect ? std::exp(log_sigma) : 0.0;
  return detail::group_log_prob_eta(eta, treat, sigma, quad_nodes);
}

inline double group_log_prob_at(const PropensityModel& m, const GroupRecord& g,
                                std::span<const std::int8_t> treat) {
  return group_log_prob_params(m.features, m.gamma, m.log_sigma_b,
                               m.random_effect, m.quad_nodes, g, treat);
}

inline GroupLikelihood group_prob(const PropensityModel& m,
                                  const GroupRecord& g) {
  require_converged(m);
  return {group_log_prob_at(m, g, g.treatment_span()), m.quad_nodes};
}

/// Same integral with individual j's treatment overridden to a, all other
/// treatments observed.
inline GroupLikelihood group_prob_override(const PropensityModel& m,
                                           const GroupRecord& g,
                                           Eigen::Index j, int a) {
  require_converged(m);
  if (j < 0 || j >= g.size()) {
    throw std::out_of_range("group_prob_override: index out of range");
  }
  std::vector<std::int8_t> t(g.treatments);
  t[static_cast<std::size_t>(j)] = static_cast<std::int8_t>(a);
  return {group_log_prob_at(m, g, std::span<const std::int8_t>(t)),
          m.quad_nodes};
}

inline double study_log_lik_params(const FeatureMap& features,
                                   const Eigen::VectorXd& gamma,
                                   double log_sigma, bool random_effect,
                                   int quad_nodes, const Study& study) {
  double ll = 0.0;
  for (std::size_t idx : sorted_order(study)) {
    const GroupRecord& g = study.groups[idx];
    ll += group_log_prob_params(features, gamma, log_sigma, random_effect,
                                quad_nodes, g, g.treatment_span());
  }
  return ll;
}

/// Per-group score contribution d log f(A_i|X_i; theta) / d theta at explicit
/// parameters, theta = (gamma, log_sigma_b), by central finite differences on
/// the quadrature log likelihood.
inline Eigen::VectorXd group_score_params(const FeatureMap& features,
                                          const Eigen::VectorXd& gamma,
                                          double log_sigma, bool random_effect,
                                          int quad_nodes, const GroupRecord& g,
                                          std::span<const std::int8_t> treat) {
  const Eigen::Index dim = gamma.size() + (random_effect ? 1 : 0);
  Eigen::VectorXd score(dim);
  Eigen::VectorXd gp = gamma;
  for (Eigen::Index c = 0; c < dim; ++c) {
    const bool is_sigma = random_effect && c == gamma.size();
    const double base = is_sigma ? log_sigma : gamma[c];
    const double h = std::max(1e-5, 1e-5 * std::fabs(base));
    double up, down;
    if (is_sigma) {
      up = group_log_prob_params(features, gamma, base + h, true, quad_nodes, g, treat);
      down = group_log_prob_params(features, gamma, base - h, true, quad_nodes, g, treat);
    } else {
      gp[c] = base + h;
      up = group_log_prob_params(features, gp, log_sigma, random_effect,
                                 quad_nodes, g, treat);
      gp[c] = base - h;
      down = group_log_prob_params(features, gp, log_sigma, random_effect,
                                   quad_nodes, g, treat);
      gp[c] = base;
    }
    score[c] = (up - down) / (2.0 * h);
  }
  return score;
}

inline Eigen::VectorXd propensity_score_equations(const PropensityModel& m,
                                                  const GroupRecord& g) {
  require_converged(m);
  return group_score_params(m.features, m.gamma, m.log_sigma_b,
                            m.random_effect, m.quad_nodes, g,
                            g.treatment_span());
}

/// Maximum likelihood fit of (gamma, log sigma_b) by BFGS with finite
/// difference gradients and a backtracking line search. Throws FitError
/// (carrying the objective trace) on non-convergence or separation.
inline PropensityModel fit_propensity(const Study& study,
                                      const FeatureMap& features,
                                      const PropensityOptions& opts = {}) {
  validate_study(study);
  features.require_individual_only();
  const Eigen::Index d = features.dimension();
  const bool re = !opts.fix_sigma_zero;
  const Eigen::Index dim = d + (re ? 1 : 0);

  // Pooled design must have full column rank for the fixed effects to be
  // identifiable.
  {
    Eigen::MatrixXd design(study.total_individuals(), d);
    Eigen::Index r = 0;
    Eigen::VectorXd row(d);
    for (std::size_t idx : sorted_order(study)) {
      const GroupRecord& g = study.groups[idx];
      for (Eigen::Index j = 0; j < g.size(); ++j) {
        features.row(g, j, g.treatment_span(), row);
        design.row(r++) = row;
      }
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    qr.setThreshold(1e-10);
    if (qr.rank() < d) {
      throw FitError("propensity design matrix is rank deficient");
    }
  }

  const double min_log_sigma = std::log(1e-8);
  auto objective = [&](const Eigen::VectorXd& theta) {
    Eigen::VectorXd gamma = theta.head(d);
    double ls = re ? std::max(theta[d], min_log_sigma) : 0.0;
    return -study_log_lik_params(features, gamma, ls, re, opts.quad_nodes, study);
  };
  auto gradient = [&](const Eigen::VectorXd& theta) {
    Eigen::VectorXd grad(dim);
    Eigen::VectorXd t = theta;
    for (Eigen::Index c = 0; c < dim; ++c) {
      const double h = std::max(1e-5, 1e-5 * std::fabs(theta[c]));
      t[c] = theta[c] + h;
      const double up = objective(t);
      t[c] = theta[c] - h;
      const double down = objective(t);
      t[c] = theta[c];
      grad[c] = (up - down) / (2.0 * h);
    }
    return grad;
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(dim);
  if (re) theta[d] = std::log(opts.initial_sigma);

  double f = objective(theta);
  Eigen::VectorXd grad = gradient(theta);
  Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(dim, dim);
  std::vector<double> trace{-f};

  bool converged = false;
  int iter = 0;
  for (; iter < opts.max_iterations; ++iter) {
    if (grad.cwiseAbs().maxCoeff() < opts.gradient_tol) {
      converged = true;
      break;
    }
    Eigen::VectorXd dir = -(hinv * grad);
    double slope = grad.dot(dir);
    if (slope >= 0.0) {  // reset a spoiled curvature approximation
      hinv.setIdentity();
      dir = -grad;
      slope = grad.dot(dir);
    }
    // Armijo backtracking, with an absolute slack so roundoff-level objective
    // noise cannot stall progress near the optimum.
    double step = 1.0;
    const double slack = 1e-11 * (1.0 + std::fabs(f));
    double f_new = f;
    Eigen::VectorXd theta_new = theta;
    bool accepted = false;
    for (int ls = 0; ls < 45; ++ls) {
      theta_new = theta + step * dir;
      if (re && theta_new[d] < min_log_sigma) theta_new[d] = min_log_sigma;
      f_new = objective(theta_new);
      if (f_new <= f + 1e-4 * step * slope + slack) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      break;  // no usable step; convergence decided by the gradient below
    }
    Eigen::VectorXd grad_new = gradient(theta_new);
    Eigen::VectorXd s = theta_new - theta;
    Eigen::VectorXd y = grad_new - grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(dim, dim);
      Eigen::MatrixXd left = eye - rho * s * y.transpose();
      hinv = left * hinv * left.transpose() + rho * s * s.transpose();
    }
    const double rel_change = std::fabs(f - f_new) / (1.0 + std::fabs(f_new));
    theta = theta_new;
    f = f_new;
    grad = grad_new;
    trace.push_back(-f);
    if (grad.cwiseAbs().maxCoeff() < opts.gradient_tol &&
        rel_change < opts.rel_loglik_tol) {
      converged = true;
      ++iter;
      break;
    }
    if (theta.head(d).cwiseAbs().maxCoeff() > 15.0) {
      throw FitError(
          "propensity fit diverged (|coefficient| > 15, likely separation)",
          trace);
    }
  }
  if (!converged && grad.cwiseAbs().maxCoeff() < opts.gradient_tol) {
    converged = true;
  }
  if (!converged) {
    throw FitError("propensity fit did not converge after " +
                       std::to_string(iter) + " iterations (|grad|_max=" +
                       std::to_string(grad.cwiseAbs().maxCoeff()) + ")",
                   trace);
  }

  PropensityModel model;
  model.features = features;
  model.gamma = theta.head(d);
  model.random_effect = re;
  model.log_sigma_b =
      re ? std::max(theta[d], min_log_sigma)
         : -std::numeric_limits<double>::infinity();
  model.quad_nodes = opts.quad_nodes;
  model.fit_info.converged = true;
  model.fit_info.loglik = -f;
  model.fit_info.iterations = iter;
  model.fit_info.sigma_boundary = re && model.sigma_b() < 1e-6;
  return model;
}

/// Inverse observed-information covariance of the fitted parameters, from a
/// central finite-difference Hessian of the study log likelihood.
inline Eigen::MatrixXd propensity_parameter_covariance(
    const PropensityModel& m, const Study& study) {
  require_converged(m);
  const Eigen::Index d = m.gamma.size();
  const Eigen::Index dim = m.parameter_count();
  Eigen::VectorXd theta(dim);
  theta.head(d) = m.gamma;
  if (m.random_effect) theta[d] = m.log_sigma_b;
  auto nll = [&](const Eigen::VectorXd& t) {
    return -study_log_lik_params(m.features, t.head(d),
                                 m.random_effect ? t[d] : 0.0, m.random_effect,
                                 m.quad_nodes, study);
  };
  Eigen::MatrixXd hess(dim, dim);
  const double f0 = nll(theta);
  Eigen::VectorXd h(dim);
  for (Eigen::Index c = 0; c < dim; ++c) {
    h[c] = std::max(1e-4, 1e-4 * std::fabs(theta[c]));
  }
  for (Eigen::Index a = 0; a < dim; ++a) {
    Eigen::VectorXd t = theta;
    t[a] = theta[a] + h[a];
    const double fp = nll(t);
    t[a] = theta[a] - h[a];
    const double fm = nll(t);
    hess(a, a) = (fp + fm - 2.0 * f0) / (h[a] * h[a]);
    for (Eigen::Index b = a + 1; b < dim; ++b) {
      t = theta;
      t[a] += h[a]; t[b] += h[b];
      const double fpp = nll(t);
      t[b] -= 2.0 * h[b];
      const double fpm = nll(t);
      t[a] -= 2.0 * h[a];
      const double fmm = nll(t);
      t[b] += 2.0 * h[b];
      const double fmp = nll(t);
      hess(a, b) = hess(b, a) = (fpp - fpm - fmp + fmm) / (4.0 * h[a] * h[b]);
    }
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(hess);
  if (!lu.isInvertible()) {
    throw FitError("singular observed information matrix");
  }
  return lu.inverse();
}

}  // namespace spillover
