#pragma once

#include <Eigen/Dense>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "spillover/data.hpp"
#include "spillover/errors.hpp"
#include "spillover/feature_map.hpp"
#include "spillover/policy.hpp"
#include "spillover/propensity.hpp"

namespace spillover {

enum class OutcomeMode : std::uint8_t {
  OLS,
  WLS,             // inverse-propensity weighted, fitted on one treatment stratum
  PICOV,           // propensity-ratio covariate added, fitted on one stratum
  WLS_MARGINAL,    // whole-sample weighted variant for marginal targets
  PICOV_MARGINAL,  // whole-sample ratio-covariate variant
};

inline const char* outcome_mode_name(OutcomeMode m) {
  switch (m) {
    case OutcomeMode::OLS: return "ols";
    case OutcomeMode::WLS: return "wls";
    case OutcomeMode::PICOV: return "picov";
    case OutcomeMode::WLS_MARGINAL: return "wls-marginal";
    case OutcomeMode::PICOV_MARGINAL: return "picov-marginal";
  }
  return "?";
}

struct OutcomeFitInfo {
  bool converged = true;
  bool collinear_ratio = false;  // PICOV ratio column collinear with the rest
  std::string message;
};

namespace detail {

inline double clamped_log_f(const std::optional<double>& floor, double log_f) {
  if (floor && log_f < std::log(*floor)) return std::log(*floor);
  return log_f;
}

}  // namespace detail

/// Fitted linear outcome model m_ij(a_i, X_i; beta). WLS/PICOV modes are tied
/// to the (stratum, alpha) pair they were fitted for; `features` already has
/// own-treatment terms frozen for stratum fits. PICOV modes carry a copy of
/// the propensity model so counterfactual predictions can recompute the
/// ratio covariate for any candidate treatment vector.
struct OutcomeModel {
  Eigen::VectorXd beta;
  FeatureMap features;
  OutcomeMode mode = OutcomeMode::OLS;
  std::optional<int> stratum;   // a, for WLS/PICOV
  std::optional<double> alpha;  // policy the weights/ratio were built at
  std::shared_ptr<const PropensityModel> propensity;  // PICOV modes only
  OutcomeFitInfo fit_info;

  bool has_ratio_covariate() const {
    return mode == OutcomeMode::PICOV || mode == OutcomeMode::PICOV_MARGINAL;
  }

  /// Linear predictor at an arbitrary treatment vector. Stratum modes pin
  /// position j to the stratum they were fitted on.
  double predict(const GroupRecord& g, std::span<const std::int8_t> treat,
                 Eigen::Index j) const {
    if (static_cast<Eigen::Index>(treat.size()) != g.size()) {
      throw std::invalid_argument("predict: treatment vector length mismatch");
    }
    std::vector<std::int8_t> pinned;
    std::span<const std::int8_t> t = treat;
    if (stratum) {
      pinned.assign(treat.begin(), treat.end());
      pinned[static_cast<std::size_t>(j)] = static_cast<std::int8_t>(*stratum);
      t = std::span<const std::int8_t>(pinned);
    }
    double value = 0.0;
    const auto& terms = features.terms();
    for (Eigen::Index c = 0; c < features.dimension(); ++c) {
      value += beta[c] *
               features.term_value(terms[static_cast<std::size_t>(c)], g, j, t);
    }
    if (has_ratio_covariate()) {
      const PolicyWeight pw =
          stratum ? pi_minus(t, j, Policy(*alpha)) : pi_full(t, Policy(*alpha));
      const double log_f = detail::clamped_log_f(
          propensity->f_floor, group_log_prob_at(*propensity, g, t));
      value += beta[features.dimension()] * std::exp(pw.log_value - log_f);
    }
    return value;
  }
};

namespace detail {

inline void report_rank_deficiency(const Eigen::ColPivHouseholderQR<Eigen::MatrixXd>& qr,
                                   const FeatureMap& map, bool has_ratio) {
  const Eigen::Index rank = qr.rank();
  const Eigen::Index cols = qr.cols();
  auto perm = qr.colsPermutation().indices();
  std::string bad;
  auto names = map.term_names();
  if (has_ratio) names.push_back("propensity-ratio");
  for (Eigen::Index c = rank; c < cols; ++c) {
    if (!bad.empty()) bad += ", ";
    bad += names[static_cast<std::size_t>(perm[c])];
  }
  throw FitError("outcome design matrix is rank deficient; collinear terms: " +
                 bad);
}

struct StratumDesign {
  Eigen::MatrixXd design;   // rows over the selected individuals
  Eigen::VectorXd outcome;
  Eigen::VectorXd weight;   // pi(A_{i(-j)}; alpha) / f(A_i | X_i)
};

/// Rows, outcomes and inverse-propensity weights for all individuals with
/// A_ij == a (or everyone, in marginal mode), regressors evaluated at the
/// observed treatments.
inline StratumDesign build_stratum_design(const Study& study,
                                          const FeatureMap& map,
                                          const PropensityModel& prop,
                                          std::optional<int> a, Policy alpha) {
  std::vector<Eigen::VectorXd> rows;
  std::vector<double> ys, ws;
  Eigen::VectorXd row(map.dimension());
  for (std::size_t idx : sorted_order(study)) {
    const GroupRecord& g = study.groups[idx];
    const double log_f =
        clamped_log_f(prop.f_floor, group_log_prob_at(prop, g, g.treatment_span()));
    for (Eigen::Index j = 0; j < g.size(); ++j) {
      if (a && g.treatments[static_cast<std::size_t>(j)] != *a) continue;
      map.row(g, j, g.treatment_span(), row);
      rows.push_back(row);
      ys.push_back(g.outcomes[j]);
      const PolicyWeight pw = a ? pi_minus(g.treatment_span(), j, alpha)
                                : pi_full(g.treatment_span(), alpha);
      ws.push_back(std::exp(pw.log_value - log_f));
    }
  }
  StratumDesign out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.design.resize(n, map.dimension());
  out.outcome.resize(n);
  out.weight.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    out.design.row(r) = rows[static_cast<std::size_t>(r)];
    out.outcome[r] = ys[static_cast<std::size_t>(r)];
    out.weight[r] = ws[static_cast<std::size_t>(r)];
  }
  return out;
}

}  // namespace detail

/// Ordinary least squares over all individuals at their observed treatments.
inline OutcomeModel fit_ols(const Study& study, const FeatureMap& map) {
  validate_study(study);
  const Eigen::Index d = map.dimension();
  Eigen::MatrixXd design(study.total_individuals(), d);
  Eigen::VectorXd y(study.total_individuals());
  Eigen::Index r = 0;
  Eigen::VectorXd row(d);
  for (std::size_t idx : sorted_order(study)) {
    const GroupRecord& g = study.groups[idx];
    for (Eigen::Index j = 0; j < g.size(); ++j) {
      map.row(g, j, g.treatment_span(), row);
      design.row(r) = row;
      y[r] = g.outcomes[j];
      ++r;
    }
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < d) detail::report_rank_deficiency(qr, map, false);
  OutcomeModel model;
  model.beta = qr.solve(y);
  model.features = map;
  model.mode = OutcomeMode::OLS;
  return model;
}

/// Weighted least squares on the A_ij == a stratum with weights
/// pi(A_{i(-j)}; alpha) / f(A_i | X_i; gamma). Own-treatment terms are frozen
/// at a (they are not identifiable within a stratum).
inline OutcomeModel fit_wls(const Study& study, const FeatureMap& map,
                            const PropensityModel& prop, int a, Policy alpha) {
  require_converged(prop);
  const FeatureMap reduced = map.frozen_own(a);
  auto sd = detail::build_stratum_design(study, reduced, prop, a, alpha);
  if (sd.design.rows() == 0) {
    throw FitError("no individuals with treatment " + std::to_string(a) +
                   "; cannot fit the weighted outcome model");
  }
  Eigen::VectorXd sqrt_w = sd.weight.cwiseSqrt();
  Eigen::MatrixXd wd = sqrt_w.asDiagonal() * sd.design;
  Eigen::VectorXd wy = sqrt_w.asDiagonal() * sd.outcome;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(wd);
  qr.setThreshold(1e-10);
  if (qr.rank() < reduced.dimension()) {
    detail::report_rank_deficiency(qr, reduced, false);
  }
  OutcomeModel model;
  model.beta = qr.solve(wy);
  model.features = reduced;
  model.mode = OutcomeMode::WLS;
  model.stratum = a;
  model.alpha = alpha.alpha();
  return model;
}

/// Unweighted least squares on the A_ij == a stratum with the
/// inverse-propensity ratio appended as an extra regressor. A ratio column
/// collinear with the base design is flagged and resolved by the minimum-norm
/// solution; predictions stay well defined.
inline OutcomeModel fit_picov(const Study& study, const FeatureMap& map,
                              const PropensityModel& prop, int a, Policy alpha) {
  require_converged(prop);
  const FeatureMap reduced = map.frozen_own(a);
  auto sd = detail::build_stratum_design(study, reduced, prop, a, alpha);
  if (sd.design.rows() == 0) {
    throw FitError("no individuals with treatment " + std::to_string(a) +
                   "; cannot fit the augmented outcome model");
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> base_qr(sd.design);
  base_qr.setThreshold(1e-10);
  if (base_qr.rank() < reduced.dimension()) {
    detail::report_rank_deficiency(base_qr, reduced, false);
  }
  Eigen::MatrixXd full(sd.design.rows(), reduced.dimension() + 1);
  full.leftCols(reduced.dimension()) = sd.design;
  full.col(reduced.dimension()) = sd.weight;  // same ratio as the WLS weight
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(full);
  cod.setThreshold(1e-10);
  OutcomeModel model;
  model.beta = cod.solve(sd.outcome);
  model.features = reduced;
  model.mode = OutcomeMode::PICOV;
  model.stratum = a;
  model.alpha = alpha.alpha();
  model.propensity = std::make_shared<PropensityModel>(prop);
  if (cod.rank() < full.cols()) {
    model.fit_info.collinear_ratio = true;
    model.fit_info.message =
        "propensity-ratio covariate is collinear with the base regressors";
  }
  return model;
}

/// Marginal-target analogue of fit_wls: no stratum indicator, weights
/// pi(A_i; alpha) / f(A_i | X_i), own-treatment terms kept as regressors.
inline OutcomeModel fit_wls_marginal(const Study& study, const FeatureMap& map,
                                     const PropensityModel& prop, Policy alpha) {
  require_converged(prop);
  auto sd = detail::build_stratum_design(study, map, prop, std::nullopt, alpha);
  Eigen::VectorXd sqrt_w = sd.weight.cwiseSqrt();
  Eigen::MatrixXd wd = sqrt_w.asDiagonal() * sd.design;
  Eigen::VectorXd wy = sqrt_w.asDiagonal() * sd.outcome;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(wd);
  qr.setThreshold(1e-10);
  if (qr.rank() < map.dimension()) detail::report_rank_deficiency(qr, map, false);
  OutcomeModel model;
  model.beta = qr.solve(wy);
  model.features = map;
  model.mode = OutcomeMode::WLS_MARGINAL;
  model.alpha = alpha.alpha();
  return model;
}

inline OutcomeModel fit_picov_marginal(const Study& study, const FeatureMap& map,
                                       const PropensityModel& prop,
                                       Policy alpha) {
  require_converged(prop);
  auto sd = detail::build_stratum_design(study, map, prop, std::nullopt, alpha);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> base_qr(sd.design);
  base_qr.setThreshold(1e-10);
  if (base_qr.rank() < map.dimension()) {
    detail::report_rank_deficiency(base_qr, map, false);
  }
  Eigen::MatrixXd full(sd.design.rows(), map.dimension() + 1);
  full.leftCols(map.dimension()) = sd.design;
  full.col(map.dimension()) = sd.weight;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(full);
  cod.setThreshold(1e-10);
  OutcomeModel model;
  model.beta = cod.solve(sd.outcome);
  model.features = map;
  model.mode = OutcomeMode::PICOV_MARGINAL;
  model.alpha = alpha.alpha();
  model.propensity = std::make_shared<PropensityModel>(prop);
  if (cod.rank() < full.cols()) model.fit_info.collinear_ratio = true;
  return model;
}

/// Exact policy-averaged prediction for individual j. Plain linear maps use
/// closed-form treatment moments; ratio-covariate models require literal
/// enumeration and respect the enumeration guard.
inline double policy_average_exact(const OutcomeModel& model,
                                   const GroupRecord& g, Eigen::Index j,
                                   std::optional<int> a, Policy alpha,
                                   int enum_limit = 15) {
  if (model.stratum && (!a || *a != *model.stratum)) {
    throw ContractError("outcome model was fitted for stratum a=" +
                        std::to_string(*model.stratum) +
                        "; cannot average at a different own-treatment value");
  }
  if (model.alpha && (!a ? true : false) !=
          (model.mode == OutcomeMode::WLS_MARGINAL ||
           model.mode == OutcomeMode::PICOV_MARGINAL)) {
    throw ContractError("conditional/marginal mismatch with the fitted model");
  }
  if (model.alpha && *model.alpha != alpha.alpha()) {
    throw ContractError("outcome model was fitted at alpha=" +
                        std::to_string(*model.alpha) +
                        "; requested alpha=" + std::to_string(alpha.alpha()));
  }
  if (model.has_ratio_covariate()) {
    return enumerated_policy_average(model, g, j, a, alpha, enum_limit);
  }
  return model.beta.dot(model.features.expected_row(g, j, a, alpha.alpha()));
}

/// Monte Carlo policy-averaged prediction; deterministic given the seed.
inline double policy_average_mc(const OutcomeModel& model, const GroupRecord& g,
                                Eigen::Index j, std::optional<int> a,
                                Policy alpha, int mc_draws, std::uint64_t seed,
                                double* se_out = nullptr) {
  if (model.stratum && (!a || *a != *model.stratum)) {
    throw ContractError("outcome model stratum mismatch in Monte Carlo average");
  }
  if (model.alpha && *model.alpha != alpha.alpha()) {
    throw ContractError("outcome model alpha mismatch in Monte Carlo average");
  }
  return mc_policy_average(model, g, j, a, alpha, mc_draws, seed, se_out);
}

/// Scale-normalized residual of the inverse-weighted estimating identity at a
/// fitted WLS/PICOV model: |sum over stratum rows of w_ij (Y_ij - m_ij)| with
/// w_ij = pi(A_{i(-j)}; alpha) / f(A_i | X_i). This is the intercept (WLS) or
/// ratio-column (PICOV) row of the normal equations, so it vanishes at the
/// fit. With `per_group_scaled`, each group's terms are divided by N_i, which
/// is the exact premise of the DR-BC-form equivalence.
inline double weighted_residual_identity(const Study& study,
                                         const PropensityModel& prop,
                                         const OutcomeModel& fit,
                                         bool per_group_scaled = false) {
  require_converged(prop);
  if (!fit.alpha) {
    throw ContractError("identity applies to policy-dependent fits only");
  }
  const Policy alpha(*fit.alpha);
  double sum = 0.0, scale = 0.0;
  for (std::size_t idx : sorted_order(study)) {
    const GroupRecord& g = study.groups[idx];
    const double log_f = detail::clamped_log_f(
        prop.f_floor, group_log_prob_at(prop, g, g.treatment_span()));
    const double gscale = per_group_scaled ? static_cast<double>(g.size()) : 1.0;
    for (Eigen::Index j = 0; j < g.size(); ++j) {
      if (fit.stratum && g.treatments[static_cast<std::size_t>(j)] != *fit.stratum) {
        continue;
      }
      const PolicyWeight pw = fit.stratum
                                  ? pi_minus(g.treatment_span(), j, alpha)
                                  : pi_full(g.treatment_span(), alpha);
      const double w = std::exp(pw.log_value - log_f);
      const double r = g.outcomes[j] - fit.predict(g, g.treatment_span(), j);
      sum += w * r / gscale;
      scale += std::fabs(w * g.outcomes[j]) / gscale;
    }
  }
  return std::fabs(sum) / std::max(scale, 1e-300);
}

/// Per-(mode, a, alpha) fit cache. The weighted and augmented regressions are
/// policy-dependent, so effect grids refit per cell; hits are
/// indistinguishable from recomputation because every fit is deterministic.
class OutcomeModelCache {
 public:
  OutcomeModelCache(const Study& study, FeatureMap base_map,
                    std::shared_ptr<const PropensityModel> prop)
      : study_(&study), base_(std::move(base_map)), prop_(std::move(prop)) {}

  std::shared_ptr<const OutcomeModel> stratum_fit(OutcomeMode mode, int a,
                                                  Policy alpha) {
    return fetch(mode, a, alpha);
  }
  std::shared_ptr<const OutcomeModel> marginal_fit(OutcomeMode mode,
                                                   Policy alpha) {
    return fetch(mode, -1, alpha);
  }
  const FeatureMap& base_map() const { return base_; }
  const PropensityModel& propensity() const { return *prop_; }

 private:
  std::shared_ptr<const OutcomeModel> fetch(OutcomeMode mode, int a,
                                            Policy alpha) {
    std::uint64_t alpha_bits;
    const double av = alpha.alpha();
    std::memcpy(&alpha_bits, &av, sizeof(av));
    const auto key = std::make_tuple(static_cast<int>(mode), a, alpha_bits);
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    std::shared_ptr<const OutcomeModel> fit;
    switch (mode) {
      case OutcomeMode::WLS:
        fit = std::make_shared<OutcomeModel>(fit_wls(*study_, base_, *prop_, a, alpha));
        break;
      case OutcomeMode::PICOV:
        fit = std::make_shared<OutcomeModel>(fit_picov(*study_, base_, *prop_, a, alpha));
        break;
      case OutcomeMode::WLS_MARGINAL:
        fit = std::make_shared<OutcomeModel>(fit_wls_marginal(*study_, base_, *prop_, alpha));
        break;
      case OutcomeMode::PICOV_MARGINAL:
        fit = std::make_shared<OutcomeModel>(fit_picov_marginal(*study_, base_, *prop_, alpha));
        break;
      default:
        throw ContractError("cache only holds policy-dependent fits");
    }
    cache_.emplace(key, fit);
    return fit;
  }

  const Study* study_;
  FeatureMap base_;
  std::shared_ptr<const PropensityModel> prop_;
  std::map<std::tuple<int, int, std::uint64_t>,
           std::shared_ptr<const OutcomeModel>> cache_;
  std::mutex mutex_;
};

}  // namespace spillover
