#pragma once

#include <Eigen/Dense>
#include <cstring>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "spillover/data.hpp"
#include "spillover/errors.hpp"
#include "spillover/outcome.hpp"
#include "spillover/policy.hpp"
#include "spillover/propensity.hpp"
#include "spillover/util.hpp"

namespace spillover {

enum class Family : std::uint8_t { IPW, REG, DRBC, DRWLS, DRPICOV };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::IPW: return "ipw";
    case Family::REG: return "reg";
    case Family::DRBC: return "dr-bc";
    case Family::DRWLS: return "dr-wls";
    case Family::DRPICOV: return "dr-picov";
  }
  return "?";
}

enum class Engine : std::uint8_t { Exact, MonteCarlo };

struct EngineSpec {
  Engine engine = Engine::Exact;
  int mc_draws = 1000;
  std::uint64_t seed = 0;
  int exact_enum_limit = 15;
};

/// A population mean being estimated: mu_{a,alpha} when `a` is set, the
/// marginal mu_alpha otherwise.
struct MuTarget {
  std::optional<int> a;
  double alpha;

  bool marginal() const { return !a.has_value(); }
  Policy policy() const { return Policy(alpha); }
  std::string label() const {
    return marginal() ? "mu(" + format_double(alpha) + ")"
                      : "mu(" + std::to_string(*a) + "," + format_double(alpha) + ")";
  }
  friend bool operator==(const MuTarget& x, const MuTarget& y) {
    return x.a == y.a && x.alpha == y.alpha;
  }
};

struct ComputationMeta {
  Engine engine = Engine::Exact;
  int mc_draws = 0;
  std::uint64_t seed = 0;
  double mc_se = 0.0;      // Monte Carlo standard error of the estimate
  double max_weight = 0.0; // largest inverse-propensity ratio encountered
};

struct MuEstimate {
  double value = 0.0;
  MuTarget target;
  Family family;
  Eigen::VectorXd group_values;  // per-group contributions, sorted-id order
  ComputationMeta meta;
};

namespace detail {

inline std::uint64_t alpha_bits(double alpha) {
  std::uint64_t bits;
  std::memcpy(&bits, &alpha, sizeof(alpha));
  return bits;
}

/// Monte Carlo stream id for one (group, individual, target) cell. Built from
/// the sorted group position so results do not depend on input order or on
/// worker scheduling.
inline std::uint64_t mu_seed(const EngineSpec& engine, Family family,
                             const MuTarget& target, std::size_t group_pos,
                             Eigen::Index j) {
  return seed_stream(engine.seed,
                     {static_cast<std::uint64_t>(family),
                      static_cast<std::uint64_t>(target.a ? *target.a + 1 : 0),
                      alpha_bits(target.alpha),
                      static_cast<std::uint64_t>(group_pos),
                      static_cast<std::uint64_t>(j)});
}

/// Policy-averaged prediction for one individual under the chosen engine.
/// Accumulates the squared MC standard error when sampling.
inline double policy_average_dispatch(const OutcomeModel& model,
                                      const GroupRecord& g, Eigen::Index j,
                                      const MuTarget& target,
                                      const EngineSpec& engine, Family family,
                                      std::size_t group_pos, double* se2_acc) {
  if (engine.engine == Engine::Exact) {
    return policy_average_exact(model, g, j, target.a, target.policy(),
                                engine.exact_enum_limit);
  }
  double se = 0.0;
  const double v = policy_average_mc(model, g, j, target.a, target.policy(),
                                     engine.mc_draws,
                                     mu_seed(engine, family, target, group_pos, j),
                                     &se);
  if (se2_acc) *se2_acc += se * se;
  return v;
}

/// Group-level IPW contribution given the (possibly clamped) observed-vector
/// log propensity.
inline double ipw_group_value(const GroupRecord& g, double log_f,
                              const MuTarget& target, double* max_weight) {
  const Eigen::Index n = g.size();
  const Policy pol = target.policy();
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (target.a && g.treatments[static_cast<std::size_t>(j)] != *target.a) continue;
    const PolicyWeight pw = target.a ? pi_minus(g.treatment_span(), j, pol)
                                     : pi_full(g.treatment_span(), pol);
    const double w = std::exp(pw.log_value - log_f);
    if (max_weight && w > *max_weight) *max_weight = w;
    sum += g.outcomes[j] * w;
  }
  return sum / static_cast<double>(n);
}

/// Group-level policy-averaged regression contribution.
inline double reg_group_value(const OutcomeModel& model, const GroupRecord& g,
                              const MuTarget& target, const EngineSpec& engine,
                              Family family, std::size_t group_pos,
                              double* se2_acc) {
  const Eigen::Index n = g.size();
  double sum = 0.0;
  double se2 = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    sum += policy_average_dispatch(model, g, j, target, engine, family,
                                   group_pos, se2_acc ? &se2 : nullptr);
  }
  if (se2_acc) *se2_acc += se2 / static_cast<double>(n * n);
  return sum / static_cast<double>(n);
}

/// Inverse-weighted residual correction added by the bias-correction DR form.
inline double residual_correction(const OutcomeModel& model,
                                  const GroupRecord& g, double log_f,
                                  const MuTarget& target, double* max_weight) {
  const Eigen::Index n = g.size();
  const Policy pol = target.policy();
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (target.a && g.treatments[static_cast<std::size_t>(j)] != *target.a) continue;
    const PolicyWeight pw = target.a ? pi_minus(g.treatment_span(), j, pol)
                                     : pi_full(g.treatment_span(), pol);
    const double w = std::exp(pw.log_value - log_f);
    if (max_weight && w > *max_weight) *max_weight = w;
    sum += (g.outcomes[j] - model.predict(g, g.treatment_span(), j)) * w;
  }
  return sum / static_cast<double>(n);
}

}  // namespace detail

/// mu_{a,alpha} by inverse probability weighting of observed outcomes.
inline MuEstimate ipw_mu(const Study& study, const PropensityModel& prop,
                         int a, Policy alpha) {
  require_converged(prop);
  const auto order = sorted_order(study);
  const auto k = static_cast<Eigen::Index>(order.size());
  MuEstimate est;
  est.target = {a, alpha.alpha()};
  est.family = Family::IPW;
  est.group_values.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const GroupRecord& g = study.groups[order[static_cast<std::size_t>(i)]];
    const double log_f = detail::clamped_log_f(
        prop.f_floor, group_log_prob_at(prop, g, g.treatment_span()));
    est.group_values[i] =
        detail::ipw_group_value(g, log_f, est.target, &est.meta.max_weight);
  }
  est.value = est.group_values.sum() / static_cast<double>(k);
  return est;
}

/// Marginal mu_alpha by inverse probability weighting with the full-vector
/// policy weight.
inline MuEstimate ipw_mu_marginal(const Study& study,
                                  const PropensityModel& prop, Policy alpha) {
  require_converged(prop);
  const auto order = sorted_order(study);
  const auto k = static_cast<Eigen::Index>(order.size());
  MuEstimate est;
  est.target = {std::nullopt, alpha.alpha()};
  est.family = Family::IPW;
  est.group_values.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const GroupRecord& g = study.groups[order[static_cast<std::size_t>(i)]];
    const double log_f = detail::clamped_log_f(
        prop.f_floor, group_log_prob_at(prop, g, g.treatment_span()));
    est.group_values[i] =
        detail::ipw_group_value(g, log_f, est.target, &est.meta.max_weight);
  }
  est.value = est.group_values.sum() / static_cast<double>(k);
  return est;
}

namespace detail {

inline MuEstimate policy_average_mu(const Study& study,
                                    const OutcomeModel& model, Family family,
                                    const MuTarget& target,
                                    const EngineSpec& engine) {
  const auto order = sorted_order(study);
  const auto k = static_cast<Eigen::Index>(order.size());
  MuEstimate est;
  est.target = target;
  est.family = family;
  est.group_values.resize(k);
  est.meta.engine = engine.engine;
  est.meta.mc_draws = engine.engine == Engine::MonteCarlo ? engine.mc_draws : 0;
  est.meta.seed = engine.seed;
  double se2 = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const GroupRecord& g = study.groups[order[static_cast<std::size_t>(i)]];
    est.group_values[i] = reg_group_value(
        model, g, target, engine, family, static_cast<std::size_t>(i),
        engine.engine == Engine::MonteCarlo ? &se2 : nullptr);
  }
  est.value = est.group_values.sum() / static_cast<double>(k);
  est.meta.mc_se = std::sqrt(se2) / static_cast<double>(k);
  return est;
}

}  // namespace detail

/// mu_{a,alpha} by pure outcome regression: policy-averaged predictions.
inline MuEstimate reg_mu(const Study& study, const OutcomeModel& ols, int a,
                         Policy alpha, const EngineSpec& engine = {}) {
  if (ols.mode != OutcomeMode::OLS) {
    throw ContractError("reg_mu expects the unweighted least squares model");
  }
  return detail::policy_average_mu(study, ols, Family::REG,
                                   {a, alpha.alpha()}, engine);
}

inline MuEstimate reg_mu_marginal(const Study& study, const OutcomeModel& ols,
                                  Policy alpha, const EngineSpec& engine = {}) {
  if (ols.mode != OutcomeMode::OLS) {
    throw ContractError("reg_mu expects the unweighted least squares model");
  }
  return detail::policy_average_mu(study, ols, Family::REG,
                                   {std::nullopt, alpha.alpha()}, engine);
}

namespace detail {

inline MuEstimate drbc_mu_impl(const Study& study, const PropensityModel& prop,
                               const OutcomeModel& out, const MuTarget& target,
                               const EngineSpec& engine) {
  require_converged(prop);
  const auto order = sorted_order(study);
  const auto k = static_cast<Eigen::Index>(order.size());
  MuEstimate est;
  est.target = target;
  est.family = Family::DRBC;
  est.group_values.resize(k);
  est.meta.engine = engine.engine;
  est.meta.mc_draws = engine.engine == Engine::MonteCarlo ? engine.mc_draws : 0;
  est.meta.seed = engine.seed;
  double se2 = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const GroupRecord& g = study.groups[order[static_cast<std::size_t>(i)]];
    const double log_f = clamped_log_f(
        prop.f_floor, group_log_prob_at(prop, g, g.treatment_span()));
    const double reg = reg_group_value(
        out, g, target, engine, Family::DRBC, static_cast<std::size_t>(i),
        engine.engine == Engine::MonteCarlo ? &se2 : nullptr);
    est.group_values[i] =
        reg + residual_correction(out, g, log_f, target, &est.meta.max_weight);
  }
  est.value = est.group_values.sum() / static_cast<double>(k);
  est.meta.mc_se = std::sqrt(se2) / static_cast<double>(k);
  return est;
}

}  // namespace detail

/// Residual-bias-correction doubly robust estimator of mu_{a,alpha}: the
/// regression estimator plus inverse-weighted residuals.
inline MuEstimate drbc_mu(const Study& study, const PropensityModel& prop,
                          const OutcomeModel& out, int a, Policy alpha,
                          const EngineSpec& engine = {}) {
  return detail::drbc_mu_impl(study, prop, out, {a, alpha.alpha()}, engine);
}

inline MuEstimate drbc_mu_marginal(const Study& study,
                                   const PropensityModel& prop,
                                   const OutcomeModel& out, Policy alpha,
                                   const EngineSpec& engine = {}) {
  return detail::drbc_mu_impl(study, prop, out, {std::nullopt, alpha.alpha()},
                              engine);
}

namespace detail {

inline void check_policy_fit(const OutcomeModel& model, OutcomeMode expected,
                             std::optional<int> a, Policy alpha) {
  if (model.mode != expected) {
    throw ContractError(std::string("expected a ") + outcome_mode_name(expected) +
                        " outcome model, got " + outcome_mode_name(model.mode));
  }
  if (model.stratum != a) {
    throw ContractError("outcome model stratum does not match the requested a");
  }
  if (!model.alpha || *model.alpha != alpha.alpha()) {
    throw ContractError("outcome model was fitted at a different alpha");
  }
}

}  // namespace detail

/// Weighted-coefficients doubly robust estimator: policy-averaged predictions
/// from the inverse-propensity weighted regression fitted at exactly (a, alpha).
inline MuEstimate drwls_mu(const Study& study, const PropensityModel& prop,
                           const OutcomeModel& wls, int a, Policy alpha,
                           const EngineSpec& engine = {}) {
  require_converged(prop);
  detail::check_policy_fit(wls, OutcomeMode::WLS, a, alpha);
  MuEstimate est = detail::policy_average_mu(study, wls, Family::DRWLS,
                                             {a, alpha.alpha()}, engine);
  return est;
}

inline MuEstimate drwls_mu_marginal(const Study& study,
                                    const PropensityModel& prop,
                                    const OutcomeModel& wls, Policy alpha,
                                    const EngineSpec& engine = {}) {
  require_converged(prop);
  detail::check_policy_fit(wls, OutcomeMode::WLS_MARGINAL, std::nullopt, alpha);
  return detail::policy_average_mu(study, wls, Family::DRWLS,
                                   {std::nullopt, alpha.alpha()}, engine);
}

/// Propensity-covariate doubly robust estimator: policy-averaged predictions
/// from the ratio-augmented regression. The exact engine enumerates neighbor
/// assignments and refuses groups beyond the enumeration limit.
inline MuEstimate drpicov_mu(const Study& study, const PropensityModel& prop,
                             const OutcomeModel& picov, int a, Policy alpha,
                             const EngineSpec& engine = {}) {
  require_converged(prop);
  detail::check_policy_fit(picov, OutcomeMode::PICOV, a, alpha);
  return detail::policy_average_mu(study, picov, Family::DRPICOV,
                                   {a, alpha.alpha()}, engine);
}

inline MuEstimate drpicov_mu_marginal(const Study& study,
                                      const PropensityModel& prop,
                                      const OutcomeModel& picov, Policy alpha,
                                      const EngineSpec& engine = {}) {
  require_converged(prop);
  detail::check_policy_fit(picov, OutcomeMode::PICOV_MARGINAL, std::nullopt,
                           alpha);
  return detail::policy_average_mu(study, picov, Family::DRPICOV,
                                   {std::nullopt, alpha.alpha()}, engine);
}

/// The fitted models an effect evaluation may draw on. Policy-dependent fits
/// come from the cache; `ols` doubles as the DR-BC outcome model.
struct ModelSet {
  std::shared_ptr<const PropensityModel> propensity;
  std::shared_ptr<const OutcomeModel> ols;
  std::shared_ptr<OutcomeModelCache> cache;
};

/// One mu estimate for any family. Marginal targets for the weighted and
/// augmented DR families are an extrapolation beyond their defining
/// estimating equations and stay behind `marginal_extension`.
inline MuEstimate mu_estimate(Family family, const Study& study,
                              const ModelSet& models, const MuTarget& target,
                              const EngineSpec& engine = {},
                              bool marginal_extension = false) {
  const Policy pol = target.policy();
  switch (family) {
    case Family::IPW:
      return target.marginal() ? ipw_mu_marginal(study, *models.propensity, pol)
                               : ipw_mu(study, *models.propensity, *target.a, pol);
    case Family::REG:
      return target.marginal()
                 ? reg_mu_marginal(study, *models.ols, pol, engine)
                 : reg_mu(study, *models.ols, *target.a, pol, engine);
    case Family::DRBC:
      return target.marginal()
                 ? drbc_mu_marginal(study, *models.propensity, *models.ols, pol, engine)
                 : drbc_mu(study, *models.propensity, *models.ols, *target.a, pol, engine);
    case Family::DRWLS: {
      if (target.marginal()) {
        if (!marginal_extension) {
          throw ContractError(
              "marginal (overall-effect) targets for dr-wls require the "
              "marginal-extension flag");
        }
        auto fit = models.cache->marginal_fit(OutcomeMode::WLS_MARGINAL, pol);
        return drwls_mu_marginal(study, *models.propensity, *fit, pol, engine);
      }
      auto fit = models.cache->stratum_fit(OutcomeMode::WLS, *target.a, pol);
      return drwls_mu(study, *models.propensity, *fit, *target.a, pol, engine);
    }
    case Family::DRPICOV: {
      if (target.marginal()) {
        if (!marginal_extension) {
          throw ContractError(
              "marginal (overall-effect) targets for dr-picov require the "
              "marginal-extension flag");
        }
        auto fit = models.cache->marginal_fit(OutcomeMode::PICOV_MARGINAL, pol);
        return drpicov_mu_marginal(study, *models.propensity, *fit, pol, engine);
      }
      auto fit = models.cache->stratum_fit(OutcomeMode::PICOV, *target.a, pol);
      return drpicov_mu(study, *models.propensity, *fit, *target.a, pol, engine);
    }
  }
  throw ContractError("unknown estimator family");
}

struct EffectEstimate {
  EffectRequest request;
  Family family;
  double value = 0.0;
  MuEstimate first;   // minuend
  MuEstimate second;  // subtrahend
};

/// The two mu targets whose difference defines the requested effect.
inline std::pair<MuTarget, MuTarget> effect_targets(const EffectRequest& req) {
  const double a1 = req.alpha1.alpha();
  const double a0 = req.alpha0.alpha();
  switch (req.kind) {
    case EffectKind::DE: return {{1, a1}, {0, a1}};
    case EffectKind::IE: return {{0, a1}, {0, a0}};
    case EffectKind::TE: return {{1, a1}, {0, a0}};
    case EffectKind::OE: return {{std::nullopt, a1}, {std::nullopt, a0}};
  }
  throw ContractError("unknown effect kind");
}

inline EffectEstimate effect(const EffectRequest& request, Family family,
                             const Study& study, const ModelSet& models,
                             const EngineSpec& engine = {},
                             bool marginal_extension = false) {
  auto [t1, t0] = effect_targets(request);
  EffectEstimate est{request, family,
                     0.0,
                     mu_estimate(family, study, models, t1, engine, marginal_extension),
                     mu_estimate(family, study, models, t0, engine, marginal_extension)};
  est.value = est.first.value - est.second.value;
  return est;
}

}  // namespace spillover
