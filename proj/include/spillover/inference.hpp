#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spillover/data.hpp"
#include "spillover/errors.hpp"
#include "spillover/estimators.hpp"
#include "spillover/normal.hpp"
#include "spillover/util.hpp"

namespace spillover {

struct StackBlock {
  std::string name;
  Eigen::Index offset;
  Eigen::Index size;
};

/// The joint parameter vector theta = (mu targets, outcome-model blocks,
/// propensity block) with its per-group estimating-function evaluator.
/// `evaluate` returns the k x dim matrix of G(O_i; theta) rows and must be
/// safe to call concurrently.
struct ThetaStack {
  Family family = Family::IPW;
  std::vector<MuTarget> targets;
  std::vector<StackBlock> layout;
  Eigen::VectorXd theta_hat;
  Eigen::Index group_count = 0;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> evaluate;

  Eigen::Index dimension() const { return theta_hat.size(); }

  Eigen::Index mu_index(const MuTarget& t) const {
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] == t) return static_cast<Eigen::Index>(i);
    }
    throw ContractError("mu target " + t.label() + " is not in this stack");
  }
};

namespace detail {

struct BetaBlock {
  OutcomeMode mode;
  std::optional<int> a;
  double alpha = 0.0;
  FeatureMap map;
  bool ratio = false;
  Eigen::Index offset = 0;
  Eigen::Index dim = 0;  // includes the ratio column when present
  // Per sorted group: regressor rows at observed treatments for the selected
  // individuals, their outcomes, and the log policy weight of the observed
  // neighbor (or full) vector.
  std::vector<Eigen::MatrixXd> rows;
  std::vector<Eigen::VectorXd> y;
  std::vector<Eigen::VectorXd> logpi;
};

struct StackEngine {
  const Study* study = nullptr;
  std::vector<std::size_t> order;
  Family family = Family::IPW;
  std::vector<MuTarget> targets;
  std::vector<int> target_block;  // beta block feeding each mu row, or -1
  EngineSpec engine;
  bool has_prop = false;
  PropensityModel prop;  // parameter template; gamma swapped per evaluation
  std::vector<BetaBlock> blocks;
  Eigen::Index gamma_offset = -1;
  Eigen::Index gamma_dim = 0;
  Eigen::Index dim = 0;

  Eigen::MatrixXd evaluate(const Eigen::VectorXd& theta) const {
    const auto k = static_cast<Eigen::Index>(order.size());
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(k, dim);

    PropensityModel pm;
    if (has_prop) {
      pm = prop;
      pm.gamma = theta.segment(gamma_offset, prop.gamma.size());
      if (prop.random_effect) {
        pm.log_sigma_b = theta[gamma_offset + prop.gamma.size()];
      }
    }
    std::vector<OutcomeModel> block_models;
    block_models.reserve(blocks.size());
    for (const auto& b : blocks) {
      OutcomeModel m;
      m.beta = theta.segment(b.offset, b.dim);
      m.features = b.map;
      m.mode = b.mode;
      m.stratum = b.a;
      if (b.mode != OutcomeMode::OLS) m.alpha = b.alpha;
      if (b.ratio) m.propensity = std::make_shared<PropensityModel>(pm);
      block_models.push_back(std::move(m));
    }

    for (Eigen::Index i = 0; i < k; ++i) {
      const GroupRecord& g = study->groups[order[static_cast<std::size_t>(i)]];
      double log_f = 0.0;
      if (has_prop) {
        log_f = clamped_log_f(
            pm.f_floor, group_log_prob_params(pm.features, pm.gamma,
                                              pm.log_sigma_b, pm.random_effect,
                                              pm.quad_nodes, g,
                                              g.treatment_span()));
      }
      // mu-residual rows
      for (std::size_t ti = 0; ti < targets.size(); ++ti) {
        const MuTarget& t = targets[ti];
        double gv = 0.0;
        switch (family) {
          case Family::IPW:
            gv = ipw_group_value(g, log_f, t, nullptr);
            break;
          case Family::REG:
            gv = reg_group_value(block_models[0], g, t, engine, family,
                                 static_cast<std::size_t>(i), nullptr);
            break;
          case Family::DRBC:
            gv = reg_group_value(block_models[0], g, t, engine, family,
                                 static_cast<std::size_t>(i), nullptr) +
                 residual_correction(block_models[0], g, log_f, t, nullptr);
            break;
          case Family::DRWLS:
          case Family::DRPICOV:
            gv = reg_group_value(
                block_models[static_cast<std::size_t>(target_block[ti])], g, t,
                engine, family, static_cast<std::size_t>(i), nullptr);
            break;
        }
        G(i, static_cast<Eigen::Index>(ti)) =
            gv - theta[static_cast<Eigen::Index>(ti)];
      }
      // outcome-model normal-equation rows
      for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        const BetaBlock& b = blocks[bi];
        const auto& rows = b.rows[static_cast<std::size_t>(i)];
        if (rows.rows() == 0) continue;
        const auto& y = b.y[static_cast<std::size_t>(i)];
        const Eigen::VectorXd& beta = block_models[bi].beta;
        Eigen::VectorXd contrib(b.dim);
        if (b.mode == OutcomeMode::OLS) {
          Eigen::VectorXd r = y - rows * beta;
          contrib = rows.transpose() * r;
        } else {
          Eigen::VectorXd w =
              ((b.logpi[static_cast<std::size_t>(i)].array() - log_f).exp())
                  .matrix();
          if (b.ratio) {
            Eigen::MatrixXd full(rows.rows(), b.dim);
            full.leftCols(b.dim - 1) = rows;
            full.col(b.dim - 1) = w;
            Eigen::VectorXd r = y - full * beta;
            contrib = full.transpose() * r;
          } else {
            Eigen::VectorXd r = y - rows * beta;
            contrib = rows.transpose() * (w.asDiagonal() * r);
          }
        }
        G.row(i).segment(b.offset, b.dim) = contrib;
      }
      // propensity score rows
      if (has_prop) {
        G.row(i).tail(gamma_dim) =
            group_score_params(pm.features, pm.gamma, pm.log_sigma_b,
                               pm.random_effect, pm.quad_nodes, g,
                               g.treatment_span());
      }
    }
    return G;
  }
};

inline BetaBlock make_beta_block(const Study& study,
                                 const std::vector<std::size_t>& order,
                                 const OutcomeModel& fit, OutcomeMode mode,
                                 std::optional<int> a, double alpha) {
  BetaBlock b;
  b.mode = mode;
  b.a = a;
  b.alpha = alpha;
  b.map = fit.features;
  b.ratio = fit.has_ratio_covariate();
  b.dim = fit.beta.size();
  for (std::size_t idx : order) {
    const GroupRecord& g = study.groups[idx];
    std::vector<Eigen::Index> sel;
    for (Eigen::Index j = 0; j < g.size(); ++j) {
      if (!a || g.treatments[static_cast<std::size_t>(j)] == *a) sel.push_back(j);
    }
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(sel.size()), b.map.dimension());
    Eigen::VectorXd y(static_cast<Eigen::Index>(sel.size()));
    Eigen::VectorXd logpi(static_cast<Eigen::Index>(sel.size()));
    Eigen::VectorXd row(b.map.dimension());
    for (std::size_t s = 0; s < sel.size(); ++s) {
      const Eigen::Index j = sel[s];
      b.map.row(g, j, g.treatment_span(), row);
      rows.row(static_cast<Eigen::Index>(s)) = row;
      y[static_cast<Eigen::Index>(s)] = g.outcomes[j];
      if (mode != OutcomeMode::OLS) {
        const PolicyWeight pw = a ? pi_minus(g.treatment_span(), j, Policy(alpha))
                                  : pi_full(g.treatment_span(), Policy(alpha));
        logpi[static_cast<Eigen::Index>(s)] = pw.log_value;
      }
    }
    b.rows.push_back(std::move(rows));
    b.y.push_back(std::move(y));
    b.logpi.push_back(std::move(logpi));
  }
  return b;
}

}  // namespace detail

/// Builds the stacked estimating-function system for one family: mu-residual
/// rows for every target, the fitted outcome-model normal equations (one block
/// per (a, alpha) pair for the policy-dependent fits), and the propensity
/// score equations.
inline ThetaStack build_stack(Family family, const Study& study,
                              const ModelSet& models,
                              const std::vector<MuTarget>& targets,
                              const EngineSpec& engine = {},
                              bool marginal_extension = false) {
  if (targets.empty() && family != Family::REG && family != Family::DRBC &&
      family != Family::IPW) {
    throw ContractError("stack needs at least one mu target for this family");
  }
  auto eng = std::make_shared<detail::StackEngine>();
  eng->study = &study;
  eng->order = sorted_order(study);
  eng->family = family;
  eng->targets = targets;
  eng->target_block.assign(targets.size(), -1);
  eng->engine = engine;

  const bool uses_prop = family != Family::REG;
  const bool uses_ols = family == Family::REG || family == Family::DRBC;
  if (uses_prop) {
    if (!models.propensity) throw ContractError("family requires a propensity model");
    require_converged(*models.propensity);
    eng->has_prop = true;
    eng->prop = *models.propensity;
  }

  std::vector<StackBlock> layout;
  Eigen::Index offset = 0;
  layout.push_back({"mu", 0, static_cast<Eigen::Index>(targets.size())});
  offset += static_cast<Eigen::Index>(targets.size());

  std::vector<std::shared_ptr<const OutcomeModel>> block_fits;
  if (uses_ols) {
    if (!models.ols) throw ContractError("family requires the OLS outcome model");
    auto block = detail::make_beta_block(study, eng->order, *models.ols,
                                         OutcomeMode::OLS, std::nullopt, 0.0);
    block.offset = offset;
    layout.push_back({"beta", offset, block.dim});
    offset += block.dim;
    eng->blocks.push_back(std::move(block));
    block_fits.push_back(models.ols);
  } else if (family == Family::DRWLS || family == Family::DRPICOV) {
    if (!models.cache) throw ContractError("family requires the outcome-model cache");
    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
      const MuTarget& t = targets[ti];
      // one block per distinct (a, alpha) pair, shared across targets
      int found = -1;
      for (std::size_t bi = 0; bi < eng->blocks.size(); ++bi) {
        if (eng->blocks[bi].a == t.a && eng->blocks[bi].alpha == t.alpha) {
          found = static_cast<int>(bi);
          break;
        }
      }
      if (found >= 0) {
        eng->target_block[ti] = found;
        continue;
      }
      std::shared_ptr<const OutcomeModel> fit;
      if (t.marginal()) {
        if (!marginal_extension) {
          throw ContractError(
              "marginal targets for this family require the marginal-extension flag");
        }
        fit = models.cache->marginal_fit(family == Family::DRWLS
                                             ? OutcomeMode::WLS_MARGINAL
                                             : OutcomeMode::PICOV_MARGINAL,
                                         t.policy());
      } else {
        fit = models.cache->stratum_fit(
            family == Family::DRWLS ? OutcomeMode::WLS : OutcomeMode::PICOV,
            *t.a, t.policy());
      }
      auto block = detail::make_beta_block(study, eng->order, *fit, fit->mode,
                                           t.a, t.alpha);
      block.offset = offset;
      layout.push_back({"beta[" + t.label() + "]", offset, block.dim});
      offset += block.dim;
      eng->target_block[ti] = static_cast<int>(eng->blocks.size());
      eng->blocks.push_back(std::move(block));
      block_fits.push_back(fit);
    }
  }

  if (uses_prop) {
    eng->gamma_offset = offset;
    eng->gamma_dim = models.propensity->parameter_count();
    layout.push_back({"gamma", offset, eng->gamma_dim});
    offset += eng->gamma_dim;
  }
  eng->dim = offset;

  ThetaStack stack;
  stack.family = family;
  stack.targets = targets;
  stack.layout = std::move(layout);
  stack.group_count = study.group_count();
  stack.theta_hat.resize(eng->dim);
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    MuEstimate mu = mu_estimate(family, study, models, targets[ti], engine,
                                marginal_extension);
    stack.theta_hat[static_cast<Eigen::Index>(ti)] = mu.value;
  }
  for (std::size_t bi = 0; bi < eng->blocks.size(); ++bi) {
    stack.theta_hat.segment(eng->blocks[bi].offset, eng->blocks[bi].dim) =
        block_fits[bi]->beta;
  }
  if (uses_prop) {
    stack.theta_hat.segment(eng->gamma_offset, models.propensity->gamma.size()) =
        models.propensity->gamma;
    if (models.propensity->random_effect) {
      stack.theta_hat[eng->gamma_offset + models.propensity->gamma.size()] =
          models.propensity->log_sigma_b;
    }
  }
  stack.evaluate = [eng](const Eigen::VectorXd& theta) {
    return eng->evaluate(theta);
  };
  return stack;
}

struct SandwichResult {
  Eigen::MatrixXd u_hat;  // -mean Jacobian of G
  Eigen::MatrixXd v_hat;  // mean outer product of G
  Eigen::MatrixXd sigma;  // U^-1 V U^-T / k, covariance of theta_hat
  double u_condition = 0.0;
};

/// Empirical sandwich covariance: V from the outer products of the per-group
/// estimating functions at theta_hat, U from a central finite-difference
/// Jacobian of their mean.
inline SandwichResult sandwich(const ThetaStack& stack, int workers = 1) {
  const Eigen::Index k = stack.group_count;
  if (k < 2) {
    throw ContractError("sandwich variance needs at least two groups");
  }
  const Eigen::Index dim = stack.dimension();
  const Eigen::MatrixXd G0 = stack.evaluate(stack.theta_hat);

  // The stack must actually be solved at theta_hat.
  for (Eigen::Index c = 0; c < dim; ++c) {
    const double mean = G0.col(c).mean();
    const double scale = G0.col(c).cwiseAbs().mean() + 1.0;
    if (std::fabs(mean) > 1e-6 * scale) {
      throw ContractError(
          "estimating equations are not satisfied at theta_hat (row " +
          std::to_string(c) + ", mean " + format_double(mean) + ")");
    }
  }

  SandwichResult res;
  res.v_hat = (G0.transpose() * G0) / static_cast<double>(k);
  res.v_hat = ((res.v_hat + res.v_hat.transpose()) / 2.0).eval();

  Eigen::MatrixXd jac(dim, dim);
  parallel_for(static_cast<std::size_t>(dim), workers, [&](std::size_t ci) {
    const auto c = static_cast<Eigen::Index>(ci);
    const double h = std::max(1e-5, 1e-5 * std::fabs(stack.theta_hat[c]));
    Eigen::VectorXd up = stack.theta_hat;
    up[c] += h;
    Eigen::VectorXd down = stack.theta_hat;
    down[c] -= h;
    const Eigen::RowVectorXd gp = stack.evaluate(up).colwise().mean();
    const Eigen::RowVectorXd gm = stack.evaluate(down).colwise().mean();
    jac.col(c) = ((gp - gm) / (2.0 * h)).transpose();
  });
  res.u_hat = -jac;

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(res.u_hat,
                                        Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double smax = svd.singularValues().maxCoeff();
  const double smin = svd.singularValues().minCoeff();
  res.u_condition = (smin > 0.0) ? smax / smin
                                 : std::numeric_limits<double>::infinity();
  if (!(smin > 1e-12 * smax)) {
    throw FitError("sandwich bread matrix U is numerically singular "
                   "(condition estimate " + format_double(res.u_condition) + ")");
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(res.u_hat);
  Eigen::MatrixXd uinv_v = lu.solve(res.v_hat);
  res.sigma = lu.solve(uinv_v.transpose()).transpose() / static_cast<double>(k);
  res.sigma = ((res.sigma + res.sigma.transpose()) / 2.0).eval();
  return res;
}

/// tau * Sigma * tau^T for a contrast row over theta.
inline double effect_variance(const SandwichResult& res,
                              const Eigen::RowVectorXd& tau) {
  if (tau.size() != res.sigma.rows()) {
    throw ContractError("contrast length does not match the stack dimension");
  }
  return tau * res.sigma * tau.transpose();
}

/// Contrast selecting targets first - second in a stack's mu block.
inline Eigen::RowVectorXd mu_contrast(const ThetaStack& stack,
                                      const MuTarget& first,
                                      const MuTarget& second) {
  Eigen::RowVectorXd tau = Eigen::RowVectorXd::Zero(stack.dimension());
  tau[stack.mu_index(first)] += 1.0;
  tau[stack.mu_index(second)] -= 1.0;
  return tau;
}

/// estimate +/- z_{(1+level)/2} * sqrt(variance).
inline std::pair<double, double> wald_ci(double estimate, double variance,
                                         double level) {
  if (!(level > 0.0 && level < 1.0)) {
    throw ConfigError("confidence level must lie in (0,1)");
  }
  if (variance < 0.0) {
    throw ContractError("negative variance passed to wald_ci");
  }
  const double z = normal_quantile((1.0 + level) / 2.0);
  const double half = z * std::sqrt(variance);
  return {estimate - half, estimate + half};
}

}  // namespace spillover
