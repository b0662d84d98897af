#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spillover/data.hpp"
#include "spillover/errors.hpp"
#include "spillover/estimators.hpp"
#include "spillover/inference.hpp"
#include "spillover/rng.hpp"
#include "spillover/util.hpp"

namespace spillover {

/// Which of the two working models the replication study misspecifies.
enum class Scenario : std::uint8_t {
  BothCorrect,      // (i)
  WrongPropensity,  // (ii)
  WrongOutcome,     // (iii)
  BothWrong,        // (iv)
};

inline const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::BothCorrect: return "i";
    case Scenario::WrongPropensity: return "ii";
    case Scenario::WrongOutcome: return "iii";
    case Scenario::BothWrong: return "iv";
  }
  return "?";
}

inline Scenario parse_scenario(const std::string& text) {
  if (text == "i" || text == "1") return Scenario::BothCorrect;
  if (text == "ii" || text == "2") return Scenario::WrongPropensity;
  if (text == "iii" || text == "3") return Scenario::WrongOutcome;
  if (text == "iv" || text == "4") return Scenario::BothWrong;
  throw ConfigError("unknown scenario '" + text + "' (expected i|ii|iii|iv)");
}

struct ScenarioSpec {
  Scenario scenario = Scenario::BothCorrect;
  int group_count = 100;
  int group_size = 30;
  double alpha_eval = 0.5;
  int replications = 1000;
  std::uint64_t master_seed = 0;
  std::vector<Family> families = {Family::IPW, Family::REG, Family::DRBC,
                                  Family::DRWLS};
  /// The ratio-covariate DR family needs one quadrature integral per candidate
  /// neighbor assignment, so it only runs when asked for, at reduced sizes.
  bool include_picov = false;
  double random_effect_variance = 0.3;
  double ci_level = 0.95;
  int quad_nodes = 21;
  EngineSpec engine;
  int workers = 1;
};

namespace simgen {

/// Treatment log-odds for one individual.
inline double treatment_logit(double x1, double x2, double b) {
  return 0.1 + 0.2 * std::fabs(x1) + 0.2 * std::fabs(x1) * x2 + b;
}

/// Conditional outcome mean given own treatment, group treatment proportion
/// and own covariates.
inline double outcome_mean(double a, double prop, double x1, double x2) {
  return 2.0 + 2.0 * a + prop - 1.5 * std::fabs(x1) + 2.0 * x2 -
         3.0 * std::fabs(x1) * x2;
}

/// Deterministic assembly of one group from explicit draws; the randomized
/// generator and the tests share this kernel.
inline GroupRecord assemble_group(std::string group_id,
                                  const Eigen::VectorXd& x1,
                                  const Eigen::VectorXd& x2, double b,
                                  const std::vector<std::int8_t>& treatments,
                                  const Eigen::VectorXd& noise) {
  const Eigen::Index n = x1.size();
  GroupRecord g;
  g.group_id = std::move(group_id);
  g.covariates.resize(n, 2);
  g.covariates.col(0) = x1;
  g.covariates.col(1) = x2;
  g.treatments = treatments;
  double total = 0.0;
  for (std::int8_t a : treatments) total += a;
  const double prop = total / static_cast<double>(n);
  g.outcomes.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    g.outcomes[j] =
        outcome_mean(treatments[static_cast<std::size_t>(j)], prop, x1[j], x2[j]) +
        noise[j];
  }
  (void)b;  // consumed upstream when drawing treatments
  return g;
}

}  // namespace simgen

/// One synthetic study: X1 standard normal, X2 Bernoulli(0.5), treatments
/// from the random-intercept logistic model, outcomes linear with unit normal
/// noise. Identical (master_seed, replicate) pairs give identical studies;
/// the scenario only changes the models fitted afterwards, never the data.
inline Study generate_study(const ScenarioSpec& spec, int replicate) {
  Study study;
  study.covariate_names = {"x1", "x2"};
  const double sigma_b = std::sqrt(spec.random_effect_variance);
  const int n = spec.group_size;
  int digits = 1;
  for (int v = spec.group_count - 1; v >= 10; v /= 10) ++digits;
  for (int i = 0; i < spec.group_count; ++i) {
    Rng rng(seed_stream(spec.master_seed,
                        {0xda7aULL, static_cast<std::uint64_t>(replicate),
                         static_cast<std::uint64_t>(i)}));
    Eigen::VectorXd x1(n), x2(n), noise(n);
    for (int j = 0; j < n; ++j) {
      x1[j] = rng.normal();
      x2[j] = rng.bernoulli(0.5);
    }
    const double b = sigma_b * rng.normal();
    std::vector<std::int8_t> treat(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
      const double p =
          1.0 / (1.0 + std::exp(-simgen::treatment_logit(x1[j], x2[j], b)));
      treat[static_cast<std::size_t>(j)] = static_cast<std::int8_t>(rng.bernoulli(p));
    }
    for (int j = 0; j < n; ++j) noise[j] = rng.normal();
    std::string id = std::to_string(i);
    id.insert(0, static_cast<std::size_t>(digits) - std::min<std::size_t>(digits, id.size()), '0');
    study.groups.push_back(
        simgen::assemble_group("g" + id, x1, x2, b, treat, noise));
  }
  return study;
}

struct TrueValues {
  double mu0 = 0.0;
  double mu1 = 0.0;
  double de = 0.0;
};

/// Analytic estimand values under the synthetic generator: the outcome mean
/// is linear, so mu_{a,alpha} = E[outcome_mean(a, (a + (N-1)alpha)/N, X1, X2)]
/// with E|X1| = sqrt(2/pi) and E[X2] = 1/2. The direct effect is 2 + 1/N for
/// every alpha.
inline TrueValues true_values(const ScenarioSpec& spec) {
  const double n = static_cast<double>(spec.group_size);
  const double alpha = spec.alpha_eval;
  const double e_abs = std::sqrt(2.0 / M_PI);
  const double covariate_part = -1.5 * e_abs + 2.0 * 0.5 - 3.0 * e_abs * 0.5;
  auto mu = [&](double a) {
    return 2.0 + 2.0 * a + (a + (n - 1.0) * alpha) / n + covariate_part;
  };
  return {mu(0.0), mu(1.0), mu(1.0) - mu(0.0)};
}

/// Literal policy sum computed with naive nested products and loops, kept
/// deliberately independent of the log-domain machinery it cross-checks.
template <class Model>
double oracle_policy_sum(const Model& model, const GroupRecord& g,
                         Eigen::Index j, std::optional<int> own, double alpha,
                         int limit = 15) {
  const Eigen::Index n = g.size();
  const int free_count = static_cast<int>(own ? n - 1 : n);
  if (free_count > limit) {
    throw CapabilityError("oracle_policy_sum refuses groups this large");
  }
  std::vector<Eigen::Index> free_pos;
  for (Eigen::Index pos = 0; pos < n; ++pos) {
    if (!own || pos != j) free_pos.push_back(pos);
  }
  std::vector<std::int8_t> t(static_cast<std::size_t>(n), 0);
  if (own) t[static_cast<std::size_t>(j)] = static_cast<std::int8_t>(*own);
  double total = 0.0;
  const long combos = 1L << free_count;
  for (long mask = 0; mask < combos; ++mask) {
    double prob = 1.0;
    for (int bpos = 0; bpos < free_count; ++bpos) {
      const int bit = static_cast<int>((mask >> bpos) & 1L);
      t[static_cast<std::size_t>(free_pos[static_cast<std::size_t>(bpos)])] =
          static_cast<std::int8_t>(bit);
      prob *= bit ? alpha : (1.0 - alpha);
    }
    total += prob * model.predict(g, std::span<const std::int8_t>(t), j);
  }
  return total;
}

struct FamilyReplication {
  double mu0 = 0.0, mu1 = 0.0, de = 0.0;
  double se_mu0 = 0.0, se_mu1 = 0.0, se_de = 0.0;
  bool cover_mu0 = false, cover_mu1 = false, cover_de = false;
};

struct ReplicationResult {
  int replicate = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::map<Family, FamilyReplication> families;
};

struct SummaryRow {
  Family family;
  std::string estimand;  // mu0 | mu1 | de
  double truth = 0.0;
  double bias = 0.0;
  double sd = 0.0;        // empirical standard deviation of the estimates
  double ase = 0.0;       // average estimated standard error
  double coverage = 0.0;  // Wald CI coverage at the configured level
  int n_reps = 0;
};

struct SimulationSummary {
  Scenario scenario = Scenario::BothCorrect;
  TrueValues truth;
  int replications = 0;
  int failures = 0;
  std::vector<SummaryRow> rows;
};

struct SimulationOutput {
  std::vector<ReplicationResult> replications;
  SimulationSummary summary;
};

namespace detail {

struct ScenarioMaps {
  FeatureMap outcome;
  FeatureMap propensity;
};

inline ScenarioMaps scenario_maps(Scenario s) {
  const std::vector<std::string> names = {"x1", "x2"};
  const bool outcome_correct =
      s == Scenario::BothCorrect || s == Scenario::WrongPropensity;
  const bool prop_correct =
      s == Scenario::BothCorrect || s == Scenario::WrongOutcome;
  ScenarioMaps maps;
  maps.outcome = FeatureMap::parse(
      outcome_correct ? "1 + own + prop + abs(x1) + x2 + abs(x1)*x2"
                      : "1 + own + prop + x1 + x2",
      names);
  maps.propensity =
      FeatureMap::parse(prop_correct ? "1 + abs(x1) + abs(x1)*x2" : "1 + x1",
                        names);
  return maps;
}

inline ReplicationResult run_one_replication(const ScenarioSpec& spec,
                                             const ScenarioMaps& maps,
                                             const TrueValues& truth,
                                             int replicate) {
  ReplicationResult result;
  result.replicate = replicate;
  result.seed = seed_stream(spec.master_seed,
                            {0xda7aULL, static_cast<std::uint64_t>(replicate)});
  const Study study = generate_study(spec, replicate);
  const Policy alpha(spec.alpha_eval);
  try {
    PropensityOptions popts;
    popts.quad_nodes = spec.quad_nodes;
    auto prop = std::make_shared<const PropensityModel>(
        fit_propensity(study, maps.propensity, popts));
    auto ols = std::make_shared<const OutcomeModel>(fit_ols(study, maps.outcome));
    ModelSet models{prop, ols,
                    std::make_shared<OutcomeModelCache>(study, maps.outcome, prop)};
    std::vector<MuTarget> targets = {{0, spec.alpha_eval}, {1, spec.alpha_eval}};
    auto families = spec.families;
    if (spec.include_picov) families.push_back(Family::DRPICOV);
    for (Family family : families) {
      ThetaStack stack = build_stack(family, study, models, targets, spec.engine);
      SandwichResult sw = sandwich(stack);
      FamilyReplication fr;
      fr.mu0 = stack.theta_hat[0];
      fr.mu1 = stack.theta_hat[1];
      fr.de = fr.mu1 - fr.mu0;
      fr.se_mu0 = std::sqrt(std::max(0.0, sw.sigma(0, 0)));
      fr.se_mu1 = std::sqrt(std::max(0.0, sw.sigma(1, 1)));
      fr.se_de = std::sqrt(
          std::max(0.0, effect_variance(sw, mu_contrast(stack, targets[1], targets[0]))));
      auto covered = [&](double est, double se, double target) {
        auto [lo, hi] = wald_ci(est, se * se, spec.ci_level);
        return target >= lo && target <= hi;
      };
      fr.cover_mu0 = covered(fr.mu0, fr.se_mu0, truth.mu0);
      fr.cover_mu1 = covered(fr.mu1, fr.se_mu1, truth.mu1);
      fr.cover_de = covered(fr.de, fr.se_de, truth.de);
      result.families[family] = fr;
    }
    result.ok = true;
  } catch (const Error& e) {
    result.ok = false;
    result.error = e.what();
  }
  return result;
}

}  // namespace detail

/// Runs the full replication study for one scenario. Replications are
/// independent given (master_seed, index), so the summary is bit-identical
/// for any worker count. Replications whose fits fail are excluded and
/// counted; more than 1% failures aborts the run.
inline SimulationOutput run_replications(const ScenarioSpec& spec) {
  if (spec.replications < 1) throw ConfigError("replications must be >= 1");
  const auto maps = detail::scenario_maps(spec.scenario);
  const TrueValues truth = true_values(spec);

  SimulationOutput out;
  out.replications.resize(static_cast<std::size_t>(spec.replications));
  parallel_for(static_cast<std::size_t>(spec.replications), spec.workers,
               [&](std::size_t r) {
                 out.replications[r] = detail::run_one_replication(
                     spec, maps, truth, static_cast<int>(r));
               });

  SimulationSummary& summary = out.summary;
  summary.scenario = spec.scenario;
  summary.truth = truth;
  summary.replications = spec.replications;
  for (const auto& rep : out.replications) {
    if (!rep.ok) ++summary.failures;
  }
  if (summary.failures * 100 >= spec.replications) {
    throw FitError("replication failure rate " +
                   std::to_string(summary.failures) + "/" +
                   std::to_string(spec.replications) + " exceeds 1%");
  }

  auto families = spec.families;
  if (spec.include_picov) families.push_back(Family::DRPICOV);
  for (Family family : families) {
    struct Acc {
      std::vector<double> est, se;
      int covered = 0;
    };
    Acc acc[3];
    for (const auto& rep : out.replications) {
      if (!rep.ok) continue;
      const FamilyReplication& fr = rep.families.at(family);
      acc[0].est.push_back(fr.mu0); acc[0].se.push_back(fr.se_mu0);
      acc[1].est.push_back(fr.mu1); acc[1].se.push_back(fr.se_mu1);
      acc[2].est.push_back(fr.de);  acc[2].se.push_back(fr.se_de);
      acc[0].covered += fr.cover_mu0;
      acc[1].covered += fr.cover_mu1;
      acc[2].covered += fr.cover_de;
    }
    const char* names[3] = {"mu0", "mu1", "de"};
    const double truths[3] = {truth.mu0, truth.mu1, truth.de};
    for (int e = 0; e < 3; ++e) {
      SummaryRow row;
      row.family = family;
      row.estimand = names[e];
      row.truth = truths[e];
      row.n_reps = static_cast<int>(acc[e].est.size());
      double mean = 0.0;
      for (double v : acc[e].est) mean += v;
      mean /= std::max(1, row.n_reps);
      double var = 0.0;
      for (double v : acc[e].est) var += (v - mean) * (v - mean);
      var /= std::max(1, row.n_reps - 1);
      row.bias = mean - truths[e];
      row.sd = std::sqrt(var);
      double ase = 0.0;
      for (double v : acc[e].se) ase += v;
      row.ase = ase / std::max(1, row.n_reps);
      row.coverage = static_cast<double>(acc[e].covered) / std::max(1, row.n_reps);
      summary.rows.push_back(row);
    }
  }
  return out;
}

/// One row per family x estimand with the replication-study metrics.
inline void write_summary_csv(const SimulationSummary& summary,
                              const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "scenario,family,estimand,truth,bias,sd,ase,coverage,n_reps\n";
  for (const auto& row : summary.rows) {
    out << scenario_name(summary.scenario) << ',' << family_name(row.family)
        << ',' << row.estimand << ',' << format_double(row.truth) << ','
        << format_double(row.bias) << ',' << format_double(row.sd) << ','
        << format_double(row.ase) << ',' << format_double(row.coverage) << ','
        << row.n_reps << '\n';
  }
}

/// Long-format metrics, one row per (family, estimand, metric), ready for any
/// plotting tool.
inline void write_summary_long_csv(const SimulationSummary& summary,
                                   const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "scenario,family,estimand,metric,value\n";
  for (const auto& row : summary.rows) {
    const std::pair<const char*, double> metrics[] = {
        {"bias", row.bias},         {"abs_bias", std::fabs(row.bias)},
        {"sd", row.sd},             {"ase", row.ase},
        {"coverage", row.coverage},
    };
    for (const auto& [name, value] : metrics) {
      out << scenario_name(summary.scenario) << ',' << family_name(row.family)
          << ',' << row.estimand << ',' << name << ',' << format_double(value)
          << '\n';
    }
  }
}

}  // namespace spillover
