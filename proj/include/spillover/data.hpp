#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "spillover/errors.hpp"

namespace spillover {

/// One group's observed data: covariate rows, binary treatment vector and
/// outcome vector, all of length N_i. Immutable by convention after load.
struct GroupRecord {
  std::string group_id;
  Eigen::MatrixXd covariates;          // N_i x p, row j = covariates of individual j
  std::vector<std::int8_t> treatments; // entries 0/1
  Eigen::VectorXd outcomes;

  Eigen::Index size() const { return outcomes.size(); }
  std::span<const std::int8_t> treatment_span() const {
    return {treatments.data(), treatments.size()};
  }
};

struct Study {
  std::vector<GroupRecord> groups;
  std::vector<std::string> covariate_names;

  Eigen::Index group_count() const {
    return static_cast<Eigen::Index>(groups.size());
  }
  Eigen::Index covariate_count() const {
    return static_cast<Eigen::Index>(covariate_names.size());
  }
  Eigen::Index total_individuals() const {
    Eigen::Index n = 0;
    for (const auto& g : groups) n += g.size();
    return n;
  }
};

/// Indices of study.groups sorted by group_id. All estimator and inference
/// accumulations run in this order, so population-level results are
/// bit-identical under any permutation of the input groups.
inline std::vector<std::size_t> sorted_order(const Study& study) {
  std::vector<std::size_t> order(study.groups.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return study.groups[a].group_id < study.groups[b].group_id;
  });
  return order;
}

/// Counterfactual allocation policy: everyone treated independently with
/// probability alpha.
class Policy {
 public:
  explicit Policy(double alpha) : alpha_(alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw ConfigError("policy alpha must lie strictly in (0,1), got " +
                        std::to_string(alpha));
    }
  }
  double alpha() const { return alpha_; }
  friend bool operator==(Policy a, Policy b) { return a.alpha_ == b.alpha_; }

 private:
  double alpha_;
};

enum class EffectKind { DE, IE, TE, OE };

inline const char* effect_kind_name(EffectKind k) {
  switch (k) {
    case EffectKind::DE: return "DE";
    case EffectKind::IE: return "IE";
    case EffectKind::TE: return "TE";
    case EffectKind::OE: return "OE";
  }
  return "?";
}

/// DE takes a single policy (alpha1 == alpha0 by convention); IE/TE/OE
/// contrast two policies.
struct EffectRequest {
  EffectKind kind;
  Policy alpha1;
  Policy alpha0;

  static EffectRequest direct(Policy alpha) {
    return {EffectKind::DE, alpha, alpha};
  }
  static EffectRequest of(EffectKind kind, Policy a1, Policy a0) {
    if (kind == EffectKind::DE && !(a1 == a0)) {
      throw ConfigError("direct effect takes a single alpha");
    }
    return {kind, a1, a0};
  }
};

struct ValidationIssue {
  std::string group_id;  // empty for study-level issues
  std::string message;
};

/// Checks every GroupRecord and Study invariant and reports all violations,
/// not just the first.
inline std::vector<ValidationIssue> validation_report(const Study& study) {
  std::vector<ValidationIssue> issues;
  const auto p = study.covariate_count();
  if (study.groups.empty()) {
    issues.push_back({"", "study contains no groups"});
  }
  std::set<std::string> seen;
  for (const auto& g : study.groups) {
    if (!seen.insert(g.group_id).second) {
      issues.push_back({g.group_id, "duplicate group id"});
    }
    const auto n = g.outcomes.size();
    if (n < 1) issues.push_back({g.group_id, "group is empty"});
    if (static_cast<Eigen::Index>(g.treatments.size()) != n ||
        g.covariates.rows() != n) {
      issues.push_back(
          {g.group_id,
           "covariate rows (" + std::to_string(g.covariates.rows()) +
               "), treatments (" + std::to_string(g.treatments.size()) +
               ") and outcomes (" + std::to_string(n) + ") differ in length"});
    }
    if (g.covariates.cols() != p) {
      issues.push_back({g.group_id,
                        "covariate dimension " +
                            std::to_string(g.covariates.cols()) +
                            " does not match study dimension " +
                            std::to_string(p)});
    }
    for (std::size_t j = 0; j < g.treatments.size(); ++j) {
      if (g.treatments[j] != 0 && g.treatments[j] != 1) {
        issues.push_back({g.group_id, "treatment entry " + std::to_string(j) +
                                          " is not 0/1"});
      }
    }
    if (!g.outcomes.allFinite()) {
      issues.push_back({g.group_id, "non-finite outcome value"});
    }
    if (g.covariates.size() > 0 && !g.covariates.allFinite()) {
      issues.push_back({g.group_id, "non-finite covariate value"});
    }
  }
  return issues;
}

/// Throws DataError listing every violation; no-op on a valid study.
inline void validate_study(const Study& study) {
  auto issues = validation_report(study);
  if (issues.empty()) return;
  std::string msg = "study validation failed:";
  for (const auto& issue : issues) {
    msg += "\n  ";
    if (!issue.group_id.empty()) msg += "group '" + issue.group_id + "': ";
    msg += issue.message;
  }
  throw DataError(msg);
}

}  // namespace spillover
