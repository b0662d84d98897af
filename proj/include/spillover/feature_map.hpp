#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "spillover/data.hpp"
#include "spillover/errors.hpp"

namespace spillover {

enum class CovTransform : std::uint8_t { Identity, Abs };

struct CovFactor {
  Eigen::Index column;
  CovTransform transform;
  std::string name;  // covariate name as declared in the study
};

enum class NeighborSummary : std::uint8_t {
  None,
  Proportion,   // share treated in the whole group, individual j included
  NeighborSum,  // number treated among the other group members
};

/// One regressor: a product of an optional own-treatment factor, at most one
/// neighbor-treatment summary, and covariate transforms of individual j.
struct FeatureTerm {
  bool intercept = false;
  bool own_treatment = false;
  NeighborSummary neighbor = NeighborSummary::None;
  std::vector<CovFactor> covariates;

  bool treatment_dependent() const {
    return own_treatment || neighbor != NeighborSummary::None;
  }

  std::string name() const {
    if (intercept) return "1";
    std::string out;
    auto append = [&](const std::string& f) {
      if (!out.empty()) out += "*";
      out += f;
    };
    if (own_treatment) append("own");
    if (neighbor == NeighborSummary::Proportion) append("prop");
    if (neighbor == NeighborSummary::NeighborSum) append("nsum");
    for (const auto& c : covariates) {
      append(c.transform == CovTransform::Abs ? "abs(" + c.name + ")" : c.name);
    }
    return out;
  }

  /// Key that identifies algebraically equal terms (factor order ignored).
  std::string canonical_key() const {
    if (intercept) return "1";
    std::vector<std::string> parts;
    if (own_treatment) parts.push_back("own");
    if (neighbor == NeighborSummary::Proportion) parts.push_back("prop");
    if (neighbor == NeighborSummary::NeighborSum) parts.push_back("nsum");
    for (const auto& c : covariates) {
      parts.push_back((c.transform == CovTransform::Abs ? "abs#" : "id#") +
                      std::to_string(c.column));
    }
    std::sort(parts.begin(), parts.end());
    std::string key;
    for (const auto& p : parts) key += p + "|";
    return key;
  }
};

/// Declarative regressor list over named covariates. Text grammar: terms
/// separated by '+', factors inside a term separated by '*'. Factors:
///   1            intercept (must appear exactly once, on its own)
///   own          individual's own treatment indicator
///   prop         group treatment proportion (includes the individual)
///   nsum         treated count among the other group members
///   name         covariate value
///   abs(name)    absolute value of a covariate
class FeatureMap {
 public:
  FeatureMap() = default;

  static FeatureMap from_terms(std::vector<FeatureTerm> terms) {
    FeatureMap fm;
    fm.terms_ = std::move(terms);
    fm.validate();
    return fm;
  }

  static FeatureMap parse(const std::string& text,
                          const std::vector<std::string>& covariate_names) {
    std::vector<FeatureTerm> terms;
    for (const auto& term_text : split(text, '+')) {
      FeatureTerm term;
      bool saw_one = false;
      auto factors = split(term_text, '*');
      if (factors.empty() || (factors.size() == 1 && factors[0].empty())) {
        throw ConfigError("empty term in feature map '" + text + "'");
      }
      for (const auto& f : factors) {
        if (f == "1") {
          saw_one = true;
        } else if (f == "own") {
          if (term.own_treatment) {
            throw ConfigError("duplicate 'own' factor in term '" + term_text + "'");
          }
          term.own_treatment = true;
        } else if (f == "prop" || f == "nsum") {
          if (term.neighbor != NeighborSummary::None) {
            throw ConfigError("at most one neighbor summary per term: '" +
                              term_text + "'");
          }
          term.neighbor = (f == "prop") ? NeighborSummary::Proportion
                                        : NeighborSummary::NeighborSum;
        } else {
          CovTransform tr = CovTransform::Identity;
          std::string name = f;
          if (f.size() > 5 && f.substr(0, 4) == "abs(" && f.back() == ')') {
            tr = CovTransform::Abs;
            name = f.substr(4, f.size() - 5);
          }
          auto it = std::find(covariate_names.begin(), covariate_names.end(), name);
          if (it == covariate_names.end()) {
            throw ConfigError("unknown covariate '" + name + "' in term '" +
                              term_text + "'");
          }
          term.covariates.push_back(
              {static_cast<Eigen::Index>(it - covariate_names.begin()), tr, name});
        }
      }
      if (saw_one) {
        if (term.treatment_dependent() || !term.covariates.empty() ||
            factors.size() > 1) {
          throw ConfigError("'1' must stand alone as the intercept term");
        }
        term.intercept = true;
      }
      terms.push_back(std::move(term));
    }
    return from_terms(std::move(terms));
  }

  const std::vector<FeatureTerm>& terms() const { return terms_; }
  Eigen::Index dimension() const {
    return static_cast<Eigen::Index>(terms_.size());
  }

  std::vector<std::string> term_names() const {
    std::vector<std::string> names;
    names.reserve(terms_.size());
    for (const auto& t : terms_) names.push_back(t.name());
    return names;
  }

  std::string to_string() const {
    std::string out;
    for (const auto& t : terms_) {
      if (!out.empty()) out += " + ";
      out += t.name();
    }
    return out;
  }

  /// True when every term carries at most one treatment-dependent factor, so
  /// the regression surface is affine in the treatment vector.
  bool affine_in_neighbors() const {
    for (const auto& t : terms_) {
      if (t.own_treatment && t.neighbor != NeighborSummary::None) return false;
    }
    return true;
  }

  bool uses_treatment() const {
    return std::any_of(terms_.begin(), terms_.end(),
                       [](const FeatureTerm& t) { return t.treatment_dependent(); });
  }

  /// Rejects own/neighbor terms; propensity regressors are per-individual
  /// functions of covariates only.
  void require_individual_only() const {
    for (const auto& t : terms_) {
      if (t.treatment_dependent()) {
        throw ConfigError("term '" + t.name() +
                          "' is not allowed in a propensity feature map");
      }
    }
  }

  double term_value(const FeatureTerm& t, const GroupRecord& g, Eigen::Index j,
                    std::span<const std::int8_t> treat) const {
    if (t.intercept) return 1.0;
    double v = 1.0;
    if (t.own_treatment) v *= static_cast<double>(treat[static_cast<std::size_t>(j)]);
    if (t.neighbor != NeighborSummary::None) {
      double total = 0.0;
      for (std::int8_t a : treat) total += a;
      if (t.neighbor == NeighborSummary::Proportion) {
        v *= total / static_cast<double>(g.size());
      } else {
        v *= total - static_cast<double>(treat[static_cast<std::size_t>(j)]);
      }
    }
    for (const auto& c : t.covariates) {
      double x = g.covariates(j, c.column);
      v *= (c.transform == CovTransform::Abs) ? std::fabs(x) : x;
    }
    return v;
  }

  void row(const GroupRecord& g, Eigen::Index j,
           std::span<const std::int8_t> treat,
           Eigen::Ref<Eigen::VectorXd> out) const {
    for (Eigen::Index t = 0; t < dimension(); ++t) {
      out[t] = term_value(terms_[static_cast<std::size_t>(t)], g, j, treat);
    }
  }

  Eigen::VectorXd row(const GroupRecord& g, Eigen::Index j,
                      std::span<const std::int8_t> treat) const {
    Eigen::VectorXd out(dimension());
    row(g, j, treat, out);
    return out;
  }

  /// Expected regressor row when the other group members draw treatment
  /// independently Bernoulli(alpha). `own` pins individual j's treatment;
  /// nullopt lets it follow the policy too. Exact for this grammar: each term
  /// is multilinear with at most one neighbor summary, and the own*summary
  /// cross moments have closed forms.
  Eigen::VectorXd expected_row(const GroupRecord& g, Eigen::Index j,
                               std::optional<int> own, double alpha) const {
    const double n = static_cast<double>(g.size());
    Eigen::VectorXd out(dimension());
    for (Eigen::Index ti = 0; ti < dimension(); ++ti) {
      const FeatureTerm& t = terms_[static_cast<std::size_t>(ti)];
      if (t.intercept) {
        out[ti] = 1.0;
        continue;
      }
      double v = 1.0;
      if (own) {
        const double a = static_cast<double>(*own);
        if (t.own_treatment) v *= a;
        if (t.neighbor == NeighborSummary::Proportion) {
          v *= (a + (n - 1.0) * alpha) / n;
        } else if (t.neighbor == NeighborSummary::NeighborSum) {
          v *= (n - 1.0) * alpha;
        }
      } else {
        if (t.own_treatment && t.neighbor == NeighborSummary::Proportion) {
          v *= (alpha + (n - 1.0) * alpha * alpha) / n;  // E[A_j * mean(A)]
        } else if (t.own_treatment && t.neighbor == NeighborSummary::NeighborSum) {
          v *= alpha * (n - 1.0) * alpha;
        } else {
          if (t.own_treatment) v *= alpha;
          if (t.neighbor == NeighborSummary::Proportion) v *= alpha;
          if (t.neighbor == NeighborSummary::NeighborSum) v *= (n - 1.0) * alpha;
        }
      }
      for (const auto& c : t.covariates) {
        double x = g.covariates(j, c.column);
        v *= (c.transform == CovTransform::Abs) ? std::fabs(x) : x;
      }
      out[ti] = v;
    }
    return out;
  }

  /// Regressor list for a fit restricted to the stratum own-treatment == a:
  /// own factors are replaced by the constant a, vanished terms are dropped
  /// and duplicates merged. Neighbor summaries are kept as-is; evaluation
  /// still reads position j of the supplied treatment vector, which stratum
  /// fits pin to a.
  FeatureMap frozen_own(int a) const {
    std::vector<FeatureTerm> out;
    std::set<std::string> keys;
    for (FeatureTerm t : terms_) {
      if (t.own_treatment) {
        if (a == 0) continue;
        t.own_treatment = false;
        if (t.neighbor == NeighborSummary::None && t.covariates.empty()) {
          t.intercept = true;
        }
      }
      if (keys.insert(t.canonical_key()).second) out.push_back(std::move(t));
    }
    return from_terms(std::move(out));
  }

 private:
  static std::vector<std::string> split(const std::string& text, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : text) {
      if (c == sep) {
        parts.push_back(trim(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    parts.push_back(trim(cur));
    return parts;
  }

  static std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t");
    auto e = s.find_last_not_of(" \t");
    return (b == std::string::npos) ? "" : s.substr(b, e - b + 1);
  }

  void validate() const {
    int intercepts = 0;
    std::set<std::string> keys;
    for (const auto& t : terms_) {
      if (t.intercept) ++intercepts;
      if (!keys.insert(t.canonical_key()).second) {
        throw ConfigError("duplicate term '" + t.name() + "' in feature map");
      }
    }
    if (intercepts != 1) {
      throw ConfigError("feature map must contain exactly one intercept term");
    }
  }

  std::vector<FeatureTerm> terms_;
};

}  // namespace spillover
