#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "spillover/data.hpp"
#include "spillover/errors.hpp"
#include "spillover/rng.hpp"
#include "spillover/util.hpp"

namespace spillover {

/// Product-Bernoulli allocation probability, carried in the log domain:
/// groups of up to ~100 individuals push the plain product below anything a
/// double can hold once combined with propensity denominators.
struct PolicyWeight {
  double log_value = 0.0;
  double value() const { return std::exp(log_value); }
};

/// log Pr_alpha(A = a) for the whole treatment vector. Empty vectors give the
/// empty product, probability 1.
inline PolicyWeight pi_full(std::span<const std::int8_t> a, Policy policy) {
  const double la = std::log(policy.alpha());
  const double l1a = std::log1p(-policy.alpha());
  long ones = 0;
  for (std::int8_t v : a) ones += v;
  const long n = static_cast<long>(a.size());
  return {static_cast<double>(ones) * la + static_cast<double>(n - ones) * l1a};
}

/// log Pr_alpha(A_{(-j)} = a_{(-j)}): the full-vector weight with position
/// j's factor removed.
inline PolicyWeight pi_minus(std::span<const std::int8_t> a, Eigen::Index j,
                             Policy policy) {
  if (j < 0 || j >= static_cast<Eigen::Index>(a.size())) {
    throw std::out_of_range("pi_minus: index " + std::to_string(j) +
                            " out of range for vector of length " +
                            std::to_string(a.size()));
  }
  PolicyWeight full = pi_full(a, policy);
  const double factor = a[static_cast<std::size_t>(j)]
                            ? std::log(policy.alpha())
                            : std::log1p(-policy.alpha());
  return {full.log_value - factor};
}

/// Exact policy average by literal enumeration of the free treatment
/// positions: neighbors only when `own` pins individual j, the whole vector
/// otherwise. Model requirement: double predict(group, treatments, j).
template <class Model>
double enumerated_policy_average(const Model& model, const GroupRecord& g,
                                 Eigen::Index j, std::optional<int> own,
                                 Policy policy, int enum_limit = 15) {
  const Eigen::Index n = g.size();
  if (j < 0 || j >= n) throw std::out_of_range("policy average: bad index j");
  const int free_count = static_cast<int>(own ? n - 1 : n);
  if (free_count > enum_limit) {
    throw CapabilityError(
        "exact policy average would enumerate 2^" + std::to_string(free_count) +
        " treatment vectors (limit 2^" + std::to_string(enum_limit) +
        "); use the Monte Carlo engine");
  }
  std::vector<Eigen::Index> free_pos;
  free_pos.reserve(static_cast<std::size_t>(free_count));
  for (Eigen::Index pos = 0; pos < n; ++pos) {
    if (!own || pos != j) free_pos.push_back(pos);
  }
  std::vector<std::int8_t> t(static_cast<std::size_t>(n), 0);
  if (own) t[static_cast<std::size_t>(j)] = static_cast<std::int8_t>(*own);

  const double la = std::log(policy.alpha());
  const double l1a = std::log1p(-policy.alpha());
  double total = 0.0;
  const std::uint64_t combos = std::uint64_t{1} << free_count;
  for (std::uint64_t mask = 0; mask < combos; ++mask) {
    int ones = 0;
    for (int b = 0; b < free_count; ++b) {
      const int bit = static_cast<int>((mask >> b) & 1u);
      t[static_cast<std::size_t>(free_pos[static_cast<std::size_t>(b)])] =
          static_cast<std::int8_t>(bit);
      ones += bit;
    }
    const double logw = ones * la + (free_count - ones) * l1a;
    total += std::exp(logw) * model.predict(g, std::span<const std::int8_t>(t), j);
  }
  return total;
}

/// Monte Carlo policy average: mc_draws i.i.d. Bernoulli(alpha) treatment
/// vectors, position j overwritten when `own` pins it. Deterministic given
/// the seed and unbiased for the exact sum. Optionally reports the standard
/// error of the Monte Carlo mean.
template <class Model>
double mc_policy_average(const Model& model, const GroupRecord& g,
                         Eigen::Index j, std::optional<int> own, Policy policy,
                         int mc_draws, std::uint64_t seed,
                         double* se_out = nullptr) {
  const Eigen::Index n = g.size();
  if (j < 0 || j >= n) throw std::out_of_range("policy average: bad index j");
  if (mc_draws < 1) throw ConfigError("mc_draws must be >= 1");
  Rng rng(seed);
  std::vector<std::int8_t> t(static_cast<std::size_t>(n), 0);
  double mean = 0.0, m2 = 0.0;
  for (int d = 0; d < mc_draws; ++d) {
    for (Eigen::Index pos = 0; pos < n; ++pos) {
      t[static_cast<std::size_t>(pos)] =
          static_cast<std::int8_t>(rng.bernoulli(policy.alpha()));
    }
    if (own) t[static_cast<std::size_t>(j)] = static_cast<std::int8_t>(*own);
    const double v = model.predict(g, std::span<const std::int8_t>(t), j);
    const double delta = v - mean;
    mean += delta / static_cast<double>(d + 1);
    m2 += delta * (v - mean);
  }
  if (se_out) {
    *se_out = (mc_draws > 1)
                  ? std::sqrt(m2 / (static_cast<double>(mc_draws) *
                                    static_cast<double>(mc_draws - 1)))
                  : 0.0;
  }
  return mean;
}

}  // namespace spillover
