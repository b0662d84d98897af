#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spillover/data.hpp"
#include "spillover/util.hpp"

namespace spillover {

/// Column-name mapping for the long-format study CSV: one row per individual,
/// groups identified by a shared id column. Covariate columns default to
/// every column not otherwise claimed, in file order.
struct CsvSchema {
  std::string group_col = "group";
  std::string treatment_col = "treatment";
  std::string outcome_col = "outcome";
  std::optional<std::vector<std::string>> covariate_cols;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line,
                                               std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) {
    throw DataError("unterminated quote on line " + std::to_string(line_no));
  }
  fields.push_back(cur);
  return fields;
}

inline double parse_double(const std::string& field, const char* what,
                           std::size_t row) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc{} || ptr != field.data() + field.size() ||
      !std::isfinite(v)) {
    throw DataError(std::string("row ") + std::to_string(row) +
                    ": cannot parse " + what + " value '" + field + "'");
  }
  return v;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

}  // namespace detail

/// Loads and validates a study from CSV. Rows are grouped by the group-id
/// column, preserving file order within each group; row indices in error
/// messages are 1-based data rows (header excluded).
inline Study load_study(const std::filesystem::path& path,
                        const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line)) {
    throw DataError("'" + path.string() + "' is empty (header row required)");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = detail::split_csv_line(line, 1);

  std::map<std::string, std::size_t> col_index;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!col_index.emplace(header[c], c).second) {
      throw DataError("duplicate column '" + header[c] + "' in header");
    }
  }
  auto require = [&](const std::string& name) {
    auto it = col_index.find(name);
    if (it == col_index.end()) {
      throw DataError("missing column '" + name + "' in '" + path.string() +
                      "'");
    }
    return it->second;
  };
  const std::size_t gid_col = require(schema.group_col);
  const std::size_t trt_col = require(schema.treatment_col);
  const std::size_t out_col = require(schema.outcome_col);

  std::vector<std::pair<std::string, std::size_t>> cov_cols;
  if (schema.covariate_cols) {
    for (const auto& name : *schema.covariate_cols) {
      cov_cols.emplace_back(name, require(name));
    }
  } else {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (c != gid_col && c != trt_col && c != out_col) {
        cov_cols.emplace_back(header[c], c);
      }
    }
  }

  struct Rows {
    std::vector<std::int8_t> treatments;
    std::vector<double> outcomes;
    std::vector<double> covariates;  // row-major
  };
  std::vector<std::string> group_order;
  std::map<std::string, Rows> by_group;

  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row;
    auto fields = detail::split_csv_line(line, row + 1);
    if (fields.size() != header.size()) {
      throw DataError("row " + std::to_string(row) + ": expected " +
                      std::to_string(header.size()) + " fields, found " +
                      std::to_string(fields.size()));
    }
    const std::string& gid = fields[gid_col];
    auto [it, inserted] = by_group.try_emplace(gid);
    if (inserted) group_order.push_back(gid);
    Rows& rows = it->second;

    const std::string& trt = fields[trt_col];
    int t = -1;
    auto [p, ec] = std::from_chars(trt.data(), trt.data() + trt.size(), t);
    if (ec != std::errc{} || p != trt.data() + trt.size() || (t != 0 && t != 1)) {
      throw DataError("row " + std::to_string(row) +
                      ": treatment must be 0 or 1, got '" + trt + "'");
    }
    rows.treatments.push_back(static_cast<std::int8_t>(t));
    rows.outcomes.push_back(detail::parse_double(fields[out_col], "outcome", row));
    for (const auto& [name, c] : cov_cols) {
      rows.covariates.push_back(
          detail::parse_double(fields[c], ("covariate '" + name + "'").c_str(), row));
    }
  }

  Study study;
  for (const auto& [name, c] : cov_cols) study.covariate_names.push_back(name);
  const auto p = static_cast<Eigen::Index>(cov_cols.size());
  for (const auto& gid : group_order) {
    const Rows& rows = by_group[gid];
    GroupRecord g;
    g.group_id = gid;
    const auto n = static_cast<Eigen::Index>(rows.outcomes.size());
    g.treatments = rows.treatments;
    g.outcomes = Eigen::Map<const Eigen::VectorXd>(rows.outcomes.data(), n);
    g.covariates.resize(n, p);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index c = 0; c < p; ++c) {
        g.covariates(j, c) = rows.covariates[static_cast<std::size_t>(j * p + c)];
      }
    }
    study.groups.push_back(std::move(g));
  }
  validate_study(study);
  return study;
}

/// Writes a study back to CSV. Doubles use the shortest decimal
/// representation that round-trips, so load(save(study)) == study bit-exactly.
inline void save_study(const Study& study, const std::filesystem::path& path,
                       const CsvSchema& schema = {}) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << detail::csv_escape(schema.group_col) << ','
      << detail::csv_escape(schema.treatment_col) << ','
      << detail::csv_escape(schema.outcome_col);
  for (const auto& name : study.covariate_names) {
    out << ',' << detail::csv_escape(name);
  }
  out << '\n';
  for (const auto& g : study.groups) {
    for (Eigen::Index j = 0; j < g.size(); ++j) {
      out << detail::csv_escape(g.group_id) << ',' << int(g.treatments[j])
          << ',' << format_double(g.outcomes[j]);
      for (Eigen::Index c = 0; c < g.covariates.cols(); ++c) {
        out << ',' << format_double(g.covariates(j, c));
      }
      out << '\n';
    }
  }
}

}  // namespace spillover
