#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace spillover {

/// Error taxonomy shared by the library and the CLI. The enum value doubles
/// as the process exit code so failure classes are machine-distinguishable.
enum class ErrorClass : int {
  internal = 1,
  config = 2,      // bad run configuration, feature-map grammar, invalid alpha
  data = 3,        // CSV schema/parse problems, study invariant violations
  fit = 4,         // non-convergence, singular designs, singular sandwich
  capability = 5,  // request exceeds an enumeration/cost guard
  contract = 6,    // model/estimator combination misuse (e.g. (a,alpha) mismatch)
};

inline const char* error_class_name(ErrorClass c) {
  switch (c) {
    case ErrorClass::config: return "config";
    case ErrorClass::data: return "data";
    case ErrorClass::fit: return "fit";
    case ErrorClass::capability: return "capability";
    case ErrorClass::contract: return "contract";
    default: return "internal";
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& message)
      : std::runtime_error(message), cls_(cls) {}
  ErrorClass error_class() const { return cls_; }
  int exit_code() const { return static_cast<int>(cls_); }

 private:
  ErrorClass cls_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorClass::config, m) {}
};

struct DataError : Error {
  explicit DataError(const std::string& m) : Error(ErrorClass::data, m) {}
};

struct FitError : Error {
  explicit FitError(const std::string& m, std::vector<double> trace = {})
      : Error(ErrorClass::fit, m), objective_trace(std::move(trace)) {}
  /// Objective values per optimizer iteration, when the failure came from an
  /// iterative fit.
  std::vector<double> objective_trace;
};

struct CapabilityError : Error {
  explicit CapabilityError(const std::string& m)
      : Error(ErrorClass::capability, m) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& m)
      : Error(ErrorClass::contract, m) {}
};

}  // namespace spillover
