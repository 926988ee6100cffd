#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace exp3cil {

enum class ErrorCode {
  kInvalidActionSpace,
  kInvalidParameter,
  kRewardRange,
  kImportanceWeight,
  kInvalidGrid,
  kIndex,
  kNotFound,
  kShape,
  kDegenerateCosine,
  kDomain,
  kLabel,
  kNumeric,
  kInsufficientData,
  kEmptyEvaluation,
  kBudget,
  kSchedule,
  kParse,
  kBalance,
  kEmptyRollout,
  kComparison,
  kConfig,
  kProtocol,
  kIo,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidActionSpace: return "invalid-action-space";
    case ErrorCode::kInvalidParameter: return "invalid-parameter";
    case ErrorCode::kRewardRange: return "reward-range";
    case ErrorCode::kImportanceWeight: return "importance-weight";
    case ErrorCode::kInvalidGrid: return "invalid-grid";
    case ErrorCode::kIndex: return "index";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kDegenerateCosine: return "degenerate-cosine";
    case ErrorCode::kDomain: return "domain";
    case ErrorCode::kLabel: return "label";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kInsufficientData: return "insufficient-data";
    case ErrorCode::kEmptyEvaluation: return "empty-evaluation";
    case ErrorCode::kBudget: return "budget";
    case ErrorCode::kSchedule: return "schedule";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kBalance: return "balance";
    case ErrorCode::kEmptyRollout: return "empty-rollout";
    case ErrorCode::kComparison: return "comparison";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kProtocol: return "protocol";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  /// Re-raise with extra context prepended, keeping the code.
  [[noreturn]] static void rethrow_with_context(const Error& e, const std::string& context) {
    throw Error(e.code(), context + ": " + strip_prefix(e));
  }

 private:
  static std::string strip_prefix(const Error& e) {
    std::string msg = e.what();
    const auto prefix = std::string(to_string(e.code())) + ": ";
    if (msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
    return msg;
  }

  ErrorCode code_;
};

}  // namespace exp3cil
