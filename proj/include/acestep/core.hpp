#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace acestep {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

enum class ErrorKind {
  kInvalidArgument,
  kShapeMismatch,
  kBudgetExceeded,
  kUnknownSpeaker,
  kNonFinite,
  kFormatVersion,
  kTruncated,
  kCorrupt,
  kIo,
  kConfig,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kShapeMismatch: return "shape_mismatch";
    case ErrorKind::kBudgetExceeded: return "budget_exceeded";
    case ErrorKind::kUnknownSpeaker: return "unknown_speaker";
    case ErrorKind::kNonFinite: return "non_finite";
    case ErrorKind::kFormatVersion: return "format_version";
    case ErrorKind::kTruncated: return "truncated";
    case ErrorKind::kCorrupt: return "corrupt";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kConfig: return "config";
  }
  return "unknown";
}

// Single exception type for the library; `kind()` is what callers branch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

inline std::string shape_str(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

// Length budgets carried by the conditioning and denoiser paths.
inline constexpr int kMaxLyricTokens = 4096;
inline constexpr int kMaxTextTokens = 256;
inline constexpr int kMaxLatentFrames = 2584;

}  // namespace acestep
