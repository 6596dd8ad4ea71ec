#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lorank {

// Failure categories. The CLI maps each to an exit code and prints the
// class name on a single stderr line.
enum class ErrorClass {
  Config,
  CapExceeded,
  InputMissing,
  Domain,
  DimensionMismatch,
  Format,
  RankDeficient,
  NotConverged,
  Infeasible,
  Undefined,
};

std::string_view to_string(ErrorClass cls);

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& message)
      : std::runtime_error(message), cls_(cls) {}

  ErrorClass error_class() const noexcept { return cls_; }

 private:
  ErrorClass cls_;
};

// Raised by svd_align and everything built on it when u v^T has fewer than r
// singular values above the rank tolerance.
class RankDeficientError : public Error {
 public:
  RankDeficientError(int effective_rank, const std::string& message)
      : Error(ErrorClass::RankDeficient, message),
        effective_rank_(effective_rank) {}

  int effective_rank() const noexcept { return effective_rank_; }

 private:
  int effective_rank_;
};

// No rank satisfies the capacity condition; carries the best capacity reached.
class InfeasibleError : public Error {
 public:
  InfeasibleError(double max_capacity, const std::string& message)
      : Error(ErrorClass::Infeasible, message), max_capacity_(max_capacity) {}

  double max_capacity() const noexcept { return max_capacity_; }

 private:
  double max_capacity_;
};

[[noreturn]] inline void fail(ErrorClass cls, const std::string& message) {
  throw Error(cls, message);
}

inline void require(bool condition, ErrorClass cls, const std::string& message) {
  if (!condition) fail(cls, message);
}

}  // namespace lorank
