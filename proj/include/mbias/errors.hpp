#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mbias {

/// Precondition or shape contract broken by the caller.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A NaN or Inf appeared in a computation that started from finite inputs.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t op_id)
      : std::runtime_error(what), op_id_(op_id) {}

  std::size_t op_id() const noexcept { return op_id_; }

 private:
  std::size_t op_id_;
};

/// Synthetic data generation produced a split that violates its own spec.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Majority attribute of a class is not unique.
class MajorityTieError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mbias
