#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace treeshift {

// Bad input: malformed files, inconsistent labels, parameters out of range.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Newick syntax errors carry the byte offset where parsing stopped.
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t position)
      : ValidationError(what + " (at position " + std::to_string(position) + ")"),
        position_(position) {}

  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

// Numerical breakdown: singular covariance, quadrature or root finding that
// did not reach its tolerance, likelihood monotonicity violated.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Two unrelated shifts produced the same mean value.
class HomoplasyError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace treeshift
