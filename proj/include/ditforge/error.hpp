#pragma once

#include <stdexcept>
#include <string>

namespace ditforge {

// Domain-level failure (bad config, infeasible plan, corrupt input).
// Distinct from std::logic_error so the CLI can map it to exit code 1.
class DomainError : public std::runtime_error {
 public:
  explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

class ValidationError : public DomainError {
 public:
  explicit ValidationError(const std::string& what) : DomainError(what) {}
};

class FrameCorruptError : public DomainError {
 public:
  explicit FrameCorruptError(const std::string& what) : DomainError(what) {}
};

}  // namespace ditforge
