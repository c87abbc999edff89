#pragma once

#include <stdexcept>
#include <string>

namespace mrvi {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Value outside the mathematical domain of an operation (log of x <= 0, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Invalid argument that is neither a shape nor a domain problem (empty sets, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A dataset container failed validation. The message names the offending file.
class CorruptDatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptCheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite gradient during training; aborts the epoch.
class NumericalAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mrvi
