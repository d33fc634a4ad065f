#pragma once

#include <stdexcept>
#include <string>

namespace roidiff {

// Bad run configuration (unparsable file, contradictory settings, missing
// manifest). CLI maps this to a nonzero exit with the message on stderr.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Archive/checkpoint problems: wrong magic, unknown format version, or a
// checkpoint whose config does not match the requested operation.
class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace roidiff
