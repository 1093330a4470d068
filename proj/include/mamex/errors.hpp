// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mamex {

// Configuration problems: unknown keys, invalid values, structural mismatch
// between a checkpoint and the requested model.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Dataset problems: unreadable or malformed files, missing features,
// integrity failures.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mamex
