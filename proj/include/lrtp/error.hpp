// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace lrtp {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

// An extent is not divisible by the requested number of parts (TP degree).
struct DivisibilityError : Error {
  using Error::Error;
};

struct PlanError : Error {
  using Error::Error;
};

// Cross-rank divergence detected while executing a plan.
struct SimulationFault : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace lrtp
