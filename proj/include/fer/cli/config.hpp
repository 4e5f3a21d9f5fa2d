#pragma once

// Flat `key = value` configuration for training runs. Blank lines and lines
// starting with '#' are ignored.
//
//   learning_rate, beta1, beta2, epsilon, epochs, batch_size, seed, preset,
//   augment.max_translation, augment.max_rotation, augment.expansion

#include <istream>
#include <map>
#include <string>

#include "fer/training.hpp"

namespace fer::cli {

/// Throws std::invalid_argument naming the offending line.
std::map<std::string, std::string> parse_config(std::istream& in);

/// Applies every entry onto `config`; unknown keys and malformed values throw.
void apply_config(TrainConfig& config, const std::map<std::string, std::string>& entries);

/// Round-trippable snapshot of every field.
std::string format_config(const TrainConfig& config);

}  // namespace fer::cli
