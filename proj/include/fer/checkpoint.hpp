#pragma once

// Binary checkpoint layout (all integers little-endian):
//   "FERM" | version u32 | fingerprint (8 bytes) |
//   per tensor, sorted by name: name_len u32 | name | rank u32 | dims u32[rank] | f32[prod(dims)]
// The fingerprint is a 64-bit FNV-1a digest of the ordered (name, shape) list.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "fer/model.hpp"

namespace fer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::uint64_t architecture_fingerprint(const ArchConfig& arch);

template <typename T>
std::vector<std::uint8_t> save_checkpoint(const FerNetwork<T>& net);

/// Throws CheckpointError on bad magic/version, fingerprint mismatch,
/// truncation, trailing bytes or non-finite values.
template <typename T>
FerNetwork<T> load_checkpoint(std::span<const std::uint8_t> bytes, const ArchConfig& arch);

std::uint64_t read_fingerprint(std::span<const std::uint8_t> bytes);

/// The built-in preset whose fingerprint matches, if any.
std::optional<ArchConfig> detect_architecture(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace fer
