#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace emosup {

// FNV-1a, 64 bit. Used to derive per-key random streams and split tags.
std::uint64_t fnv1a64(std::string_view bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);

std::uint64_t mix_seed(std::uint64_t seed, std::string_view key);

// Hex SHA-1 of "blob <n>\0<content>", the same digest `git hash-object`
// prints for the content.
std::string git_blob_hash(std::string_view content);

std::string git_blob_hash_file(const std::filesystem::path& path);

// Hash of a flat double buffer, byte-exact.
std::string hash_doubles(std::span<const double> values);

}  // namespace emosup
