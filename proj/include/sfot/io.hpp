#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <cstdint>

namespace sfot {

/// Writes to a sibling temp file and renames over `path`, so readers never
/// observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace sfot
