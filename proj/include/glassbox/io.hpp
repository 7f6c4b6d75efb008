#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace glassbox::io {

// Writes to "<path>.tmp" and renames over `path`, so readers never observe a
// partially written file. Errors carry the path.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

std::string read_text_file(const std::filesystem::path& path);
std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path);

// Shortest round-trip decimal representation.
std::string format_real(double value);

// Fixed two decimals, as used for percentages in reports.
std::string format_fixed(double value, int decimals = 2);

}  // namespace glassbox::io
