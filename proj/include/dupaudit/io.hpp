#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dupaudit {

// Throws IoError when the file cannot be read.
std::string read_file(const std::filesystem::path& path);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it into place, creating parent
// directories. Readers never observe a half-written artifact.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace dupaudit
