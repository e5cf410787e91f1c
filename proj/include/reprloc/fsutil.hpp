#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace reprloc {

// Writes bytes to a sibling temp file and renames it over path, so readers
// never observe a partially written file.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);

std::string read_file_bytes(const std::filesystem::path& path);

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file_hex(const std::filesystem::path& path);

}  // namespace reprloc
