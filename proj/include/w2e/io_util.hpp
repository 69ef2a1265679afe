#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace w2e {

// Whole-file helpers; all raise IoError on failure.
std::vector<std::uint8_t> read_file_bytes(const std::string& path);
std::string read_file_text(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);
void write_file_text(const std::string& path, const std::string& text);

}  // namespace w2e
