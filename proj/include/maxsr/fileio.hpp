#pragma once

#include <filesystem>
#include <string_view>

namespace maxsr {

// Writes `bytes` to a sibling temporary file and renames it over `path`, so
// readers never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace maxsr
