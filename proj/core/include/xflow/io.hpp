#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace xflow {

/// Whole-file read; throws ValidationError when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

/// Writes via a temporary sibling and rename, so readers never observe a
/// partial file. Throws ValidationError when the path is not writable.
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace xflow
