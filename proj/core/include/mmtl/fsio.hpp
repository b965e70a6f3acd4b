#pragma once

#include <string>

namespace mmtl {

/// Whole-file read; throws std::runtime_error with the path on failure.
std::string read_file(const std::string& path);

/// Write via a temp file in the same directory plus rename, so readers never
/// observe a half-written artifact.
void atomic_write_file(const std::string& path, const std::string& content);

}  // namespace mmtl
