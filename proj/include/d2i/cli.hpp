#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace d2i::cli {

inline constexpr const char* kVersion = "d2i 0.1.0";
inline constexpr const char* kManifestSchema = "d2i-manifest v1";

/// Runs one subcommand. `args` excludes the program name. Normal output goes
/// to `out`; failures print a single JSON line {"error":..., "message":...}
/// to `err` and return nonzero.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// 64-bit FNV-1a over a file's bytes, as 16 lowercase hex digits.
std::string file_digest(const std::filesystem::path& path);

/// Default manifest location for an output file.
std::filesystem::path manifest_path_for(const std::filesystem::path& output);

}  // namespace d2i::cli
