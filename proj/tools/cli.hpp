#pragma once

#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kevo::cli {

/// Exit statuses: 0 success, 1 data or validation error, 2 usage error.
enum ExitCode : int { kSuccess = 0, kDataError = 1, kUsageError = 2 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kManifestName = "manifest.json";

/// Runs one command line (without the program name). Diagnostics go to `err`,
/// short progress lines to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Lowercase hex SHA-256 of a file's contents.
std::string sha256_file(const std::string& path);

}  // namespace kevo::cli
