#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gidd {

inline constexpr int kCliSchemaVersion = 1;

enum ExitCode : int {
    kExitOk = 0,
    kExitValidation = 1,
    kExitNumerical = 2,
    kExitUsage = 64,
};

// args excludes the program name. Artifacts go to --out, to $GIDD_OUT_DIR
// when --out is absent, or to `out` otherwise. Diagnostics go to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

// Writes path.tmp and renames it over path.
void write_file_atomic(const std::string& path, const std::string& content);

} // namespace gidd
