#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace maskveil::cli {

/// Process exit codes.
enum ExitCode : int {
  kOk = 0,
  kDomainOrFormat = 1,
  kIo = 2,
  kUnreachableTarget = 3,
  kVerificationMismatch = 4,
};

/// Flat `key = value` configuration (blank lines and `#` comments allowed).
std::map<std::string, std::string> read_config(const std::filesystem::path& path);

/// Runs one subcommand; `args` excludes the program name.
int run(const std::vector<std::string>& args);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Worker count: MASKVEIL_THREADS when set and positive, else hardware
/// concurrency, never more than `jobs`.
unsigned worker_count(std::size_t jobs);

}  // namespace maskveil::cli
