#pragma once

#include <string>
#include <vector>

namespace dynvocab {

inline constexpr const char* kToolkitVersion = "0.1.0";

/// Entry point for the `dynvocab` command line. Returns the process exit
/// code; all diagnostics go to stderr and data only to files.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // args exclude the program name

}  // namespace dynvocab
