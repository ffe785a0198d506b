#pragma once

// The `fsit` command line: gen-data, train, translate, blend, csb-sweep,
// eval and style-variance.

#include <ostream>

namespace fsit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDivergence = 4;

inline constexpr const char* kRunConfigName = "run_config.json";

/// Parses and runs one command. Results go to `out`, progress and errors to
/// `err`. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fsit::cli
