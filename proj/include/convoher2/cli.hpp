#pragma once

#include <iosfwd>

#include "convoher2/config.hpp"

namespace convoher2 {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // verification or evaluation failed
inline constexpr int kExitUsage = 2;    // bad flags, config or inputs

/// Entry point behind the `convoher2` executable. Subcommands: ingest,
/// extract-features, train, evaluate, predict, report, verify.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const KeyValues& environment);

}  // namespace convoher2
