#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "fraudseq/error.hpp"

namespace fraudseq::cli {

inline constexpr int kExitUsage = 2;
inline constexpr int kExitOther = 1;
/// Library errors exit with kExitErrorBase + the ErrorCode value.
inline constexpr int kExitErrorBase = 10;

inline int exit_code(ErrorCode c) { return kExitErrorBase + static_cast<int>(c); }

/// Runs one command line; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fraudseq::cli
