// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace shortlens::cli {

/// Exit codes: 0 success, 1 unexpected failure, 2 validation or usage
/// error, 3 provider error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace shortlens::cli
