#pragma once

namespace vsr::cli {

/// Entry point shared by the vsr binary and the CLI tests.
/// Exit codes: 0 success, 1 verification failure, 2 usage/config error.
int run(int argc, const char* const* argv);

}  // namespace vsr::cli
