#pragma once

namespace uvflow::cli {

/// Parses argv and runs one subcommand. Returns 0 on success, 1 on a
/// validation or usage error and 2 on any other failure.
int dispatch(int argc, char** argv);

}  // namespace uvflow::cli
