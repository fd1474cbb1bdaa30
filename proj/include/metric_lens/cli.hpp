#pragma once

#include <iosfwd>

namespace mlens {

/// Entry point of the `metric_lens` tool. Returns 0 on success, 1 on a domain
/// error, 2 on a usage error.
int cli_run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mlens
