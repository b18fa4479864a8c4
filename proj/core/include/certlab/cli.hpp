#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace certlab {

// The command-line front end behind the certlab binary, callable in-process
// so tests can drive it without spawning. `args` excludes the program name.
// Returns the process exit status: 0 on success, 1 on a runtime failure
// (one-line `error: ...` on err), 2 on usage errors (unknown subcommand or
// flag, missing required flag; usage text on err).
//
// Subcommands: poison, train, certify, attack-direct, defend, sweep,
// fallback-impact, report. Run with --help for per-command flags.
int cli_main(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err);

} // namespace certlab
