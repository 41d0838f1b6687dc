#pragma once

// Command-line surface. Every subcommand resolves a sectioned config, writes
// its outputs into a locked run directory and records them in manifest.json.

#include "discon/config.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace discon {

inline constexpr const char* kToolVersion = "discon 0.1.0";

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitValidation = 2, kExitRuntime = 3 };

// Every key a config file may set, with its default.
KeyValues default_config();

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace discon
