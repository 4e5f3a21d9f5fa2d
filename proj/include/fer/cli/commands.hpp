#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace fer::cli {

/// Runs one subcommand (train, eval, predict, gradcheck, perturb, synth).
/// `args` excludes the program name. Returns the process exit status;
/// diagnostics go to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fer::cli
