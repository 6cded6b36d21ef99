// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace sdnia::commands {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2, kPartial = 3 };

const std::vector<std::string>& command_names();

/// Runs one command against a full config document. Every section the command reads is validated
/// before anything is written. Errors are reported on `err` and mapped to exit codes:
/// configuration/argument errors -> 1, runtime failures -> 2, partial batch failures -> 3.
int run(const std::string& command, const nlohmann::json& config, std::ostream& out, std::ostream& err);

}  // namespace sdnia::commands
