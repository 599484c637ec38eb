// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mambamoe {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitData = 2, kExitNumerical = 3 };

/// `mambamoe <train|eval|predict|inspect|gradcheck|synth|profile> [options]`.
/// Failures print one line "error: <config|data|numerical>: <reason>" to err.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// "3" -> {3}; "1..4" -> {1,2,3,4}; "1,3" -> {1,3}. Throws ConfigError.
std::vector<std::size_t> parse_topk_list(const std::string& text);

}  // namespace mambamoe
