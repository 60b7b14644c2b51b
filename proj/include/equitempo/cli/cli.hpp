#pragma once

// Operator-facing command layer. run_cli parses argv-style arguments
// (program name excluded) and executes one pipeline command; the binary in
// tools/ forwards straight here so tests can drive every command in-process.
//
// Commands: synth-data, pretrain, finetune, evaluate, diagnose, embed,
// collapse-demo. Each accepts --config <file> with flat key=value lines;
// explicit flags take precedence over config-file values, which take
// precedence over defaults. Logs go to the stream passed in (standard error
// in the binary); artifacts go only to files named by flags, and every
// artifact carries the fully resolved configuration that produced it.

#include <ostream>
#include <string>
#include <vector>

namespace equitempo {

inline constexpr int kExitOk = 0;         // success
inline constexpr int kExitUsage = 1;      // bad flags, config keys, or parameter ranges
inline constexpr int kExitData = 2;       // unreadable inputs, incompatible checkpoints,
                                          // train/eval overlap
inline constexpr int kExitNumerical = 3;  // non-finite loss; diagnostic dump written

int run_cli(const std::vector<std::string>& args, std::ostream& err);

}  // namespace equitempo
