#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "lavi/bridge.hpp"

namespace lavi::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;      // usage, config and I/O errors
inline constexpr int kExitNumerical = 3;  // non-finite loss

// Runs one command line; args[0] is the program name. Progress and warnings
// go to err, reports to out.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

// Batch-1 guided DDIM chain for prompt `index`, seeded with seed ^ index so
// results do not depend on which other prompts are sampled. Returns [3, H, W].
Tensor sample_prompt(const BridgedModel& model, const std::string& prompt, std::uint64_t index,
                     const NoiseSchedule& sched, const SampleConfig& cfg);

}  // namespace lavi::cli
