#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace steerlm::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,
    kLoad = 3,
    kIncompatible = 4,
    kData = 5,
    kBounds = 6,
    kTemplate = 7,
};

/// Runs one command line (args exclude the program name). Normal output
/// goes to `out` (manifest path and one summary line), diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Seed for the i-th input of a run; mixes the run seed and the index.
uint64_t derive_seed(uint64_t seed, uint64_t index);

}  // namespace steerlm::cli
