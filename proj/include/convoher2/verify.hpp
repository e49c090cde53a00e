#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace convoher2 {

struct VerificationCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Oracle self-checks plus head-vs-oracle comparisons and gradient checks on
/// synthetic tensors. Needs no dataset and no pretrained weights.
std::vector<VerificationCheck> run_verification(std::uint64_t seed = 0);

/// Prints one "PASS name: detail" or "FAIL name: detail" line per check and
/// returns true when every check passed.
bool print_verification(std::ostream& out, std::uint64_t seed = 0);

}  // namespace convoher2
