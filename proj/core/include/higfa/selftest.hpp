#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace higfa {

struct PropertyResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Fast invariant checks over every module, seeded by `seed`.
std::vector<PropertyResult> run_selftest(std::uint64_t seed);

}  // namespace higfa
