#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "higfa/contour.hpp"
#include "higfa/synthbench.hpp"

namespace higfa::testing {

/// Fixed-seed augment_contour inputs whose PGM outputs are committed.
struct GoldenCase {
  std::string name;
  int label;
  contour::Rigidity rigidity;
  std::uint64_t seed;
};

inline const std::vector<GoldenCase>& golden_cases() {
  static const std::vector<GoldenCase> cases = {
      {"disc_rigid", 0, contour::Rigidity::rigid, 101},
      {"bar_rigid", 3, contour::Rigidity::rigid, 102},
      {"cross_nonrigid", 4, contour::Rigidity::nonrigid, 103},
      {"ring_nonrigid", 7, contour::Rigidity::nonrigid, 104},
      {"bar_nonrigid", 2, contour::Rigidity::nonrigid, 105},
  };
  return cases;
}

inline contour::EdgeMap golden_map(const GoldenCase& c) {
  Rng rng = make_rng(c.seed);
  return contour::augment_contour(synthbench::render(c.label, 200, 0, 0), c.rigidity, {}, rng);
}

/// name -> FNV-1a hex from contour_hashes.txt; empty when the file is missing.
inline std::map<std::string, std::string> read_golden_hashes(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  std::ifstream in(dir / "contour_hashes.txt");
  for (std::string name, hash; in >> name >> hash;) out[name] = hash;
  return out;
}

/// Square raster, 0 left of `column` and 255 from it on.
inline GrayImage step_edge(int size, int column) {
  GrayImage img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = column; x < size; ++x) img.at(x, y) = 255;
  return img;
}

}  // namespace higfa::testing
