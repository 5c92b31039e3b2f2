#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "higfa/harness.hpp"

namespace higfa::config {

/// Everything one configuration file specifies.
struct CliConfig {
  harness::ExperimentConfig experiment;
  /// Mode used by the augment subcommand.
  harness::Mode augment_mode = harness::Mode::higfa;
  /// Modes compared by eval.
  std::vector<harness::Mode> modes{harness::Mode::none, harness::Mode::text_only, harness::Mode::text_contour,
                                   harness::Mode::higfa};
  int seed_count = 5;
  // ablate grids
  std::vector<double> s_cls_sweep{0.0, 2.0, 5.0, 10.0, 20.0};
  std::vector<int> warmup_sweep{10, 15, 20, 21, 25, 30};
  std::vector<double> ratio_sweep{0.2, 0.4, 0.6, 1.0};

  /// "section.key" of every value that fell back to its default.
  std::vector<std::string> defaulted;

  /// Seeds the benchmark and the experiment seed list from one value.
  void apply_seed(std::uint64_t seed);
};

using LogFn = std::function<void(const std::string&)>;

/// Parses INI text with [section] blocks. Unknown sections or keys, and
/// malformed values, throw Error naming the offending key; each key left
/// out falls back to its default and is reported through `log`.
CliConfig parse_config(const std::string& text, const LogFn& log = {});
CliConfig load_config(const std::filesystem::path& path, const LogFn& log = {});

/// Every documented key with its default value, as a loadable file.
std::string reference_config();

}  // namespace higfa::config
