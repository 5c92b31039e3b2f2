#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "higfa/image.hpp"
#include "higfa/models.hpp"

namespace higfa::synthbench {

inline constexpr int kImageSize = 16;
inline constexpr int kTemplateSize = 12;
inline constexpr int kMarkDepth = 90;

enum class CoarseShape { disc, bar, cross, ring };
const char* shape_name(CoarseShape s) noexcept;

/// Two fine classes share every coarse shape.
inline constexpr int coarse_of(int label) noexcept { return label / 2; }
inline constexpr int variant_of(int label) noexcept { return label % 2; }
CoarseShape shape_of_coarse(int coarse);

struct BenchmarkSpec {
  int classes = 4;
  int per_class = 64;
  /// Std-dev of additive Gaussian pixel noise, on the 0-255 scale.
  double noise = 6.0;
  /// ±10 intensity jitter on top of the style intensity.
  bool jitter = true;
  int styles = 4;
  int max_shift = 2;
  std::uint64_t seed = 7;
  double train_fraction = 0.375;
  double val_fraction = 0.125;

  void validate() const;
};

/// Base shape intensity of each style.
int style_intensity(int style);

/// Template-space pixels (x, y) of the class-defining micro-mark.
std::vector<std::array<int, 2>> mark_pixels(int label);

/// Whether template pixel (x, y) belongs to the coarse shape.
bool in_shape(CoarseShape shape, int x, int y);

/// Noise-free rendering: template at offset (2 + dx, 2 + dy), shape at
/// `intensity`, mark at intensity - kMarkDepth, background 0.
GrayImage render(int label, int intensity, int dx, int dy);

enum class Split { train, val, test };
const char* split_name(Split s) noexcept;

struct SyntheticDataset {
  BenchmarkSpec spec;
  std::vector<GrayImage> images;
  std::vector<int> labels;
  std::vector<int> coarse_ids;
  std::vector<int> styles;
  std::vector<std::array<int, 2>> shifts;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  std::size_t size() const noexcept { return images.size(); }
  const std::vector<std::size_t>& split(Split s) const;
  int coarse_count() const noexcept { return spec.classes / 2; }
};

SyntheticDataset generate_benchmark(const BenchmarkSpec& spec);
SyntheticDataset generate_benchmark(int classes, int per_class, double noise, std::uint64_t seed);

/// Directory layout: {split}/{class}/{index}.pgm plus manifest.json.
void save_dataset(const SyntheticDataset& d, const std::filesystem::path& dir);
SyntheticDataset load_dataset(const std::filesystem::path& dir);

struct LabeledImage {
  GrayImage image;
  int label = 0;
  int style = 0;
  std::size_t index = 0;
};

std::vector<LabeledImage> split_items(const SyntheticDataset& d, Split s);

struct SyntheticSample {
  GrayImage image;
  int label = 0;
  std::string id;
};

enum class Origin { real, synthetic };

struct MixEntry {
  GrayImage image;
  int label = 0;
  Origin origin = Origin::real;
  std::string id;
};

struct MixedTrainSet {
  std::vector<MixEntry> entries;
  double ratio = 0.0;

  std::size_t synthetic_count() const;
};

/// Number of synthetic entries that a mix of `real` real images needs to
/// reach `ratio`; a ratio of 1 keeps the set size equal to the real count.
std::size_t synthetic_needed(std::size_t real, double ratio);

/// Real split plus a seeded subset of the synthetic pool so that the
/// synthetic fraction is `ratio`; ratio 1 drops the real images. Ratio 0
/// returns the real split in order, otherwise entries are shuffled.
MixedTrainSet mix(std::span<const LabeledImage> real, std::span<const SyntheticSample> synthetic, double ratio,
                  std::uint64_t seed);

models::LabeledData to_labeled_data(const MixedTrainSet& set);
models::LabeledData to_labeled_data(std::span<const LabeledImage> items);
nd::Tensor image_rows(std::span<const GrayImage> images);

}  // namespace higfa::synthbench
