#include "higfa/synthbench.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "higfa/error.hpp"
#include "higfa/random.hpp"

namespace higfa::synthbench {

const char* shape_name(CoarseShape s) noexcept {
  switch (s) {
    case CoarseShape::disc: return "disc";
    case CoarseShape::bar: return "bar";
    case CoarseShape::cross: return "cross";
    case CoarseShape::ring: return "ring";
  }
  return "?";
}

CoarseShape shape_of_coarse(int coarse) {
  if (coarse < 0 || coarse > 3) throw Error("coarse shape id " + std::to_string(coarse) + " out of range");
  return static_cast<CoarseShape>(coarse);
}

void BenchmarkSpec::validate() const {
  if (classes < 2 || classes > 8 || classes % 2 != 0) {
    throw Error("benchmark: classes must be even and in [2, 8], got " + std::to_string(classes));
  }
  if (per_class < 8) throw Error("benchmark: per_class must be >= 8, got " + std::to_string(per_class));
  if (!(noise >= 0.0)) throw Error("benchmark: noise must be >= 0");
  if (styles < 1 || styles > 4) throw Error("benchmark: styles must be in [1, 4]");
  if (max_shift < 0 || max_shift > 2) throw Error("benchmark: max_shift must be in [0, 2]");
  if (!(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction < 1.0)) {
    throw Error("benchmark: split fractions must leave a non-empty test split");
  }
}

int style_intensity(int style) {
  static constexpr int kBase[] = {150, 180, 210, 240};
  if (style < 0 || style > 3) throw Error("style id " + std::to_string(style) + " out of range");
  return kBase[style];
}

bool in_shape(CoarseShape shape, int x, int y) {
  const double cx = x - 5.5, cy = y - 5.5;
  const double r2 = cx * cx + cy * cy;
  switch (shape) {
    case CoarseShape::disc: return r2 <= 30.0;
    case CoarseShape::bar: return x >= 1 && x <= 10 && y >= 3 && y <= 8;
    case CoarseShape::cross: return (y >= 4 && y <= 7 && x >= 1 && x <= 10) || (x >= 4 && x <= 7 && y >= 1 && y <= 10);
    case CoarseShape::ring: return r2 >= 16.0 && r2 <= 36.0;
  }
  return false;
}

std::vector<std::array<int, 2>> mark_pixels(int label) {
  if (label < 0 || label >= 8) throw Error("label " + std::to_string(label) + " out of range");
  const bool ring = shape_of_coarse(coarse_of(label)) == CoarseShape::ring;
  if (variant_of(label) == 0) {
    return ring ? std::vector<std::array<int, 2>>{{1, 5}, {1, 6}, {0, 6}}
                : std::vector<std::array<int, 2>>{{2, 5}, {3, 5}, {2, 6}};
  }
  return ring ? std::vector<std::array<int, 2>>{{10, 5}, {10, 6}, {11, 5}}
              : std::vector<std::array<int, 2>>{{8, 5}, {9, 5}, {9, 6}};
}

GrayImage render(int label, int intensity, int dx, int dy) {
  const CoarseShape shape = shape_of_coarse(coarse_of(label));
  GrayImage img(kImageSize, kImageSize);
  const int ox = 2 + dx, oy = 2 + dy;
  for (int y = 0; y < kTemplateSize; ++y) {
    for (int x = 0; x < kTemplateSize; ++x) {
      if (in_shape(shape, x, y)) img.at(ox + x, oy + y) = static_cast<std::uint8_t>(intensity);
    }
  }
  for (const auto& [x, y] : mark_pixels(label)) {
    img.at(ox + x, oy + y) = static_cast<std::uint8_t>(std::max(0, intensity - kMarkDepth));
  }
  return img;
}

const char* split_name(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

const std::vector<std::size_t>& SyntheticDataset::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  throw Error("unknown split");
}

SyntheticDataset generate_benchmark(const BenchmarkSpec& spec) {
  spec.validate();
  SyntheticDataset d;
  d.spec = spec;
  const auto n = static_cast<std::size_t>(spec.classes * spec.per_class);
  d.images.reserve(n);
  const auto n_train = static_cast<std::size_t>(std::lround(spec.per_class * spec.train_fraction));
  const auto n_val = static_cast<std::size_t>(std::lround(spec.per_class * spec.val_fraction));

  for (int c = 0; c < spec.classes; ++c) {
    for (int k = 0; k < spec.per_class; ++k) {
      const std::size_t index = d.images.size();
      Rng rng = make_rng(spec.seed, {static_cast<std::uint64_t>(index)});
      std::uniform_int_distribution<int> style_pick(0, spec.styles - 1);
      std::uniform_int_distribution<int> jitter(-10, 10);
      std::uniform_int_distribution<int> shift(-spec.max_shift, spec.max_shift);
      const int style = style_pick(rng);
      const int intensity = style_intensity(style) + (spec.jitter ? jitter(rng) : 0);
      const int dx = shift(rng);
      const int dy = shift(rng);
      GrayImage img = render(c, intensity, dx, dy);
      if (spec.noise > 0.0) {
        std::normal_distribution<double> normal(0.0, spec.noise);
        for (auto& px : img.pixels) {
          px = static_cast<std::uint8_t>(std::lround(std::clamp(px + normal(rng), 0.0, 255.0)));
        }
      }
      d.images.push_back(std::move(img));
      d.labels.push_back(c);
      d.coarse_ids.push_back(coarse_of(c));
      d.styles.push_back(style);
      d.shifts.push_back({dx, dy});
    }
    // Stratified split over a seeded permutation of the class members.
    std::vector<std::size_t> members(static_cast<std::size_t>(spec.per_class));
    std::iota(members.begin(), members.end(), static_cast<std::size_t>(c * spec.per_class));
    Rng split_rng = make_rng(spec.seed, {0x5b117ULL, static_cast<std::uint64_t>(c)});
    std::shuffle(members.begin(), members.end(), split_rng);
    for (std::size_t i = 0; i < members.size(); ++i) {
      auto& dst = i < n_train ? d.train : (i < n_train + n_val ? d.val : d.test);
      dst.push_back(members[i]);
    }
  }
  for (auto* s : {&d.train, &d.val, &d.test}) std::sort(s->begin(), s->end());
  return d;
}

SyntheticDataset generate_benchmark(int classes, int per_class, double noise, std::uint64_t seed) {
  BenchmarkSpec spec;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.noise = noise;
  spec.seed = seed;
  return generate_benchmark(spec);
}

void save_dataset(const SyntheticDataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  nlohmann::ordered_json manifest;
  const auto& s = d.spec;
  manifest["spec"] = {{"classes", s.classes},   {"per_class", s.per_class},   {"noise", s.noise},
                      {"jitter", s.jitter},     {"styles", s.styles},         {"max_shift", s.max_shift},
                      {"seed", s.seed},         {"train_fraction", s.train_fraction},
                      {"val_fraction", s.val_fraction}};
  nlohmann::ordered_json items = nlohmann::ordered_json::array();
  for (Split split : {Split::train, Split::val, Split::test}) {
    std::vector<std::size_t> idx;
    for (std::size_t i : d.split(split)) {
      const fs::path rel = fs::path(split_name(split)) / std::to_string(d.labels[i]) / (std::to_string(i) + ".pgm");
      fs::create_directories(dir / rel.parent_path());
      write_pgm(dir / rel, d.images[i]);
      idx.push_back(i);
    }
    manifest["splits"][split_name(split)] = idx;
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    const char* split = std::binary_search(d.train.begin(), d.train.end(), i) ? "train"
                        : std::binary_search(d.val.begin(), d.val.end(), i) ? "val"
                                                                              : "test";
    items.push_back({{"index", i},
                     {"label", d.labels[i]},
                     {"coarse", d.coarse_ids[i]},
                     {"style", d.styles[i]},
                     {"shift", d.shifts[i]},
                     {"file", std::string(split) + "/" + std::to_string(d.labels[i]) + "/" + std::to_string(i) + ".pgm"}});
  }
  manifest["items"] = items;
  std::ofstream f(dir / "manifest.json", std::ios::binary);
  if (!f) throw Error("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
}

SyntheticDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw Error("no manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed manifest.json: " + std::string(e.what()));
  }
  SyntheticDataset d;
  const auto& s = m.at("spec");
  d.spec.classes = s.at("classes");
  d.spec.per_class = s.at("per_class");
  d.spec.noise = s.at("noise");
  d.spec.jitter = s.at("jitter");
  d.spec.styles = s.at("styles");
  d.spec.max_shift = s.at("max_shift");
  d.spec.seed = s.at("seed");
  d.spec.train_fraction = s.at("train_fraction");
  d.spec.val_fraction = s.at("val_fraction");
  for (const auto& it : m.at("items")) {
    d.images.push_back(read_pgm(dir / it.at("file").get<std::string>()));
    d.labels.push_back(it.at("label"));
    d.coarse_ids.push_back(it.at("coarse"));
    d.styles.push_back(it.at("style"));
    d.shifts.push_back(it.at("shift").get<std::array<int, 2>>());
  }
  d.train = m.at("splits").at("train").get<std::vector<std::size_t>>();
  d.val = m.at("splits").at("val").get<std::vector<std::size_t>>();
  d.test = m.at("splits").at("test").get<std::vector<std::size_t>>();
  return d;
}

std::vector<LabeledImage> split_items(const SyntheticDataset& d, Split s) {
  std::vector<LabeledImage> out;
  for (std::size_t i : d.split(s)) out.push_back({d.images[i], d.labels[i], d.styles[i], i});
  return out;
}

std::size_t MixedTrainSet::synthetic_count() const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [](const MixEntry& e) { return e.origin == Origin::synthetic; }));
}

std::size_t synthetic_needed(std::size_t real, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error("mix: ratio must be in [0, 1]");
  if (ratio == 1.0) return real;
  return static_cast<std::size_t>(std::llround(static_cast<double>(real) * ratio / (1.0 - ratio)));
}

MixedTrainSet mix(std::span<const LabeledImage> real, std::span<const SyntheticSample> synthetic, double ratio,
                  std::uint64_t seed) {
  const std::size_t need = synthetic_needed(real.size(), ratio);
  if (need > synthetic.size()) {
    throw Error("mix: ratio " + std::to_string(ratio) + " over " + std::to_string(real.size()) +
                " real images needs " + std::to_string(need) + " synthetic images, pool has " +
                std::to_string(synthetic.size()));
  }
  MixedTrainSet out;
  out.ratio = ratio;
  if (ratio < 1.0) {
    for (const auto& r : real) out.entries.push_back({r.image, r.label, Origin::real, "real-" + std::to_string(r.index)});
  }
  if (ratio == 0.0) return out;

  Rng rng = make_rng(seed, {0x313ULL});
  std::vector<std::size_t> pool(synthetic.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < need; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    const auto& s = synthetic[pool[i]];
    out.entries.push_back({s.image, s.label, Origin::synthetic, s.id});
  }
  std::shuffle(out.entries.begin(), out.entries.end(), rng);
  return out;
}

nd::Tensor image_rows(std::span<const GrayImage> images) {
  if (images.empty()) return nd::Tensor({0, 0});
  const std::size_t p = images.front().pixels.size();
  nd::Tensor out({images.size(), p});
  for (std::size_t r = 0; r < images.size(); ++r) {
    if (images[r].pixels.size() != p) throw ShapeError("image_rows: images differ in size");
    out.set_row(r, to_unit_range(images[r]));
  }
  return out;
}

models::LabeledData to_labeled_data(const MixedTrainSet& set) {
  std::vector<GrayImage> imgs;
  models::LabeledData out;
  for (const auto& e : set.entries) {
    imgs.push_back(e.image);
    out.labels.push_back(e.label);
  }
  out.images = image_rows(imgs);
  return out;
}

models::LabeledData to_labeled_data(std::span<const LabeledImage> items) {
  std::vector<GrayImage> imgs;
  models::LabeledData out;
  for (const auto& e : items) {
    imgs.push_back(e.image);
    out.labels.push_back(e.label);
  }
  out.images = image_rows(imgs);
  return out;
}

}  // namespace higfa::synthbench
