#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "higfa/image.hpp"
#include "higfa/random.hpp"

namespace higfa::contour {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct TpsRecord {
  std::vector<Point> source;
  std::vector<Point> target;
};

/// What was done to an edge map, in application order.
struct Provenance {
  bool flipped = false;
  double rotation_deg = 0.0;
  std::optional<TpsRecord> tps;
  std::vector<std::string> order;
  std::string note;
};

/// Binary contour raster (values 0 or 1) plus its provenance.
struct EdgeMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;
  Provenance provenance;

  EdgeMap() = default;
  EdgeMap(int w, int h);

  std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t& at(int x, int y) { return bits[static_cast<std::size_t>(y * width + x)]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  std::size_t edge_count() const;
  bool is_binary() const;

  /// 0 / 255 raster for visualisation and PGM output.
  GrayImage to_image() const;
  /// Threshold an 8-bit raster (value > threshold becomes an edge).
  static EdgeMap from_image(const GrayImage& img, int threshold = 127);
};

inline constexpr int kCannyLow = 120;
inline constexpr int kCannyHigh = 200;
inline constexpr int kBinarizeThreshold = 100;
inline constexpr double kMaxRotationDeg = 15.0;
inline constexpr int kPatchGrid = 8;
inline constexpr int kControlPoints = 5;

/// Canny edge detector: 5x5 Gaussian blur (sigma 1.4), 3x3 Sobel, L2
/// magnitude, non-maximum suppression and hysteresis on (low, high).
EdgeMap canny(const GrayImage& img, int low = kCannyLow, int high = kCannyHigh);

/// Rotate p about the raster centre ((w-1)/2, (h-1)/2). Positive angles
/// use x' = dx cos - dy sin, y' = dx sin + dy cos in pixel coordinates
/// (y pointing down), i.e. clockwise on screen.
Point rotate_about_center(Point p, int width, int height, double angle_deg);

/// Optional horizontal mirror followed by rotation, nearest-neighbour
/// sampling, zero fill outside the source frame.
EdgeMap flip_rotate(const EdgeMap& em, bool flip, double angle_deg);

/// Same geometry as flip_rotate for a grayscale image, bilinear sampling.
GrayImage flip_rotate_image(const GrayImage& img, bool flip, double angle_deg);

struct HarrisParams {
  double sigma = 1.0;
  double k = 0.04;
  double relative_threshold = 0.01;
};

/// Harris corner response of the edge raster, row-major.
std::vector<double> harris_response(const EdgeMap& em, const HarrisParams& params = {});

/// Local maxima of the Harris response above the relative threshold,
/// sorted by (y, x).
std::vector<Point> detect_corners(const EdgeMap& em, const HarrisParams& params = {});

/// Greedy farthest-point selection of k points, seeded with the farthest
/// pair. Ties resolve to the lowest index.
std::vector<Point> farthest_point_subset(std::span<const Point> candidates, int k);

/// k points from the corner pool, topped up with edge pixels when fewer
/// than k corners are available.
std::vector<Point> select_from_candidates(std::span<const Point> corners, std::span<const Point> edge_pixels,
                                          int k);

/// Pick k control points: sample k edge-containing patches of a grid x grid
/// partition, then choose k mutually distant corners among them.
std::vector<Point> select_control_points(const EdgeMap& em, int grid, int k, Rng& rng,
                                         const HarrisParams& harris = {});

/// Thin-plate spline f(p) = a0 + ax*x + ay*y + sum_i w_i U(|p - s_i|),
/// U(r) = r^2 log r^2, one such function per output coordinate.
class TpsWarp {
 public:
  TpsWarp() = default;
  TpsWarp(std::vector<Point> source, std::vector<Point> target, std::vector<Point> weights,
          std::array<double, 6> affine, double regularization);

  Point operator()(Point p) const;

  const std::vector<Point>& source() const noexcept { return source_; }
  const std::vector<Point>& target() const noexcept { return target_; }
  /// Radial coefficients, one (wx, wy) per source point.
  const std::vector<Point>& weights() const noexcept { return weights_; }
  /// Row-major 2x3: [a0x, axx, ayx; a0y, axy, ayy].
  const std::array<double, 6>& affine() const noexcept { return affine_; }
  double regularization() const noexcept { return regularization_; }

  /// Spline fitted in the opposite direction (target -> source).
  TpsWarp inverse() const;

 private:
  std::vector<Point> source_;
  std::vector<Point> target_;
  std::vector<Point> weights_;
  std::array<double, 6> affine_{};
  double regularization_ = 0.0;
};

double tps_kernel(double r2);

/// Solve the TPS interpolation system. Throws on fewer than 3 points,
/// mismatched counts, or a singular system (collinear or repeated sources).
TpsWarp fit_tps(std::span<const Point> source, std::span<const Point> target, double regularization = 0.0);

/// Move edge content from warp.source() to warp.target(): every output
/// pixel is mapped back through the inverse spline, bilinearly sampled from
/// the 0/255 raster and binarised (value > threshold).
EdgeMap warp_edge_map(const EdgeMap& em, const TpsWarp& warp, int binarize_threshold = kBinarizeThreshold);

enum class Rigidity { rigid, nonrigid };

struct AugmentParams {
  int canny_low = kCannyLow;
  int canny_high = kCannyHigh;
  double flip_probability = 0.5;
  double max_rotation_deg = kMaxRotationDeg;
  int grid = kPatchGrid;
  int control_points = kControlPoints;
  /// Per-coordinate bound on target offsets; half a patch when unset.
  std::optional<double> perturbation;
  double regularization = 0.0;
  int binarize_threshold = kBinarizeThreshold;
  HarrisParams harris;
};

/// canny -> flip/rotate -> (nonrigid only) control points + TPS warp.
/// A failed TPS stage leaves the flip/rotate result with a note.
EdgeMap augment_contour(const GrayImage& img, Rigidity rigidity, const AugmentParams& params, Rng& rng);

/// JSON sidecar describing the provenance of an edge map.
std::string provenance_json(const EdgeMap& em);

}  // namespace higfa::contour
