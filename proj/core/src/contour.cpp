#include "higfa/contour.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numbers>

#include "higfa/error.hpp"

namespace higfa::contour {
namespace {

// Reflect-101 border handling (…2 1 | 0 1 2 … n-1 | n-2 …).
int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

struct Raster {
  int w = 0, h = 0;
  std::vector<double> v;
  Raster(int w_, int h_) : w(w_), h(h_), v(static_cast<std::size_t>(w_ * h_), 0.0) {}
  double& at(int x, int y) { return v[static_cast<std::size_t>(y * w + x)]; }
  double at(int x, int y) const { return v[static_cast<std::size_t>(y * w + x)]; }
  double clamped(int x, int y) const { return at(reflect101(x, w), reflect101(y, h)); }
};

std::vector<double> gaussian_kernel(double sigma, int radius) {
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    s += v;
  }
  for (auto& v : k) v /= s;
  return k;
}

Raster separable_blur(const Raster& in, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  Raster tmp(in.w, in.h), out(in.w, in.h);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * in.clamped(x + i, y);
      tmp.at(x, y) = s;
    }
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp.clamped(x, y + i);
      out.at(x, y) = s;
    }
  return out;
}

void sobel(const Raster& in, Raster& gx, Raster& gy) {
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      const double a = in.clamped(x - 1, y - 1), b = in.clamped(x, y - 1), c = in.clamped(x + 1, y - 1);
      const double d = in.clamped(x - 1, y), f = in.clamped(x + 1, y);
      const double g = in.clamped(x - 1, y + 1), h = in.clamped(x, y + 1), i = in.clamped(x + 1, y + 1);
      gx.at(x, y) = (c + 2 * f + i) - (a + 2 * d + g);
      gy.at(x, y) = (g + 2 * h + i) - (a + 2 * b + c);
    }
}

Raster from_edges(const EdgeMap& em) {
  Raster r(em.width, em.height);
  for (std::size_t i = 0; i < em.bits.size(); ++i) r.v[i] = em.bits[i];
  return r;
}

double sq_dist(const Point& a, const Point& b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}

}  // namespace

EdgeMap::EdgeMap(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(std::max(0, w * h)), 0) {}

std::size_t EdgeMap::edge_count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

bool EdgeMap::is_binary() const {
  return std::all_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b <= 1; });
}

GrayImage EdgeMap::to_image() const {
  GrayImage img(width, height);
  for (std::size_t i = 0; i < bits.size(); ++i) img.pixels[i] = bits[i] ? 255 : 0;
  return img;
}

EdgeMap EdgeMap::from_image(const GrayImage& img, int threshold) {
  EdgeMap em(img.width, img.height);
  for (std::size_t i = 0; i < em.bits.size(); ++i) em.bits[i] = img.pixels[i] > threshold ? 1 : 0;
  return em;
}

EdgeMap canny(const GrayImage& img, int low, int high) {
  if (!(0 <= low && low <= high && high <= 255)) {
    throw Error("canny thresholds must satisfy 0 <= low <= high <= 255");
  }
  const int w = img.width, h = img.height;
  EdgeMap out(w, h);
  out.provenance.order.push_back("canny");
  if (w == 0 || h == 0) return out;

  Raster src(w, h);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) src.v[i] = img.pixels[i];
  const Raster blurred = separable_blur(src, gaussian_kernel(1.4, 2));
  Raster gx(w, h), gy(w, h), mag(w, h);
  sobel(blurred, gx, gy);
  for (std::size_t i = 0; i < mag.v.size(); ++i) mag.v[i] = std::hypot(gx.v[i], gy.v[i]);

  auto mag_at = [&](int x, int y) { return (x < 0 || y < 0 || x >= w || y >= h) ? 0.0 : mag.at(x, y); };
  const double tan22 = std::tan(std::numbers::pi / 8.0);
  const double tan67 = std::tan(3.0 * std::numbers::pi / 8.0);

  // 0 = suppressed / below low, 1 = weak candidate, 2 = strong.
  std::vector<std::uint8_t> cls(static_cast<std::size_t>(w * h), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double m = mag.at(x, y);
      if (m <= low) continue;
      const double ax = std::abs(gx.at(x, y)), ay = std::abs(gy.at(x, y));
      int dx = 0, dy = 0;
      if (ay <= ax * tan22) {
        dx = 1;
      } else if (ay > ax * tan67) {
        dy = 1;
      } else {
        dx = 1;
        dy = (gx.at(x, y) * gy.at(x, y) > 0) ? 1 : -1;
      }
      // Asymmetric tie-break keeps exactly one pixel on a symmetric plateau.
      if (m > mag_at(x - dx, y - dy) && m >= mag_at(x + dx, y + dy)) {
        cls[static_cast<std::size_t>(y * w + x)] = m > high ? 2 : 1;
      }
    }

  std::vector<int> stack;
  for (int i = 0; i < w * h; ++i) {
    if (cls[static_cast<std::size_t>(i)] == 2) stack.push_back(i);
  }
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    if (out.bits[static_cast<std::size_t>(i)]) continue;
    out.bits[static_cast<std::size_t>(i)] = 1;
    const int x = i % w, y = i / w;
    for (int ny = y - 1; ny <= y + 1; ++ny)
      for (int nx = x - 1; nx <= x + 1; ++nx) {
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
        const int j = ny * w + nx;
        if (cls[static_cast<std::size_t>(j)] && !out.bits[static_cast<std::size_t>(j)]) stack.push_back(j);
      }
  }
  return out;
}

Point rotate_about_center(Point p, int width, int height, double angle_deg) {
  const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double dx = p.x - cx, dy = p.y - cy;
  return {cx + dx * c - dy * s, cy + dx * s + dy * c};
}

EdgeMap flip_rotate(const EdgeMap& em, bool flip, double angle_deg) {
  if (std::abs(angle_deg) > 45.0) throw Error("flip_rotate: |angle| must not exceed 45 degrees");
  EdgeMap out(em.width, em.height);
  out.provenance = em.provenance;
  for (int y = 0; y < em.height; ++y)
    for (int x = 0; x < em.width; ++x) {
      // Inverse map: undo rotation, then undo the mirror.
      Point q = angle_deg == 0.0 ? Point{double(x), double(y)}
                                 : rotate_about_center({double(x), double(y)}, em.width, em.height, -angle_deg);
      const int sx0 = static_cast<int>(std::lround(q.x));
      const int sy = static_cast<int>(std::lround(q.y));
      const int sx = flip ? em.width - 1 - sx0 : sx0;
      if (em.contains(sx, sy)) out.at(x, y) = em.at(sx, sy);
    }
  if (flip) {
    out.provenance.flipped = !out.provenance.flipped;
    out.provenance.order.push_back("flip");
  }
  if (angle_deg != 0.0) {
    out.provenance.rotation_deg += angle_deg;
    out.provenance.order.push_back("rotate");
  }
  return out;
}

GrayImage flip_rotate_image(const GrayImage& img, bool flip, double angle_deg) {
  if (std::abs(angle_deg) > 45.0) throw Error("flip_rotate_image: |angle| must not exceed 45 degrees");
  GrayImage out(img.width, img.height);
  auto sample = [&](int x, int y) -> double {
    if (!img.contains(x, y)) return 0.0;
    return img.at(flip ? img.width - 1 - x : x, y);
  };
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const Point q = angle_deg == 0.0 ? Point{double(x), double(y)}
                                       : rotate_about_center({double(x), double(y)}, img.width, img.height, -angle_deg);
      const int x0 = static_cast<int>(std::floor(q.x)), y0 = static_cast<int>(std::floor(q.y));
      const double fx = q.x - x0, fy = q.y - y0;
      const double v = (1 - fx) * (1 - fy) * sample(x0, y0) + fx * (1 - fy) * sample(x0 + 1, y0) +
                       (1 - fx) * fy * sample(x0, y0 + 1) + fx * fy * sample(x0 + 1, y0 + 1);
      out.at(x, y) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  return out;
}

std::vector<double> harris_response(const EdgeMap& em, const HarrisParams& params) {
  const int w = em.width, h = em.height;
  const Raster src = from_edges(em);
  Raster gx(w, h), gy(w, h);
  sobel(src, gx, gy);
  Raster xx(w, h), yy(w, h), xy(w, h);
  for (std::size_t i = 0; i < src.v.size(); ++i) {
    xx.v[i] = gx.v[i] * gx.v[i];
    yy.v[i] = gy.v[i] * gy.v[i];
    xy.v[i] = gx.v[i] * gy.v[i];
  }
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * params.sigma)));
  const auto k = gaussian_kernel(params.sigma, radius);
  xx = separable_blur(xx, k);
  yy = separable_blur(yy, k);
  xy = separable_blur(xy, k);
  std::vector<double> r(src.v.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double det = xx.v[i] * yy.v[i] - xy.v[i] * xy.v[i];
    const double tr = xx.v[i] + yy.v[i];
    r[i] = det - params.k * tr * tr;
  }
  return r;
}

std::vector<Point> detect_corners(const EdgeMap& em, const HarrisParams& params) {
  const auto r = harris_response(em, params);
  const double mx = r.empty() ? 0.0 : *std::max_element(r.begin(), r.end());
  std::vector<Point> corners;
  if (!(mx > 0.0)) return corners;
  const double thr = params.relative_threshold * mx;
  const int w = em.width, h = em.height;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = r[static_cast<std::size_t>(y * w + x)];
      if (v <= thr) continue;
      bool is_max = true;
      for (int ny = y - 1; ny <= y + 1 && is_max; ++ny)
        for (int nx = x - 1; nx <= x + 1; ++nx) {
          if ((nx == x && ny == y) || nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const double u = r[static_cast<std::size_t>(ny * w + nx)];
          // strict against earlier neighbours so plateaus yield one point
          const bool earlier = ny < y || (ny == y && nx < x);
          if (u > v || (earlier && u == v)) {
            is_max = false;
            break;
          }
        }
      if (is_max) corners.push_back({double(x), double(y)});
    }
  return corners;
}

std::vector<Point> farthest_point_subset(std::span<const Point> candidates, int k) {
  if (k < 1) throw Error("farthest_point_subset: k must be positive");
  const auto n = candidates.size();
  if (n < static_cast<std::size_t>(k)) {
    throw Error("farthest_point_subset: " + std::to_string(n) + " candidates for k=" + std::to_string(k));
  }
  if (n == static_cast<std::size_t>(k)) return {candidates.begin(), candidates.end()};

  std::vector<std::size_t> chosen;
  if (k == 1) {
    chosen.push_back(0);
  } else {
    std::size_t bi = 0, bj = 1;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double d = sq_dist(candidates[i], candidates[j]);
        if (d > best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    chosen = {bi, bj};
  }
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  for (auto c : chosen)
    for (std::size_t i = 0; i < n; ++i) min_d[i] = std::min(min_d[i], sq_dist(candidates[i], candidates[c]));
  while (chosen.size() < static_cast<std::size_t>(k)) {
    std::size_t pick = n;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      if (min_d[i] > best) {
        best = min_d[i];
        pick = i;
      }
    }
    chosen.push_back(pick);
    for (std::size_t i = 0; i < n; ++i) min_d[i] = std::min(min_d[i], sq_dist(candidates[i], candidates[pick]));
  }
  std::vector<Point> out;
  out.reserve(chosen.size());
  for (auto c : chosen) out.push_back(candidates[c]);
  return out;
}

std::vector<Point> select_from_candidates(std::span<const Point> corners, std::span<const Point> edge_pixels,
                                          int k) {
  if (corners.size() >= static_cast<std::size_t>(k)) return farthest_point_subset(corners, k);
  std::vector<Point> pool(corners.begin(), corners.end());
  for (const auto& p : edge_pixels) {
    if (std::find(pool.begin(), pool.end(), p) == pool.end()) pool.push_back(p);
  }
  return farthest_point_subset(pool, k);
}

std::vector<Point> select_control_points(const EdgeMap& em, int grid, int k, Rng& rng,
                                         const HarrisParams& harris) {
  if (k < 3) throw Error("select_control_points: k must be at least 3");
  if (grid < 1) throw Error("select_control_points: grid must be positive");
  const int pw = (em.width + grid - 1) / grid;
  const int ph = (em.height + grid - 1) / grid;
  auto patch_of = [&](int x, int y) { return std::min(y / ph, grid - 1) * grid + std::min(x / pw, grid - 1); };

  std::vector<int> edge_patches;
  for (int y = 0; y < em.height; ++y)
    for (int x = 0; x < em.width; ++x)
      if (em.at(x, y)) edge_patches.push_back(patch_of(x, y));
  std::sort(edge_patches.begin(), edge_patches.end());
  edge_patches.erase(std::unique(edge_patches.begin(), edge_patches.end()), edge_patches.end());
  if (edge_patches.size() < static_cast<std::size_t>(k)) {
    throw Error("only " + std::to_string(edge_patches.size()) + " edge-containing patches, need " +
                std::to_string(k) + "; skip the TPS stage for this map");
  }

  // Partial Fisher-Yates: the first k entries become the sample.
  for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, edge_patches.size() - 1);
    std::swap(edge_patches[i], edge_patches[pick(rng)]);
  }
  std::vector<int> sampled(edge_patches.begin(), edge_patches.begin() + k);
  auto in_sample = [&](int x, int y) {
    return std::find(sampled.begin(), sampled.end(), patch_of(x, y)) != sampled.end();
  };

  std::vector<Point> corners;
  for (const auto& c : detect_corners(em, harris)) {
    const int x = static_cast<int>(c.x), y = static_cast<int>(c.y);
    if (in_sample(x, y) && em.at(x, y)) corners.push_back(c);
  }
  std::vector<Point> edge_pixels;
  for (int y = 0; y < em.height; ++y)
    for (int x = 0; x < em.width; ++x)
      if (em.at(x, y) && in_sample(x, y)) edge_pixels.push_back({double(x), double(y)});
  return select_from_candidates(corners, edge_pixels, k);
}

double tps_kernel(double r2) { return r2 > 0.0 ? r2 * std::log(r2) : 0.0; }

TpsWarp::TpsWarp(std::vector<Point> source, std::vector<Point> target, std::vector<Point> weights,
                 std::array<double, 6> affine, double regularization)
    : source_(std::move(source)),
      target_(std::move(target)),
      weights_(std::move(weights)),
      affine_(affine),
      regularization_(regularization) {}

Point TpsWarp::operator()(Point p) const {
  double x = affine_[0] + affine_[1] * p.x + affine_[2] * p.y;
  double y = affine_[3] + affine_[4] * p.x + affine_[5] * p.y;
  for (std::size_t i = 0; i < source_.size(); ++i) {
    const double u = tps_kernel(sq_dist(p, source_[i]));
    x += weights_[i].x * u;
    y += weights_[i].y * u;
  }
  return {x, y};
}

TpsWarp TpsWarp::inverse() const { return fit_tps(target_, source_, regularization_); }

TpsWarp fit_tps(std::span<const Point> source, std::span<const Point> target, double regularization) {
  const auto n = source.size();
  if (n != target.size()) throw Error("fit_tps: source and target counts differ");
  if (n < 3) throw Error("fit_tps: need at least 3 control points");
  if (regularization < 0.0) throw Error("fit_tps: regularization must be non-negative");

  bool collinear = true;
  for (std::size_t i = 2; i < n && collinear; ++i) {
    for (std::size_t j = 1; j < i && collinear; ++j) {
      const double cross = (source[j].x - source[0].x) * (source[i].y - source[0].y) -
                           (source[j].y - source[0].y) * (source[i].x - source[0].x);
      if (std::abs(cross) > 1e-9) collinear = false;
    }
  }
  if (collinear) throw Error("fit_tps: singular system, source points are collinear");

  const auto m = static_cast<Eigen::Index>(n + 3);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(m, m);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(m, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < n; ++j) {
      L(ii, static_cast<Eigen::Index>(j)) = tps_kernel(sq_dist(source[i], source[j]));
    }
    L(ii, ii) += regularization;
    const auto row = static_cast<Eigen::Index>(n);
    L(ii, row) = L(row, ii) = 1.0;
    L(ii, row + 1) = L(row + 1, ii) = source[i].x;
    L(ii, row + 2) = L(row + 2, ii) = source[i].y;
    rhs(ii, 0) = target[i].x;
    rhs(ii, 1) = target[i].y;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(L);
  if (!lu.isInvertible()) throw Error("fit_tps: singular system (repeated or degenerate source points)");
  const Eigen::MatrixXd sol = lu.solve(rhs);
  if (!sol.allFinite()) throw Error("fit_tps: non-finite solution");

  std::vector<Point> weights(n);
  for (std::size_t i = 0; i < n; ++i) {
    weights[i] = {sol(static_cast<Eigen::Index>(i), 0), sol(static_cast<Eigen::Index>(i), 1)};
  }
  const auto a = static_cast<Eigen::Index>(n);
  const std::array<double, 6> affine{sol(a, 0), sol(a + 1, 0), sol(a + 2, 0),
                                     sol(a, 1), sol(a + 1, 1), sol(a + 2, 1)};
  return TpsWarp({source.begin(), source.end()}, {target.begin(), target.end()}, std::move(weights), affine,
                 regularization);
}

EdgeMap warp_edge_map(const EdgeMap& em, const TpsWarp& warp, int binarize_threshold) {
  const TpsWarp back = warp.inverse();
  EdgeMap out(em.width, em.height);
  out.provenance = em.provenance;
  auto sample = [&](int x, int y) -> double { return em.contains(x, y) && em.at(x, y) ? 255.0 : 0.0; };
  for (int y = 0; y < em.height; ++y)
    for (int x = 0; x < em.width; ++x) {
      const Point q = back({double(x), double(y)});
      const double fx = std::floor(q.x), fy = std::floor(q.y);
      const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
      const double ax = q.x - fx, ay = q.y - fy;
      const double v = (1 - ax) * (1 - ay) * sample(x0, y0) + ax * (1 - ay) * sample(x0 + 1, y0) +
                       (1 - ax) * ay * sample(x0, y0 + 1) + ax * ay * sample(x0 + 1, y0 + 1);
      out.at(x, y) = v > binarize_threshold ? 1 : 0;
    }
  out.provenance.tps = TpsRecord{warp.source(), warp.target()};
  out.provenance.order.push_back("tps");
  return out;
}

EdgeMap augment_contour(const GrayImage& img, Rigidity rigidity, const AugmentParams& params, Rng& rng) {
  if (!(params.flip_probability >= 0.0 && params.flip_probability <= 1.0)) {
    throw Error("augment_contour: flip_probability must be in [0, 1]");
  }
  if (!(params.max_rotation_deg >= 0.0 && params.max_rotation_deg <= 45.0)) {
    throw Error("augment_contour: max_rotation_deg must be in [0, 45]");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  EdgeMap em = canny(img, params.canny_low, params.canny_high);
  const bool flip = unit(rng) < params.flip_probability;
  const double angle = (2.0 * unit(rng) - 1.0) * params.max_rotation_deg;
  em = flip_rotate(em, flip, angle);
  if (rigidity == Rigidity::rigid) return em;

  try {
    const auto sources = select_control_points(em, params.grid, params.control_points, rng, params.harris);
    const double patch = static_cast<double>((em.width + params.grid - 1) / params.grid);
    const double bound = params.perturbation.value_or(patch / 2.0);
    std::vector<Point> targets;
    targets.reserve(sources.size());
    for (const auto& p : sources) {
      const double ox = (2.0 * unit(rng) - 1.0) * bound;
      const double oy = (2.0 * unit(rng) - 1.0) * bound;
      targets.push_back({p.x + ox, p.y + oy});
    }
    const TpsWarp warp = fit_tps(sources, targets, params.regularization);
    em = warp_edge_map(em, warp, params.binarize_threshold);
  } catch (const Error& e) {
    em.provenance.order.push_back("tps-skipped");
    em.provenance.note = e.what();
  }
  return em;
}

std::string provenance_json(const EdgeMap& em) {
  using nlohmann::json;
  auto points = [](const std::vector<Point>& ps) {
    json arr = json::array();
    for (const auto& p : ps) arr.push_back({p.x, p.y});
    return arr;
  };
  json j;
  j["width"] = em.width;
  j["height"] = em.height;
  j["flipped"] = em.provenance.flipped;
  j["rotation_deg"] = em.provenance.rotation_deg;
  j["order"] = em.provenance.order;
  if (em.provenance.tps) {
    j["tps"] = {{"source", points(em.provenance.tps->source)}, {"target", points(em.provenance.tps->target)}};
  } else {
    j["tps"] = nullptr;
  }
  if (!em.provenance.note.empty()) j["note"] = em.provenance.note;
  return j.dump(2);
}

}  // namespace higfa::contour
