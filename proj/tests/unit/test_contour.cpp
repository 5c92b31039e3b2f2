#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "higfa/contour.hpp"
#include "higfa/error.hpp"
#include "higfa/synthbench.hpp"
#include "golden_cases.hpp"
#include "support.hpp"

using namespace higfa;
using namespace higfa::testing;
using contour::EdgeMap;
using contour::Point;

namespace {

std::vector<Point> random_points(Rng& rng, int n, double lo, double hi) {
  std::vector<Point> pts;
  for (int i = 0; i < n; ++i) pts.push_back({uniform(rng, lo, hi), uniform(rng, lo, hi)});
  return pts;
}

}  // namespace

TEST_SUITE("contour") {

TEST_CASE("canny on a step edge yields one straight 1-pixel line") {
  for (int column : {6, 8, 11}) {
    const auto em = contour::canny(step_edge(24, column));
    CHECK(em.is_binary());
    std::map<int, int> per_column;
    for (int y = 0; y < 24; ++y) {
      int in_row = 0;
      for (int x = 0; x < 24; ++x) {
        if (em.at(x, y)) ++in_row, ++per_column[x];
      }
      CHECK(in_row == 1);
    }
    REQUIRE(per_column.size() == 1);
    CHECK(std::abs(per_column.begin()->first - column) <= 1);
  }
}

TEST_CASE("canny finds nothing in flat images and rejects bad thresholds") {
  CHECK(contour::canny(GrayImage(16, 16, 0)).edge_count() == 0);
  CHECK(contour::canny(GrayImage(16, 16, 200)).edge_count() == 0);
  CHECK_THROWS_AS(contour::canny(GrayImage(16, 16), 200, 100), Error);
}

TEST_CASE("rotation about the centre") {
  const Point c = contour::rotate_about_center({7.5, 7.5}, 16, 16, 33.0);
  CHECK(c.x == doctest::Approx(7.5));
  CHECK(c.y == doctest::Approx(7.5));
  const Point p = contour::rotate_about_center({15.0, 7.5}, 16, 16, 90.0);
  CHECK(p.x == doctest::Approx(7.5));
  CHECK(p.y == doctest::Approx(15.0));
  Rng rng = make_rng(71);
  for (const auto& q : random_points(rng, 50, 0, 15)) {
    const Point r = contour::rotate_about_center(contour::rotate_about_center(q, 16, 16, 12.0), 16, 16, -12.0);
    CHECK(r.x == doctest::Approx(q.x));
    CHECK(r.y == doctest::Approx(q.y));
  }
}

TEST_CASE("flip and rotate") {
  const auto em = contour::canny(synthbench::render(2, 210, 0, 0));
  const auto same = contour::flip_rotate(em, false, 0.0);
  CHECK(same.bits == em.bits);
  const auto twice = contour::flip_rotate(contour::flip_rotate(em, true, 0.0), true, 0.0);
  CHECK(twice.bits == em.bits);
  const auto flipped = contour::flip_rotate(em, true, 0.0);
  for (int y = 0; y < em.height; ++y)
    for (int x = 0; x < em.width; ++x) CHECK(flipped.at(x, y) == em.at(em.width - 1 - x, y));
  CHECK(flipped.provenance.flipped);
  CHECK_THROWS_AS(contour::flip_rotate(em, false, 60.0), Error);
  const auto img = synthbench::render(1, 200, 0, 0);
  CHECK(contour::flip_rotate_image(img, false, 0.0) == img);
}

TEST_CASE("TPS interpolates its control points") {
  Rng rng = make_rng(72);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = static_cast<int>(draw(rng, 3, 9));
    const auto src = random_points(rng, n, 0, 16);
    auto dst = src;
    for (auto& p : dst) p = {p.x + uniform(rng, -2, 2), p.y + uniform(rng, -2, 2)};
    const auto w = contour::fit_tps(src, dst);
    for (int i = 0; i < n; ++i) {
      const Point q = w(src[static_cast<std::size_t>(i)]);
      CHECK(std::abs(q.x - dst[static_cast<std::size_t>(i)].x) < 1e-9);
      CHECK(std::abs(q.y - dst[static_cast<std::size_t>(i)].y) < 1e-9);
    }
  }
}

TEST_CASE("TPS reproduces an affine target map everywhere") {
  Rng rng = make_rng(73);
  for (int trial = 0; trial < 10; ++trial) {
    const double a[6] = {uniform(rng, -3, 3), uniform(rng, 0.5, 1.5), uniform(rng, -0.5, 0.5),
                         uniform(rng, -3, 3), uniform(rng, -0.5, 0.5), uniform(rng, 0.5, 1.5)};
    auto affine = [&](Point p) { return Point{a[0] + a[1] * p.x + a[2] * p.y, a[3] + a[4] * p.x + a[5] * p.y}; };
    const auto src = random_points(rng, 6, 0, 16);
    std::vector<Point> dst;
    for (const auto& p : src) dst.push_back(affine(p));
    const auto w = contour::fit_tps(src, dst);
    for (const auto& wt : w.weights()) {
      CHECK(std::abs(wt.x) < 1e-9);
      CHECK(std::abs(wt.y) < 1e-9);
    }
    for (const auto& p : random_points(rng, 100, -5, 20)) {
      const Point q = w(p), e = affine(p);
      CHECK(std::abs(q.x - e.x) < 1e-9);
      CHECK(std::abs(q.y - e.y) < 1e-9);
    }
  }
}

TEST_CASE("TPS kernel and degenerate systems") {
  CHECK(contour::tps_kernel(0.0) == 0.0);
  CHECK(contour::tps_kernel(std::exp(1.0)) == doctest::Approx(std::exp(1.0)));
  const std::vector<Point> line{{0, 0}, {1, 1}, {2, 2}, {3, 3}};
  CHECK_THROWS_AS(contour::fit_tps(line, line), Error);
  const std::vector<Point> two{{0, 0}, {1, 0}};
  CHECK_THROWS_AS(contour::fit_tps(two, two), Error);
  const std::vector<Point> dup{{0, 0}, {4, 0}, {0, 4}, {0, 4}};
  CHECK_THROWS_AS(contour::fit_tps(dup, dup), Error);
}

TEST_CASE("regularised TPS trades exactness for smoothness") {
  Rng rng = make_rng(74);
  const auto src = random_points(rng, 6, 0, 16);
  auto dst = src;
  for (auto& p : dst) p = {p.x + uniform(rng, -2, 2), p.y + uniform(rng, -2, 2)};
  const auto w = contour::fit_tps(src, dst, 10.0);
  double err = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) err += std::abs(w(src[i]).x - dst[i].x);
  CHECK(err > 1e-6);
  CHECK(w.regularization() == 10.0);
}

TEST_CASE("identity warp leaves the edge map unchanged") {
  const auto em = contour::canny(synthbench::render(6, 210, 0, 0));
  const std::vector<Point> pts{{2, 3}, {12, 4}, {7, 13}, {4, 9}};
  const auto out = contour::warp_edge_map(em, contour::fit_tps(pts, pts));
  CHECK(out.bits == em.bits);
  REQUIRE(out.provenance.tps.has_value());
  CHECK(out.provenance.order.back() == "tps");
}

TEST_CASE("farthest-point subset starts from the farthest pair") {
  Rng rng = make_rng(75);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = random_points(rng, static_cast<int>(draw(rng, 5, 15)), 0, 16);
    const auto sub = contour::farthest_point_subset(pts, 4);
    REQUIRE(sub.size() == 4);
    double best = -1;
    for (std::size_t i = 0; i < pts.size(); ++i)
      for (std::size_t j = i + 1; j < pts.size(); ++j) {
        best = std::max(best, std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y));
      }
    CHECK(std::hypot(sub[0].x - sub[1].x, sub[0].y - sub[1].y) == doctest::Approx(best));
    for (std::size_t i = 0; i < sub.size(); ++i)
      for (std::size_t j = i + 1; j < sub.size(); ++j) CHECK_FALSE(sub[i] == sub[j]);
  }
  const std::vector<Point> few{{0, 0}, {1, 1}};
  CHECK_THROWS_AS(contour::farthest_point_subset(few, 3), Error);
}

TEST_CASE("candidate pool is topped up with edge pixels") {
  const std::vector<Point> corners{{1, 1}};
  const std::vector<Point> edges{{1, 1}, {10, 1}, {5, 9}, {12, 12}};
  const auto pts = contour::select_from_candidates(corners, edges, 3);
  CHECK(pts.size() == 3);
}

TEST_CASE("harris responds at corners of a square") {
  EdgeMap em(16, 16);
  for (int i = 4; i <= 11; ++i) em.at(i, 4) = em.at(i, 11) = em.at(4, i) = em.at(11, i) = 1;
  const auto corners = contour::detect_corners(em);
  REQUIRE_FALSE(corners.empty());
  bool near_corner = false;
  for (const auto& c : corners) near_corner = near_corner || (std::abs(c.x - 4) <= 1 && std::abs(c.y - 4) <= 1);
  CHECK(near_corner);
}

TEST_CASE("control points lie on edge-containing patches") {
  const auto em = contour::canny(synthbench::render(4, 230, 0, 0));
  Rng rng = make_rng(76);
  const auto pts = contour::select_control_points(em, 8, 5, rng);
  CHECK(pts.size() == 5);
  CHECK_THROWS_AS(contour::select_control_points(EdgeMap(16, 16), 8, 5, rng), Error);
}

TEST_CASE("augment_contour is byte-identical under a fixed seed and binary") {
  for (const auto& c : golden_cases()) {
    const auto a = golden_map(c), b = golden_map(c);
    CHECK(encode_pgm(a.to_image()) == encode_pgm(b.to_image()));
    CHECK(a.is_binary());
    CHECK(contour::provenance_json(a) == contour::provenance_json(b));
    CHECK(a.provenance.order.front() == "canny");
    if (c.rigidity == contour::Rigidity::nonrigid) CHECK(a.provenance.tps.has_value());
  }
}

TEST_CASE("augment_contour matches the committed golden hashes") {
  const std::filesystem::path dir = HIGFA_GOLDEN_DIR;
  if (std::getenv("HIGFA_UPDATE_GOLDEN")) {
    std::ofstream out(dir / "contour_hashes.txt");
    for (const auto& c : golden_cases()) {
      const auto bytes = encode_pgm(golden_map(c).to_image());
      write_pgm(dir / (c.name + ".pgm"), golden_map(c).to_image());
      out << c.name << ' ' << fnv1a_hex(bytes) << '\n';
    }
  }
  const auto expected = read_golden_hashes(dir);
  REQUIRE(expected.size() == golden_cases().size());
  for (const auto& c : golden_cases()) {
    INFO(c.name);
    const auto bytes = encode_pgm(golden_map(c).to_image());
    CHECK(fnv1a_hex(bytes) == expected.at(c.name));
    CHECK(read_pgm(dir / (c.name + ".pgm")) == golden_map(c).to_image());
  }
}

TEST_CASE("pgm and png files round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "higfa_image_io";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  GrayImage img(7, 5, 0);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>((i * 37) % 256);
  write_image(dir / "a.png", img);
  write_image(dir / "a.pgm", img);
  CHECK(read_image(dir / "a.png") == img);
  CHECK(read_image(dir / "a.pgm") == img);
  CHECK(decode_pgm(encode_pgm(img)) == img);
  CHECK_THROWS_AS(read_image(dir / "a.bmp"), Error);
  CHECK_THROWS_AS(read_png(dir / "a.pgm"), Error);
}

TEST_CASE("provenance records the applied transforms") {
  Rng rng = make_rng(77);
  contour::AugmentParams p;
  p.flip_probability = 1.0;
  const auto em = contour::augment_contour(synthbench::render(0, 200, 0, 0), contour::Rigidity::rigid, p, rng);
  CHECK(em.provenance.flipped);
  CHECK(std::abs(em.provenance.rotation_deg) <= 15.0);
  const std::string json = contour::provenance_json(em);
  CHECK(json.find("\"flipped\"") != std::string::npos);
  p.max_rotation_deg = 50.0;
  CHECK_THROWS_AS(contour::augment_contour(synthbench::render(0, 200, 0, 0), contour::Rigidity::rigid, p, rng), Error);
}

TEST_CASE("edge map raster conversions") {
  EdgeMap em(3, 2);
  em.at(1, 0) = 1;
  const auto img = em.to_image();
  CHECK(img.at(1, 0) == 255);
  CHECK(img.at(0, 0) == 0);
  CHECK(EdgeMap::from_image(img).bits == em.bits);
  CHECK(em.edge_count() == 1);
}

}  // TEST_SUITE
