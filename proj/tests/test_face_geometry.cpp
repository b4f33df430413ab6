#include "testing.hpp"

#include <random>

#include "cmark/errors.hpp"
#include "cmark/face_geometry.hpp"
#include "cmark/synthetic_faces.hpp"
#include "oracles.hpp"

using namespace cmark;
using namespace cmark::geometry;

namespace {

Mask mask_from_grid(const oracle::Grid& g) {
  Mask m(g.h, g.w);
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) m.at(y, x) = static_cast<std::uint8_t>(g.at(y, x));
  return m;
}

bool same(const Mask& m, const oracle::Grid& g) {
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x)
      if (m.at(y, x) != g.at(y, x)) return false;
  return true;
}

oracle::Grid difference(const oracle::Grid& a, const oracle::Grid& b) {
  oracle::Grid d = a;
  for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] = a.v[i] && !b.v[i];
  return d;
}

}  // namespace

TEST_CASE("dilation matches the neighbourhood-max oracle on every 3x3 mask") {
  for (int bits = 0; bits < 512; ++bits) {
    oracle::Grid g{3, 3, std::vector<int>(9)};
    for (int i = 0; i < 9; ++i) g.v[static_cast<std::size_t>(i)] = (bits >> i) & 1;
    const Mask m = mask_from_grid(g);
    for (int it = 1; it <= 3; ++it) {
      CHECK(same(morphological_dilate(m, it), oracle::dilate(g, it)));
    }
  }
}

TEST_CASE("contour mask is dilation minus face, with the documented errors") {
  for (int bits = 0; bits < 512; ++bits) {
    oracle::Grid g{3, 3, std::vector<int>(9)};
    for (int i = 0; i < 9; ++i) g.v[static_cast<std::size_t>(i)] = (bits >> i) & 1;
    const Mask m = mask_from_grid(g);
    if (bits == 0) {
      CHECK_THROWS_AS(contour_mask(m, 1), Error);
      continue;
    }
    const auto ring = difference(oracle::dilate(g, 1), g);
    const bool empty = std::all_of(ring.v.begin(), ring.v.end(), [](int v) { return v == 0; });
    if (empty) {
      try {
        contour_mask(m, 1);
        FAIL("expected EmptyContour");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::EmptyContour);
      }
    } else {
      CHECK(same(contour_mask(m, 1), ring));
    }
  }
}

TEST_CASE("dilation and contour agree with the oracle on random 16x16 masks") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    oracle::Grid g{16, 16, std::vector<int>(256)};
    const double density = 0.02 + 0.3 * (trial % 10) / 10.0;
    for (auto& v : g.v) v = std::uniform_real_distribution<>(0, 1)(rng) < density ? 1 : 0;
    g.v[static_cast<std::size_t>(trial % 256)] = 1;
    const Mask m = mask_from_grid(g);
    const int it = 2 + trial % 3;
    CHECK(same(morphological_dilate(m, it), oracle::dilate(g, it)));
    CHECK(same(contour_mask(m, it), difference(oracle::dilate(g, it), g)));
  }
}

TEST_CASE("dilation rejects a non-positive iteration count") {
  CHECK_THROWS_AS(morphological_dilate(Mask(4, 4, 1), 0), Error);
}

TEST_CASE("contour is disjoint from the face and grows with the iteration count") {
  Mask face(64, 64);
  for (int y = 20; y < 44; ++y)
    for (int x = 22; x < 40; ++x) face.at(y, x) = 1;
  std::size_t prev = 0;
  for (int it = 1; it <= 5; ++it) {
    const Mask ring = contour_mask(face, it);
    CHECK((ring & face).count() == 0);
    CHECK(ring.count() > prev);
    // Rectangle dilated by `it` pixels on each side.
    CHECK(ring.count() == static_cast<std::size_t>((24 + 2 * it) * (18 + 2 * it) - 24 * 18));
    prev = ring.count();
  }
}

TEST_CASE("convex hull keeps the extreme points and drops interior ones") {
  std::vector<Point> pts{{0, 0}, {10, 0}, {10, 10}, {0, 10}, {5, 5}, {3, 7}, {10, 5}};
  const auto hull = convex_hull(pts);
  CHECK(hull.size() == 4);
  double area2 = 0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    area2 += a.x * b.y - b.x * a.y;
  }
  CHECK(std::abs(area2) == doctest::Approx(200.0));
}

TEST_CASE("hull fill matches a point-in-polygon oracle for integer landmarks") {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Point> pts;
    for (int k = 0; k < 8; ++k) {
      pts.push_back({static_cast<double>(std::uniform_int_distribution<>(2, 45)(rng)),
                     static_cast<double>(std::uniform_int_distribution<>(2, 45)(rng))});
    }
    const auto hull = convex_hull(pts);
    if (hull.size() < 3) continue;
    Mask m;
    try {
      m = face_mask_from_landmarks(LandmarkSet(pts, 48, 48), 48, 48);
    } catch (const Error&) {
      continue;
    }
    // Inside (boundary inclusive) iff on the same side of every edge.
    for (int y = 0; y < 48; ++y) {
      for (int x = 0; x < 48; ++x) {
        bool pos = true, neg = true;
        for (std::size_t i = 0; i < hull.size(); ++i) {
          const auto& a = hull[i];
          const auto& b = hull[(i + 1) % hull.size()];
          const double c = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
          if (c < 0) pos = false;
          if (c > 0) neg = false;
        }
        CHECK(m.at(y, x) == ((pos || neg) ? 1 : 0));
      }
    }
  }
}

TEST_CASE("collinear landmarks are rejected as a degenerate hull") {
  std::vector<Point> pts{{1, 1}, {2, 2}, {3, 3}, {4, 4}, {5, 5}};
  try {
    face_mask_from_landmarks(LandmarkSet(pts, 16, 16), 16, 16);
    FAIL("expected DegenerateHull");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateHull);
  }
}

TEST_CASE("landmark sets need five points and clamp into the frame") {
  CHECK_THROWS_AS(LandmarkSet({{1, 1}, {2, 2}}, 8, 8), Error);
  LandmarkSet s({{-4, 3}, {20, 3}, {3, -1}, {3, 9}, {1, 1}}, 8, 8);
  CHECK(s.points()[0].x == 0.0);
  CHECK(s.points()[1].x == 7.0);
  CHECK(s.points()[2].y == 0.0);
  CHECK(s.points()[3].y == 7.0);
}

TEST_CASE("skin-ellipse detector finds the face on rendered portraits") {
  const auto faces = synth::make_corpus(10, 3, 21);
  int found = 0;
  for (const auto& f : faces) {
    try {
      const auto masks = extract_region_masks(f.image);
      ++found;
      CHECK((masks.face_mask & masks.contour_mask).count() == 0);
      CHECK(masks.face_mask.count() > 1500);
      CHECK(masks.face_mask.count() < 6000);
      const auto lm = detect_landmarks(f.image);
      CHECK(lm.count() == LandmarkSet::kKeypoints + 32);
    } catch (const Error&) {
    }
  }
  CHECK(found >= 28);
}

TEST_CASE("detector reports NoFaceFound on an image without skin tones") {
  Image img(128, 128);
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) {
      img.at(y, x, 0) = 0.1f;
      img.at(y, x, 1) = 0.3f;
      img.at(y, x, 2) = 0.8f;
    }
  try {
    detect_landmarks(img);
    FAIL("expected NoFaceFound");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoFaceFound);
  }
  CHECK_THROWS_AS(detect_landmarks(Image(32, 32)), Error);
}

TEST_CASE("backend registry returns the default and rejects unknown names") {
  CHECK(make_landmark_detector()->name() == "skin-ellipse");
  CHECK_THROWS_AS(make_landmark_detector("nope"), Error);
}

TEST_CASE("sampled training dilation stays in {2,3,4}") {
  Rng rng(1);
  int seen[5] = {};
  for (int i = 0; i < 300; ++i) {
    const int k = sample_dilation_iterations(rng);
    REQUIRE(k >= 2);
    REQUIRE(k <= 4);
    ++seen[k];
  }
  CHECK(seen[2] > 0);
  CHECK(seen[3] > 0);
  CHECK(seen[4] > 0);
}
