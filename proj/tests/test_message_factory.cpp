#include "testing.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "cmark/errors.hpp"
#include "cmark/face_geometry.hpp"
#include "cmark/message_factory.hpp"
#include "cmark/synthetic_faces.hpp"

using namespace cmark;
using namespace cmark::message;

namespace {

// Cyclic Jacobi eigenvalues of a symmetric matrix.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a[i][j] * a[i][j];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

Mask box(int h, int w, int y0, int y1, int x0, int x1) {
  Mask m(h, w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.at(y, x) = 1;
  return m;
}

Image noise_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& v : img.data()) v = static_cast<float>(uniform(rng, 0, 1));
  return img;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST_CASE("extractor is deterministic and reads only masked pixels") {
  const RandomConvExtractor ex;
  const Image a = noise_image(64, 64, 1);
  Image b = a;
  const Mask m = box(64, 64, 16, 40, 12, 44);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if (!m.at(y, x))
        for (int c = 0; c < 3; ++c) b.at(y, x, c) = 1.0f - b.at(y, x, c);
  const auto fa = ex.extract(a, m);
  CHECK(fa == ex.extract(a, m));
  CHECK(fa == RandomConvExtractor().extract(a, m));
  CHECK(fa == ex.extract(b, m));
  CHECK(fa.size() == ex.dims());
  CHECK(ex.dims() == 3 + 16 + 32 + 64);
}

TEST_CASE("extractor rejects empty regions and mismatched masks") {
  const RandomConvExtractor ex;
  const Image a = noise_image(32, 32, 2);
  try {
    ex.extract(a, Mask(32, 32));
    FAIL("expected EmptyRegion");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyRegion);
  }
  try {
    ex.extract(a, Mask(16, 16, 1));
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
}

TEST_CASE("identity features separate identities better than brightness jitter") {
  const RandomConvExtractor ex;
  Rng rng(8);
  std::vector<std::vector<double>> feats;
  std::vector<std::vector<double>> bright;
  for (int id = 0; id < 12; ++id) {
    const auto params = synth::sample_identity(rng);
    const Image img = synth::render_face(params, rng);
    const auto masks = geometry::extract_region_masks(img);
    feats.push_back(extract_identity_feature(img, masks.face_mask, ex).values);
    Image j = img;
    for (auto& v : j.data()) v = std::min(1.0f, v * 1.1f);
    bright.push_back(extract_identity_feature(j, masks.face_mask, ex).values);
  }
  double same = 0, diff = 0;
  int nd = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    same += cosine(feats[i], bright[i]);
    for (std::size_t k = i + 1; k < feats.size(); ++k, ++nd) diff += cosine(feats[i], feats[k]);
  }
  CHECK(same / feats.size() > diff / nd);
}

TEST_CASE("global average pool matches the loop oracle") {
  CHECK(global_average_pool(torch::full({2, 3, 3}, 3.0)) == std::vector<double>{3.0, 3.0});
  CHECK(global_average_pool(torch::tensor({0.0, 0.0, 2.0, 2.0}).view({1, 2, 2}))[0] == 1.0);
  const torch::Tensor t = torch::rand({5, 7, 9}, torch::kFloat64);
  const auto g = global_average_pool(t.unsqueeze(0));
  const auto acc = t.accessor<double, 3>();
  for (int c = 0; c < 5; ++c) {
    double s = 0;
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 9; ++x) s += acc[c][y][x];
    CHECK(g[static_cast<std::size_t>(c)] == doctest::Approx(s / 63).epsilon(1e-12));
  }
}

TEST_CASE("PCA of points on a line recovers the line direction") {
  std::vector<std::vector<double>> f;
  for (int i = 0; i < 20; ++i) {
    const double t = i - 9.5;
    f.push_back({1 + 2 * t, -1 + t, 3 - 2 * t});
  }
  const auto b = fit_pca_basis(f, 1);
  const double n = 3.0;
  CHECK(std::abs(b.components(0, 0)) == doctest::Approx(2 / n));
  CHECK(std::abs(b.components(0, 1)) == doctest::Approx(1 / n));
  CHECK(std::abs(b.components(0, 2)) == doctest::Approx(2 / n));
  try {
    fit_pca_basis(f, 2);
    FAIL("expected RankDeficient");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::RankDeficient);
  }
}

TEST_CASE("projected variance equals the top eigenvalues of a Jacobi oracle") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> f(50, std::vector<double>(8));
  for (auto& row : f)
    for (std::size_t j = 0; j < 8; ++j) row[j] = nd(rng) * (1.0 + static_cast<double>(j));
  const auto b = fit_pca_basis(f, 4);

  std::vector<double> mean(8, 0.0);
  for (const auto& row : f)
    for (std::size_t j = 0; j < 8; ++j) mean[j] += row[j] / 50.0;
  std::vector<std::vector<double>> cov(8, std::vector<double>(8, 0.0));
  for (const auto& row : f)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]) / 49.0;
  const auto ev = jacobi_eigenvalues(cov);

  double projected = 0;
  std::vector<double> var(4, 0.0);
  for (const auto& row : f) {
    const auto p = b.project_raw(row);
    for (std::size_t k = 0; k < 4; ++k) var[k] += p[k] * p[k] / 49.0;
  }
  for (const double v : var) projected += v;
  CHECK(projected == doctest::Approx(ev[0] + ev[1] + ev[2] + ev[3]).epsilon(1e-6));
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(var[k] == doctest::Approx(ev[k]).epsilon(1e-6));
    CHECK(b.stddev[k] == doctest::Approx(std::sqrt(ev[k])).epsilon(1e-6));
  }
  // Whitened projections have unit variance.
  std::vector<double> wv(4, 0.0);
  for (const auto& row : f) {
    const auto p = b.project(row);
    for (std::size_t k = 0; k < 4; ++k) wv[k] += p[k] * p[k] / 49.0;
  }
  for (const double v : wv) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("reconstruction error does not increase with C") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> f(40, std::vector<double>(6));
  for (auto& row : f)
    for (std::size_t j = 0; j < 6; ++j) row[j] = nd(rng) * (6.0 - static_cast<double>(j));
  double prev = std::numeric_limits<double>::infinity();
  for (int C = 1; C <= 6; ++C) {
    const auto b = fit_pca_basis(f, C);
    double err = 0;
    for (const auto& row : f) {
      const auto r = b.reconstruct(b.project_raw(row));
      for (std::size_t j = 0; j < 6; ++j) err += (r[j] - row[j]) * (r[j] - row[j]);
    }
    CHECK(err <= prev + 1e-9);
    prev = err;
  }
  CHECK(prev == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("PCA basis survives a save/load round trip and detects corruption") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> f(30, std::vector<double>(5));
  for (auto& row : f)
    for (auto& v : row) v = nd(rng);
  const auto b = fit_pca_basis(f, 3);
  const auto path = std::filesystem::temp_directory_path() / "cmark_pca_test.bin";
  b.save(path);
  const auto c = PcaBasis::load(path);
  CHECK(c.C == 3);
  CHECK(c.mean == b.mean);
  CHECK(c.stddev == b.stddev);
  CHECK((c.components - b.components).norm() == 0.0);
  CHECK(c.checksum() == b.checksum());

  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    bytes[bytes.size() - 3] ^= 0x5a;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
  }
  CHECK_THROWS_AS(PcaBasis::load(path), Error);
  std::filesystem::remove(path);
  try {
    PcaBasis::load(path);
    FAIL("expected MissingFile");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingFile);
  }
}

TEST_CASE("scale_to_unit maps min to -1 and max to +1") {
  const std::vector<double> v{0, 5, 10};
  CHECK(scale_to_unit(v) == std::vector<double>{-1, 0, 1});
  const std::vector<double> w{-1, 0.25, 1};
  CHECK(scale_to_unit(w) == w);
  try {
    scale_to_unit(std::vector<double>{2, 2, 2});
    FAIL("expected ConstantVector");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConstantVector);
  }
}

TEST_CASE("binarize uses sign with ties going to +1") {
  CHECK(binarize(std::vector<double>{-0.3, 0.7}) == Bits{-1, 1});
  CHECK(binarize(std::vector<double>{0.0}) == Bits{1});
}

TEST_CASE("binarize after scaling thresholds at the midpoint") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-5, 7);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(16);
    for (auto& x : v) x = u(rng);
    const double lo = *std::min_element(v.begin(), v.end());
    const double hi = *std::max_element(v.begin(), v.end());
    std::vector<double> centred(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) centred[i] = v[i] - (lo + hi) / 2;
    CHECK(binarize(scale_to_unit(v)) == binarize(centred));
  }
}

TEST_CASE("hybrid message puts identity bits first and scales by alpha") {
  const auto m = assemble_hybrid({1, -1}, {-1, -1}, 0.1);
  CHECK(m.v == Bits{1, -1, -1, -1});
  CHECK(m.v_alpha == std::vector<double>{0.1, -0.1, -0.1, -0.1});
  CHECK(m.C() == 2);

  Bits vi(16), vc(16);
  Rng rng(2);
  for (auto& b : vi) b = (rng() & 1) ? 1 : -1;
  for (auto& b : vc) b = (rng() & 1) ? 1 : -1;
  for (const double alpha : {0.05, 0.1, 0.2, 3.0}) {
    const auto h = assemble_hybrid(vi, vc, alpha);
    CHECK(h.length() == 32);
    CHECK(binarize(h.v_alpha) == h.v);
    for (const double x : h.v_alpha) CHECK(std::abs(x) == doctest::Approx(alpha));
  }
  const auto back = hybrid_from_bits(assemble_hybrid(vi, vc, 0.1).v, 0.1);
  CHECK(back.v_i == vi);
  CHECK(back.v_c == vc);

  CHECK_THROWS_AS(assemble_hybrid({1}, {1, 1}, 0.1), Error);
  CHECK_THROWS_AS(assemble_hybrid({1}, {1}, 0.0), Error);
  CHECK_THROWS_AS(assemble_hybrid({2}, {1}, 0.1), Error);
}

TEST_CASE("message factory is deterministic for the same image") {
  const auto faces = synth::make_corpus(8, 4, 17);
  const RandomConvExtractor ex;
  std::vector<geometry::RegionMaskSet> masks;
  for (const auto& f : faces) masks.push_back(geometry::extract_region_masks(f.image));
  std::vector<CalibrationSample> samples;
  for (std::size_t i = 0; i < faces.size(); ++i) samples.push_back({&faces[i].image, &masks[i]});
  auto [bc, bi] = fit_message_bases(samples, ex, 4);
  const MessageFactory factory(std::make_shared<RandomConvExtractor>(), bc, bi, 0.1);
  const auto a = factory.make(faces[0].image, masks[0]);
  const auto b = factory.make(faces[0].image, masks[0]);
  CHECK(a.v == b.v);
  CHECK(a.length() == 8);
  CHECK(bits_from_json(bits_to_json(a.v)) == a.v);
}
