#include "cmark/face_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>

#include <opencv2/imgproc.hpp>

#include "cmark/errors.hpp"

namespace cmark::geometry {

LandmarkSet::LandmarkSet(std::vector<Point> points, int height, int width)
    : points_(std::move(points)), height_(height), width_(width) {
  if (points_.size() < kKeypoints) {
    throw Error(ErrorCode::BadParams, "a landmark set needs at least 5 points");
  }
  if (height <= 0 || width <= 0) throw Error(ErrorCode::BadParams, "bad landmark frame");
  for (auto& p : points_) {
    p.x = std::clamp(p.x, 0.0, static_cast<double>(width - 1));
    p.y = std::clamp(p.y, 0.0, static_cast<double>(height - 1));
  }
}

// ---------------------------------------------------------------------------
// Default detector

Mask SkinEllipseDetector::skin_pixels(const Image& image) {
  cv::Mat u8;
  to_mat(image.quantized()).convertTo(u8, CV_8UC3, 255.0);
  cv::Mat hsv;
  cv::cvtColor(u8, hsv, cv::COLOR_RGB2HSV_FULL);
  Mask skin(image.height(), image.width());
  for (int y = 0; y < hsv.rows; ++y) {
    const auto* row = hsv.ptr<cv::Vec3b>(y);
    for (int x = 0; x < hsv.cols; ++x) {
      const double hue = row[x][0] * 360.0 / 256.0;
      const double sat = row[x][1] / 255.0;
      const double val = row[x][2] / 255.0;
      const bool warm = hue < 40.0 || hue > 345.0;
      skin.at(y, x) = (warm && sat > 0.2 && sat < 0.7 && val > 0.4) ? 1 : 0;
    }
  }
  return skin;
}

LandmarkSet SkinEllipseDetector::detect(const Image& image) const {
  const Mask skin = skin_pixels(image);
  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(to_mat(skin), labels, stats, centroids, 8, CV_32S);
  int best = -1;
  int best_area = 0;
  for (int k = 1; k < n; ++k) {
    const int area = stats.at<int>(k, cv::CC_STAT_AREA);
    if (area > best_area) {
      best_area = area;
      best = k;
    }
  }
  const double min_area = options_.min_area_fraction * image.height() * image.width();
  if (best < 0 || best_area < min_area) throw Error(ErrorCode::NoFaceFound, "no skin-toned region");

  // Component with interior holes (eyes, mouth) filled.
  cv::Mat component = (labels == best) / 255;
  cv::Mat outside = component.clone();
  cv::Mat flood_mask = cv::Mat::zeros(outside.rows + 2, outside.cols + 2, CV_8UC1);
  for (const cv::Point& seed : {cv::Point(0, 0), cv::Point(outside.cols - 1, 0),
                               cv::Point(0, outside.rows - 1),
                               cv::Point(outside.cols - 1, outside.rows - 1)}) {
    if (outside.at<std::uint8_t>(seed) == 0) cv::floodFill(outside, flood_mask, seed, 2);
  }
  component.setTo(1, outside == 0);

  const cv::Moments m = cv::moments(component, true);
  if (m.m00 <= 0) throw Error(ErrorCode::NoFaceFound, "empty face component");
  const double cx = m.m10 / m.m00;
  const double cy = m.m01 / m.m00;
  const double sxx = m.mu20 / m.m00;
  const double syy = m.mu02 / m.m00;
  const double sxy = m.mu11 / m.m00;

  // Eigen-decomposition of the 2x2 covariance.
  const double tr = sxx + syy;
  const double det = sxx * syy - sxy * sxy;
  const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
  const double l1 = tr / 2.0 + disc;
  const double l2 = tr / 2.0 - disc;
  Point e1 = std::abs(sxy) > 1e-12 ? Point{l1 - syy, sxy} : (sxx >= syy ? Point{1, 0} : Point{0, 1});
  const double norm1 = std::hypot(e1.x, e1.y);
  e1 = {e1.x / norm1, e1.y / norm1};
  const Point e2{-e1.y, e1.x};
  const bool e1_vertical = std::abs(e1.y) >= std::abs(e2.y);
  Point vert = e1_vertical ? e1 : e2;
  const double lambda_vert = e1_vertical ? l1 : l2;
  const double lambda_horz = e1_vertical ? l2 : l1;
  if (vert.y < 0) vert = {-vert.x, -vert.y};
  const Point horz{vert.y, -vert.x};
  // A uniform ellipse with semi-axis a has variance a^2 / 4 along that axis.
  const double a_h = 2.0 * std::sqrt(std::max(lambda_horz, 0.0));
  const double a_v = 2.0 * std::sqrt(std::max(lambda_vert, 0.0));
  if (a_h < 2.0 || a_v < 2.0) throw Error(ErrorCode::NoFaceFound, "face region too thin");

  auto at = [&](double u, double v) {
    return Point{cx + a_h * u * horz.x + a_v * v * vert.x, cy + a_h * u * horz.y + a_v * v * vert.y};
  };
  std::vector<Point> points{at(-0.38, -0.18), at(0.38, -0.18), at(0.0, 0.12), at(-0.3, 0.5),
                            at(0.3, 0.5)};
  for (int k = 0; k < options_.outline_points; ++k) {
    const double t = 2.0 * std::numbers::pi * k / options_.outline_points;
    points.push_back(at(std::cos(t), std::sin(t)));
  }
  return LandmarkSet(std::move(points), image.height(), image.width());
}

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, DetectorFactory>& registry() {
  static std::map<std::string, DetectorFactory> r{
      {"skin-ellipse", [] { return std::make_unique<SkinEllipseDetector>(); }}};
  return r;
}

}  // namespace

void register_landmark_backend(const std::string& name, DetectorFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(factory);
}

std::unique_ptr<LandmarkDetector> make_landmark_detector(const std::string& name) {
  std::lock_guard lock(registry_mutex());
  auto it = registry().find(name);
  if (it == registry().end()) throw Error(ErrorCode::BadParams, "unknown landmark backend " + name);
  return it->second();
}

LandmarkSet detect_landmarks(const Image& image, const LandmarkDetector* detector) {
  if (image.height() < 64 || image.width() < 64) {
    throw Error(ErrorCode::BadParams, "landmark detection needs at least 64x64 pixels");
  }
  static const SkinEllipseDetector fallback;
  return (detector ? *detector : static_cast<const LandmarkDetector&>(fallback)).detect(image);
}

// ---------------------------------------------------------------------------
// Masks

namespace {

double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

}  // namespace

std::vector<Point> convex_hull(std::vector<Point> pts) {
  std::sort(pts.begin(), pts.end(),
            [](const Point& a, const Point& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const Point& a, const Point& b) { return a.x == b.x && a.y == b.y; }),
            pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Point> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

Mask face_mask_from_landmarks(const LandmarkSet& landmarks, int height, int width) {
  const auto hull = convex_hull(landmarks.points());
  double area2 = 0.0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    area2 += a.x * b.y - b.x * a.y;
  }
  if (hull.size() < 3 || std::abs(area2) < 1e-9) {
    throw Error(ErrorCode::DegenerateHull, "landmarks are collinear");
  }

  constexpr double eps = 1e-9;
  Mask mask(height, width);
  for (int y = 0; y < height; ++y) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < hull.size(); ++i) {
      const auto& a = hull[i];
      const auto& b = hull[(i + 1) % hull.size()];
      if (y < std::min(a.y, b.y) - eps || y > std::max(a.y, b.y) + eps) continue;
      if (std::abs(b.y - a.y) < eps) {
        lo = std::min({lo, a.x, b.x});
        hi = std::max({hi, a.x, b.x});
      } else {
        const double t = std::clamp((y - a.y) / (b.y - a.y), 0.0, 1.0);
        const double x = a.x + t * (b.x - a.x);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
    }
    if (lo > hi) continue;
    const int x0 = std::max(0, static_cast<int>(std::ceil(lo - eps)));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor(hi + eps)));
    for (int x = x0; x <= x1; ++x) mask.at(y, x) = 1;
  }
  return mask;
}

Mask morphological_dilate(const Mask& mask, int iterations) {
  if (iterations < 1) throw Error(ErrorCode::BadParams, "dilation needs at least one iteration");
  const int h = mask.height();
  const int w = mask.width();
  Mask current = mask;
  Mask rows(h, w);
  for (int it = 0; it < iterations; ++it) {
    // Separable 3x3 max: horizontal pass then vertical pass.
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        std::uint8_t v = current.at(y, x);
        if (x > 0) v |= current.at(y, x - 1);
        if (x + 1 < w) v |= current.at(y, x + 1);
        rows.at(y, x) = v;
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        std::uint8_t v = rows.at(y, x);
        if (y > 0) v |= rows.at(y - 1, x);
        if (y + 1 < h) v |= rows.at(y + 1, x);
        current.at(y, x) = v;
      }
    }
  }
  return current;
}

Mask contour_mask(const Mask& face_mask, int iterations) {
  if (!face_mask.any()) throw Error(ErrorCode::EmptyRegion, "face mask is empty");
  Mask ring = morphological_dilate(face_mask, iterations) - face_mask;
  if (!ring.any()) throw Error(ErrorCode::EmptyContour, "dilation adds no pixels");
  return ring;
}

int sample_dilation_iterations(Rng& rng) { return static_cast<int>(uniform_int(rng, 2, 4)); }

RegionMaskSet region_masks(const Mask& face_mask, int iterations) {
  return RegionMaskSet{face_mask, contour_mask(face_mask, iterations), iterations};
}

RegionMaskSet extract_region_masks(const Image& image, int iterations,
                                   const LandmarkDetector* detector) {
  const auto landmarks = detect_landmarks(image, detector);
  return region_masks(face_mask_from_landmarks(landmarks, image.height(), image.width()),
                      iterations);
}

}  // namespace cmark::geometry
