#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cmark/image.hpp"
#include "cmark/random.hpp"

namespace cmark::geometry {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Facial landmarks in image coordinates. The default backend emits five
/// keypoints (eyes, nose tip, mouth corners) followed by a ring of points on
/// the fitted face outline.
class LandmarkSet {
 public:
  static constexpr std::size_t kKeypoints = 5;

  /// Clamps every point into [0, width-1] x [0, height-1]; throws BadParams
  /// when fewer than five points are given.
  LandmarkSet(std::vector<Point> points, int height, int width);

  const std::vector<Point>& points() const noexcept { return points_; }
  std::size_t count() const noexcept { return points_.size(); }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }

 private:
  std::vector<Point> points_;
  int height_;
  int width_;
};

class LandmarkDetector {
 public:
  virtual ~LandmarkDetector() = default;
  /// Throws NoFaceFound when nothing is detected.
  virtual LandmarkSet detect(const Image& image) const = 0;
  /// Whether detect() may be called concurrently on one instance.
  virtual bool reentrant() const noexcept = 0;
  virtual std::string name() const = 0;
};

/// Geometric default backend: segments skin-toned pixels by HSV thresholds,
/// keeps the largest hole-filled component and fits an ellipse to it from
/// second-order moments. Landmarks are placed at fixed positions in the
/// ellipse frame, so their ordering is stable across images.
class SkinEllipseDetector final : public LandmarkDetector {
 public:
  struct Options {
    int outline_points = 32;
    double min_area_fraction = 0.01;
  };

  SkinEllipseDetector() = default;
  explicit SkinEllipseDetector(Options options) : options_(options) {}

  LandmarkSet detect(const Image& image) const override;
  bool reentrant() const noexcept override { return true; }
  std::string name() const override { return "skin-ellipse"; }

  /// Per-pixel skin classification used by detect(); exposed for diagnostics.
  static Mask skin_pixels(const Image& image);

 private:
  Options options_;
};

using DetectorFactory = std::function<std::unique_ptr<LandmarkDetector>()>;

/// Registers a named backend; "skin-ellipse" is always available.
void register_landmark_backend(const std::string& name, DetectorFactory factory);
std::unique_ptr<LandmarkDetector> make_landmark_detector(const std::string& name = "skin-ellipse");

/// Detects landmarks with the given backend (the default when null). Images
/// smaller than 64x64 are rejected with BadParams.
LandmarkSet detect_landmarks(const Image& image, const LandmarkDetector* detector = nullptr);

/// Rasterized convex hull of the landmarks: a pixel is inside when its centre
/// lies inside or on the hull polygon. Throws DegenerateHull for collinear
/// input.
Mask face_mask_from_landmarks(const LandmarkSet& landmarks, int height, int width);

/// Convex hull (counter-clockwise in image coordinates, no repeated points).
std::vector<Point> convex_hull(std::vector<Point> points);

/// Dilation with a 3x3 square structuring element, applied `iterations` times.
Mask morphological_dilate(const Mask& mask, int iterations);

/// Ring around the face: dilate(face, iterations) minus face.
Mask contour_mask(const Mask& face_mask, int iterations);

/// Training-time dilation count, uniform in {2, 3, 4}.
int sample_dilation_iterations(Rng& rng);

inline constexpr int kTestDilationIterations = 3;

struct RegionMaskSet {
  Mask face_mask;
  Mask contour_mask;
  int dilation_iterations = kTestDilationIterations;

  /// Background region 1 - M_fac.
  Mask background_mask() const { return ~face_mask; }
};

RegionMaskSet region_masks(const Mask& face_mask, int iterations = kTestDilationIterations);

/// detect -> hull -> dilate, in one call.
RegionMaskSet extract_region_masks(const Image& image, int iterations = kTestDilationIterations,
                                   const LandmarkDetector* detector = nullptr);

}  // namespace cmark::geometry
