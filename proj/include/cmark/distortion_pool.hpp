#pragma once

#include <array>
#include <optional>
#include <string>

#include "json.hpp"
#include <torch/torch.h>

#include "cmark/face_geometry.hpp"
#include "cmark/image.hpp"
#include "cmark/random.hpp"

namespace cmark::distort {

enum class DistortionKind {
  GaussianNoise,
  JPEG,
  GaussianBlur,
  EdgeCrop,
  SaltPepper,
  MedianBlur,
  Resize,
  Dropout,
  Brightness,
  Contrast,
  Hue,
  Saturation,
};

inline constexpr std::array<DistortionKind, 12> kAllKinds = {
    DistortionKind::GaussianNoise, DistortionKind::JPEG,       DistortionKind::GaussianBlur,
    DistortionKind::EdgeCrop,      DistortionKind::SaltPepper, DistortionKind::MedianBlur,
    DistortionKind::Resize,        DistortionKind::Dropout,    DistortionKind::Brightness,
    DistortionKind::Contrast,      DistortionKind::Hue,        DistortionKind::Saturation,
};

std::string to_string(DistortionKind kind);
/// Throws BadParams for unknown names.
DistortionKind kind_from_string(const std::string& name);

/// One distortion with its single parameter:
///   GaussianNoise  sigma             SaltPepper  fraction of pixels
///   JPEG           quality 1..100    MedianBlur  odd kernel size
///   GaussianBlur   odd kernel size   Resize      scale in (0, 1]
///   EdgeCrop       band ratio gamma  Dropout     fraction of pixels
///   Brightness     additive offset   Contrast    gain about the image mean
///   Hue            rotation in turns Saturation  chroma gain
struct DistortionSpec {
  DistortionKind kind = DistortionKind::GaussianNoise;
  double param = 0.0;

  /// False for the kinds that go through an external codec/filter (JPEG,
  /// MedianBlur); those use a straight-through gradient in training.
  bool differentiable() const noexcept;
  /// Throws BadParams when param is outside the valid range for the kind.
  void validate() const;
};

nlohmann::json to_json(const DistortionSpec& spec);
/// Accepts {"kind": ..., "param": ...} or a kind-specific key such as
/// {"kind": "JPEG", "quality": 75}.
DistortionSpec spec_from_json(const nlohmann::json& j);

/// Sampling ranges for the training pool.
struct DistortionRanges {
  double noise_sigma_max = 0.1;
  int jpeg_quality_min = 50;
  int jpeg_quality_max = 95;
  std::array<int, 3> kernel_sizes{3, 5, 7};
  double crop_gamma_max = 0.1;
  double salt_pepper_max = 0.1;
  double resize_min = 0.5;
  double resize_max = 0.9;
  double dropout_max = 0.3;
  double brightness_max = 0.1;
  double contrast_delta = 0.3;
  double hue_max = 0.05;
  double saturation_delta = 0.3;
};

nlohmann::json to_json(const DistortionRanges& ranges);
DistortionRanges ranges_from_json(const nlohmann::json& j);

/// Uniform kind, parameter uniform in the configured range.
DistortionSpec sample_distortion(Rng& rng, const DistortionRanges& ranges = {});

enum class JpegMode {
  /// Real codec forward, identity backward.
  StraightThrough,
  /// Differentiable 8x8 DCT quantization (no chroma subsampling).
  Simulated,
};

/// Batched tensor form (Bx3xHxW in [0,1]) used for training; gradients flow
/// through every kind (straight-through for JPEG/MedianBlur unless the
/// simulated JPEG is selected). `original` is required for Dropout.
torch::Tensor apply_distortion(const torch::Tensor& x, const DistortionSpec& spec, Rng& rng,
                               const torch::Tensor& original = {},
                               JpegMode jpeg_mode = JpegMode::StraightThrough);

/// Image form. Output is clamped to [0, 1]; Dropout needs `original`.
Image apply_distortion(const Image& image, const DistortionSpec& spec, Rng& rng,
                       const Image* original = nullptr);

/// Real JPEG encode/decode at the given quality through the bundled codec.
Image jpeg_roundtrip(const Image& image, int quality);

/// Width of the zeroed EdgeCrop band for one side length.
int edge_crop_band(double gamma, int side);

/// Sigma used for a Gaussian kernel of size k (OpenCV's default rule).
double gaussian_sigma_for_kernel(int k);

struct SwapSpec {
  const Image* donor = nullptr;
  int blend_band = 3;
  double landmark_jitter = 0.0;
};

/// Face swap stand-in: the donor face is warped onto the target by the
/// least-squares affine map between the two landmark sets (target landmarks
/// optionally jittered by up to `landmark_jitter` pixels) and blended in with
/// an inward feather `blend_band` pixels wide, so pixels outside `face_mask`
/// are untouched. Throws NoFaceFound when the donor has no detectable face.
Image simulated_face_swap(const Image& image, const SwapSpec& spec, const Mask& face_mask, Rng& rng,
                          const geometry::LandmarkDetector* detector = nullptr);

}  // namespace cmark::distort
