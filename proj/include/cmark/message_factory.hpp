#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"
#include <torch/torch.h>

#include "cmark/face_geometry.hpp"
#include "cmark/image.hpp"

namespace cmark::message {

using Bits = std::vector<int>;

enum class FeatureSource { ContourTexture, Identity };

struct FeatureVector {
  std::vector<double> values;
  FeatureSource source = FeatureSource::ContourTexture;
};

/// Maps a masked region of an image to a fixed-length feature vector. The
/// result may depend only on pixels where the mask is set.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<double> extract(const Image& image, const Mask& mask) const = 0;
  virtual std::size_t dims() const = 0;
  virtual std::string name() const = 0;
};

/// Frozen convolutional feature stack with weights drawn from a seeded
/// generator. The region's mean colour is subtracted inside the mask, the
/// masked image is average-pooled by `pool`, then each of the conv/ReLU stages
/// contributes its mask-weighted channel means. The mean colour is appended.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  struct Options {
    std::uint64_t seed = 0x434d61726bULL;
    int pool = 4;
    std::vector<int> channels{16, 32, 64};
  };

  RandomConvExtractor() : RandomConvExtractor(Options{}) {}
  explicit RandomConvExtractor(Options options);

  std::vector<double> extract(const Image& image, const Mask& mask) const override;
  std::size_t dims() const override;
  std::string name() const override { return "random-conv"; }

 private:
  Options options_;
  std::vector<torch::Tensor> weights_;
};

/// Throws EmptyRegion when the mask is empty.
FeatureVector extract_contour_feature(const Image& image, const Mask& contour_mask,
                                      const FeatureExtractor& extractor);
FeatureVector extract_identity_feature(const Image& image, const Mask& face_mask,
                                       const FeatureExtractor& extractor);

/// Per-channel mean of a CxHxW (or 1xCxHxW) map, accumulated in double.
std::vector<double> global_average_pool(const torch::Tensor& feature_map);

/// Top-C principal directions of a feature corpus. Projections are divided by
/// the per-component standard deviation so that every coordinate carries a
/// comparable share of the message bits.
struct PcaBasis {
  std::vector<double> mean;
  Eigen::MatrixXd components;  // C x dims, orthonormal rows
  std::vector<double> stddev;  // C
  int C = 0;

  std::size_t dims() const noexcept { return mean.size(); }
  /// Standardized projection, length C.
  std::vector<double> project(std::span<const double> feature) const;
  /// Raw (unscaled) projection onto the components.
  std::vector<double> project_raw(std::span<const double> feature) const;
  /// mean + components^T * raw projection.
  std::vector<double> reconstruct(std::span<const double> raw) const;

  /// One JSON header line {C, dims, checksum} followed by little-endian
  /// doubles: mean, components (row-major), stddev. checksum is the CRC-32 of
  /// the binary payload.
  void save(const std::filesystem::path& path) const;
  static PcaBasis load(const std::filesystem::path& path);
  std::uint32_t checksum() const;
};

/// Throws RankDeficient when the samples span fewer than C directions.
PcaBasis fit_pca_basis(const std::vector<std::vector<double>>& features, int C);

/// Affine map with min -> -1 and max -> +1. Throws ConstantVector.
std::vector<double> scale_to_unit(std::span<const double> v);

/// Sign with ties at zero going to +1.
Bits binarize(std::span<const double> v);

struct HybridMessage {
  Bits v_i;
  Bits v_c;
  Bits v;  // identity bits first, then contour bits
  double alpha = 0.1;
  std::vector<double> v_alpha;

  std::size_t C() const noexcept { return v_i.size(); }
  std::size_t length() const noexcept { return v.size(); }
};

/// Throws LengthMismatch when the halves differ in length, BadParams for
/// alpha <= 0 or non-binary entries.
HybridMessage assemble_hybrid(const Bits& v_i_bits, const Bits& v_c_bits, double alpha);

/// Splits a 2C-bit vector into identity (first C) and contour (last C) halves.
HybridMessage hybrid_from_bits(std::span<const int> v, double alpha);

inline constexpr int kDefaultC = 16;
inline constexpr double kDefaultAlpha = 0.1;

/// Bits from features: project, scale to [-1, 1], threshold at 0.
Bits feature_bits(const PcaBasis& basis, std::span<const double> feature);

/// The full message pipeline for one image. Holds immutable shared state.
class MessageFactory {
 public:
  MessageFactory(std::shared_ptr<const FeatureExtractor> extractor, PcaBasis contour_basis,
                 PcaBasis identity_basis, double alpha = kDefaultAlpha);

  HybridMessage make(const Image& image, const geometry::RegionMaskSet& masks) const;

  const PcaBasis& contour_basis() const noexcept { return contour_basis_; }
  const PcaBasis& identity_basis() const noexcept { return identity_basis_; }
  const FeatureExtractor& extractor() const noexcept { return *extractor_; }
  double alpha() const noexcept { return alpha_; }

 private:
  std::shared_ptr<const FeatureExtractor> extractor_;
  PcaBasis contour_basis_;
  PcaBasis identity_basis_;
  double alpha_;
};

/// Fits both bases on a calibration set of (image, masks) pairs.
struct CalibrationSample {
  const Image* image;
  const geometry::RegionMaskSet* masks;
};
std::pair<PcaBasis, PcaBasis> fit_message_bases(std::span<const CalibrationSample> samples,
                                                const FeatureExtractor& extractor,
                                                int C = kDefaultC);

nlohmann::json bits_to_json(std::span<const int> bits);
Bits bits_from_json(const nlohmann::json& j);

}  // namespace cmark::message
