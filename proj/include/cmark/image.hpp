#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace cmark {

/// RGB image with float channels in [0, 1], stored row-major HWC.
class Image {
 public:
  Image() = default;
  Image(int height, int width, float fill = 0.0f);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t size() const noexcept { return data_.size(); }

  float& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  float at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  bool same_shape(const Image& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }

  /// Round every channel to the nearest 8-bit level.
  Image quantized() const;

  bool operator==(const Image& other) const = default;

 private:
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * 3 + c;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

/// Binary mask over the image grid; values are strictly 0 or 1.
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width, std::uint8_t fill = 0);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }

  std::uint8_t& at(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  std::uint8_t at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

  std::span<std::uint8_t> data() noexcept { return data_; }
  std::span<const std::uint8_t> data() const noexcept { return data_; }

  std::size_t count() const noexcept;
  bool any() const noexcept { return count() > 0; }

  bool same_shape(const Mask& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }
  bool matches(const Image& image) const noexcept {
    return height_ == image.height() && width_ == image.width();
  }

  Mask operator&(const Mask& other) const;
  Mask operator|(const Mask& other) const;
  /// Set difference: pixels in *this and not in other.
  Mask operator-(const Mask& other) const;
  Mask operator~() const;

  bool operator==(const Mask& other) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Intersection over union; two empty masks have IoU 1.
double mask_iou(const Mask& a, const Mask& b);

Image read_image(const std::filesystem::path& path);
/// Writes an 8-bit RGB PNG (or any format OpenCV infers from the extension).
void write_image(const std::filesystem::path& path, const Image& image);
Mask read_mask(const std::filesystem::path& path);
/// Writes a single-channel PNG with values 0/255.
void write_mask(const std::filesystem::path& path, const Mask& mask);

cv::Mat to_mat(const Image& image);          // CV_32FC3, RGB order
Image from_mat(const cv::Mat& rgb);          // CV_32FC3 or CV_8UC3, RGB order
cv::Mat to_mat(const Mask& mask);            // CV_8UC1 with 0/1
Mask mask_from_mat(const cv::Mat& binary);   // nonzero -> 1

/// 1x3xHxW float tensor.
torch::Tensor to_tensor(const Image& image);
/// Accepts 3xHxW or 1x3xHxW.
Image from_tensor(const torch::Tensor& tensor);
/// 1x1xHxW float tensor.
torch::Tensor to_tensor(const Mask& mask);

/// Stack images (all the same shape) into Bx3xHxW.
torch::Tensor stack_images(std::span<const Image> images);
torch::Tensor stack_masks(std::span<const Mask> masks);

}  // namespace cmark
