#include "cmark/image.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cmark/errors.hpp"

namespace cmark {

Image::Image(int height, int width, float fill)
    : height_(height), width_(width),
      data_(static_cast<std::size_t>(height) * width * 3, fill) {
  if (height <= 0 || width <= 0) {
    throw Error(ErrorCode::BadParams, "image dimensions must be positive");
  }
}

Image Image::quantized() const {
  Image out = *this;
  for (float& v : out.data_) {
    v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  }
  return out;
}

Mask::Mask(int height, int width, std::uint8_t fill)
    : height_(height), width_(width),
      data_(static_cast<std::size_t>(height) * width, fill ? 1 : 0) {
  if (height <= 0 || width <= 0) {
    throw Error(ErrorCode::BadParams, "mask dimensions must be positive");
  }
}

std::size_t Mask::count() const noexcept {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

namespace {

template <typename Op>
Mask combine(const Mask& a, const Mask& b, Op op) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "mask shapes differ");
  Mask out(a.height(), a.width());
  auto lhs = a.data();
  auto rhs = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = op(lhs[i], rhs[i]) ? 1 : 0;
  return out;
}

}  // namespace

Mask Mask::operator&(const Mask& other) const {
  return combine(*this, other, [](auto x, auto y) { return x && y; });
}
Mask Mask::operator|(const Mask& other) const {
  return combine(*this, other, [](auto x, auto y) { return x || y; });
}
Mask Mask::operator-(const Mask& other) const {
  return combine(*this, other, [](auto x, auto y) { return x && !y; });
}
Mask Mask::operator~() const {
  Mask out = *this;
  for (auto& v : out.data_) v = v ? 0 : 1;
  return out;
}

double mask_iou(const Mask& a, const Mask& b) {
  const auto inter = (a & b).count();
  const auto uni = (a | b).count();
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

cv::Mat to_mat(const Image& image) {
  cv::Mat mat(image.height(), image.width(), CV_32FC3);
  std::copy(image.data().begin(), image.data().end(), mat.ptr<float>());
  return mat;
}

Image from_mat(const cv::Mat& rgb) {
  cv::Mat f;
  if (rgb.type() == CV_8UC3) {
    // Same float per level as Image::quantized().
    const cv::Mat c = rgb.isContinuous() ? rgb : rgb.clone();
    Image out(c.rows, c.cols);
    const std::uint8_t* src = c.ptr<std::uint8_t>();
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<float>(src[i]) / 255.0f;
    return out;
  } else if (rgb.type() == CV_32FC3) {
    f = rgb.isContinuous() ? rgb : rgb.clone();
  } else {
    throw Error(ErrorCode::BadParams, "expected a 3-channel 8-bit or float image");
  }
  Image out(f.rows, f.cols);
  const float* src = f.ptr<float>();
  std::copy(src, src + out.size(), out.data().begin());
  return out;
}

cv::Mat to_mat(const Mask& mask) {
  cv::Mat mat(mask.height(), mask.width(), CV_8UC1);
  std::copy(mask.data().begin(), mask.data().end(), mat.ptr<std::uint8_t>());
  return mat;
}

Mask mask_from_mat(const cv::Mat& binary) {
  if (binary.type() != CV_8UC1) throw Error(ErrorCode::BadParams, "expected a single-channel 8-bit mask");
  Mask out(binary.rows, binary.cols);
  for (int y = 0; y < binary.rows; ++y) {
    const auto* row = binary.ptr<std::uint8_t>(y);
    for (int x = 0; x < binary.cols; ++x) out.at(y, x) = row[x] ? 1 : 0;
  }
  return out;
}

Image read_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error(ErrorCode::MissingFile, "cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return from_mat(rgb);
}

void write_image(const std::filesystem::path& path, const Image& image) {
  cv::Mat u8;
  to_mat(image.quantized()).convertTo(u8, CV_8UC3, 255.0);
  cv::Mat bgr;
  cv::cvtColor(u8, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) {
    throw Error(ErrorCode::MissingFile, "cannot write image " + path.string());
  }
}

Mask read_mask(const std::filesystem::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw Error(ErrorCode::MissingFile, "cannot read mask " + path.string());
  return mask_from_mat(gray);
}

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  cv::Mat out = to_mat(mask) * 255;
  if (!cv::imwrite(path.string(), out)) {
    throw Error(ErrorCode::MissingFile, "cannot write mask " + path.string());
  }
}

torch::Tensor to_tensor(const Image& image) {
  auto hwc = torch::from_blob(const_cast<float*>(image.data().data()),
                              {image.height(), image.width(), 3}, torch::kFloat32);
  return hwc.permute({2, 0, 1}).unsqueeze(0).contiguous();
}

Image from_tensor(const torch::Tensor& tensor) {
  auto t = tensor.detach().to(torch::kCPU, torch::kFloat32);
  if (t.dim() == 4) {
    if (t.size(0) != 1) throw Error(ErrorCode::ShapeMismatch, "expected a single image tensor");
    t = t.squeeze(0);
  }
  if (t.dim() != 3 || t.size(0) != 3) throw Error(ErrorCode::ShapeMismatch, "expected 3xHxW tensor");
  auto hwc = t.permute({1, 2, 0}).contiguous();
  Image out(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)));
  std::copy(hwc.data_ptr<float>(), hwc.data_ptr<float>() + out.size(), out.data().begin());
  return out;
}

torch::Tensor to_tensor(const Mask& mask) {
  auto t = torch::empty({1, 1, mask.height(), mask.width()}, torch::kFloat32);
  float* dst = t.data_ptr<float>();
  for (std::size_t i = 0; i < mask.data().size(); ++i) dst[i] = mask.data()[i];
  return t;
}

torch::Tensor stack_images(std::span<const Image> images) {
  std::vector<torch::Tensor> parts;
  parts.reserve(images.size());
  for (const auto& im : images) parts.push_back(to_tensor(im));
  return torch::cat(parts, 0);
}

torch::Tensor stack_masks(std::span<const Mask> masks) {
  std::vector<torch::Tensor> parts;
  parts.reserve(masks.size());
  for (const auto& m : masks) parts.push_back(to_tensor(m));
  return torch::cat(parts, 0);
}

}  // namespace cmark
