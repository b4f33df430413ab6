#include "cmark/distortion_pool.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cmark/errors.hpp"

namespace cmark::distort {

namespace F = torch::nn::functional;

namespace {

struct KindInfo {
  DistortionKind kind;
  const char* name;
  const char* param_key;
};

constexpr KindInfo kKindInfo[] = {
    {DistortionKind::GaussianNoise, "GaussianNoise", "sigma"},
    {DistortionKind::JPEG, "JPEG", "quality"},
    {DistortionKind::GaussianBlur, "GaussianBlur", "kernel"},
    {DistortionKind::EdgeCrop, "EdgeCrop", "gamma"},
    {DistortionKind::SaltPepper, "SaltPepper", "fraction"},
    {DistortionKind::MedianBlur, "MedianBlur", "kernel"},
    {DistortionKind::Resize, "Resize", "scale"},
    {DistortionKind::Dropout, "Dropout", "fraction"},
    {DistortionKind::Brightness, "Brightness", "delta"},
    {DistortionKind::Contrast, "Contrast", "factor"},
    {DistortionKind::Hue, "Hue", "shift"},
    {DistortionKind::Saturation, "Saturation", "factor"},
};

const KindInfo& info(DistortionKind kind) {
  for (const auto& k : kKindInfo) {
    if (k.kind == kind) return k;
  }
  throw Error(ErrorCode::BadParams, "unknown distortion kind");
}

bool is_odd_int(double v, int lo, int hi) {
  const double r = std::round(v);
  return r == v && r >= lo && r <= hi && static_cast<int>(r) % 2 == 1;
}

void require(bool ok, const DistortionSpec& spec, const char* range) {
  if (!ok) {
    throw Error(ErrorCode::BadParams, to_string(spec.kind) + " parameter " + std::to_string(spec.param) +
                                          " outside " + range);
  }
}

torch::Tensor tensor_from(std::vector<float>& values, at::IntArrayRef shape) {
  return torch::from_blob(values.data(), shape, torch::kFloat32).clone();
}

torch::Tensor uniform_field(Rng& rng, at::IntArrayRef shape) {
  std::int64_t n = 1;
  for (const auto s : shape) n *= s;
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<float>(uniform(rng, 0.0, 1.0));
  return tensor_from(v, shape);
}

torch::Tensor straight_through(const torch::Tensor& x, const torch::Tensor& value) {
  return x + (value - x).detach();
}

template <typename Fn>
torch::Tensor per_image_8bit(const torch::Tensor& x, Fn&& fn) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  for (std::int64_t b = 0; b < x.size(0); ++b) {
    out.push_back(to_tensor(fn(from_tensor(x[b].clamp(0, 1)))));
  }
  return torch::cat(out, 0);
}

torch::Tensor gaussian_blur(const torch::Tensor& x, int k) {
  const double sigma = gaussian_sigma_for_kernel(k);
  std::vector<float> g(static_cast<std::size_t>(k));
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    const double t = i - (k - 1) / 2.0;
    g[static_cast<std::size_t>(i)] = static_cast<float>(std::exp(-t * t / (2 * sigma * sigma)));
    total += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v = static_cast<float>(v / total);
  const torch::Tensor g1 = tensor_from(g, {k});
  const torch::Tensor w = torch::outer(g1, g1).view({1, 1, k, k}).repeat({x.size(1), 1, 1, 1});
  const int p = k / 2;
  const torch::Tensor padded = F::pad(x, F::PadFuncOptions({p, p, p, p}).mode(torch::kReflect));
  return torch::conv2d(padded, w, torch::Tensor(), at::IntArrayRef{1, 1}, at::IntArrayRef{0, 0}, at::IntArrayRef{1, 1}, x.size(1));
}

torch::Tensor colour_transform(const torch::Tensor& x, const Eigen::Matrix3d& m) {
  std::vector<float> v(9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(r * 3 + c)] = static_cast<float>(m(r, c));
  return torch::einsum("ij,bjhw->bihw", {tensor_from(v, {3, 3}), x});
}

torch::Tensor luma(const torch::Tensor& x) {
  return 0.299 * x.slice(1, 0, 1) + 0.587 * x.slice(1, 1, 2) + 0.114 * x.slice(1, 2, 3);
}

// Standard IJG tables and quality scaling.
constexpr int kLumaTable[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
constexpr int kChromaTable[64] = {17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                                  24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                                  99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                                  99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

torch::Tensor quant_table(const int* base, int quality) {
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::vector<float> q(64);
  for (int i = 0; i < 64; ++i) q[static_cast<std::size_t>(i)] = static_cast<float>(std::clamp((base[i] * scale + 50) / 100, 1, 255));
  return tensor_from(q, {8, 8});
}

torch::Tensor dct_matrix() {
  std::vector<float> d(64);
  for (int k = 0; k < 8; ++k) {
    for (int n = 0; n < 8; ++n) {
      const double a = k == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8);
      d[static_cast<std::size_t>(k * 8 + n)] = static_cast<float>(a * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0));
    }
  }
  return tensor_from(d, {8, 8});
}

torch::Tensor simulated_jpeg(const torch::Tensor& x, int quality) {
  const auto H = x.size(2), W = x.size(3);
  const auto ph = (8 - H % 8) % 8, pw = (8 - W % 8) % 8;
  torch::Tensor t = F::pad(x, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
  Eigen::Matrix3d to_ycc;
  to_ycc << 0.299, 0.587, 0.114, -0.168736, -0.331264, 0.5, 0.5, -0.418688, -0.081312;
  const torch::Tensor offset = torch::tensor({0.0f, 0.5f, 0.5f}).view({1, 3, 1, 1});
  torch::Tensor ycc = (colour_transform(t, to_ycc) + offset) * 255.0 - 128.0;

  const auto B = ycc.size(0), Hp = ycc.size(2), Wp = ycc.size(3);
  torch::Tensor blocks = ycc.view({B, 3, Hp / 8, 8, Wp / 8, 8}).permute({0, 1, 2, 4, 3, 5});
  const torch::Tensor D = dct_matrix();
  torch::Tensor coef = torch::matmul(torch::matmul(D, blocks), D.t());
  const torch::Tensor q = torch::stack({quant_table(kLumaTable, quality), quant_table(kChromaTable, quality),
                                        quant_table(kChromaTable, quality)})
                              .view({1, 3, 1, 1, 8, 8});
  torch::Tensor u = coef / q;
  const torch::Tensor r = torch::round(u).detach();
  u = r + torch::pow(u - r, 3);  // differentiable rounding
  blocks = torch::matmul(torch::matmul(D.t(), u * q), D);
  ycc = blocks.permute({0, 1, 2, 4, 3, 5}).reshape({B, 3, Hp, Wp});
  ycc = (ycc + 128.0) / 255.0 - offset;
  const torch::Tensor rgb = colour_transform(ycc, to_ycc.inverse());
  return rgb.slice(2, 0, H).slice(3, 0, W);
}

Image median_8bit(const Image& image, int k) {
  cv::Mat u8;
  to_mat(image).convertTo(u8, CV_8UC3, 255.0);
  cv::Mat out;
  cv::medianBlur(u8, out, k);
  return from_mat(out);
}

}  // namespace

std::string to_string(DistortionKind kind) { return info(kind).name; }

DistortionKind kind_from_string(const std::string& name) {
  for (const auto& k : kKindInfo) {
    if (name == k.name) return k.kind;
  }
  throw Error(ErrorCode::BadParams, "unknown distortion kind '" + name + "'");
}

bool DistortionSpec::differentiable() const noexcept {
  return kind != DistortionKind::JPEG && kind != DistortionKind::MedianBlur;
}

void DistortionSpec::validate() const {
  const double p = param;
  if (!std::isfinite(p)) throw Error(ErrorCode::BadParams, "non-finite distortion parameter");
  switch (kind) {
    case DistortionKind::GaussianNoise: return require(p >= 0 && p <= 1, *this, "[0, 1]");
    case DistortionKind::JPEG: return require(p == std::round(p) && p >= 1 && p <= 100, *this, "integers 1..100");
    case DistortionKind::GaussianBlur:
    case DistortionKind::MedianBlur: return require(is_odd_int(p, 1, 31), *this, "odd integers 1..31");
    case DistortionKind::EdgeCrop: return require(p >= 0 && p < 0.5, *this, "[0, 0.5)");
    case DistortionKind::SaltPepper:
    case DistortionKind::Dropout: return require(p >= 0 && p <= 1, *this, "[0, 1]");
    case DistortionKind::Resize: return require(p > 0 && p <= 1, *this, "(0, 1]");
    case DistortionKind::Brightness: return require(p >= -1 && p <= 1, *this, "[-1, 1]");
    case DistortionKind::Contrast:
    case DistortionKind::Saturation: return require(p >= 0 && p <= 4, *this, "[0, 4]");
    case DistortionKind::Hue: return require(p >= -0.5 && p <= 0.5, *this, "[-0.5, 0.5]");
  }
}

nlohmann::json to_json(const DistortionSpec& spec) {
  return {{"kind", to_string(spec.kind)}, {"param", spec.param}};
}

DistortionSpec spec_from_json(const nlohmann::json& j) {
  DistortionSpec spec;
  spec.kind = kind_from_string(j.at("kind").get<std::string>());
  const char* key = info(spec.kind).param_key;
  if (j.contains("param")) {
    spec.param = j.at("param").get<double>();
  } else if (j.contains(key)) {
    spec.param = j.at(key).get<double>();
  } else {
    throw Error(ErrorCode::BadParams, "missing '" + std::string(key) + "' for " + to_string(spec.kind));
  }
  spec.validate();
  return spec;
}

nlohmann::json to_json(const DistortionRanges& r) {
  return {{"noise_sigma_max", r.noise_sigma_max}, {"jpeg_quality_min", r.jpeg_quality_min},
          {"jpeg_quality_max", r.jpeg_quality_max}, {"kernel_sizes", r.kernel_sizes},
          {"crop_gamma_max", r.crop_gamma_max},   {"salt_pepper_max", r.salt_pepper_max},
          {"resize_min", r.resize_min},           {"resize_max", r.resize_max},
          {"dropout_max", r.dropout_max},         {"brightness_max", r.brightness_max},
          {"contrast_delta", r.contrast_delta},   {"hue_max", r.hue_max},
          {"saturation_delta", r.saturation_delta}};
}

DistortionRanges ranges_from_json(const nlohmann::json& j) {
  DistortionRanges r;
  r.noise_sigma_max = j.value("noise_sigma_max", r.noise_sigma_max);
  r.jpeg_quality_min = j.value("jpeg_quality_min", r.jpeg_quality_min);
  r.jpeg_quality_max = j.value("jpeg_quality_max", r.jpeg_quality_max);
  r.kernel_sizes = j.value("kernel_sizes", r.kernel_sizes);
  r.crop_gamma_max = j.value("crop_gamma_max", r.crop_gamma_max);
  r.salt_pepper_max = j.value("salt_pepper_max", r.salt_pepper_max);
  r.resize_min = j.value("resize_min", r.resize_min);
  r.resize_max = j.value("resize_max", r.resize_max);
  r.dropout_max = j.value("dropout_max", r.dropout_max);
  r.brightness_max = j.value("brightness_max", r.brightness_max);
  r.contrast_delta = j.value("contrast_delta", r.contrast_delta);
  r.hue_max = j.value("hue_max", r.hue_max);
  r.saturation_delta = j.value("saturation_delta", r.saturation_delta);
  return r;
}

DistortionSpec sample_distortion(Rng& rng, const DistortionRanges& r) {
  DistortionSpec s;
  s.kind = kAllKinds[static_cast<std::size_t>(uniform_int(rng, 0, kAllKinds.size() - 1))];
  const auto kernel = [&] { return r.kernel_sizes[static_cast<std::size_t>(uniform_int(rng, 0, 2))]; };
  switch (s.kind) {
    case DistortionKind::GaussianNoise: s.param = uniform(rng, 0.0, r.noise_sigma_max); break;
    case DistortionKind::JPEG: s.param = static_cast<double>(uniform_int(rng, r.jpeg_quality_min, r.jpeg_quality_max)); break;
    case DistortionKind::GaussianBlur:
    case DistortionKind::MedianBlur: s.param = kernel(); break;
    case DistortionKind::EdgeCrop: s.param = uniform(rng, 0.0, r.crop_gamma_max); break;
    case DistortionKind::SaltPepper: s.param = uniform(rng, 0.0, r.salt_pepper_max); break;
    case DistortionKind::Resize: s.param = uniform(rng, r.resize_min, r.resize_max); break;
    case DistortionKind::Dropout: s.param = uniform(rng, 0.0, r.dropout_max); break;
    case DistortionKind::Brightness: s.param = uniform(rng, -r.brightness_max, r.brightness_max); break;
    case DistortionKind::Contrast: s.param = uniform(rng, 1.0 - r.contrast_delta, 1.0 + r.contrast_delta); break;
    case DistortionKind::Hue: s.param = uniform(rng, -r.hue_max, r.hue_max); break;
    case DistortionKind::Saturation: s.param = uniform(rng, 1.0 - r.saturation_delta, 1.0 + r.saturation_delta); break;
  }
  s.validate();
  return s;
}

int edge_crop_band(double gamma, int side) { return static_cast<int>(std::floor(gamma * side)); }

double gaussian_sigma_for_kernel(int k) { return 0.3 * ((k - 1) * 0.5 - 1) + 0.8; }

Image jpeg_roundtrip(const Image& image, int quality) {
  cv::Mat rgb8;
  to_mat(image).convertTo(rgb8, CV_8UC3, 255.0);
  cv::Mat bgr;
  cv::cvtColor(rgb8, bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> buffer;
  if (!cv::imencode(".jpg", bgr, buffer, {cv::IMWRITE_JPEG_QUALITY, quality})) {
    throw Error(ErrorCode::BadParams, "JPEG encoding failed");
  }
  cv::Mat decoded = cv::imdecode(buffer, cv::IMREAD_COLOR);
  cv::cvtColor(decoded, rgb8, cv::COLOR_BGR2RGB);
  return from_mat(rgb8);
}

torch::Tensor apply_distortion(const torch::Tensor& x, const DistortionSpec& spec, Rng& rng,
                               const torch::Tensor& original, JpegMode jpeg_mode) {
  spec.validate();
  if (x.dim() != 4 || x.size(1) != 3) throw Error(ErrorCode::ShapeMismatch, "expected Bx3xHxW");
  const auto B = x.size(0), H = x.size(2), W = x.size(3);
  const double p = spec.param;
  torch::Tensor y;
  switch (spec.kind) {
    case DistortionKind::GaussianNoise: {
      std::vector<float> n(static_cast<std::size_t>(x.numel()));
      for (auto& v : n) v = static_cast<float>(p * normal(rng));
      y = x + tensor_from(n, x.sizes());
      break;
    }
    case DistortionKind::JPEG: {
      const int q = static_cast<int>(p);
      if (jpeg_mode == JpegMode::Simulated) {
        y = simulated_jpeg(x, q);
      } else {
        y = straight_through(x, per_image_8bit(x, [q](const Image& im) { return jpeg_roundtrip(im, q); }));
      }
      break;
    }
    case DistortionKind::GaussianBlur: y = gaussian_blur(x, static_cast<int>(p)); break;
    case DistortionKind::EdgeCrop: {
      const int bh = edge_crop_band(p, static_cast<int>(H)), bw = edge_crop_band(p, static_cast<int>(W));
      torch::Tensor keep = torch::zeros({1, 1, H, W});
      keep.slice(2, bh, H - bh).slice(3, bw, W - bw).fill_(1.0);
      y = x * keep;
      break;
    }
    case DistortionKind::SaltPepper: {
      const torch::Tensor r = uniform_field(rng, {B, 1, H, W});
      y = torch::where(r < p / 2, torch::zeros_like(x), torch::where(r < p, torch::ones_like(x), x));
      break;
    }
    case DistortionKind::MedianBlur: {
      const int k = static_cast<int>(p);
      y = straight_through(x, per_image_8bit(x, [k](const Image& im) { return median_8bit(im, k); }));
      break;
    }
    case DistortionKind::Resize: {
      const auto h = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(H * p)));
      const auto w = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(W * p)));
      const auto opts = [](std::int64_t a, std::int64_t b) {
        return F::InterpolateFuncOptions().size(std::vector<std::int64_t>{a, b}).mode(torch::kBilinear).align_corners(false);
      };
      y = F::interpolate(F::interpolate(x, opts(h, w)), opts(H, W));
      break;
    }
    case DistortionKind::Dropout: {
      if (!original.defined() || !original.sizes().equals(x.sizes())) {
        throw Error(ErrorCode::BadParams, "Dropout needs the original image");
      }
      const torch::Tensor r = uniform_field(rng, {B, 1, H, W});
      y = torch::where(r < p, original, x);
      break;
    }
    case DistortionKind::Brightness: y = x + p; break;
    case DistortionKind::Contrast: {
      const torch::Tensor m = x.mean({1, 2, 3}, true);
      y = (x - m) * p + m;
      break;
    }
    case DistortionKind::Saturation: {
      const torch::Tensor g = luma(x);
      y = g + (x - g) * p;
      break;
    }
    case DistortionKind::Hue: {
      Eigen::Matrix3d yiq;
      yiq << 0.299, 0.587, 0.114, 0.596, -0.274, -0.322, 0.211, -0.523, 0.312;
      const double th = 2.0 * std::numbers::pi * p;
      Eigen::Matrix3d rot;
      rot << 1, 0, 0, 0, std::cos(th), -std::sin(th), 0, std::sin(th), std::cos(th);
      y = colour_transform(x, yiq.inverse() * rot * yiq);
      break;
    }
  }
  return y.clamp(0.0, 1.0);
}

Image apply_distortion(const Image& image, const DistortionSpec& spec, Rng& rng, const Image* original) {
  spec.validate();
  if (spec.kind == DistortionKind::JPEG) return jpeg_roundtrip(image, static_cast<int>(spec.param));
  if (spec.kind == DistortionKind::MedianBlur) return median_8bit(image, static_cast<int>(spec.param));
  torch::NoGradGuard no_grad;
  torch::Tensor orig;
  if (original) {
    if (!original->same_shape(image)) throw Error(ErrorCode::ShapeMismatch, "original differs in shape");
    orig = to_tensor(*original);
  }
  return from_tensor(apply_distortion(to_tensor(image), spec, rng, orig));
}

Image simulated_face_swap(const Image& image, const SwapSpec& spec, const Mask& face_mask, Rng& rng,
                          const geometry::LandmarkDetector* detector) {
  if (!spec.donor) throw Error(ErrorCode::BadParams, "swap needs a donor image");
  if (spec.blend_band < 0) throw Error(ErrorCode::BadParams, "blend band must be non-negative");
  if (spec.landmark_jitter < 0 || spec.landmark_jitter > 5) {
    throw Error(ErrorCode::BadParams, "landmark jitter must be within [0, 5] pixels");
  }
  if (!face_mask.matches(image)) throw Error(ErrorCode::ShapeMismatch, "face mask does not match image");

  const auto target = geometry::detect_landmarks(image, detector);
  const auto donor = geometry::detect_landmarks(*spec.donor, detector);
  if (target.count() != donor.count()) {
    throw Error(ErrorCode::ShapeMismatch, "landmark sets differ in size");
  }

  // Least-squares affine map from donor landmarks onto (jittered) target landmarks.
  const auto n = static_cast<Eigen::Index>(donor.count());
  Eigen::MatrixXd A(n, 3);
  Eigen::VectorXd tx(n), ty(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& d = donor.points()[static_cast<std::size_t>(i)];
    const auto& t = target.points()[static_cast<std::size_t>(i)];
    A.row(i) << d.x, d.y, 1.0;
    const double jx = spec.landmark_jitter > 0 ? uniform(rng, -spec.landmark_jitter, spec.landmark_jitter) : 0.0;
    const double jy = spec.landmark_jitter > 0 ? uniform(rng, -spec.landmark_jitter, spec.landmark_jitter) : 0.0;
    tx[i] = t.x + jx;
    ty[i] = t.y + jy;
  }
  const auto qr = A.colPivHouseholderQr();
  const Eigen::Vector3d ax = qr.solve(tx), ay = qr.solve(ty);
  const cv::Mat affine = (cv::Mat_<double>(2, 3) << ax[0], ax[1], ax[2], ay[0], ay[1], ay[2]);

  cv::Mat warped;
  cv::warpAffine(to_mat(*spec.donor), warped, affine, cv::Size(image.width(), image.height()),
                 cv::INTER_LINEAR, cv::BORDER_REFLECT);
  const Image donor_face = from_mat(warped);

  cv::Mat dist;
  if (spec.blend_band > 0) cv::distanceTransform(to_mat(face_mask), dist, cv::DIST_L2, 3);
  Image out = image;
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      if (!face_mask.at(y, x)) continue;
      const double a = spec.blend_band > 0 ? std::min(1.0, static_cast<double>(dist.at<float>(y, x)) / spec.blend_band) : 1.0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - a) * image.at(y, x, c) + a * donor_face.at(y, x, c);
        out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

}  // namespace cmark::distort
