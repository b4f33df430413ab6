#include "cmark/synthetic_faces.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <opencv2/imgproc.hpp>

namespace cmark::synth {

void hsv_to_rgb(double h, double s, double v, float rgb[3]) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0);
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  rgb[0] = static_cast<float>(r + m);
  rgb[1] = static_cast<float>(g + m);
  rgb[2] = static_cast<float>(b + m);
}

IdentityParams sample_identity(Rng& rng) {
  IdentityParams p;
  p.skin_h = uniform(rng, 8, 28);
  p.skin_s = uniform(rng, 0.3, 0.6);
  p.skin_v = uniform(rng, 0.6, 0.95);
  p.axis_x = uniform(rng, 26, 33);
  p.axis_y = uniform(rng, 34, 41);
  p.eye_dx = uniform(rng, 0.3, 0.45);
  p.eye_y = uniform(rng, -0.25, -0.1);
  p.eye_r = uniform(rng, 2.5, 4.5);
  p.iris_h = uniform(rng, 0, 360);
  p.iris_s = uniform(rng, 0.3, 0.9);
  p.iris_v = uniform(rng, 0.2, 0.6);
  p.mouth_w = uniform(rng, 0.25, 0.5);
  p.mouth_y = uniform(rng, 0.45, 0.6);
  p.lip_h = std::fmod(uniform(rng, 345, 365), 360.0);
  p.lip_s = uniform(rng, 0.5, 0.8);
  p.lip_v = uniform(rng, 0.4, 0.7);
  p.nose_len = uniform(rng, 0.15, 0.3);
  p.brow = uniform(rng, 0.5, 1.5);
  p.blush = uniform(rng, 0, 0.3);
  return p;
}

namespace {

cv::Vec3f hsv(double h, double s, double v) {
  float c[3];
  hsv_to_rgb(h, s, v, c);
  return {c[0], c[1], c[2]};
}

cv::Scalar scalar(const cv::Vec3f& c) { return {c[0], c[1], c[2]}; }

}  // namespace

Image render_face(const IdentityParams& id, Rng& rng, int S) {
  cv::Mat img(S, S, CV_32FC3);

  // Background: two-colour gradient, a sinusoid, smoothed noise and a few disks.
  const double h0 = uniform(rng, 80, 300);
  const cv::Vec3f c1 = hsv(h0, uniform(rng, 0.1, 0.6), uniform(rng, 0.3, 0.9));
  const cv::Vec3f c2 = hsv(h0 + uniform(rng, -40, 40), uniform(rng, 0.1, 0.6), uniform(rng, 0.3, 0.9));
  const double ang = uniform(rng, 0, 2 * std::numbers::pi);
  const double freq = uniform(rng, 0.05, 0.3), phase = uniform(rng, 0, 6.28), ang2 = uniform(rng, 0, 6.28);
  const double tex_amp = uniform(rng, 0.02, 0.1);
  cv::Mat noise(S, S, CV_32FC1);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) noise.at<float>(y, x) = static_cast<float>(normal(rng));
  cv::GaussianBlur(noise, noise, cv::Size(0, 0), uniform(rng, 1, 4));
  noise *= uniform(rng, 0.05, 0.2);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double t = ((std::cos(ang) * x + std::sin(ang) * y) / S + 1) / 2;
      const double tex = std::sin(freq * (std::cos(ang2) * x + std::sin(ang2) * y) + phase) * tex_amp;
      const double add = tex + noise.at<float>(y, x);
      for (int c = 0; c < 3; ++c) {
        img.at<cv::Vec3f>(y, x)[c] = static_cast<float>(c1[c] * (1 - t) + c2[c] * t + add);
      }
    }
  }
  const auto disks = uniform_int(rng, 2, 5);
  for (int k = 0; k < disks; ++k) {
    const cv::Vec3f col = hsv(uniform(rng, 80, 300), uniform(rng, 0.1, 0.7), uniform(rng, 0.2, 0.9));
    const double cx = uniform(rng, 0, S), cy = uniform(rng, 0, S), r = uniform(rng, 5, 25);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) < r * r) {
          auto& p = img.at<cv::Vec3f>(y, x);
          p = p * 0.3f + col * 0.7f;
        }
  }
  cv::min(cv::max(img, 0.0), 1.0, img);

  // Head pose.
  const double cx = S / 2.0 + uniform(rng, -5, 5);
  const double cy = S / 2.0 + uniform(rng, -4, 6);
  const double sc = uniform(rng, 0.95, 1.05) * S / 128.0;
  const double rot = uniform(rng, -0.14, 0.14);
  const double ax = id.axis_x * sc, ay = id.axis_y * sc;
  const double co = std::cos(rot), si = std::sin(rot);

  const cv::Vec3f shirt = hsv(uniform(rng, 80, 300), uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8));
  const cv::Vec3f hair = hsv(uniform(rng, 0, 40), uniform(rng, 0.3, 0.8), uniform(rng, 0.05, 0.25));
  const cv::Vec3f skin = hsv(id.skin_h, id.skin_s, id.skin_v);
  const double side_light = uniform(rng, -1, 1);
  const cv::Vec3f blush_col = hsv(0, 0.6, 0.9);
  const auto blush = static_cast<float>(id.blush);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double u = ((x - cx) * co + (y - cy) * si) / ax;
      const double v = (-(x - cx) * si + (y - cy) * co) / ay;
      auto& p = img.at<cv::Vec3f>(y, x);
      if (y > cy + ay * 1.05 && std::abs(x - cx) < ax * 1.6 + (y - cy - ay) * 1.2) p = shirt;
      if (u * u + (v * 0.9 + 0.08) * (v * 0.9 + 0.08) < 1.25 && v < -0.1) p = hair;
      const double r2 = u * u + v * v;
      if (r2 <= 1) {
        p = skin * static_cast<float>(1 - 0.15 * r2 + 0.05 * u * side_light);
        for (const int sx : {-1, 1}) {
          if ((u - sx * 0.5) * (u - sx * 0.5) + (v - 0.2) * (v - 0.2) < 0.04) p = p * (1 - blush) + blush_col * blush;
        }
      }
    }
  }

  const auto at = [&](double du, double dv) {
    return cv::Point(static_cast<int>(cx + ax * du * co - ay * dv * si), static_cast<int>(cy + ax * du * si + ay * dv * co));
  };
  const double deg = rot * 180.0 / std::numbers::pi;
  for (const int sx : {-1, 1}) {
    const cv::Point e = at(sx * id.eye_dx, id.eye_y);
    cv::ellipse(img, e, cv::Size(static_cast<int>(id.eye_r * 1.6), static_cast<int>(id.eye_r)), deg, 0, 360,
                cv::Scalar(0.95, 0.95, 0.95), -1);
    cv::circle(img, e, std::max(1, static_cast<int>(id.eye_r * 0.7)), scalar(hsv(id.iris_h, id.iris_s, id.iris_v)), -1);
    const cv::Point b = at(sx * id.eye_dx, id.eye_y - 0.15);
    cv::line(img, {b.x - 5, b.y}, {b.x + 5, b.y}, cv::Scalar(0.1, 0.08, 0.05), std::max(1, static_cast<int>(id.brow)));
  }
  cv::line(img, at(0, id.eye_y + 0.1), at(0, id.eye_y + id.nose_len + 0.1), scalar(skin * 0.7f), 1);
  cv::ellipse(img, at(0, id.mouth_y), cv::Size(static_cast<int>(id.mouth_w * ax), 3), deg, 0, 360,
              scalar(hsv(id.lip_h, id.lip_s, id.lip_v)), -1);

  img *= uniform(rng, 0.85, 1.1);
  cv::min(cv::max(img, 0.0), 1.0, img);
  return from_mat(img);
}

std::vector<SyntheticFace> make_corpus(int identities, int per_identity, std::uint64_t seed, int size) {
  Rng rng(seed);
  std::vector<SyntheticFace> out;
  out.reserve(static_cast<std::size_t>(identities) * per_identity);
  for (int i = 0; i < identities; ++i) {
    const auto id = sample_identity(rng);
    for (int k = 0; k < per_identity; ++k) out.push_back({render_face(id, rng, size), i});
  }
  return out;
}

}  // namespace cmark::synth
