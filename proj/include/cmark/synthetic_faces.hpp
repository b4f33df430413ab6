#pragma once

#include <string>
#include <vector>

#include "cmark/image.hpp"
#include "cmark/random.hpp"

namespace cmark::synth {

/// Per-identity appearance: skin tone, face proportions and facial features.
/// Colours are HSV with hue in degrees.
struct IdentityParams {
  double skin_h, skin_s, skin_v;
  double axis_x, axis_y;
  double eye_dx, eye_y, eye_r;
  double iris_h, iris_s, iris_v;
  double mouth_w, mouth_y;
  double lip_h, lip_s, lip_v;
  double nose_len;
  double brow;
  double blush;
};

IdentityParams sample_identity(Rng& rng);

/// One frontal cartoon face of the given identity with a random background,
/// hair, shirt, pose jitter and global gain. Skin tones stay inside the range
/// the skin-ellipse landmark backend accepts, backgrounds outside it.
Image render_face(const IdentityParams& identity, Rng& rng, int size = 128);

struct SyntheticFace {
  Image image;
  int identity = 0;
};

/// `identities` x `per_identity` faces, identity-major order.
std::vector<SyntheticFace> make_corpus(int identities, int per_identity, std::uint64_t seed, int size = 128);

/// HSV (hue in degrees, s and v in [0, 1]) to RGB in [0, 1].
void hsv_to_rgb(double h, double s, double v, float rgb[3]);

}  // namespace cmark::synth
