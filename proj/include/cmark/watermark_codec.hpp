#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include <torch/torch.h>

#include "cmark/distortion_pool.hpp"
#include "cmark/image.hpp"
#include "cmark/message_factory.hpp"
#include "cmark/random.hpp"

namespace cmark::codec {

struct CodecConfig {
  double lambda1 = 0.1;
  double lambda2 = 30.0;
  double alpha = 0.1;
  int C = 16;
  int image_size = 128;
  std::vector<int> layer_channels{16, 32, 64};
  int message_channels = 8;
  /// Side of the message tile at the finest level; halves at every level.
  int message_tile = 8;
  int decoder_channels = 64;
  /// Encoder output is x + bound * tanh(residual); 0 leaves it unbounded.
  double residual_bound = 0.0;

  /// Where the watermark lives: "contour" (M_c), "background" (1 - face) or
  /// "full" (whole frame).
  std::string region = "contour";
  /// Feed the region mask into message injection; off gates with all-ones.
  bool mask_constraint = true;
  /// Paste the encoder output into the region only; off keeps E(X) everywhere.
  bool compositing = true;

  double lr = 2e-4;
  double discriminator_lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int batch_size = 16;
  int epochs = 100;
  /// Epochs over which the image-fidelity and clean-image terms ramp up.
  int warmup_epochs = 0;
  /// Leading epochs trained without the distortion pool.
  int clean_epochs = 0;
  /// Multiplier on the image MSE term (starting value when adaptive).
  double image_weight = 1.0;
  /// When > 0 the image weight follows the batch PSNR of the quantized
  /// composite: log w += image_weight_rate * (psnr_target - psnr), w in [1, 1e4].
  double psnr_target = 0.0;
  double image_weight_rate = 0.05;
  /// Codec lr follows a cosine from lr down to lr * lr_floor over `epochs`;
  /// 1 keeps it constant.
  double lr_floor = 1.0;
  /// Global gradient-norm clip for the encoder/decoder step; 0 disables.
  double grad_clip = 0.0;
  /// After warm-up, a batch whose composite PSNR falls below this rolls the
  /// trainer back to the start of the epoch, halves the lr and ends the
  /// epoch. 0 disables.
  double collapse_psnr = 0.0;
  int dilation_min = 2;
  int dilation_max = 4;
  /// "random": fresh +-1 messages per step; "fixed": one random message per
  /// image for the whole run.
  std::string message_source = "random";
  distort::JpegMode jpeg_mode = distort::JpegMode::StraightThrough;
  distort::DistortionRanges ranges;

  int message_length() const noexcept { return 2 * C; }
  /// Throws BadParams for inconsistent settings.
  void validate() const;
  /// CRC-32 (hex) of the architecture-relevant fields.
  std::string hash() const;
};

nlohmann::json to_json(const CodecConfig& config);
CodecConfig codec_config_from_json(const nlohmann::json& j);

struct SqueezeExcitationImpl : torch::nn::Module {
  SqueezeExcitationImpl(int channels, int reduction = 4);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(SqueezeExcitation);

struct ConvBlockImpl : torch::nn::Module {
  ConvBlockImpl(int in, int out);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d a{nullptr}, b{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Lifts the scaled message with an MLP into a tile, repeats it over the
/// feature grid, applies a 3x3 conv, gates it with the resized contour mask,
/// concatenates it with the features and fuses the result with SE.
struct MessageInjectionImpl : torch::nn::Module {
  MessageInjectionImpl(int message_length, int message_channels, int feature_channels, int tile);
  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& v_alpha, const torch::Tensor& mask);
  /// The gated message branch alone (before concatenation).
  torch::Tensor message_branch(const torch::Tensor& v_alpha, const torch::Tensor& mask, std::int64_t height,
                               std::int64_t width);

  torch::nn::Sequential mlp{nullptr};
  torch::nn::Conv2d conv{nullptr};
  SqueezeExcitation se{nullptr};
  int message_channels;
  int tile;
};
TORCH_MODULE(MessageInjection);

/// U-shaped encoder with message injection at every down level.
struct EncoderImpl : torch::nn::Module {
  explicit EncoderImpl(const CodecConfig& config);
  /// x: Bx3xHxW, v_alpha: Bx2C, mask: Bx1xHxW. Output clamped to [0, 1].
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& v_alpha, const torch::Tensor& mask);

  std::vector<ConvBlock> down;
  std::vector<MessageInjection> inject;
  std::vector<torch::nn::Conv2d> up;
  std::vector<ConvBlock> merge;
  torch::nn::Conv2d out{nullptr};
  double residual_bound;
  bool mask_constraint;
};
TORCH_MODULE(Encoder);

/// conv + BN, a patchifying strided conv, a 1x1 conv, global average pool,
/// BatchNorm1d and a linear map to 2C values.
struct DecoderImpl : torch::nn::Module {
  explicit DecoderImpl(const CodecConfig& config);
  torch::Tensor forward(const torch::Tensor& masked);

  torch::nn::Conv2d stem{nullptr}, patch{nullptr}, mix{nullptr};
  torch::nn::BatchNorm2d n0{nullptr}, n1{nullptr}, n2{nullptr};
  torch::nn::BatchNorm1d n3{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(Decoder);

/// Four strided convs, global average pool, linear, sigmoid: image -> (0, 1).
struct DiscriminatorImpl : torch::nn::Module {
  DiscriminatorImpl();
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Sequential features{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(Discriminator);

inline constexpr double kProbabilityFloor = 1e-6;

/// MSE(original, encoded) + lambda1 * mean(-log Dis(X) - log(1 - Dis(E(X)))),
/// probabilities clamped to [1e-6, 1 - 1e-6].
torch::Tensor encoder_loss(const torch::Tensor& original, const torch::Tensor& encoded,
                           const torch::Tensor& dis_original, const torch::Tensor& dis_encoded,
                           double lambda1);
torch::Tensor encoder_loss(const torch::Tensor& original, const torch::Tensor& encoded,
                           Discriminator& discriminator, double lambda1);

/// Per-sample squared norm of the clean-image output (averaged over the
/// batch) plus lambda2 * MSE(v_alpha, distorted-watermarked output).
torch::Tensor decoder_loss(const torch::Tensor& raw_nonwm, const torch::Tensor& raw_wm,
                           const torch::Tensor& v_alpha, double lambda2);

/// Discriminator objective: mean(-log Dis(X) - log(1 - Dis(E(X)))).
torch::Tensor discriminator_loss(const torch::Tensor& dis_original, const torch::Tensor& dis_encoded);

/// Generator-side adversarial term used for the encoder step: mean(-log Dis(E(X))).
torch::Tensor generator_adversarial_term(const torch::Tensor& dis_encoded);

/// X * (1 - M) + E * M as a per-pixel selection, so pixels outside the mask
/// are copied bit for bit.
torch::Tensor composite(const torch::Tensor& original, const torch::Tensor& encoded, const torch::Tensor& mask);
Image composite(const Image& original, const Image& encoded, const Mask& mask);

/// Round to 8-bit levels in the forward pass, identity gradient.
torch::Tensor quantize_straight_through(const torch::Tensor& x);

/// Trained encoder/decoder/discriminator with inference helpers.
class WatermarkCodec {
 public:
  explicit WatermarkCodec(CodecConfig config);

  Image encode(const Image& image, const message::HybridMessage& message, const Mask& contour_mask);
  /// E(X) pasted into the region (or E(X) itself with compositing off),
  /// rounded to 8-bit levels.
  Image embed(const Image& image, const message::HybridMessage& message, const Mask& region);
  /// Raw decoder output on image * mask, length 2C.
  std::vector<double> decode(const Image& image, const Mask& contour_mask);

  /// Writes encoder.pt, decoder.pt, discriminator.pt into dir.
  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

  const CodecConfig& config() const noexcept { return config_; }
  Encoder& encoder() noexcept { return encoder_; }
  Decoder& decoder() noexcept { return decoder_; }
  Discriminator& discriminator() noexcept { return discriminator_; }

 private:
  CodecConfig config_;
  Encoder encoder_{nullptr};
  Decoder decoder_{nullptr};
  Discriminator discriminator_{nullptr};
};

struct EpochMetrics {
  int epoch = 0;
  int steps = 0;
  double image_mse = 0.0;
  double adversarial = 0.0;
  double decode_term = 0.0;
  double clean_term = 0.0;
  double discriminator = 0.0;
  double train_ber = 0.0;
  double psnr = 0.0;
  double image_weight = 1.0;
  double lr = 0.0;
  bool rolled_back = false;
  /// Mean encoder/decoder gradient norm before clipping.
  double grad_norm = 0.0;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochMetrics& m);

/// A training corpus held in memory: images Nx3xHxW and face masks Nx1xHxW.
struct TrainingSet {
  torch::Tensor images;
  torch::Tensor face_masks;
  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

class CodecTrainer {
 public:
  CodecTrainer(WatermarkCodec& codec, Rng& rng);

  /// One pass over the set. Throws NonFiniteLoss naming the batch index.
  EpochMetrics train_epoch(const TrainingSet& data);
  int epoch() const noexcept { return epoch_; }
  void set_epoch(int epoch) noexcept { epoch_ = epoch; }
  double image_weight() const noexcept { return std::exp(log_image_weight_); }
  /// Product of the lr halvings applied by collapse rollbacks.
  double lr_scale() const noexcept { return lr_scale_; }

 private:
  std::string snapshot() const;
  void restore(const std::string& blob);

  WatermarkCodec& codec_;
  Rng& rng_;
  torch::optim::Adam codec_opt_;
  torch::optim::Adam disc_opt_;
  torch::Tensor fixed_messages_;
  int epoch_ = 0;
  double log_image_weight_ = 0.0;
  double lr_scale_ = 1.0;
};

/// Contour masks (Bx1xHxW) from face masks with per-image dilation counts.
torch::Tensor contour_masks_from_faces(const torch::Tensor& face_masks, const std::vector<int>& iterations);

/// Embedding-region masks for the configured region.
torch::Tensor region_masks_from_faces(const CodecConfig& config, const torch::Tensor& face_masks,
                                      const std::vector<int>& iterations);
Mask region_mask(const CodecConfig& config, const Mask& face_mask, int iterations);

}  // namespace cmark::codec
