#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "cmark/distortion_pool.hpp"
#include "cmark/image.hpp"
#include "cmark/random.hpp"

namespace cmark::denoise {

enum class DistortionClass { RandomNoise, BlurOrCompression, Other };

DistortionClass split_distortion_classes(const distort::DistortionSpec& spec);
std::string to_string(DistortionClass c);

/// Five 3x3 conv layers (ReLU between them). With `add_input` the stack's
/// output is added to its input, so the net predicts an image rather than a
/// residual.
struct ConvStackImpl : torch::nn::Module {
  ConvStackImpl(int width = 16, bool add_input = false);
  torch::Tensor forward(const torch::Tensor& x);
  /// Zero the last layer so the stack outputs 0 (or its input, with add_input).
  void zero_last_layer();

  torch::nn::ModuleList layers;
  bool add_input;
};
TORCH_MODULE(ConvStack);

/// P1 estimates the residual clean - noised; P2 restores detail.
struct ProactiveDenoiserImpl : torch::nn::Module {
  explicit ProactiveDenoiserImpl(int width = 16);
  /// clamp(P2(P1(n) + n), 0, 1).
  torch::Tensor forward(const torch::Tensor& noised);

  ConvStack p1{nullptr};
  ConvStack p2{nullptr};
};
TORCH_MODULE(ProactiveDenoiser);

/// MSE(y1, p1_out) + MSE(y2, p2_out).
torch::Tensor denoiser_loss(const torch::Tensor& y1, const torch::Tensor& p1_out,
                            const torch::Tensor& y2, const torch::Tensor& p2_out);

/// Inference on one image (no gradient, eval mode).
Image denoise(const Image& image, ProactiveDenoiser& model);

struct DenoiserTrainConfig {
  int width = 16;
  double lr = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int batch_size = 16;
  distort::DistortionRanges ranges;
};

struct DenoiserMetrics {
  double loss = 0.0;
  double p1_term = 0.0;
  double p2_term = 0.0;
  int steps = 0;
};

/// Trains P1 on random-noise distortions and P2 on blur/compression
/// distortions of the clean images; "other" kinds yield no targets.
class DenoiserTrainer {
 public:
  DenoiserTrainer(ProactiveDenoiser model, DenoiserTrainConfig config);

  /// One optimisation step on a clean batch (Bx3xHxW).
  DenoiserMetrics step(const torch::Tensor& clean, Rng& rng);
  /// One pass over `images` (Nx3xHxW) in a shuffled order.
  DenoiserMetrics train_epoch(const torch::Tensor& images, Rng& rng);

 private:
  ProactiveDenoiser model_;
  DenoiserTrainConfig config_;
  torch::optim::Adam optimizer_;
};

/// Draws a distortion whose class matches `wanted`.
distort::DistortionSpec sample_of_class(DistortionClass wanted, Rng& rng,
                                        const distort::DistortionRanges& ranges);

}  // namespace cmark::denoise
