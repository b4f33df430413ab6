#include "cmark/proactive_denoiser.hpp"

#include <numeric>

#include "cmark/errors.hpp"

namespace cmark::denoise {

using distort::DistortionKind;

DistortionClass split_distortion_classes(const distort::DistortionSpec& spec) {
  switch (spec.kind) {
    case DistortionKind::GaussianNoise:
    case DistortionKind::SaltPepper: return DistortionClass::RandomNoise;
    case DistortionKind::GaussianBlur:
    case DistortionKind::MedianBlur:
    case DistortionKind::JPEG:
    case DistortionKind::Resize: return DistortionClass::BlurOrCompression;
    default: return DistortionClass::Other;
  }
}

std::string to_string(DistortionClass c) {
  switch (c) {
    case DistortionClass::RandomNoise: return "random_noise";
    case DistortionClass::BlurOrCompression: return "blur_or_compression";
    case DistortionClass::Other: return "other";
  }
  return "other";
}

ConvStackImpl::ConvStackImpl(int width, bool add_input_) : add_input(add_input_) {
  layers = register_module("layers", torch::nn::ModuleList());
  const int widths[6] = {3, width, width, width, width, 3};
  for (int i = 0; i < 5; ++i) {
    layers->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[i], widths[i + 1], 3).padding(1)));
  }
}

torch::Tensor ConvStackImpl::forward(const torch::Tensor& x) {
  torch::Tensor h = x;
  for (std::size_t i = 0; i < layers->size(); ++i) {
    h = layers[i]->as<torch::nn::Conv2d>()->forward(h);
    if (i + 1 < layers->size()) h = torch::relu(h);
  }
  return add_input ? x + h : h;
}

void ConvStackImpl::zero_last_layer() {
  torch::NoGradGuard no_grad;
  auto* last = layers[layers->size() - 1]->as<torch::nn::Conv2d>();
  last->weight.zero_();
  last->bias.zero_();
}

ProactiveDenoiserImpl::ProactiveDenoiserImpl(int width) {
  p1 = register_module("p1", ConvStack(width, false));
  p2 = register_module("p2", ConvStack(width, true));
}

torch::Tensor ProactiveDenoiserImpl::forward(const torch::Tensor& noised) {
  return p2->forward(p1->forward(noised) + noised).clamp(0.0, 1.0);
}

torch::Tensor denoiser_loss(const torch::Tensor& y1, const torch::Tensor& p1_out,
                            const torch::Tensor& y2, const torch::Tensor& p2_out) {
  return torch::mse_loss(p1_out, y1) + torch::mse_loss(p2_out, y2);
}

Image denoise(const Image& image, ProactiveDenoiser& model) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  Image out = from_tensor(model->forward(to_tensor(image)));
  if (was_training) model->train();
  return out;
}

distort::DistortionSpec sample_of_class(DistortionClass wanted, Rng& rng,
                                        const distort::DistortionRanges& ranges) {
  for (;;) {
    auto spec = distort::sample_distortion(rng, ranges);
    if (split_distortion_classes(spec) == wanted) return spec;
  }
}

DenoiserTrainer::DenoiserTrainer(ProactiveDenoiser model, DenoiserTrainConfig config)
    : model_(std::move(model)),
      config_(std::move(config)),
      optimizer_(model_->parameters(),
                 torch::optim::AdamOptions(config_.lr).betas({config_.beta1, config_.beta2})) {}

DenoiserMetrics DenoiserTrainer::step(const torch::Tensor& clean, Rng& rng) {
  model_->train();
  std::vector<torch::Tensor> n1, n2;
  {
    torch::NoGradGuard no_grad;
    for (std::int64_t b = 0; b < clean.size(0); ++b) {
      const torch::Tensor x = clean.slice(0, b, b + 1);
      n1.push_back(distort::apply_distortion(x, sample_of_class(DistortionClass::RandomNoise, rng, config_.ranges), rng));
      n2.push_back(distort::apply_distortion(x, sample_of_class(DistortionClass::BlurOrCompression, rng, config_.ranges), rng));
    }
  }
  const torch::Tensor noisy = torch::cat(n1, 0);
  const torch::Tensor blurred = torch::cat(n2, 0);
  const torch::Tensor p1_out = model_->p1->forward(noisy);
  const torch::Tensor p2_out = model_->p2->forward(blurred);
  const torch::Tensor t1 = torch::mse_loss(p1_out, clean - noisy);
  const torch::Tensor t2 = torch::mse_loss(p2_out, clean);
  const torch::Tensor loss = t1 + t2;
  if (!torch::isfinite(loss).item<bool>()) throw Error(ErrorCode::NonFiniteLoss, "denoiser loss is not finite");
  optimizer_.zero_grad();
  loss.backward();
  optimizer_.step();
  return {loss.item<double>(), t1.item<double>(), t2.item<double>(), 1};
}

DenoiserMetrics DenoiserTrainer::train_epoch(const torch::Tensor& images, Rng& rng) {
  const auto n = images.size(0);
  if (n == 0) throw Error(ErrorCode::EmptyCorpus, "no training images");
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  DenoiserMetrics total;
  for (std::int64_t s = 0; s < n; s += config_.batch_size) {
    const auto e = std::min<std::int64_t>(n, s + config_.batch_size);
    const torch::Tensor idx = torch::tensor(std::vector<std::int64_t>(order.begin() + s, order.begin() + e));
    const auto m = step(images.index_select(0, idx), rng);
    total.loss += m.loss;
    total.p1_term += m.p1_term;
    total.p2_term += m.p2_term;
    ++total.steps;
  }
  total.loss /= total.steps;
  total.p1_term /= total.steps;
  total.p2_term /= total.steps;
  return total;
}

}  // namespace cmark::denoise
