#include "testing.hpp"

#include "cmark/errors.hpp"
#include "cmark/proactive_denoiser.hpp"
#include "cmark/synthetic_faces.hpp"
#include "gradcheck.hpp"

using namespace cmark;
using namespace cmark::denoise;
using distort::DistortionKind;

TEST_CASE("distortion kinds split into noise, blur/compression and other") {
  CHECK(split_distortion_classes({DistortionKind::GaussianNoise, 0.05}) == DistortionClass::RandomNoise);
  CHECK(split_distortion_classes({DistortionKind::SaltPepper, 0.05}) == DistortionClass::RandomNoise);
  CHECK(split_distortion_classes({DistortionKind::GaussianBlur, 5}) == DistortionClass::BlurOrCompression);
  CHECK(split_distortion_classes({DistortionKind::JPEG, 75}) == DistortionClass::BlurOrCompression);
  CHECK(split_distortion_classes({DistortionKind::EdgeCrop, 0.1}) == DistortionClass::Other);
  CHECK(split_distortion_classes({DistortionKind::Hue, 0.02}) == DistortionClass::Other);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    CHECK(split_distortion_classes(sample_of_class(DistortionClass::RandomNoise, rng, {})) ==
          DistortionClass::RandomNoise);
    CHECK(split_distortion_classes(sample_of_class(DistortionClass::BlurOrCompression, rng, {})) ==
          DistortionClass::BlurOrCompression);
  }
}

TEST_CASE("denoiser loss is the sum of the two MSE terms") {
  const auto z = torch::zeros({1, 3, 2, 2}, torch::kFloat64);
  const auto a = torch::full({1, 3, 2, 2}, 0.2, torch::kFloat64);
  const auto b = torch::full({1, 3, 2, 2}, 0.5, torch::kFloat64);
  CHECK(denoiser_loss(z, a, z, b).item<double>() == doctest::Approx(0.04 + 0.25));
}

TEST_CASE("denoiser loss gradient matches central differences") {
  torch::manual_seed(2);
  ProactiveDenoiser model(4);
  model->to(torch::kFloat64);
  const auto clean = torch::rand({2, 3, 12, 12}, torch::kFloat64);
  const auto noisy = (clean + 0.05 * torch::randn_like(clean)).clamp(0, 1);
  const auto blurred = torch::rand({2, 3, 12, 12}, torch::kFloat64);
  std::vector<torch::Tensor> params;
  for (const auto& p : model->parameters()) params.push_back(p);
  const auto r = gradcheck::check(
      [&] { return denoiser_loss(clean - noisy, model->p1->forward(noisy), clean, model->p2->forward(blurred)); },
      params);
  CHECK(r.entries > 20);
  CHECK(r.relative_error <= 1e-4);
}

TEST_CASE("forward output stays in [0, 1] and keeps the shape") {
  torch::manual_seed(3);
  ProactiveDenoiser model(8);
  const auto x = torch::rand({2, 3, 32, 32});
  const auto y = model->forward(x);
  CHECK(y.sizes() == x.sizes());
  CHECK(y.min().item<double>() >= 0.0);
  CHECK(y.max().item<double>() <= 1.0);
  const Image img(32, 32, 0.4f);
  const Image out = denoise::denoise(img, model);
  CHECK(out.same_shape(img));
}

TEST_CASE("training lowers the denoiser loss") {
  torch::manual_seed(4);
  const auto faces = synth::make_corpus(4, 2, 3, 64);
  std::vector<Image> imgs;
  for (const auto& f : faces) imgs.push_back(f.image);
  const auto batch = stack_images(imgs);
  ProactiveDenoiser model(8);
  DenoiserTrainConfig cfg;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  DenoiserTrainer trainer(model, cfg);
  Rng rng(4);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) first += trainer.step(batch, rng).loss / 5;
  for (int i = 0; i < 60; ++i) trainer.step(batch, rng);
  for (int i = 0; i < 5; ++i) last += trainer.step(batch, rng).loss / 5;
  CHECK(last < first);
  CHECK_THROWS_AS(trainer.train_epoch(torch::zeros({0, 3, 64, 64}), rng), Error);
}
