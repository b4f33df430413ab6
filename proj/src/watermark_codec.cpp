#include "cmark/watermark_codec.hpp"

#include <array>
#include <chrono>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

#include <zlib.h>

#include "cmark/errors.hpp"
#include "cmark/face_geometry.hpp"

namespace cmark::codec {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d conv(int in, int out, int k = 3, int stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

torch::Tensor lrelu(const torch::Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2)); }

std::vector<int> effective_channels(const CodecConfig& c) {
  auto ch = c.layer_channels;
  if (c.image_size == 256 && ch.size() == 3) ch.push_back(2 * ch.back());
  return ch;
}

int tile_at(const CodecConfig& c, std::size_t level) { return std::max(1, c.message_tile >> level); }

torch::Tensor resize_nearest(const torch::Tensor& m, std::int64_t h, std::int64_t w) {
  if (m.size(2) == h && m.size(3) == w) return m;
  return F::interpolate(m, F::InterpolateFuncOptions().size(std::vector<std::int64_t>{h, w}).mode(torch::kNearest));
}

const char* jpeg_mode_name(distort::JpegMode m) {
  return m == distort::JpegMode::Simulated ? "simulated" : "straight_through";
}

}  // namespace

void CodecConfig::validate() const {
  if (C < 1) throw Error(ErrorCode::BadParams, "C must be positive");
  if (!(alpha > 0)) throw Error(ErrorCode::BadParams, "alpha must be positive");
  if (lambda1 < 0 || lambda2 < 0) throw Error(ErrorCode::BadParams, "loss weights must be non-negative");
  if (image_size != 128 && image_size != 256) throw Error(ErrorCode::BadParams, "image_size must be 128 or 256");
  if (layer_channels.empty()) throw Error(ErrorCode::BadParams, "encoder needs at least one level");
  const auto ch = effective_channels(*this);
  for (std::size_t k = 0; k < ch.size(); ++k) {
    if (ch[k] < 1) throw Error(ErrorCode::BadParams, "channel widths must be positive");
    const int side = image_size >> k;
    if (side < 1 || side % tile_at(*this, k) != 0) {
      throw Error(ErrorCode::BadParams, "message tile does not divide level " + std::to_string(k));
    }
  }
  if (message_channels < 1 || message_tile < 1 || decoder_channels < 1) {
    throw Error(ErrorCode::BadParams, "message/decoder widths must be positive");
  }
  if (image_size % message_tile != 0) throw Error(ErrorCode::BadParams, "decoder patch must divide the image");
  if (residual_bound < 0) throw Error(ErrorCode::BadParams, "residual_bound must be >= 0");
  if (batch_size < 1 || epochs < 0 || warmup_epochs < 0) throw Error(ErrorCode::BadParams, "bad schedule");
  if (!(lr > 0) || !(discriminator_lr > 0)) throw Error(ErrorCode::BadParams, "learning rates must be positive");
  if (dilation_min < 1 || dilation_max < dilation_min) throw Error(ErrorCode::BadParams, "bad dilation range");
  if (region != "contour" && region != "background" && region != "full") {
    throw Error(ErrorCode::BadParams, "region must be contour, background or full");
  }
  if (psnr_target < 0 || image_weight_rate < 0) throw Error(ErrorCode::BadParams, "bad PSNR target settings");
  if (!(lr_floor > 0 && lr_floor <= 1) || grad_clip < 0 || collapse_psnr < 0) throw Error(ErrorCode::BadParams, "bad lr schedule");
  if (clean_epochs < 0 || !(image_weight > 0)) throw Error(ErrorCode::BadParams, "bad curriculum settings");
  if (message_source != "random" && message_source != "fixed") {
    throw Error(ErrorCode::BadParams, "message_source must be 'random' or 'fixed'");
  }
}

std::string CodecConfig::hash() const {
  const nlohmann::json arch = {{"C", C},
                               {"alpha", alpha},
                               {"image_size", image_size},
                               {"layer_channels", layer_channels},
                               {"message_channels", message_channels},
                               {"message_tile", message_tile},
                               {"decoder_channels", decoder_channels},
                               {"residual_bound", residual_bound},
                               {"region", region},
                               {"mask_constraint", mask_constraint},
                               {"compositing", compositing}};
  const std::string s = arch.dump();
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

nlohmann::json to_json(const CodecConfig& c) {
  return {{"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"alpha", c.alpha},
          {"C", c.C},
          {"image_size", c.image_size},
          {"layer_channels", c.layer_channels},
          {"message_channels", c.message_channels},
          {"message_tile", c.message_tile},
          {"decoder_channels", c.decoder_channels},
          {"residual_bound", c.residual_bound},
          {"region", c.region},
          {"mask_constraint", c.mask_constraint},
          {"compositing", c.compositing},
          {"lr", c.lr},
          {"discriminator_lr", c.discriminator_lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"clean_epochs", c.clean_epochs},
          {"image_weight", c.image_weight},
          {"psnr_target", c.psnr_target},
          {"image_weight_rate", c.image_weight_rate},
          {"lr_floor", c.lr_floor},
          {"grad_clip", c.grad_clip},
          {"collapse_psnr", c.collapse_psnr},
          {"dilation_min", c.dilation_min},
          {"dilation_max", c.dilation_max},
          {"message_source", c.message_source},
          {"jpeg_mode", jpeg_mode_name(c.jpeg_mode)},
          {"distortion_ranges", distort::to_json(c.ranges)}};
}

CodecConfig codec_config_from_json(const nlohmann::json& j) {
  CodecConfig c;
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.alpha = j.value("alpha", c.alpha);
  c.C = j.value("C", c.C);
  c.image_size = j.value("image_size", c.image_size);
  c.layer_channels = j.value("layer_channels", c.layer_channels);
  c.message_channels = j.value("message_channels", c.message_channels);
  c.message_tile = j.value("message_tile", c.message_tile);
  c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
  c.residual_bound = j.value("residual_bound", c.residual_bound);
  c.region = j.value("region", c.region);
  c.mask_constraint = j.value("mask_constraint", c.mask_constraint);
  c.compositing = j.value("compositing", c.compositing);
  c.lr = j.value("lr", c.lr);
  c.discriminator_lr = j.value("discriminator_lr", c.discriminator_lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.clean_epochs = j.value("clean_epochs", c.clean_epochs);
  c.image_weight = j.value("image_weight", c.image_weight);
  c.psnr_target = j.value("psnr_target", c.psnr_target);
  c.image_weight_rate = j.value("image_weight_rate", c.image_weight_rate);
  c.lr_floor = j.value("lr_floor", c.lr_floor);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.collapse_psnr = j.value("collapse_psnr", c.collapse_psnr);
  c.dilation_min = j.value("dilation_min", c.dilation_min);
  c.dilation_max = j.value("dilation_max", c.dilation_max);
  c.message_source = j.value("message_source", c.message_source);
  const auto mode = j.value("jpeg_mode", std::string("straight_through"));
  if (mode == "simulated") {
    c.jpeg_mode = distort::JpegMode::Simulated;
  } else if (mode == "straight_through") {
    c.jpeg_mode = distort::JpegMode::StraightThrough;
  } else {
    throw Error(ErrorCode::BadParams, "unknown jpeg_mode '" + mode + "'");
  }
  if (j.contains("distortion_ranges")) c.ranges = distort::ranges_from_json(j.at("distortion_ranges"));
  c.validate();
  return c;
}

SqueezeExcitationImpl::SqueezeExcitationImpl(int channels, int reduction) {
  const int hidden = std::max(channels / reduction, 4);
  fc1 = register_module("fc1", torch::nn::Linear(channels, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, channels));
}

torch::Tensor SqueezeExcitationImpl::forward(const torch::Tensor& x) {
  const torch::Tensor w = torch::sigmoid(fc2(torch::relu(fc1(x.mean({2, 3})))));
  return x * w.unsqueeze(-1).unsqueeze(-1);
}

ConvBlockImpl::ConvBlockImpl(int in, int out) {
  a = register_module("a", conv(in, out));
  b = register_module("b", conv(out, out));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) { return lrelu(b(lrelu(a(x)))); }

MessageInjectionImpl::MessageInjectionImpl(int message_length, int message_channels_, int feature_channels,
                                           int tile_)
    : message_channels(message_channels_), tile(tile_) {
  mlp = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(message_length, 256), torch::nn::ReLU(),
                                                     torch::nn::Linear(256, message_channels * tile * tile)));
  conv = register_module("conv", codec::conv(message_channels, message_channels));
  se = register_module("se", SqueezeExcitation(feature_channels + message_channels));
}

torch::Tensor MessageInjectionImpl::message_branch(const torch::Tensor& v_alpha, const torch::Tensor& mask,
                                                   std::int64_t height, std::int64_t width) {
  const auto B = v_alpha.size(0);
  torch::Tensor z = mlp->forward(v_alpha).view({B, message_channels, tile, tile});
  z = z.repeat({1, 1, height / tile, width / tile});
  return conv(z) * resize_nearest(mask, height, width);
}

torch::Tensor MessageInjectionImpl::forward(const torch::Tensor& h, const torch::Tensor& v_alpha,
                                            const torch::Tensor& mask) {
  return se(torch::cat({message_branch(v_alpha, mask, h.size(2), h.size(3)), h}, 1));
}

EncoderImpl::EncoderImpl(const CodecConfig& config)
    : residual_bound(config.residual_bound), mask_constraint(config.mask_constraint) {
  config.validate();
  const auto ch = effective_channels(config);
  const int cm = config.message_channels;
  const int len = config.message_length();
  for (std::size_t k = 0; k < ch.size(); ++k) {
    const int in = k == 0 ? 3 : ch[k - 1] + cm;
    down.push_back(register_module("down" + std::to_string(k), ConvBlock(in, ch[k])));
    inject.push_back(register_module("inject" + std::to_string(k), MessageInjection(len, cm, ch[k], tile_at(config, k))));
  }
  up.resize(ch.size() > 1 ? ch.size() - 1 : 0, nullptr);
  merge.resize(up.size(), nullptr);
  for (std::size_t k = up.size(); k-- > 0;) {
    const int in = k + 2 == ch.size() ? ch[k + 1] + cm : ch[k + 1];
    up[k] = register_module("up" + std::to_string(k), conv(in, ch[k]));
    merge[k] = register_module("merge" + std::to_string(k), ConvBlock(2 * ch[k] + cm, ch[k]));
  }
  const int last = up.empty() ? ch[0] + cm : ch[0];
  out = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(last, 3, 1)));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x, const torch::Tensor& v_alpha, const torch::Tensor& mask) {
  std::vector<torch::Tensor> skips;
  torch::Tensor h = x;
  const torch::Tensor gate = mask_constraint ? mask : torch::ones_like(mask);
  for (std::size_t k = 0; k < down.size(); ++k) {
    if (k > 0) h = torch::max_pool2d(h, 2);
    h = inject[k]->forward(down[k]->forward(h), v_alpha, gate);
    skips.push_back(h);
  }
  torch::Tensor u = skips.back();
  for (std::size_t k = up.size(); k-- > 0;) {
    u = F::interpolate(u, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    u = lrelu(up[k](u));
    u = merge[k]->forward(torch::cat({u, skips[k]}, 1));
  }
  const torch::Tensor r = out(u);
  const torch::Tensor y = residual_bound > 0 ? x + residual_bound * torch::tanh(r) : x + r;
  return y.clamp(0.0, 1.0);
}

DecoderImpl::DecoderImpl(const CodecConfig& config) {
  config.validate();
  const int c = config.decoder_channels;
  stem = register_module("stem", conv(3, 16));
  n0 = register_module("n0", torch::nn::BatchNorm2d(16));
  patch = register_module("patch", torch::nn::Conv2d(torch::nn::Conv2dOptions(16, c, config.message_tile).stride(config.message_tile)));
  n1 = register_module("n1", torch::nn::BatchNorm2d(c));
  mix = register_module("mix", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1)));
  n2 = register_module("n2", torch::nn::BatchNorm2d(c));
  n3 = register_module("n3", torch::nn::BatchNorm1d(c));
  head = register_module("head", torch::nn::Linear(c, config.message_length()));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& masked) {
  torch::Tensor h = lrelu(n0(stem(masked)));
  h = lrelu(n1(patch(h)));
  h = lrelu(n2(mix(h)));
  return head(n3(h.mean({2, 3})));
}

DiscriminatorImpl::DiscriminatorImpl() {
  features = register_module(
      "features",
      torch::nn::Sequential(conv(3, 8, 3, 2), torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                            conv(8, 16, 3, 2), torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                            conv(16, 32, 3, 2), torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                            conv(32, 32, 3, 2), torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2))));
  head = register_module("head", torch::nn::Linear(32, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  return torch::sigmoid(head(features->forward(x).mean({2, 3}))).squeeze(1);
}

namespace {
torch::Tensor clamp_prob(const torch::Tensor& p) { return p.clamp(kProbabilityFloor, 1.0 - kProbabilityFloor); }
}  // namespace

torch::Tensor encoder_loss(const torch::Tensor& original, const torch::Tensor& encoded,
                           const torch::Tensor& dis_original, const torch::Tensor& dis_encoded, double lambda1) {
  if (!original.sizes().equals(encoded.sizes())) throw Error(ErrorCode::ShapeMismatch, "encoded differs in shape");
  return torch::mse_loss(encoded, original) + lambda1 * discriminator_loss(dis_original, dis_encoded);
}

torch::Tensor encoder_loss(const torch::Tensor& original, const torch::Tensor& encoded,
                           Discriminator& discriminator, double lambda1) {
  return encoder_loss(original, encoded, discriminator->forward(original), discriminator->forward(encoded), lambda1);
}

torch::Tensor decoder_loss(const torch::Tensor& raw_nonwm, const torch::Tensor& raw_wm,
                           const torch::Tensor& v_alpha, double lambda2) {
  if (!raw_nonwm.sizes().equals(raw_wm.sizes()) || !raw_wm.sizes().equals(v_alpha.sizes())) {
    throw Error(ErrorCode::LengthMismatch, "decoder outputs and target differ in shape");
  }
  const auto as_batch = [](const torch::Tensor& t) { return t.dim() == 1 ? t.unsqueeze(0) : t; };
  const torch::Tensor clean = as_batch(raw_nonwm).pow(2).sum(1).mean();
  return clean + lambda2 * torch::mse_loss(raw_wm, v_alpha);
}

torch::Tensor discriminator_loss(const torch::Tensor& dis_original, const torch::Tensor& dis_encoded) {
  return (-torch::log(clamp_prob(dis_original)) - torch::log(1.0 - clamp_prob(dis_encoded))).mean();
}

torch::Tensor generator_adversarial_term(const torch::Tensor& dis_encoded) {
  return (-torch::log(clamp_prob(dis_encoded))).mean();
}

torch::Tensor composite(const torch::Tensor& original, const torch::Tensor& encoded, const torch::Tensor& mask) {
  if (!original.sizes().equals(encoded.sizes())) throw Error(ErrorCode::ShapeMismatch, "encoded differs in shape");
  return torch::where(mask > 0.5, encoded, original);
}

Image composite(const Image& original, const Image& encoded, const Mask& mask) {
  if (!original.same_shape(encoded) || !mask.matches(original)) {
    throw Error(ErrorCode::ShapeMismatch, "composite inputs differ in shape");
  }
  Image out = original;
  for (int y = 0; y < original.height(); ++y) {
    for (int x = 0; x < original.width(); ++x) {
      if (!mask.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = encoded.at(y, x, c);
    }
  }
  return out;
}

torch::Tensor quantize_straight_through(const torch::Tensor& x) {
  const torch::Tensor q = torch::round(x.clamp(0.0, 1.0) * 255.0) / 255.0;
  return x + (q - x).detach();
}

WatermarkCodec::WatermarkCodec(CodecConfig config) : config_(std::move(config)) {
  config_.validate();
  encoder_ = Encoder(config_);
  decoder_ = Decoder(config_);
  discriminator_ = Discriminator();
}

Image WatermarkCodec::encode(const Image& image, const message::HybridMessage& message, const Mask& contour_mask) {
  if (!contour_mask.matches(image)) throw Error(ErrorCode::ShapeMismatch, "mask does not match image");
  if (image.height() != config_.image_size || image.width() != config_.image_size) {
    throw Error(ErrorCode::ShapeMismatch, "image must be " + std::to_string(config_.image_size) + " pixels square");
  }
  if (static_cast<int>(message.length()) != config_.message_length()) {
    throw Error(ErrorCode::LengthMismatch, "message length must be 2C");
  }
  torch::NoGradGuard no_grad;
  encoder_->eval();
  const torch::Tensor va = torch::tensor(std::vector<float>(message.v_alpha.begin(), message.v_alpha.end())).unsqueeze(0);
  return from_tensor(encoder_->forward(to_tensor(image), va, to_tensor(contour_mask)));
}

std::vector<double> WatermarkCodec::decode(const Image& image, const Mask& contour_mask) {
  if (!contour_mask.matches(image)) throw Error(ErrorCode::ShapeMismatch, "mask does not match image");
  if (image.height() != config_.image_size || image.width() != config_.image_size) {
    throw Error(ErrorCode::ShapeMismatch, "image must be " + std::to_string(config_.image_size) + " pixels square");
  }
  torch::NoGradGuard no_grad;
  decoder_->eval();
  const torch::Tensor out = decoder_->forward(to_tensor(image) * to_tensor(contour_mask)).to(torch::kFloat64).contiguous();
  const double* p = out.data_ptr<double>();
  return {p, p + out.numel()};
}

Image WatermarkCodec::embed(const Image& image, const message::HybridMessage& message, const Mask& region) {
  const Image encoded = encode(image, message, region);
  return (config_.compositing ? composite(image, encoded, region) : encoded).quantized();
}

void WatermarkCodec::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  torch::save(encoder_, (dir / "encoder.pt").string());
  torch::save(decoder_, (dir / "decoder.pt").string());
  torch::save(discriminator_, (dir / "discriminator.pt").string());
}

void WatermarkCodec::load(const std::filesystem::path& dir) {
  for (const char* name : {"encoder.pt", "decoder.pt", "discriminator.pt"}) {
    if (!std::filesystem::exists(dir / name)) {
      throw Error(ErrorCode::MissingCheckpoint, "missing " + (dir / name).string());
    }
  }
  torch::load(encoder_, (dir / "encoder.pt").string());
  torch::load(decoder_, (dir / "decoder.pt").string());
  torch::load(discriminator_, (dir / "discriminator.pt").string());
}

nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},           {"steps", m.steps},           {"image_mse", m.image_mse},
          {"adversarial", m.adversarial}, {"decode_term", m.decode_term}, {"clean_term", m.clean_term},
          {"discriminator", m.discriminator}, {"train_ber", m.train_ber}, {"psnr", m.psnr},
          {"image_weight", m.image_weight}, {"lr", m.lr}, {"rolled_back", m.rolled_back}, {"grad_norm", m.grad_norm}, {"seconds", m.seconds}};
}

torch::Tensor contour_masks_from_faces(const torch::Tensor& face_masks, const std::vector<int>& iterations) {
  if (face_masks.dim() != 4 || static_cast<std::size_t>(face_masks.size(0)) != iterations.size()) {
    throw Error(ErrorCode::ShapeMismatch, "one dilation count per face mask is required");
  }
  std::vector<torch::Tensor> out;
  for (std::int64_t b = 0; b < face_masks.size(0); ++b) {
    const torch::Tensor face = face_masks.slice(0, b, b + 1);
    torch::Tensor d = face;
    for (int i = 0; i < iterations[static_cast<std::size_t>(b)]; ++i) d = torch::max_pool2d(d, 3, 1, 1);
    out.push_back(d - face);
  }
  return torch::cat(out, 0);
}

torch::Tensor region_masks_from_faces(const CodecConfig& config, const torch::Tensor& face_masks,
                                      const std::vector<int>& iterations) {
  if (config.region == "background") return 1.0 - face_masks;
  if (config.region == "full") return torch::ones_like(face_masks);
  return contour_masks_from_faces(face_masks, iterations);
}

Mask region_mask(const CodecConfig& config, const Mask& face_mask, int iterations) {
  if (config.region == "background") return ~face_mask;
  if (config.region == "full") return Mask(face_mask.height(), face_mask.width(), 1);
  return geometry::contour_mask(face_mask, iterations);
}

CodecTrainer::CodecTrainer(WatermarkCodec& codec, Rng& rng)
    : codec_(codec),
      rng_(rng),
      codec_opt_(
          [&] {
            auto p = codec.encoder()->parameters();
            const auto d = codec.decoder()->parameters();
            p.insert(p.end(), d.begin(), d.end());
            return p;
          }(),
          torch::optim::AdamOptions(codec.config().lr).betas({codec.config().beta1, codec.config().beta2})),
      disc_opt_(codec.discriminator()->parameters(),
                torch::optim::AdamOptions(codec.config().discriminator_lr)
                    .betas({codec.config().beta1, codec.config().beta2})),
      log_image_weight_(std::log(codec.config().image_weight)) {}

namespace {

torch::Tensor random_signs(Rng& rng, std::int64_t rows, std::int64_t cols) {
  std::vector<float> v(static_cast<std::size_t>(rows * cols));
  for (auto& x : v) x = (rng() >> 63) ? 1.0f : -1.0f;
  return torch::from_blob(v.data(), {rows, cols}, torch::kFloat32).clone();
}

}  // namespace

using NamedModule = std::pair<const char*, std::shared_ptr<torch::nn::Module>>;

static std::array<NamedModule, 3> trained_modules(WatermarkCodec& codec) {
  return {NamedModule{"e", codec.encoder().ptr()}, NamedModule{"d", codec.decoder().ptr()},
          NamedModule{"s", codec.discriminator().ptr()}};
}

std::string CodecTrainer::snapshot() const {
  std::ostringstream os;
  torch::serialize::OutputArchive a;
  for (const auto& [name, mod] : trained_modules(codec_)) {
    torch::serialize::OutputArchive sub;
    mod->save(sub);
    a.write(name, sub);
  }
  torch::serialize::OutputArchive oc, od;
  codec_opt_.save(oc);
  disc_opt_.save(od);
  a.write("oc", oc);
  a.write("od", od);
  a.save_to(os);
  return os.str();
}

void CodecTrainer::restore(const std::string& blob) {
  std::istringstream is(blob);
  torch::serialize::InputArchive a;
  a.load_from(is);
  for (const auto& [name, mod] : trained_modules(codec_)) {
    torch::serialize::InputArchive sub;
    a.read(name, sub);
    mod->load(sub);
  }
  torch::serialize::InputArchive oc, od;
  a.read("oc", oc);
  a.read("od", od);
  codec_opt_.load(oc);
  disc_opt_.load(od);
}

EpochMetrics CodecTrainer::train_epoch(const TrainingSet& data) {
  const auto& cfg = codec_.config();
  const auto n = data.size();
  if (n == 0) throw Error(ErrorCode::EmptyCorpus, "no training images");
  if (cfg.message_source == "fixed" && (!fixed_messages_.defined() || fixed_messages_.size(0) != n)) {
    fixed_messages_ = random_signs(rng_, n, cfg.message_length());
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng_);

  auto& E = codec_.encoder();
  auto& D = codec_.decoder();
  auto& Dis = codec_.discriminator();
  E->train();
  D->train();
  Dis->train();
  const double progress = cfg.epochs > 1 ? std::min(1.0, epoch_ / (cfg.epochs - 1.0)) : 0.0;
  const bool guarded = cfg.collapse_psnr > 0 && epoch_ >= std::max(cfg.warmup_epochs, cfg.clean_epochs);
  const std::string start = guarded ? snapshot() : std::string();
  const double start_log_weight = log_image_weight_;
  const double lr = lr_scale_ * cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
  for (auto& g : codec_opt_.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
  const double ramp = cfg.warmup_epochs > 0 ? std::min(1.0, (epoch_ + 1.0) / (cfg.warmup_epochs + 1.0)) : 1.0;

  EpochMetrics m;
  m.epoch = epoch_;
  for (std::int64_t s = 0, batch = 0; s < n; s += cfg.batch_size, ++batch) {
    const auto e = std::min<std::int64_t>(n, s + cfg.batch_size);
    const torch::Tensor idx = torch::tensor(std::vector<std::int64_t>(order.begin() + s, order.begin() + e));
    const torch::Tensor x = data.images.index_select(0, idx);
    const auto B = x.size(0);
    std::vector<int> its(static_cast<std::size_t>(B));
    for (auto& k : its) k = static_cast<int>(uniform_int(rng_, cfg.dilation_min, cfg.dilation_max));
    const torch::Tensor mask = region_masks_from_faces(cfg, data.face_masks.index_select(0, idx), its);
    const torch::Tensor v = cfg.message_source == "fixed" ? fixed_messages_.index_select(0, idx)
                                                          : random_signs(rng_, B, cfg.message_length());
    const torch::Tensor va = cfg.alpha * v;

    const torch::Tensor enc = E->forward(x, va, mask);
    const torch::Tensor wm = quantize_straight_through(cfg.compositing ? composite(x, enc, mask) : enc);
    std::vector<torch::Tensor> noised;
    for (std::int64_t b = 0; b < B; ++b) {
      if (epoch_ < cfg.clean_epochs) {
        noised.push_back(wm.slice(0, b, b + 1));
        continue;
      }
      const auto spec = distort::sample_distortion(rng_, cfg.ranges);
      noised.push_back(distort::apply_distortion(wm.slice(0, b, b + 1), spec, rng_, x.slice(0, b, b + 1), cfg.jpeg_mode));
    }
    const torch::Tensor out = D->forward(torch::cat({torch::cat(noised, 0) * mask, x * mask}, 0));
    const torch::Tensor out_wm = out.slice(0, 0, B);
    const torch::Tensor out_clean = out.slice(0, B, 2 * B);

    const torch::Tensor image_mse = torch::mse_loss(enc, x);
    const torch::Tensor adversarial = generator_adversarial_term(Dis->forward(enc));
    const torch::Tensor clean_term = out_clean.pow(2).sum(1).mean();
    const torch::Tensor decode_term = torch::mse_loss(out_wm, va);
    const torch::Tensor loss = ramp * (image_weight() * image_mse + cfg.lambda1 * adversarial) + ramp * clean_term + cfg.lambda2 * decode_term;
    if (!torch::isfinite(loss).item<bool>()) {
      throw Error(ErrorCode::NonFiniteLoss, "non-finite codec loss at batch " + std::to_string(batch));
    }
    codec_opt_.zero_grad();
    loss.backward();
    if (cfg.grad_clip > 0) {
      std::vector<torch::Tensor> params;
      for (auto& g : codec_opt_.param_groups())
        for (auto& p : g.params()) params.push_back(p);
      m.grad_norm += torch::nn::utils::clip_grad_norm_(params, cfg.grad_clip);
    }
    codec_opt_.step();

    const torch::Tensor dis_loss = discriminator_loss(Dis->forward(x), Dis->forward(enc.detach()));
    if (!torch::isfinite(dis_loss).item<bool>()) {
      throw Error(ErrorCode::NonFiniteLoss, "non-finite discriminator loss at batch " + std::to_string(batch));
    }
    disc_opt_.zero_grad();
    dis_loss.backward();
    disc_opt_.step();

    torch::NoGradGuard no_grad;
    const double batch_psnr = -10.0 * std::log10(std::max(torch::mse_loss(wm, x).item<double>(), 1e-12));
    if (guarded && batch_psnr < cfg.collapse_psnr) {
      restore(start);
      log_image_weight_ = start_log_weight;
      lr_scale_ *= 0.5;
      m.rolled_back = true;
      break;
    }
    if (cfg.psnr_target > 0) {
      log_image_weight_ = std::clamp(log_image_weight_ + cfg.image_weight_rate * (cfg.psnr_target - batch_psnr), 0.0,
                                     std::log(1e4));
    }
    m.psnr += batch_psnr;
    const torch::Tensor bits = torch::where(out_wm < 0, -torch::ones_like(out_wm), torch::ones_like(out_wm));
    m.image_mse += image_mse.item<double>();
    m.adversarial += adversarial.item<double>();
    m.clean_term += clean_term.item<double>();
    m.decode_term += decode_term.item<double>();
    m.discriminator += dis_loss.item<double>();
    m.train_ber += 100.0 * bits.ne(v).to(torch::kFloat64).mean().item<double>();
    ++m.steps;
  }
  for (double* f : {&m.image_mse, &m.adversarial, &m.clean_term, &m.decode_term, &m.discriminator, &m.train_ber, &m.psnr, &m.grad_norm}) {
    if (m.steps > 0) *f /= m.steps;
  }
  m.image_weight = image_weight();
  m.lr = lr;
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ++epoch_;
  return m;
}

}  // namespace cmark::codec
