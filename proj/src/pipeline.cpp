#include "cmark/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "cmark/errors.hpp"

namespace cmark::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Corpus

std::vector<CorpusEntry> read_corpus_index(const fs::path& index) {
  std::ifstream in(index);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open corpus index " + index.string());
  std::vector<CorpusEntry> out;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      CorpusEntry e;
      e.image_id = j.at("image_id").get<std::string>();
      e.path = j.at("path").get<std::string>();
      if (e.path.is_relative()) e.path = index.parent_path() / e.path;
      e.identity_label = j.at("identity_label").get<int>();
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw Error(ErrorCode::BadParams, index.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

void write_corpus_index(const fs::path& index, const std::vector<CorpusEntry>& entries) {
  if (index.has_parent_path()) fs::create_directories(index.parent_path());
  std::ofstream out(index);
  if (!out) throw Error(ErrorCode::MissingFile, "cannot write " + index.string());
  const fs::path base = fs::absolute(index).parent_path();
  for (const auto& e : entries) {
    const fs::path rel = fs::absolute(e.path).lexically_relative(base);
    out << json{{"image_id", e.image_id}, {"path", rel.generic_string()}, {"identity_label", e.identity_label}}.dump()
        << '\n';
  }
}

std::vector<CorpusImage> load_corpus(const fs::path& index, std::size_t limit) {
  auto entries = read_corpus_index(index);
  if (limit > 0 && entries.size() > limit) entries.resize(limit);
  std::vector<CorpusImage> out;
  out.reserve(entries.size());
  for (auto& e : entries) {
    Image img = read_image(e.path);
    out.push_back({std::move(e), std::move(img)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config

void PipelineConfig::validate() const {
  codec.validate();
  if (t1 < 0 || t1 > 100 || t2 < 0 || t2 > 100) throw Error(ErrorCode::BadParams, "thresholds must be in [0, 100]");
  if (test_dilation < 1) throw Error(ErrorCode::BadParams, "test_dilation must be positive");
  if (denoiser_epochs < 0 || calibration_images < 0) throw Error(ErrorCode::BadParams, "bad denoiser/calibration setting");
  if (denoiser.width < 1 || denoiser.batch_size < 1 || !(denoiser.lr > 0)) {
    throw Error(ErrorCode::BadParams, "bad denoiser training setting");
  }
  if (key_bits < 8) throw Error(ErrorCode::BadParams, "key_bits must be at least 8");
}

json to_json(const PipelineConfig& c) {
  json j = codec::to_json(c.codec);
  j["t1"] = c.t1;
  j["t2"] = c.t2;
  j["seed"] = c.seed;
  j["corpus_index"] = c.corpus_index;
  j["landmark_backend"] = c.landmark_backend;
  j["test_dilation"] = c.test_dilation;
  j["use_denoiser"] = c.use_denoiser;
  j["denoiser"] = {{"width", c.denoiser.width},
                   {"lr", c.denoiser.lr},
                   {"beta1", c.denoiser.beta1},
                   {"beta2", c.denoiser.beta2},
                   {"batch_size", c.denoiser.batch_size}};
  j["denoiser_epochs"] = c.denoiser_epochs;
  j["calibration_images"] = c.calibration_images;
  j["key_bits"] = c.key_bits;
  return j;
}

PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c;
  try {
    c.codec = codec::codec_config_from_json(j);
    c.t1 = j.value("t1", c.t1);
    c.t2 = j.value("t2", c.t2);
    c.seed = j.value("seed", c.seed);
    c.corpus_index = j.value("corpus_index", c.corpus_index);
    c.landmark_backend = j.value("landmark_backend", c.landmark_backend);
    c.test_dilation = j.value("test_dilation", c.test_dilation);
    c.use_denoiser = j.value("use_denoiser", c.use_denoiser);
    if (j.contains("denoiser")) {
      const auto& d = j.at("denoiser");
      c.denoiser.width = d.value("width", c.denoiser.width);
      c.denoiser.lr = d.value("lr", c.denoiser.lr);
      c.denoiser.beta1 = d.value("beta1", c.denoiser.beta1);
      c.denoiser.beta2 = d.value("beta2", c.denoiser.beta2);
      c.denoiser.batch_size = d.value("batch_size", c.denoiser.batch_size);
    }
    c.denoiser.ranges = c.codec.ranges;
    c.denoiser_epochs = j.value("denoiser_epochs", c.denoiser_epochs);
    c.calibration_images = j.value("calibration_images", c.calibration_images);
    c.key_bits = j.value("key_bits", c.key_bits);
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::BadParams, std::string("config: ") + ex.what());
  }
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open config " + path.string());
  try {
    return pipeline_config_from_json(json::parse(in));
  } catch (const json::parse_error& ex) {
    throw Error(ErrorCode::BadParams, path.string() + ": " + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoint

Checkpoint::Checkpoint(PipelineConfig config, message::PcaBasis contour_basis, message::PcaBasis identity_basis)
    : config_(std::move(config)) {
  config_.validate();
  codec_ = std::make_shared<codec::WatermarkCodec>(config_.codec);
  denoiser_ = denoise::ProactiveDenoiser(config_.denoiser.width);
  factory_ = std::make_shared<message::MessageFactory>(std::make_shared<message::RandomConvExtractor>(),
                                                       std::move(contour_basis), std::move(identity_basis),
                                                       config_.codec.alpha);
  detector_ = geometry::make_landmark_detector(config_.landmark_backend);
}

void Checkpoint::set_thresholds(double t1, double t2) {
  PipelineConfig c = config_;
  c.t1 = t1;
  c.t2 = t2;
  c.validate();
  config_ = c;
}

void Checkpoint::save(const fs::path& dir) const {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "config.json");
    out << to_json(config_).dump(2) << '\n';
  }
  codec_->save(dir);
  torch::save(denoiser_, (dir / "denoiser.pt").string());
  factory_->contour_basis().save(dir / "pca_contour.bin");
  factory_->identity_basis().save(dir / "pca_identity.bin");
}

Checkpoint Checkpoint::load(const fs::path& dir) {
  for (const char* name : {"config.json", "denoiser.pt", "pca_contour.bin", "pca_identity.bin"}) {
    if (!fs::exists(dir / name)) throw Error(ErrorCode::MissingCheckpoint, "missing " + (dir / name).string());
  }
  Checkpoint ck(load_pipeline_config(dir / "config.json"), message::PcaBasis::load(dir / "pca_contour.bin"),
                message::PcaBasis::load(dir / "pca_identity.bin"));
  ck.codec_->load(dir);
  torch::load(ck.denoiser_, (dir / "denoiser.pt").string());
  return ck;
}

// ---------------------------------------------------------------------------
// Training

Checkpoint train_pipeline(const std::vector<CorpusImage>& corpus, const PipelineConfig& config, const TrainLog& log) {
  config.validate();
  const auto emit = [&](const json& j) {
    if (log) log(j);
  };
  const auto detector = geometry::make_landmark_detector(config.landmark_backend);
  std::vector<const Image*> images;
  std::vector<Mask> faces;
  for (const auto& item : corpus) {
    if (item.image.height() != config.codec.image_size || item.image.width() != config.codec.image_size) {
      throw Error(ErrorCode::ShapeMismatch, item.entry.image_id + " is not " + std::to_string(config.codec.image_size) +
                                                " pixels square");
    }
    try {
      const auto lm = geometry::detect_landmarks(item.image, detector.get());
      faces.push_back(geometry::face_mask_from_landmarks(lm, item.image.height(), item.image.width()));
      images.push_back(&item.image);
    } catch (const Error& e) {
      emit({{"event", "skip"}, {"image_id", item.entry.image_id}, {"reason", e.what()}});
    }
  }
  if (images.empty()) throw Error(ErrorCode::EmptyCorpus, "no training image has a detectable face");

  // PCA bases on the test-time contour.
  std::vector<geometry::RegionMaskSet> masks;
  const std::size_t n_cal = config.calibration_images > 0
                                ? std::min<std::size_t>(images.size(), static_cast<std::size_t>(config.calibration_images))
                                : images.size();
  masks.reserve(n_cal);
  std::vector<message::CalibrationSample> samples;
  for (std::size_t i = 0; i < n_cal; ++i) {
    masks.push_back(geometry::region_masks(faces[i], config.test_dilation));
  }
  for (std::size_t i = 0; i < n_cal; ++i) samples.push_back({images[i], &masks[i]});
  const message::RandomConvExtractor extractor;
  auto [contour_basis, identity_basis] = message::fit_message_bases(samples, extractor, config.codec.C);
  emit({{"event", "pca"}, {"samples", n_cal}, {"dims", extractor.dims()}});

  Checkpoint ck(config, std::move(contour_basis), std::move(identity_basis));
  std::vector<Image> image_copies;
  image_copies.reserve(images.size());
  for (const auto* p : images) image_copies.push_back(*p);
  codec::TrainingSet set{stack_images(image_copies), stack_masks(faces)};
  image_copies.clear();

  Rng rng(config.seed);
  torch::manual_seed(config.seed);
  codec::CodecTrainer trainer(ck.codec(), rng);
  for (int e = 0; e < config.codec.epochs; ++e) {
    const auto m = trainer.train_epoch(set);
    json j = codec::to_json(m);
    j["event"] = "codec_epoch";
    emit(j);
  }

  denoise::DenoiserTrainConfig dcfg = config.denoiser;
  dcfg.ranges = config.codec.ranges;
  denoise::DenoiserTrainer dtrainer(ck.denoiser(), dcfg);
  for (int e = 0; e < config.denoiser_epochs; ++e) {
    const auto m = dtrainer.train_epoch(set.images, rng);
    emit({{"event", "denoiser_epoch"}, {"epoch", e}, {"loss", m.loss}, {"p1", m.p1_term}, {"p2", m.p2_term}});
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Client flow

ClientResult run_client_flow(const Image& original, const std::string& image_id, Checkpoint& ck,
                             const verify::KeyStore& keys, const ClientOptions& options, Rng& rng) {
  const auto& cfg = ck.config();
  const auto& detector = ck.detector();
  ClientResult r;

  const auto masks = geometry::extract_region_masks(original, cfg.test_dilation, &detector);
  const auto preset = ck.messages().make(original, masks);
  r.preset = preset.v;
  r.embed_region = codec::region_mask(cfg.codec, masks.face_mask, cfg.test_dilation);
  r.watermarked = options.watermark ? ck.codec().embed(original, preset, r.embed_region) : original;

  Image received = r.watermarked;
  if (options.swap_donor) {
    distort::SwapSpec swap{options.swap_donor, 3, 0.0};
    received = distort::simulated_face_swap(received, swap, masks.face_mask, rng, &detector).quantized();
  }
  if (options.distortion) received = distort::apply_distortion(received, *options.distortion, rng, &r.watermarked);
  r.received = received.quantized();

  r.denoised = options.use_denoiser ? denoise::denoise(r.received, ck.denoiser()) : r.received;
  r.recovered = geometry::extract_region_masks(r.denoised, cfg.test_dilation, &detector);
  const Mask decode_region = codec::region_mask(cfg.codec, r.recovered.face_mask, cfg.test_dilation);
  r.decoded_bits = message::binarize(ck.codec().decode(r.received, decode_region));
  r.reference_bits = ck.messages().make(r.denoised, r.recovered).v;

  r.decoded.message = verify::rsa_encrypt(r.decoded_bits, keys.public_key(verify::KeyRole::Decoder), rng);
  r.decoded.image_id = image_id;
  r.decoded.role = "decoded";
  r.reference.message = verify::rsa_encrypt(r.reference_bits, keys.public_key(verify::KeyRole::Reference), rng);
  r.reference.image_id = image_id;
  r.reference.role = "reference";
  return r;
}

// ---------------------------------------------------------------------------
// Metrics

double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "psnr inputs differ in shape");
  if (a.empty()) throw Error(ErrorCode::BadParams, "psnr of empty images");
  double acc = 0.0;
  const auto da = a.data();
  const auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = static_cast<double>(da[i]) - db[i];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(da.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

double ssim(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "ssim inputs differ in shape");
  constexpr int win = 11;
  if (a.height() < win || a.width() < win) throw Error(ErrorCode::BadParams, "ssim needs at least 11x11 pixels");
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  cv::Mat ma, mb;
  to_mat(a).convertTo(ma, CV_64FC3);
  to_mat(b).convertTo(mb, CV_64FC3);
  const cv::Mat g = cv::getGaussianKernel(win, 1.5, CV_64F);
  const auto filt = [&](const cv::Mat& m) {
    cv::Mat out;
    cv::sepFilter2D(m, out, CV_64F, g, g, cv::Point(-1, -1), 0, cv::BORDER_CONSTANT);
    const int h = win / 2;
    return cv::Mat(out, cv::Rect(h, h, m.cols - 2 * h, m.rows - 2 * h)).clone();
  };
  const cv::Mat mu_a = filt(ma), mu_b = filt(mb);
  const cv::Mat saa = filt(ma.mul(ma)) - mu_a.mul(mu_a);
  const cv::Mat sbb = filt(mb.mul(mb)) - mu_b.mul(mu_b);
  const cv::Mat sab = filt(ma.mul(mb)) - mu_a.mul(mu_b);
  const cv::Scalar k1 = cv::Scalar::all(c1), k2 = cv::Scalar::all(c2);
  cv::Mat num = (2 * mu_a.mul(mu_b) + k1).mul(2 * sab + k2);
  cv::Mat den = (mu_a.mul(mu_a) + mu_b.mul(mu_b) + k1).mul(saa + sbb + k2);
  cv::Mat map;
  cv::divide(num, den, map);
  const cv::Scalar s = cv::mean(map);
  return (s[0] + s[1] + s[2]) / 3.0;
}

Quality metrics_psnr_ssim(const Image& a, const Image& b) { return {psnr(a, b), ssim(a, b)}; }

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

}  // namespace

double identity_similarity(const message::FeatureExtractor& extractor, const Image& a, const Mask& face_a,
                           const Image& b, const Mask& face_b) {
  return cosine(extractor.extract(a, face_a), extractor.extract(b, face_b));
}

double perceptual_distance(const message::FeatureExtractor& extractor, const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "perceptual distance inputs differ in shape");
  const Mask all(a.height(), a.width(), 1);
  const auto fa = extractor.extract(a, all);
  const auto fb = extractor.extract(b, all);
  double d = 0, n = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    d += (fa[i] - fb[i]) * (fa[i] - fb[i]);
    n += fa[i] * fa[i];
  }
  return n == 0 ? std::sqrt(d) : std::sqrt(d / n);
}

// ---------------------------------------------------------------------------
// Evaluation

verify::Outcome Condition::expected() const {
  if (!watermark) return verify::Outcome::NonWatermarked;
  return swap ? verify::Outcome::Fake : verify::Outcome::Real;
}

namespace {

std::string format_param(double p) {
  std::ostringstream os;
  os << p;
  return os.str();
}

}  // namespace

Condition parse_condition(const std::string& text) {
  Condition c;
  std::string rest = text;
  const auto take_prefix = [&](const std::string& prefix) {
    if (rest == prefix) {
      rest.clear();
      return true;
    }
    if (rest.rfind(prefix + "+", 0) == 0) {
      rest = rest.substr(prefix.size() + 1);
      return true;
    }
    return false;
  };
  if (take_prefix("nonwm")) {
    c.watermark = false;
  } else if (take_prefix("swap")) {
    c.swap = true;
  } else if (take_prefix("clean")) {
    if (!rest.empty()) throw Error(ErrorCode::BadParams, "'clean' takes no distortion: " + text);
  }
  if (!rest.empty()) {
    const auto colon = rest.find(':');
    if (colon == std::string::npos) throw Error(ErrorCode::BadParams, "condition needs <Kind>:<param>: " + text);
    distort::DistortionSpec spec;
    spec.kind = distort::kind_from_string(rest.substr(0, colon));
    try {
      spec.param = std::stod(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw Error(ErrorCode::BadParams, "bad distortion parameter in " + text);
    }
    spec.validate();
    c.distortion = spec;
  }
  std::string name = c.watermark ? (c.swap ? "swap" : "") : "nonwm";
  if (c.distortion) {
    const std::string d = distort::to_string(c.distortion->kind) + ":" + format_param(c.distortion->param);
    name = name.empty() ? d : name + "+" + d;
  }
  c.name = name.empty() ? "clean" : name;
  return c;
}

namespace {

json finite_or_string(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

double number_from(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::quiet_NaN();
  }
  return j.get<double>();
}

verify::Outcome outcome_from_string(const std::string& s) {
  if (s == verify::to_string(verify::Outcome::Real)) return verify::Outcome::Real;
  if (s == verify::to_string(verify::Outcome::Fake)) return verify::Outcome::Fake;
  if (s == verify::to_string(verify::Outcome::NonWatermarked)) return verify::Outcome::NonWatermarked;
  throw Error(ErrorCode::BadParams, "unknown outcome " + s);
}

}  // namespace

json to_json(const ImageRecord& r) {
  json j = {{"image_id", r.image_id}, {"condition", r.condition}, {"skipped", r.skipped}};
  if (r.skipped) {
    j["skip_reason"] = r.skip_reason;
    return j;
  }
  j["ber_pr"] = r.ber_pr;
  j["ber_re"] = r.ber_re;
  j["ber_c_re"] = r.ber_c_re;
  j["ber_i_re"] = r.ber_i_re;
  j["outcome"] = verify::to_string(r.outcome);
  j["expected"] = verify::to_string(r.expected);
  j["psnr"] = finite_or_string(r.psnr);
  j["ssim"] = r.ssim;
  j["identity_similarity"] = r.identity_similarity;
  j["perceptual_distance"] = r.perceptual_distance;
  j["mask_iou"] = r.mask_iou;
  return j;
}

ImageRecord image_record_from_json(const json& j) {
  ImageRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.condition = j.at("condition").get<std::string>();
  r.skipped = j.value("skipped", false);
  if (r.skipped) {
    r.skip_reason = j.value("skip_reason", std::string());
    return r;
  }
  r.ber_pr = j.at("ber_pr").get<double>();
  r.ber_re = j.at("ber_re").get<double>();
  r.ber_c_re = j.at("ber_c_re").get<double>();
  r.ber_i_re = j.at("ber_i_re").get<double>();
  r.outcome = outcome_from_string(j.at("outcome").get<std::string>());
  r.expected = outcome_from_string(j.at("expected").get<std::string>());
  r.psnr = number_from(j.at("psnr"));
  r.ssim = j.at("ssim").get<double>();
  r.identity_similarity = j.at("identity_similarity").get<double>();
  r.perceptual_distance = j.at("perceptual_distance").get<double>();
  r.mask_iou = j.at("mask_iou").get<double>();
  return r;
}

const ConditionSummary& EvaluationReport::at(const std::string& condition) const {
  for (const auto& c : conditions) {
    if (c.condition == condition) return c;
  }
  throw Error(ErrorCode::BadParams, "report has no condition " + condition);
}

EvaluationReport summarize(std::vector<ImageRecord> records, double t1, double t2) {
  EvaluationReport rep;
  rep.t1 = t1;
  rep.t2 = t2;
  std::vector<std::string> order;
  std::map<std::string, ConditionSummary> by;
  std::map<std::string, int> finite_psnr;
  for (auto& r : records) {
    if (!by.contains(r.condition)) {
      order.push_back(r.condition);
      by[r.condition].condition = r.condition;
    }
    auto& s = by[r.condition];
    if (r.skipped) {
      ++s.skipped;
      continue;
    }
    r.outcome = verify::decide(r.ber_c_re, r.ber_i_re, t1, t2);
    s.expected = r.expected;
    ++s.images;
    s.ber_pr += r.ber_pr;
    s.ber_re += r.ber_re;
    s.ber_c_re += r.ber_c_re;
    s.ber_i_re += r.ber_i_re;
    s.accuracy += r.outcome == r.expected ? 1.0 : 0.0;
    s.real += r.outcome == verify::Outcome::Real;
    s.fake += r.outcome == verify::Outcome::Fake;
    s.nonwatermarked += r.outcome == verify::Outcome::NonWatermarked;
    if (std::isfinite(r.psnr)) {
      s.psnr += r.psnr;
      ++finite_psnr[r.condition];
    }
    s.ssim += r.ssim;
    s.identity_similarity += r.identity_similarity;
    s.perceptual_distance += r.perceptual_distance;
    s.mask_iou += r.mask_iou;
  }
  for (const auto& name : order) {
    auto s = by[name];
    if (s.images > 0) {
      for (double* f : {&s.ber_pr, &s.ber_re, &s.ber_c_re, &s.ber_i_re, &s.ssim, &s.identity_similarity,
                        &s.perceptual_distance, &s.mask_iou}) {
        *f /= s.images;
      }
      s.accuracy = 100.0 * s.accuracy / s.images;
      const int nf = finite_psnr[name];
      s.psnr = nf > 0 ? s.psnr / nf : std::numeric_limits<double>::infinity();
    }
    rep.conditions.push_back(s);
  }

  // Pair each swap condition with the same manipulation minus the swap.
  for (const auto& fake : rep.conditions) {
    if (fake.expected != verify::Outcome::Fake || fake.images == 0) continue;
    const std::string suffix = fake.condition == "swap" ? "" : fake.condition.substr(5);
    const std::string real_name = suffix.empty() ? "clean" : suffix;
    const auto it = std::find_if(rep.conditions.begin(), rep.conditions.end(),
                                 [&](const ConditionSummary& c) { return c.condition == real_name; });
    if (it == rep.conditions.end() || it->images == 0) continue;
    // Positive class is Fake; anything but Real on a real image is a false alarm.
    const double tp = fake.fake;
    const double fn = fake.images - fake.fake;
    const double tn = it->real;
    const double fp = it->images - it->real;
    DetectionSummary d;
    d.real_condition = real_name;
    d.fake_condition = fake.condition;
    d.accuracy = 100.0 * (tp + tn) / (tp + tn + fp + fn);
    d.f1 = tp > 0 ? 100.0 * 2 * tp / (2 * tp + fp + fn) : 0.0;
    rep.detection.push_back(d);
  }
  rep.records = std::move(records);
  return rep;
}

json to_json(const EvaluationReport& rep, bool with_records) {
  json conds = json::array();
  for (const auto& s : rep.conditions) {
    conds.push_back({{"condition", s.condition},
                     {"expected", verify::to_string(s.expected)},
                     {"images", s.images},
                     {"skipped", s.skipped},
                     {"ber_pr", s.ber_pr},
                     {"ber_re", s.ber_re},
                     {"ber_c_re", s.ber_c_re},
                     {"ber_i_re", s.ber_i_re},
                     {"accuracy", s.accuracy},
                     {"verdicts", {{"Real", s.real}, {"Fake", s.fake}, {"NonWatermarked", s.nonwatermarked}}},
                     {"psnr", finite_or_string(s.psnr)},
                     {"ssim", s.ssim},
                     {"identity_similarity", s.identity_similarity},
                     {"perceptual_distance", s.perceptual_distance},
                     {"mask_iou", s.mask_iou}});
  }
  json det = json::array();
  for (const auto& d : rep.detection) {
    det.push_back({{"real", d.real_condition}, {"fake", d.fake_condition}, {"accuracy", d.accuracy}, {"f1", d.f1}});
  }
  json j = {{"t1", rep.t1}, {"t2", rep.t2}, {"conditions", conds}, {"detection", det}};
  if (with_records) {
    json recs = json::array();
    for (const auto& r : rep.records) recs.push_back(to_json(r));
    j["records"] = recs;
  }
  return j;
}

std::string render_table(const EvaluationReport& rep) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "t1=" << rep.t1 << " t2=" << rep.t2 << "\n";
  os << std::left << std::setw(28) << "condition" << std::right << std::setw(6) << "n" << std::setw(9) << "BER^pr"
     << std::setw(9) << "BER^re" << std::setw(9) << "ber_c" << std::setw(9) << "ber_i" << std::setw(9) << "acc%"
     << std::setw(9) << "PSNR" << std::setw(8) << "SSIM" << std::setw(8) << "IoU" << "\n";
  for (const auto& s : rep.conditions) {
    os << std::left << std::setw(28) << s.condition << std::right << std::setw(6) << s.images << std::setw(9)
       << s.ber_pr << std::setw(9) << s.ber_re << std::setw(9) << s.ber_c_re << std::setw(9) << s.ber_i_re
       << std::setw(9) << s.accuracy << std::setw(9) << s.psnr << std::setw(8) << std::setprecision(4) << s.ssim
       << std::setw(8) << s.mask_iou << std::setprecision(2) << "\n";
  }
  for (const auto& d : rep.detection) {
    os << "detection " << d.real_condition << " vs " << d.fake_condition << ": acc " << d.accuracy << "% F1 " << d.f1
       << "%\n";
  }
  return os.str();
}

EvaluationReport evaluate(const std::vector<CorpusImage>& corpus, Checkpoint& ck, const verify::KeyStore& keys,
                          const EvaluateOptions& options) {
  if (corpus.empty()) throw Error(ErrorCode::EmptyCorpus, "nothing to evaluate");
  const auto& cfg = ck.config();
  const auto& detector = ck.detector();
  const auto& extractor = ck.messages().extractor();
  std::vector<ImageRecord> records;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& item = corpus[i];
    std::optional<Mask> clean_face;
    try {
      clean_face = geometry::face_mask_from_landmarks(geometry::detect_landmarks(item.image, &detector),
                                                      item.image.height(), item.image.width());
    } catch (const Error&) {
    }
    for (std::size_t c = 0; c < options.conditions.size(); ++c) {
      const auto& cond = options.conditions[c];
      ImageRecord rec;
      rec.image_id = item.entry.image_id;
      rec.condition = cond.name;
      rec.expected = cond.expected();
      Rng rng(options.seed ^ (0x9E3779B97F4A7C15ULL * (i + 1)) ^ (0xC2B2AE3D27D4EB4FULL * (c + 1)));
      const Image* donor = nullptr;
      if (cond.swap) {
        std::vector<std::size_t> others;
        for (std::size_t k = 0; k < corpus.size(); ++k) {
          if (corpus[k].entry.identity_label != item.entry.identity_label) others.push_back(k);
        }
        if (others.empty()) {
          rec.skipped = true;
          rec.skip_reason = "no donor with a different identity";
          records.push_back(rec);
          continue;
        }
        donor = &corpus[others[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(others.size()) - 1))]].image;
      }
      try {
        ClientOptions opt;
        opt.watermark = cond.watermark;
        opt.distortion = cond.distortion;
        opt.swap_donor = donor;
        opt.use_denoiser = options.use_denoiser && cfg.use_denoiser;
        const auto res = run_client_flow(item.image, item.entry.image_id, ck, keys, opt, rng);
        const auto verdict = verify::verify(res.decoded.message, res.reference.message, keys, cfg.t1, cfg.t2,
                                            static_cast<std::size_t>(cfg.codec.C));
        rec.ber_pr = verify::ber(res.decoded_bits, res.preset);
        rec.ber_re = verify::ber(res.decoded_bits, res.reference_bits);
        rec.ber_c_re = verdict.ber_c;
        rec.ber_i_re = verdict.ber_i;
        rec.outcome = verdict.outcome;
        const auto q = metrics_psnr_ssim(item.image, res.watermarked);
        rec.psnr = q.psnr;
        rec.ssim = q.ssim;
        const auto masks = geometry::extract_region_masks(item.image, cfg.test_dilation, &detector);
        rec.identity_similarity =
            identity_similarity(extractor, item.image, masks.face_mask, res.received, res.recovered.face_mask);
        rec.perceptual_distance = perceptual_distance(extractor, item.image, res.watermarked);
        rec.mask_iou = clean_face ? mask_iou(*clean_face, res.recovered.face_mask) : 0.0;
      } catch (const Error& e) {
        const auto code = e.code();
        if (code != ErrorCode::NoFaceFound && code != ErrorCode::EmptyContour && code != ErrorCode::EmptyRegion &&
            code != ErrorCode::ConstantVector && code != ErrorCode::DegenerateHull) {
          throw;
        }
        rec.skipped = true;
        rec.skip_reason = e.what();
      }
      records.push_back(rec);
    }
  }
  return summarize(std::move(records), cfg.t1, cfg.t2);
}

std::vector<EvaluationReport> threshold_sweep(const EvaluationReport& base, const std::vector<double>& thresholds) {
  std::vector<EvaluationReport> out;
  for (const double t : thresholds) out.push_back(summarize(base.records, t, t));
  return out;
}

}  // namespace cmark::pipeline
