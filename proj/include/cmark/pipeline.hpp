#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cmark/distortion_pool.hpp"
#include "cmark/face_geometry.hpp"
#include "cmark/image.hpp"
#include "cmark/message_factory.hpp"
#include "cmark/proactive_denoiser.hpp"
#include "cmark/secure_verifier.hpp"
#include "cmark/watermark_codec.hpp"

namespace cmark::pipeline {

// -- corpus --------------------------------------------------------------------

struct CorpusEntry {
  std::string image_id;
  std::filesystem::path path;  // absolute, resolved against the index directory
  int identity_label = 0;
};

/// JSONL index, one {image_id, path, identity_label} object per line. Relative
/// paths resolve against the index file's directory.
std::vector<CorpusEntry> read_corpus_index(const std::filesystem::path& index);
void write_corpus_index(const std::filesystem::path& index, const std::vector<CorpusEntry>& entries);

struct CorpusImage {
  CorpusEntry entry;
  Image image;
};

/// Reads every indexed image; `limit` > 0 keeps only the first entries.
std::vector<CorpusImage> load_corpus(const std::filesystem::path& index, std::size_t limit = 0);

// -- configuration ---------------------------------------------------------------

struct PipelineConfig {
  codec::CodecConfig codec;
  double t1 = verify::kDefaultThreshold;
  double t2 = verify::kDefaultThreshold;
  std::uint64_t seed = 0;
  std::string corpus_index;
  std::string landmark_backend = "skin-ellipse";
  int test_dilation = geometry::kTestDilationIterations;
  bool use_denoiser = true;
  denoise::DenoiserTrainConfig denoiser;
  int denoiser_epochs = 10;
  /// Images used to fit the PCA bases; 0 means the whole training set.
  int calibration_images = 0;
  unsigned key_bits = 64;

  void validate() const;
};

/// Flat JSON object: codec fields and pipeline fields side by side.
nlohmann::json to_json(const PipelineConfig& config);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// -- checkpoint -------------------------------------------------------------------

/// Everything the client and platform need at inference time. On disk:
/// config.json, encoder.pt, decoder.pt, discriminator.pt, denoiser.pt,
/// pca_contour.bin, pca_identity.bin.
class Checkpoint {
 public:
  Checkpoint(PipelineConfig config, message::PcaBasis contour_basis, message::PcaBasis identity_basis);

  static Checkpoint load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;

  const PipelineConfig& config() const noexcept { return config_; }
  codec::WatermarkCodec& codec() noexcept { return *codec_; }
  denoise::ProactiveDenoiser& denoiser() noexcept { return denoiser_; }
  const message::MessageFactory& messages() const noexcept { return *factory_; }
  const geometry::LandmarkDetector& detector() const noexcept { return *detector_; }

  /// Thresholds can be changed after training; nothing else can.
  void set_thresholds(double t1, double t2);

 private:
  PipelineConfig config_;
  std::shared_ptr<codec::WatermarkCodec> codec_;
  denoise::ProactiveDenoiser denoiser_{nullptr};
  std::shared_ptr<message::MessageFactory> factory_;
  std::shared_ptr<geometry::LandmarkDetector> detector_;
};

// -- training -----------------------------------------------------------------------

using TrainLog = std::function<void(const nlohmann::json&)>;

/// Detects faces, fits the PCA bases, trains the codec for config.codec.epochs
/// and the denoiser for config.denoiser_epochs. Images without a detectable
/// face are skipped (reported through `log`).
Checkpoint train_pipeline(const std::vector<CorpusImage>& corpus, const PipelineConfig& config,
                          const TrainLog& log = {});

// -- client / platform ----------------------------------------------------------------

struct ClientOptions {
  bool watermark = true;
  std::optional<distort::DistortionSpec> distortion;
  /// Donor image for a simulated swap; applied before any distortion.
  const Image* swap_donor = nullptr;
  bool use_denoiser = true;
};

struct ClientResult {
  verify::Envelope decoded;
  verify::Envelope reference;
  message::Bits preset;
  message::Bits decoded_bits;
  message::Bits reference_bits;
  Image watermarked;
  Image received;
  Image denoised;
  Mask embed_region;
  geometry::RegionMaskSet recovered;
};

/// Embed, optionally swap and distort, denoise, recover the contour mask from
/// the denoised image, decode the received image inside it, re-extract the
/// reference message from the denoised image and encrypt both. Throws
/// NoFaceFound when either detection step fails.
ClientResult run_client_flow(const Image& original, const std::string& image_id, Checkpoint& checkpoint,
                             const verify::KeyStore& keys, const ClientOptions& options, Rng& rng);

// -- metrics ----------------------------------------------------------------------------

/// +infinity for identical images.
double psnr(const Image& a, const Image& b);
/// 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, averaged over
/// channels; borders use the valid region only.
double ssim(const Image& a, const Image& b);

struct Quality {
  double psnr = 0.0;
  double ssim = 0.0;
};
Quality metrics_psnr_ssim(const Image& a, const Image& b);

/// Cosine similarity of identity features (face region).
double identity_similarity(const message::FeatureExtractor& extractor, const Image& a, const Mask& face_a,
                           const Image& b, const Mask& face_b);

/// Relative L2 distance of whole-frame extractor features; reported as the
/// perceptual distance.
double perceptual_distance(const message::FeatureExtractor& extractor, const Image& a, const Image& b);

// -- evaluation -----------------------------------------------------------------------

struct Condition {
  std::string name;
  bool watermark = true;
  bool swap = false;
  std::optional<distort::DistortionSpec> distortion;

  /// Verdict a correct system returns.
  verify::Outcome expected() const;
};

/// "clean", "nonwm", "swap", "<Kind>:<param>", "swap+<Kind>:<param>",
/// "nonwm+<Kind>:<param>".
Condition parse_condition(const std::string& text);

struct ImageRecord {
  std::string image_id;
  std::string condition;
  bool skipped = false;
  std::string skip_reason;
  double ber_pr = 0.0;
  double ber_re = 0.0;
  double ber_c_re = 0.0;
  double ber_i_re = 0.0;
  verify::Outcome outcome = verify::Outcome::NonWatermarked;
  verify::Outcome expected = verify::Outcome::Real;
  double psnr = 0.0;
  double ssim = 0.0;
  double identity_similarity = 0.0;
  double perceptual_distance = 0.0;
  double mask_iou = 0.0;
};

nlohmann::json to_json(const ImageRecord& r);
ImageRecord image_record_from_json(const nlohmann::json& j);

struct ConditionSummary {
  std::string condition;
  verify::Outcome expected = verify::Outcome::Real;
  int images = 0;
  int skipped = 0;
  double ber_pr = 0.0;
  double ber_re = 0.0;
  double ber_c_re = 0.0;
  double ber_i_re = 0.0;
  double accuracy = 0.0;
  int real = 0;
  int fake = 0;
  int nonwatermarked = 0;
  double psnr = 0.0;  // finite values only; +inf when every image is identical
  double ssim = 0.0;
  double identity_similarity = 0.0;
  double perceptual_distance = 0.0;
  double mask_iou = 0.0;
};

/// Real-vs-fake detection on a pair of conditions, positive class Fake. A
/// NonWatermarked verdict on either side counts as a misclassification.
struct DetectionSummary {
  std::string real_condition;
  std::string fake_condition;
  double accuracy = 0.0;
  double f1 = 0.0;
};

struct EvaluationReport {
  double t1 = verify::kDefaultThreshold;
  double t2 = verify::kDefaultThreshold;
  std::vector<ConditionSummary> conditions;
  std::vector<DetectionSummary> detection;
  std::vector<ImageRecord> records;

  const ConditionSummary& at(const std::string& condition) const;
};

/// Aggregates per-image records; outcomes are re-decided at (t1, t2) from the
/// stored BERs so threshold sweeps need no re-run.
EvaluationReport summarize(std::vector<ImageRecord> records, double t1, double t2);

nlohmann::json to_json(const EvaluationReport& report, bool with_records = true);
std::string render_table(const EvaluationReport& report);

struct EvaluateOptions {
  std::vector<Condition> conditions;
  bool use_denoiser = true;
  std::uint64_t seed = 0;
};

/// Runs the client flow and the platform verification for every image and
/// condition. Swap donors are other corpus images with a different identity
/// label. Throws EmptyCorpus on an empty corpus.
EvaluationReport evaluate(const std::vector<CorpusImage>& corpus, Checkpoint& checkpoint,
                          const verify::KeyStore& keys, const EvaluateOptions& options);

/// One report per threshold (t1 = t2 = t).
std::vector<EvaluationReport> threshold_sweep(const EvaluationReport& base, const std::vector<double>& thresholds);

}  // namespace cmark::pipeline
