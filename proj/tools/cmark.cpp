#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cmark/distortion_pool.hpp"
#include "cmark/errors.hpp"
#include "cmark/face_geometry.hpp"
#include "cmark/image.hpp"
#include "cmark/pipeline.hpp"
#include "cmark/proactive_denoiser.hpp"
#include "cmark/secure_verifier.hpp"
#include "cmark/synthetic_faces.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cmark;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::BadParams, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Image load_image(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::MissingFile, "no such image " + path.string());
  return read_image(path);
}

distort::DistortionSpec parse_spec(const std::string& text) {
  const auto c = pipeline::parse_condition(text);
  if (!c.distortion || c.swap || !c.watermark) throw Error(ErrorCode::BadParams, "expected <Kind>:<param>, got " + text);
  return *c.distortion;
}

// Config file first, then explicit flags on top.
struct ConfigFlags {
  std::string path;
  std::optional<int> epochs, batch, C, denoiser_epochs, clean_epochs, calibration;
  std::optional<double> lr, alpha, lambda1, lambda2, t1, t2, image_weight, psnr_target;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> region;
  std::optional<std::vector<int>> channels;

  void add(CLI::App* app) {
    app->add_option("--config", path, "pipeline config JSON");
    app->add_option("--epochs", epochs);
    app->add_option("--batch", batch);
    app->add_option("--C", C, "bits per message half");
    app->add_option("--denoiser-epochs", denoiser_epochs);
    app->add_option("--clean-epochs", clean_epochs, "leading epochs without distortions");
    app->add_option("--calibration-images", calibration);
    app->add_option("--lr", lr);
    app->add_option("--alpha", alpha);
    app->add_option("--lambda1", lambda1);
    app->add_option("--lambda2", lambda2);
    app->add_option("--t1", t1);
    app->add_option("--t2", t2);
    app->add_option("--image-weight", image_weight);
    app->add_option("--psnr-target", psnr_target);
    app->add_option("--seed", seed);
    app->add_option("--region", region, "contour | background | full");
    app->add_option("--channels", channels, "encoder widths per level");
  }

  pipeline::PipelineConfig build() const {
    json j = path.empty() ? pipeline::to_json(pipeline::PipelineConfig{}) : read_json(path);
    if (epochs) j["epochs"] = *epochs;
    if (batch) j["batch_size"] = *batch;
    if (C) j["C"] = *C;
    if (denoiser_epochs) j["denoiser_epochs"] = *denoiser_epochs;
    if (clean_epochs) j["clean_epochs"] = *clean_epochs;
    if (calibration) j["calibration_images"] = *calibration;
    if (lr) j["lr"] = *lr;
    if (alpha) j["alpha"] = *alpha;
    if (lambda1) j["lambda1"] = *lambda1;
    if (lambda2) j["lambda2"] = *lambda2;
    if (t1) j["t1"] = *t1;
    if (t2) j["t2"] = *t2;
    if (image_weight) j["image_weight"] = *image_weight;
    if (psnr_target) j["psnr_target"] = *psnr_target;
    if (seed) j["seed"] = *seed;
    if (region) j["region"] = *region;
    if (channels) j["layer_channels"] = *channels;
    return pipeline::pipeline_config_from_json(j);
  }
};

void log_line(const json& j) { std::cerr << j.dump() << std::endl; }

std::vector<pipeline::Condition> parse_conditions(const std::vector<std::string>& names) {
  std::vector<pipeline::Condition> out;
  for (const auto& n : names) out.push_back(pipeline::parse_condition(n));
  return out;
}

const std::vector<std::string> kDefaultConditions = {
    "clean", "nonwm", "swap", "GaussianNoise:0.05", "GaussianBlur:5", "EdgeCrop:0.1", "JPEG:75",
};

void emit_report(const pipeline::EvaluationReport& rep, const std::string& out, bool text) {
  if (!out.empty()) write_json(out, pipeline::to_json(rep));
  if (text) {
    std::cout << pipeline::render_table(rep);
  } else {
    std::cout << pipeline::to_json(rep, false).dump(2) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cmark: contour-hybrid watermarking for proactive face-swap detection"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "render a synthetic face corpus (PNGs + index.jsonl)");
  std::string synth_out;
  int identities = 100, per_identity = 10, size = 128;
  std::uint64_t synth_seed = 1;
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--identities", identities);
  synth->add_option("--per-identity", per_identity);
  synth->add_option("--size", size);
  synth->add_option("--seed", synth_seed);

  // mask
  auto* mask = app.add_subcommand("mask", "face and contour masks of an image");
  std::string mask_image, mask_face_out, mask_contour_out;
  int dilation = geometry::kTestDilationIterations;
  mask->add_option("--image", mask_image)->required();
  mask->add_option("--face-out", mask_face_out);
  mask->add_option("--contour-out", mask_contour_out);
  mask->add_option("--dilation", dilation);

  // keygen
  auto* keygen = app.add_subcommand("keygen", "generate the decoder and reference key pairs");
  unsigned key_bits = 64;
  std::string key_out;
  std::uint64_t key_seed = std::random_device{}();
  keygen->add_option("--bits", key_bits, "bits per prime");
  keygen->add_option("--out", key_out)->required();
  keygen->add_option("--seed", key_seed);

  // train
  auto* train = app.add_subcommand("train", "train codec and denoiser on a corpus");
  std::string train_corpus, train_out;
  std::size_t train_limit = 0;
  ConfigFlags train_cfg;
  train->add_option("--corpus", train_corpus, "JSONL index")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_option("--limit", train_limit, "use only the first N images");
  train_cfg.add(train);

  // embed
  auto* embed = app.add_subcommand("embed", "watermark one image");
  std::string ck_dir, in_image, out_image, message_out;
  embed->add_option("--checkpoint", ck_dir)->required();
  embed->add_option("--image", in_image)->required();
  embed->add_option("--out", out_image)->required();
  embed->add_option("--message-out", message_out, "write the embedded bits as JSON");

  // decode
  auto* decode = app.add_subcommand("decode", "decode the message inside the detected contour");
  std::string decode_ck, decode_image;
  decode->add_option("--checkpoint", decode_ck)->required();
  decode->add_option("--image", decode_image)->required();

  // denoise
  auto* den = app.add_subcommand("denoise", "run the proactive denoiser");
  std::string den_ck, den_image, den_out;
  den->add_option("--checkpoint", den_ck)->required();
  den->add_option("--image", den_image)->required();
  den->add_option("--out", den_out)->required();

  // distort
  auto* dist = app.add_subcommand("distort", "apply one distortion");
  std::string dist_image, dist_out, dist_spec, dist_original;
  std::uint64_t dist_seed = 0;
  dist->add_option("--image", dist_image)->required();
  dist->add_option("--out", dist_out)->required();
  dist->add_option("--spec", dist_spec, "<Kind>:<param>, e.g. JPEG:75")->required();
  dist->add_option("--original", dist_original, "pre-watermark image (Dropout)");
  dist->add_option("--seed", dist_seed);

  // client
  auto* client = app.add_subcommand("client", "client flow: embed, manipulate, decode, encrypt");
  std::string cl_ck, cl_keys, cl_image, cl_out, cl_spec, cl_donor, cl_id;
  bool cl_nonwm = false, cl_no_denoise = false;
  std::uint64_t cl_seed = 0;
  client->add_option("--checkpoint", cl_ck)->required();
  client->add_option("--keys", cl_keys)->required();
  client->add_option("--image", cl_image)->required();
  client->add_option("--out", cl_out, "directory for decoded.json and reference.json")->required();
  client->add_option("--distortion", cl_spec, "<Kind>:<param>");
  client->add_option("--swap-donor", cl_donor, "donor face image");
  client->add_option("--image-id", cl_id);
  client->add_flag("--no-watermark", cl_nonwm);
  client->add_flag("--no-denoise", cl_no_denoise);
  client->add_option("--seed", cl_seed);

  // verify
  auto* ver = app.add_subcommand("verify", "platform verification of two envelopes");
  std::string ver_dec, ver_ref, ver_keys;
  double t1 = verify::kDefaultThreshold, t2 = verify::kDefaultThreshold;
  std::size_t ver_C = 16;
  ver->add_option("--decoded", ver_dec)->required();
  ver->add_option("--reference", ver_ref)->required();
  ver->add_option("--keys", ver_keys)->required();
  ver->add_option("--t1", t1);
  ver->add_option("--t2", t2);
  ver->add_option("--C", ver_C);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint over a corpus");
  std::string ev_ck, ev_corpus, ev_keys, ev_out;
  std::vector<std::string> ev_conditions = kDefaultConditions;
  std::size_t ev_limit = 0;
  bool ev_no_denoise = false, ev_text = false;
  std::uint64_t ev_seed = 0;
  std::optional<double> ev_t1, ev_t2;
  ev->add_option("--checkpoint", ev_ck)->required();
  ev->add_option("--corpus", ev_corpus)->required();
  ev->add_option("--keys", ev_keys)->required();
  ev->add_option("--out", ev_out, "full JSON report with per-image records");
  ev->add_option("--conditions", ev_conditions);
  ev->add_option("--limit", ev_limit);
  ev->add_option("--seed", ev_seed);
  ev->add_option("--t1", ev_t1);
  ev->add_option("--t2", ev_t2);
  ev->add_flag("--no-denoise", ev_no_denoise);
  ev->add_flag("--text", ev_text, "print a table instead of JSON");

  // ablate
  auto* ab = app.add_subcommand("ablate", "sweep one axis and report each grid point");
  std::string ab_axis, ab_ck, ab_corpus, ab_eval_corpus, ab_keys, ab_out;
  std::vector<std::string> ab_values;
  std::size_t ab_limit = 0, ab_eval_limit = 0;
  ConfigFlags ab_cfg;
  ab->add_option("--axis", ab_axis, "threshold | alpha | length | location | components")
      ->required()
      ->check(CLI::IsMember({"threshold", "alpha", "length", "location", "components"}));
  ab->add_option("--values", ab_values, "grid points");
  ab->add_option("--checkpoint", ab_ck, "fixed checkpoint (threshold axis) or output root (others)");
  ab->add_option("--corpus", ab_corpus, "training corpus for retraining axes");
  ab->add_option("--eval-corpus", ab_eval_corpus)->required();
  ab->add_option("--keys", ab_keys)->required();
  ab->add_option("--out", ab_out, "directory for per-point reports");
  ab->add_option("--limit", ab_limit);
  ab->add_option("--eval-limit", ab_eval_limit);
  ab_cfg.add(ab);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      const auto faces = synth::make_corpus(identities, per_identity, synth_seed, size);
      fs::create_directories(fs::path(synth_out) / "images");
      std::vector<pipeline::CorpusEntry> entries;
      for (std::size_t i = 0; i < faces.size(); ++i) {
        std::ostringstream id;
        id << "face_" << std::setw(6) << std::setfill('0') << i;
        const fs::path p = fs::path(synth_out) / "images" / (id.str() + ".png");
        write_image(p, faces[i].image);
        entries.push_back({id.str(), p, faces[i].identity});
      }
      pipeline::write_corpus_index(fs::path(synth_out) / "index.jsonl", entries);
      std::cout << json{{"images", entries.size()}, {"index", (fs::path(synth_out) / "index.jsonl").string()}}.dump()
                << '\n';
    } else if (*mask) {
      const auto masks = geometry::extract_region_masks(load_image(mask_image), dilation);
      if (!mask_face_out.empty()) write_mask(mask_face_out, masks.face_mask);
      if (!mask_contour_out.empty()) write_mask(mask_contour_out, masks.contour_mask);
      std::cout << json{{"face_pixels", masks.face_mask.count()},
                        {"contour_pixels", masks.contour_mask.count()},
                        {"dilation", masks.dilation_iterations}}
                       .dump()
                << '\n';
    } else if (*keygen) {
      Rng rng(key_seed);
      const auto keys = verify::KeyStore::generate(key_bits, rng);
      keys.save(key_out);
      std::cout << json{{"out", key_out}, {"prime_bits", key_bits}}.dump() << '\n';
    } else if (*train) {
      auto cfg = train_cfg.build();
      cfg.corpus_index = train_corpus;
      const auto corpus = pipeline::load_corpus(train_corpus, train_limit);
      auto ck = pipeline::train_pipeline(corpus, cfg, log_line);
      ck.save(train_out);
      std::cout << json{{"checkpoint", train_out}, {"images", corpus.size()}, {"hash", cfg.codec.hash()}}.dump() << '\n';
    } else if (*embed) {
      auto ck = pipeline::Checkpoint::load(ck_dir);
      const Image img = load_image(in_image);
      const auto masks = geometry::extract_region_masks(img, ck.config().test_dilation, &ck.detector());
      const auto msg = ck.messages().make(img, masks);
      const Mask region = codec::region_mask(ck.config().codec, masks.face_mask, ck.config().test_dilation);
      const Image wm = ck.codec().embed(img, msg, region);
      write_image(out_image, wm);
      const json out = {{"out", out_image}, {"bits", message::bits_to_json(msg.v)}, {"psnr", pipeline::psnr(img, wm)}};
      if (!message_out.empty()) write_json(message_out, message::bits_to_json(msg.v));
      std::cout << out.dump() << '\n';
    } else if (*decode) {
      auto ck = pipeline::Checkpoint::load(decode_ck);
      const Image img = load_image(decode_image);
      const auto masks = geometry::extract_region_masks(img, ck.config().test_dilation, &ck.detector());
      const Mask region = codec::region_mask(ck.config().codec, masks.face_mask, ck.config().test_dilation);
      const auto raw = ck.codec().decode(img, region);
      std::cout << json{{"bits", message::bits_to_json(message::binarize(raw))}, {"raw", raw}}.dump() << '\n';
    } else if (*den) {
      auto ck = pipeline::Checkpoint::load(den_ck);
      write_image(den_out, denoise::denoise(load_image(den_image), ck.denoiser()));
    } else if (*dist) {
      Rng rng(dist_seed);
      const Image img = load_image(dist_image);
      std::optional<Image> original;
      if (!dist_original.empty()) original = load_image(dist_original);
      write_image(dist_out, distort::apply_distortion(img, parse_spec(dist_spec), rng, original ? &*original : nullptr));
    } else if (*client) {
      auto ck = pipeline::Checkpoint::load(cl_ck);
      const auto keys = verify::KeyStore::load(cl_keys);
      const Image img = load_image(cl_image);
      std::optional<Image> donor;
      if (!cl_donor.empty()) donor = load_image(cl_donor);
      pipeline::ClientOptions opt;
      opt.watermark = !cl_nonwm;
      opt.use_denoiser = !cl_no_denoise && ck.config().use_denoiser;
      if (!cl_spec.empty()) opt.distortion = parse_spec(cl_spec);
      opt.swap_donor = donor ? &*donor : nullptr;
      Rng rng(cl_seed);
      const std::string id = cl_id.empty() ? fs::path(cl_image).stem().string() : cl_id;
      const auto res = pipeline::run_client_flow(img, id, ck, keys, opt, rng);
      write_json(fs::path(cl_out) / "decoded.json", verify::to_json(res.decoded));
      write_json(fs::path(cl_out) / "reference.json", verify::to_json(res.reference));
      write_image(fs::path(cl_out) / "received.png", res.received);
      std::cout << json{{"decoded", (fs::path(cl_out) / "decoded.json").string()},
                        {"reference", (fs::path(cl_out) / "reference.json").string()},
                        {"ber_pr", verify::ber(res.decoded_bits, res.preset)}}
                       .dump()
                << '\n';
    } else if (*ver) {
      const auto keys = verify::KeyStore::load(ver_keys);
      const auto d = verify::envelope_from_json(read_json(ver_dec));
      const auto r = verify::envelope_from_json(read_json(ver_ref));
      if (d.role != "decoded" || r.role != "reference") {
        throw Error(ErrorCode::BadParams, "expected a decoded and a reference envelope");
      }
      const auto verdict = verify::verify(d.message, r.message, keys, t1, t2, ver_C);
      json out = verify::to_json(verdict);
      out["image_id"] = d.image_id;
      std::cout << out.dump() << '\n';
    } else if (*ev) {
      auto ck = pipeline::Checkpoint::load(ev_ck);
      if (ev_t1 || ev_t2) ck.set_thresholds(ev_t1.value_or(ck.config().t1), ev_t2.value_or(ck.config().t2));
      const auto keys = verify::KeyStore::load(ev_keys);
      const auto corpus = pipeline::load_corpus(ev_corpus, ev_limit);
      pipeline::EvaluateOptions opt{parse_conditions(ev_conditions), !ev_no_denoise, ev_seed};
      emit_report(pipeline::evaluate(corpus, ck, keys, opt), ev_out, ev_text);
    } else if (*ab) {
      const auto keys = verify::KeyStore::load(ab_keys);
      const auto eval_corpus = pipeline::load_corpus(ab_eval_corpus, ab_eval_limit);
      const auto conditions = parse_conditions(kDefaultConditions);
      json summary = json::array();
      const auto record = [&](const std::string& point, const pipeline::EvaluationReport& rep) {
        if (!ab_out.empty()) write_json(fs::path(ab_out) / (ab_axis + "_" + point + ".json"), pipeline::to_json(rep));
        json j = pipeline::to_json(rep, false);
        j["axis"] = ab_axis;
        j["point"] = point;
        summary.push_back(j);
      };
      if (ab_axis == "threshold") {
        if (ab_ck.empty()) throw Error(ErrorCode::MissingCheckpoint, "threshold sweep needs --checkpoint");
        auto ck = pipeline::Checkpoint::load(ab_ck);
        const auto base = pipeline::evaluate(eval_corpus, ck, keys, {conditions, true, 0});
        std::vector<double> ts;
        for (const auto& v : ab_values.empty() ? std::vector<std::string>{"1", "2", "3", "4", "5"} : ab_values) {
          ts.push_back(std::stod(v) * 100.0 / ck.config().codec.C);  // values are mismatch counts out of C
        }
        const auto reps = pipeline::threshold_sweep(base, ts);
        for (std::size_t k = 0; k < reps.size(); ++k) record(std::to_string(ts[k]), reps[k]);
      } else {
        if (ab_corpus.empty()) throw Error(ErrorCode::BadParams, ab_axis + " sweep retrains and needs --corpus");
        const auto corpus = pipeline::load_corpus(ab_corpus, ab_limit);
        const auto base = ab_cfg.build();
        std::vector<std::string> points = ab_values;
        if (points.empty()) {
          if (ab_axis == "alpha") points = {"0.05", "0.1", "0.2"};
          if (ab_axis == "length") points = {"8", "16", "32"};
          if (ab_axis == "location") points = {"full", "background", "contour"};
          if (ab_axis == "components") points = {"all", "no-mask-constraint", "no-compositing", "no-denoiser"};
        }
        for (const auto& p : points) {
          auto cfg = base;
          if (ab_axis == "alpha") cfg.codec.alpha = std::stod(p);
          if (ab_axis == "length") cfg.codec.C = std::stoi(p);
          if (ab_axis == "location") cfg.codec.region = p;
          if (ab_axis == "components") {
            if (p == "no-mask-constraint") cfg.codec.mask_constraint = false;
            else if (p == "no-compositing") cfg.codec.compositing = false;
            else if (p == "no-denoiser") cfg.use_denoiser = false;
            else if (p != "all") throw Error(ErrorCode::BadParams, "unknown component toggle " + p);
          }
          cfg.validate();
          auto ck = pipeline::train_pipeline(corpus, cfg, log_line);
          if (!ab_ck.empty()) ck.save(fs::path(ab_ck) / (ab_axis + "_" + p));
          record(p, pipeline::evaluate(eval_corpus, ck, keys, {conditions, true, 0}));
        }
      }
      std::cout << summary.dump(2) << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: bad number: " << e.what() << '\n';
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: number out of range: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
