#include "cmark/message_factory.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "cmark/errors.hpp"
#include "cmark/random.hpp"

namespace cmark::message {

namespace {

torch::Tensor pool(const torch::Tensor& t, int k) {
  return torch::avg_pool2d(t, {k, k}, {k, k}, {0, 0}, /*ceil_mode=*/true);
}

double mean_of(const torch::Tensor& t) { return t.to(torch::kFloat64).mean().item<double>(); }

}  // namespace

RandomConvExtractor::RandomConvExtractor(Options options) : options_(std::move(options)) {
  if (options_.pool < 1 || options_.channels.empty()) {
    throw Error(ErrorCode::BadParams, "extractor needs pool >= 1 and at least one stage");
  }
  Rng rng(options_.seed);
  int in = 3;
  for (const int out : options_.channels) {
    if (out < 1) throw Error(ErrorCode::BadParams, "stage width must be positive");
    const double scale = 1.0 / std::sqrt(static_cast<double>(in) * 9.0);
    std::vector<float> w(static_cast<std::size_t>(out) * in * 9);
    for (auto& x : w) x = static_cast<float>(normal(rng) * scale);
    weights_.push_back(torch::from_blob(w.data(), {out, in, 3, 3}, torch::kFloat32).clone());
    in = out;
  }
}

std::size_t RandomConvExtractor::dims() const {
  std::size_t total = 3;
  for (const int c : options_.channels) total += static_cast<std::size_t>(c);
  return total;
}

std::vector<double> RandomConvExtractor::extract(const Image& image, const Mask& mask) const {
  if (!mask.matches(image)) throw Error(ErrorCode::ShapeMismatch, "mask does not match image");
  const std::size_t n = mask.count();
  if (n == 0) throw Error(ErrorCode::EmptyRegion, "feature region is empty");

  double mu[3] = {0.0, 0.0, 0.0};
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      if (!mask.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) mu[c] += image.at(y, x, c);
    }
  }
  for (double& m : mu) m /= static_cast<double>(n);

  Image centred(image.height(), image.width());
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      if (!mask.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) centred.at(y, x, c) = static_cast<float>(image.at(y, x, c) - mu[c]);
    }
  }

  torch::NoGradGuard no_grad;
  torch::Tensor h = to_tensor(centred);
  torch::Tensor m = to_tensor(mask);
  if (options_.pool > 1) {
    h = pool(h, options_.pool);
    m = pool(m, options_.pool);
  }
  std::vector<double> out;
  out.reserve(dims());
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    h = torch::relu(torch::conv2d(h, weights_[k], torch::Tensor(), 1, 1));
    const double coverage = mean_of(m);
    if (coverage <= 0.0) throw Error(ErrorCode::EmptyRegion, "feature region vanished after pooling");
    for (const double v : global_average_pool(h * m)) out.push_back(v / coverage);
    if (k + 1 < weights_.size()) {
      h = pool(h, 2);
      m = pool(m, 2);
    }
  }
  out.insert(out.end(), mu, mu + 3);
  return out;
}

FeatureVector extract_contour_feature(const Image& image, const Mask& contour_mask,
                                      const FeatureExtractor& extractor) {
  return {extractor.extract(image, contour_mask), FeatureSource::ContourTexture};
}

FeatureVector extract_identity_feature(const Image& image, const Mask& face_mask,
                                       const FeatureExtractor& extractor) {
  return {extractor.extract(image, face_mask), FeatureSource::Identity};
}

std::vector<double> global_average_pool(const torch::Tensor& feature_map) {
  torch::Tensor t = feature_map;
  if (t.dim() == 4) {
    if (t.size(0) != 1) throw Error(ErrorCode::ShapeMismatch, "expected a single feature stack");
    t = t[0];
  }
  if (t.dim() != 3) throw Error(ErrorCode::ShapeMismatch, "expected a CxHxW feature stack");
  if (t.size(1) == 0 || t.size(2) == 0) throw Error(ErrorCode::BadParams, "empty spatial extent");
  const torch::Tensor means = t.to(torch::kFloat64).contiguous().mean({1, 2});
  const double* p = means.data_ptr<double>();
  return {p, p + means.numel()};
}

std::vector<double> PcaBasis::project_raw(std::span<const double> feature) const {
  if (feature.size() != dims()) throw Error(ErrorCode::LengthMismatch, "feature has the wrong dimension");
  Eigen::VectorXd f(static_cast<Eigen::Index>(dims()));
  for (std::size_t i = 0; i < dims(); ++i) f[static_cast<Eigen::Index>(i)] = feature[i] - mean[i];
  const Eigen::VectorXd z = components * f;
  return {z.data(), z.data() + z.size()};
}

std::vector<double> PcaBasis::project(std::span<const double> feature) const {
  auto z = project_raw(feature);
  for (std::size_t k = 0; k < z.size(); ++k) z[k] /= stddev[k];
  return z;
}

std::vector<double> PcaBasis::reconstruct(std::span<const double> raw) const {
  if (raw.size() != static_cast<std::size_t>(C)) throw Error(ErrorCode::LengthMismatch, "projection length != C");
  const Eigen::Map<const Eigen::VectorXd> z(raw.data(), C);
  const Eigen::VectorXd f = components.transpose() * z;
  std::vector<double> out(dims());
  for (std::size_t i = 0; i < dims(); ++i) out[i] = mean[i] + f[static_cast<Eigen::Index>(i)];
  return out;
}

namespace {

std::vector<double> payload_of(const PcaBasis& b) {
  std::vector<double> payload(b.mean);
  for (int r = 0; r < b.C; ++r) {
    for (Eigen::Index c = 0; c < b.components.cols(); ++c) payload.push_back(b.components(r, c));
  }
  payload.insert(payload.end(), b.stddev.begin(), b.stddev.end());
  return payload;
}

std::uint32_t crc_of(const std::vector<double>& payload) {
  static_assert(std::endian::native == std::endian::little, "basis files are little-endian");
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
                                          static_cast<uInt>(payload.size() * sizeof(double))));
}

}  // namespace

std::uint32_t PcaBasis::checksum() const { return crc_of(payload_of(*this)); }

void PcaBasis::save(const std::filesystem::path& path) const {
  const auto payload = payload_of(*this);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
  const nlohmann::json header = {{"C", C}, {"dims", dims()}, {"checksum", crc_of(payload)}};
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
}

PcaBasis PcaBasis::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = nlohmann::json::parse(line);
  PcaBasis b;
  b.C = header.at("C").get<int>();
  const auto dims = header.at("dims").get<std::size_t>();
  if (b.C < 1 || dims < 1) throw Error(ErrorCode::BadParams, "bad basis header in " + path.string());
  const std::size_t n = dims + static_cast<std::size_t>(b.C) * dims + static_cast<std::size_t>(b.C);
  std::vector<double> payload(n);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(n * sizeof(double))) {
    throw Error(ErrorCode::BadParams, "truncated basis file " + path.string());
  }
  if (crc_of(payload) != header.at("checksum").get<std::uint32_t>()) {
    throw Error(ErrorCode::BadParams, "checksum mismatch in " + path.string());
  }
  b.mean.assign(payload.begin(), payload.begin() + static_cast<std::ptrdiff_t>(dims));
  b.components.resize(b.C, static_cast<Eigen::Index>(dims));
  std::size_t at = dims;
  for (int r = 0; r < b.C; ++r) {
    for (std::size_t c = 0; c < dims; ++c) b.components(r, static_cast<Eigen::Index>(c)) = payload[at++];
  }
  b.stddev.assign(payload.begin() + static_cast<std::ptrdiff_t>(at), payload.end());
  return b;
}

PcaBasis fit_pca_basis(const std::vector<std::vector<double>>& features, int C) {
  if (C < 1) throw Error(ErrorCode::BadParams, "C must be positive");
  if (features.empty()) throw Error(ErrorCode::RankDeficient, "no samples");
  const std::size_t d = features.front().size();
  if (d == 0) throw Error(ErrorCode::BadParams, "zero-dimensional features");
  const auto N = static_cast<Eigen::Index>(features.size());
  Eigen::MatrixXd X(N, static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < N; ++i) {
    const auto& f = features[static_cast<std::size_t>(i)];
    if (f.size() != d) throw Error(ErrorCode::LengthMismatch, "features differ in dimension");
    for (std::size_t j = 0; j < d; ++j) X(i, static_cast<Eigen::Index>(j)) = f[j];
  }
  const Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(std::max<Eigen::Index>(N - 1, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw Error(ErrorCode::RankDeficient, "eigensolver failed");
  const Eigen::VectorXd& ev = solver.eigenvalues();  // ascending
  const Eigen::Index top = ev.size() - 1;
  const double tol = 1e-10 * std::max(1.0, std::abs(ev[top]));
  if (C > ev.size() || ev[top - C + 1] <= tol) {
    throw Error(ErrorCode::RankDeficient, "samples span fewer than " + std::to_string(C) + " directions");
  }
  PcaBasis b;
  b.C = C;
  b.mean.assign(mu.data(), mu.data() + mu.size());
  b.components.resize(C, static_cast<Eigen::Index>(d));
  for (int k = 0; k < C; ++k) {
    Eigen::VectorXd v = solver.eigenvectors().col(top - k);
    // Fix the sign so the largest-magnitude entry is positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    b.components.row(k) = v.transpose();
    b.stddev.push_back(std::sqrt(ev[top - k]));
  }
  return b;
}

std::vector<double> scale_to_unit(std::span<const double> v) {
  if (v.empty()) throw Error(ErrorCode::ConstantVector, "empty vector");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double min = *lo, max = *hi;
  if (!(max > min)) throw Error(ErrorCode::ConstantVector, "cannot scale a constant vector");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = 2.0 * (v[i] - min) / (max - min) - 1.0;
  return out;
}

Bits binarize(std::span<const double> v) {
  Bits out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] < 0.0 ? -1 : 1;
  return out;
}

HybridMessage assemble_hybrid(const Bits& v_i_bits, const Bits& v_c_bits, double alpha) {
  if (v_i_bits.size() != v_c_bits.size()) {
    throw Error(ErrorCode::LengthMismatch, "identity and contour halves differ in length");
  }
  if (v_i_bits.empty()) throw Error(ErrorCode::LengthMismatch, "empty message halves");
  if (!(alpha > 0.0)) throw Error(ErrorCode::BadParams, "alpha must be positive");
  HybridMessage m;
  m.v_i = v_i_bits;
  m.v_c = v_c_bits;
  m.alpha = alpha;
  m.v = v_i_bits;
  m.v.insert(m.v.end(), v_c_bits.begin(), v_c_bits.end());
  for (const int b : m.v) {
    if (b != 1 && b != -1) throw Error(ErrorCode::BadParams, "message bits must be +1 or -1");
    m.v_alpha.push_back(alpha * b);
  }
  return m;
}

HybridMessage hybrid_from_bits(std::span<const int> v, double alpha) {
  if (v.empty() || v.size() % 2 != 0) throw Error(ErrorCode::LengthMismatch, "message length must be 2C");
  const std::size_t C = v.size() / 2;
  return assemble_hybrid(Bits(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(C)),
                         Bits(v.begin() + static_cast<std::ptrdiff_t>(C), v.end()), alpha);
}

Bits feature_bits(const PcaBasis& basis, std::span<const double> feature) {
  const auto z = basis.project(feature);
  return binarize(scale_to_unit(z));
}

MessageFactory::MessageFactory(std::shared_ptr<const FeatureExtractor> extractor,
                               PcaBasis contour_basis, PcaBasis identity_basis, double alpha)
    : extractor_(std::move(extractor)),
      contour_basis_(std::move(contour_basis)),
      identity_basis_(std::move(identity_basis)),
      alpha_(alpha) {
  if (!extractor_) throw Error(ErrorCode::BadParams, "message factory needs an extractor");
  if (contour_basis_.C != identity_basis_.C) {
    throw Error(ErrorCode::LengthMismatch, "contour and identity bases differ in C");
  }
  if (contour_basis_.dims() != extractor_->dims() || identity_basis_.dims() != extractor_->dims()) {
    throw Error(ErrorCode::LengthMismatch, "basis dimension does not match the extractor");
  }
}

HybridMessage MessageFactory::make(const Image& image, const geometry::RegionMaskSet& masks) const {
  const auto fc = extract_contour_feature(image, masks.contour_mask, *extractor_);
  const auto fi = extract_identity_feature(image, masks.face_mask, *extractor_);
  return assemble_hybrid(feature_bits(identity_basis_, fi.values),
                         feature_bits(contour_basis_, fc.values), alpha_);
}

std::pair<PcaBasis, PcaBasis> fit_message_bases(std::span<const CalibrationSample> samples,
                                                const FeatureExtractor& extractor, int C) {
  std::vector<std::vector<double>> contour, identity;
  contour.reserve(samples.size());
  identity.reserve(samples.size());
  for (const auto& s : samples) {
    contour.push_back(extractor.extract(*s.image, s.masks->contour_mask));
    identity.push_back(extractor.extract(*s.image, s.masks->face_mask));
  }
  return {fit_pca_basis(contour, C), fit_pca_basis(identity, C)};
}

nlohmann::json bits_to_json(std::span<const int> bits) {
  return nlohmann::json(std::vector<int>(bits.begin(), bits.end()));
}

Bits bits_from_json(const nlohmann::json& j) {
  auto bits = j.get<Bits>();
  for (const int b : bits) {
    if (b != 1 && b != -1) throw Error(ErrorCode::BadParams, "message bits must be +1 or -1");
  }
  return bits;
}

}  // namespace cmark::message
