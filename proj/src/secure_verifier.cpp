#include "cmark/secure_verifier.hpp"

#include <algorithm>
#include <fstream>

#include "cmark/errors.hpp"

namespace cmark::verify {

namespace {

BigInt random_below(const BigInt& bound, Rng& rng) {
  // Uniform in [0, bound) by rejection over bit_length(bound) random bits.
  const std::size_t bits = bit_length(bound);
  for (;;) {
    BigInt candidate = 0;
    std::size_t filled = 0;
    while (filled < bits) {
      candidate <<= 64;
      candidate |= BigInt(rng());
      filled += 64;
    }
    candidate >>= static_cast<unsigned>(filled - bits);
    if (candidate < bound) return candidate;
  }
}

BigInt random_in(const BigInt& lo, const BigInt& hi, Rng& rng) {
  return lo + random_below(hi - lo + 1, rng);
}

std::string to_decimal(const BigInt& v) { return v.str(); }

BigInt from_decimal(const nlohmann::json& j) {
  if (!j.is_string()) throw Error(ErrorCode::BadParams, "expected a decimal string integer");
  const auto s = j.get<std::string>();
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw Error(ErrorCode::BadParams, "malformed decimal integer '" + s + "'");
  }
  return BigInt(s);
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  return nlohmann::json::parse(in);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

std::string key_id(KeyRole role) { return role == KeyRole::Decoder ? "decoder_key" : "reference_key"; }

KeyRole key_role_from_id(const std::string& id) {
  if (id == "decoder_key") return KeyRole::Decoder;
  if (id == "reference_key") return KeyRole::Reference;
  throw Error(ErrorCode::BadParams, "unknown key id '" + id + "'");
}

BigInt mod_pow(BigInt base, BigInt exponent, const BigInt& modulus) {
  if (modulus <= 0) throw Error(ErrorCode::BadParams, "modulus must be positive");
  if (exponent < 0) throw Error(ErrorCode::BadParams, "negative exponent");
  if (modulus == 1) return 0;
  BigInt result = 1;
  base %= modulus;
  if (base < 0) base += modulus;
  while (exponent > 0) {
    if ((exponent & 1) != 0) result = (result * base) % modulus;
    base = (base * base) % modulus;
    exponent >>= 1;
  }
  return result;
}

BigInt gcd(BigInt a, BigInt b) {
  if (a < 0) a = -a;
  if (b < 0) b = -b;
  while (b != 0) {
    BigInt r = a % b;
    a = std::move(b);
    b = std::move(r);
  }
  return a;
}

ExtendedGcd extended_gcd(const BigInt& a, const BigInt& b) {
  BigInt old_r = a, r = b;
  BigInt old_s = 1, s = 0;
  BigInt old_t = 0, t = 1;
  while (r != 0) {
    const BigInt quotient = old_r / r;
    BigInt tmp = old_r - quotient * r;
    old_r = std::move(r);
    r = std::move(tmp);
    tmp = old_s - quotient * s;
    old_s = std::move(s);
    s = std::move(tmp);
    tmp = old_t - quotient * t;
    old_t = std::move(t);
    t = std::move(tmp);
  }
  return {old_r, old_s, old_t};
}

BigInt mod_inverse(const BigInt& a, const BigInt& m) {
  const auto eg = extended_gcd(a, m);
  if (eg.g != 1) throw Error(ErrorCode::BadParams, "value has no inverse modulo m");
  BigInt inv = eg.x % m;
  if (inv < 0) inv += m;
  return inv;
}

std::size_t bit_length(const BigInt& n) {
  if (n <= 0) return 0;
  return boost::multiprecision::msb(n) + 1;
}

bool is_prime_trial_division(const BigInt& n) {
  if (n < 2) return false;
  if (n < 4) return true;
  if ((n & 1) == 0) return false;
  for (BigInt d = 3; d * d <= n; d += 2) {
    if (n % d == 0) return false;
  }
  return true;
}

bool is_probable_prime(const BigInt& n, Rng& rng, int rounds) {
  if (n < 2) return false;
  for (int small : {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37}) {
    if (n == small) return true;
    if (n % small == 0) return false;
  }
  BigInt d = n - 1;
  unsigned r = 0;
  while ((d & 1) == 0) {
    d >>= 1;
    ++r;
  }
  for (int round = 0; round < rounds; ++round) {
    const BigInt a = random_in(2, n - 2, rng);
    BigInt x = mod_pow(a, d, n);
    if (x == 1 || x == n - 1) continue;
    bool composite = true;
    for (unsigned i = 1; i < r; ++i) {
      x = (x * x) % n;
      if (x == n - 1) {
        composite = false;
        break;
      }
    }
    if (composite) return false;
  }
  return true;
}

BigInt random_prime(unsigned bits, Rng& rng, int rounds) {
  if (bits < 3) throw Error(ErrorCode::BadParams, "prime size must be at least 3 bits");
  const BigInt top = BigInt(1) << (bits - 1);
  for (;;) {
    BigInt candidate = random_below(top, rng) | top | 1;
    if (is_probable_prime(candidate, rng, rounds)) return candidate;
  }
}

RsaKeyPair rsa_keygen(const BigInt& p, const BigInt& q, Rng& rng, std::optional<BigInt> e,
                      KeyRole role) {
  if (p == q) throw Error(ErrorCode::EqualPrimes, "p and q must differ");
  const BigInt trial_limit = BigInt(1) << 40;
  for (const BigInt* v : {&p, &q}) {
    const bool prime = *v < trial_limit ? is_prime_trial_division(*v) : is_probable_prime(*v, rng);
    if (!prime) throw Error(ErrorCode::NotPrime, v->str() + " is not prime");
  }
  RsaKeyPair key;
  key.role = role;
  key.p = p;
  key.q = q;
  key.n = p * q;
  key.phi = (p - 1) * (q - 1);
  if (key.phi <= 2) throw Error(ErrorCode::BadParams, "phi too small for a public exponent");
  if (e) {
    if (*e <= 1 || *e >= key.phi || gcd(*e, key.phi) != 1) {
      throw Error(ErrorCode::BadParams, "public exponent must be coprime to phi in (1, phi)");
    }
    key.e = *e;
  } else {
    do {
      key.e = random_in(2, key.phi - 1, rng);
    } while (gcd(key.e, key.phi) != 1);
  }
  key.d = mod_inverse(key.e, key.phi);
  return key;
}

RsaKeyPair rsa_generate(unsigned prime_bits, Rng& rng, KeyRole role) {
  const BigInt p = random_prime(prime_bits, rng);
  BigInt q = random_prime(prime_bits, rng);
  while (q == p) q = random_prime(prime_bits, rng);
  return rsa_keygen(p, q, rng, std::nullopt, role);
}

nlohmann::json to_json(const PublicKey& key) {
  return {{"key_id", key_id(key.role)}, {"p", to_decimal(key.p)}, {"q", to_decimal(key.q)},
          {"n", to_decimal(key.n)}, {"e", to_decimal(key.e)}};
}

nlohmann::json to_json(const PrivateKey& key) {
  return {{"key_id", key_id(key.role)}, {"p", to_decimal(key.p)}, {"q", to_decimal(key.q)},
          {"n", to_decimal(key.n)}, {"d", to_decimal(key.d)}};
}

PublicKey public_key_from_json(const nlohmann::json& j) {
  PublicKey key{from_decimal(j.at("p")), from_decimal(j.at("q")), from_decimal(j.at("n")),
                from_decimal(j.at("e")), key_role_from_id(j.value("key_id", "decoder_key"))};
  if (key.p * key.q != key.n) throw Error(ErrorCode::BadParams, "n != p*q in public key");
  return key;
}

PrivateKey private_key_from_json(const nlohmann::json& j) {
  PrivateKey key{from_decimal(j.at("p")), from_decimal(j.at("q")), from_decimal(j.at("n")),
                 from_decimal(j.at("d")), key_role_from_id(j.value("key_id", "decoder_key"))};
  if (key.p * key.q != key.n) throw Error(ErrorCode::BadParams, "n != p*q in private key");
  return key;
}

KeyStore KeyStore::generate(unsigned prime_bits, Rng& rng) {
  const auto dec = rsa_generate(prime_bits, rng, KeyRole::Decoder);
  auto ref = rsa_generate(prime_bits, rng, KeyRole::Reference);
  while (ref.n == dec.n) ref = rsa_generate(prime_bits, rng, KeyRole::Reference);
  return {dec.public_key(), ref.public_key(), dec.private_key(), ref.private_key()};
}

void KeyStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_json(dir / "decoder_key.pub.json", to_json(decoder_public));
  write_json(dir / "decoder_key.priv.json", to_json(decoder_private));
  write_json(dir / "reference_key.pub.json", to_json(reference_public));
  write_json(dir / "reference_key.priv.json", to_json(reference_private));
}

KeyStore KeyStore::load(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorCode::MissingFile, "key directory " + dir.string() + " not found");
  }
  KeyStore ks{public_key_from_json(read_json(dir / "decoder_key.pub.json")),
              public_key_from_json(read_json(dir / "reference_key.pub.json")),
              private_key_from_json(read_json(dir / "decoder_key.priv.json")),
              private_key_from_json(read_json(dir / "reference_key.priv.json"))};
  ks.decoder_public.role = ks.decoder_private.role = KeyRole::Decoder;
  ks.reference_public.role = ks.reference_private.role = KeyRole::Reference;
  return ks;
}

unsigned salt_bits_for(unsigned chunk_bits) { return std::min(8u, chunk_bits / 2); }

namespace {

struct ChunkLayout {
  unsigned salt_bits;
  unsigned payload_bits;
  std::vector<unsigned> payload_lengths;
};

ChunkLayout layout_for(unsigned chunk_bits, unsigned total_bits) {
  ChunkLayout layout{salt_bits_for(chunk_bits), 0, {}};
  if (layout.salt_bits == 0 || chunk_bits <= layout.salt_bits) {
    throw Error(ErrorCode::BadParams, "modulus too small to hold a salted chunk");
  }
  layout.payload_bits = chunk_bits - layout.salt_bits;
  for (unsigned done = 0; done < total_bits; done += layout.payload_bits) {
    layout.payload_lengths.push_back(std::min(layout.payload_bits, total_bits - done));
  }
  return layout;
}

}  // namespace

EncryptedMessage rsa_encrypt(std::span<const int> bits, const PublicKey& key, Rng& rng) {
  if (key.n <= 3 || key.e <= 1) throw Error(ErrorCode::BadParams, "invalid public key");
  EncryptedMessage out;
  out.chunk_bits = static_cast<unsigned>(bit_length(key.n) - 1);
  out.total_bits = static_cast<unsigned>(bits.size());
  out.key_id = key_id(key.role);
  const auto layout = layout_for(out.chunk_bits, out.total_bits);
  const BigInt salt_top = BigInt(1) << (layout.salt_bits - 1);

  std::size_t pos = 0;
  for (const unsigned len : layout.payload_lengths) {
    BigInt payload = 0;
    for (unsigned i = 0; i < len; ++i, ++pos) {
      const int b = bits[pos];
      if (b != 1 && b != -1) throw Error(ErrorCode::BadParams, "message bits must be +1 or -1");
      payload = (payload << 1) | (b > 0 ? 1 : 0);
    }
    const BigInt salt = salt_top | random_below(salt_top, rng);
    const BigInt m = (salt << len) | payload;
    if (m >= key.n) throw Error(ErrorCode::ChunkOverflow, "chunk does not fit under the modulus");
    out.chunks.push_back(rsa_apply(m, key.e, key.n));
  }
  return out;
}

Bits rsa_decrypt(const EncryptedMessage& cipher, const PrivateKey& key) {
  if (cipher.key_id != key_id(key.role)) {
    throw Error(ErrorCode::WrongKey, "cipher was produced for " + cipher.key_id);
  }
  if (cipher.chunk_bits + 1 != bit_length(key.n)) {
    throw Error(ErrorCode::WrongKey, "chunk size does not match this modulus");
  }
  const auto layout = layout_for(cipher.chunk_bits, cipher.total_bits);
  if (layout.payload_lengths.size() != cipher.chunks.size()) {
    throw Error(ErrorCode::MalformedCipher, "chunk count does not match total_bits");
  }
  Bits out;
  out.reserve(cipher.total_bits);
  for (std::size_t k = 0; k < cipher.chunks.size(); ++k) {
    const BigInt& c = cipher.chunks[k];
    if (c < 0 || c >= key.n) throw Error(ErrorCode::MalformedCipher, "chunk outside [0, n)");
    const BigInt m = rsa_apply(c, key.d, key.n);
    const unsigned len = layout.payload_lengths[k];
    const BigInt salt = m >> len;
    if (salt >> (layout.salt_bits - 1) != 1) {
      throw Error(ErrorCode::WrongKey, "salt check failed; wrong private key?");
    }
    for (unsigned i = len; i-- > 0;) {
      out.push_back(((m >> i) & 1) != 0 ? 1 : -1);
    }
  }
  return out;
}

double ber(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::LengthMismatch, "BER inputs differ in length");
  if (a.empty()) throw Error(ErrorCode::BadParams, "BER of empty messages");
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mismatches += a[i] != b[i];
  return 100.0 * static_cast<double>(mismatches) / static_cast<double>(a.size());
}

std::string to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::NonWatermarked: return "NonWatermarked";
    case Outcome::Real: return "Real";
    case Outcome::Fake: return "Fake";
  }
  return "Unknown";
}

Outcome decide(double ber_c, double ber_i, double t1, double t2) {
  if (ber_c > t1) return Outcome::NonWatermarked;
  return ber_i <= t2 ? Outcome::Real : Outcome::Fake;
}

Verdict judge(std::span<const int> decoded, std::span<const int> reference, std::size_t C,
              double t1, double t2) {
  if (decoded.size() != 2 * C || reference.size() != 2 * C) {
    throw Error(ErrorCode::LengthMismatch, "messages must have length 2C");
  }
  Verdict v;
  v.t1 = t1;
  v.t2 = t2;
  v.ber_i = ber(decoded.subspan(0, C), reference.subspan(0, C));
  v.ber_c = ber(decoded.subspan(C, C), reference.subspan(C, C));
  v.outcome = decide(v.ber_c, v.ber_i, t1, t2);
  return v;
}

Verdict verify(const EncryptedMessage& decoded, const EncryptedMessage& reference,
               const KeyStore& keys, double t1, double t2, std::size_t C) {
  Bits dec, ref;
  try {
    dec = rsa_decrypt(decoded, keys.private_key(KeyRole::Decoder));
    ref = rsa_decrypt(reference, keys.private_key(KeyRole::Reference));
  } catch (const Error& e) {
    throw Error(ErrorCode::VerificationUnavailable, e.what());
  }
  return judge(dec, ref, C, t1, t2);
}

nlohmann::json to_json(const Verdict& verdict) {
  return {{"outcome", to_string(verdict.outcome)}, {"ber_c", verdict.ber_c},
          {"ber_i", verdict.ber_i}, {"t1", verdict.t1}, {"t2", verdict.t2}};
}

nlohmann::json to_json(const Envelope& envelope) {
  nlohmann::json chunks = nlohmann::json::array();
  for (const auto& c : envelope.message.chunks) chunks.push_back(to_decimal(c));
  return {{"key_id", envelope.message.key_id}, {"chunk_bits", envelope.message.chunk_bits},
          {"total_bits", envelope.message.total_bits}, {"chunks", chunks},
          {"image_id", envelope.image_id}, {"role", envelope.role}};
}

Envelope envelope_from_json(const nlohmann::json& j) {
  Envelope env;
  env.message.key_id = j.at("key_id").get<std::string>();
  env.message.chunk_bits = j.at("chunk_bits").get<unsigned>();
  env.message.total_bits = j.at("total_bits").get<unsigned>();
  for (const auto& c : j.at("chunks")) env.message.chunks.push_back(from_decimal(c));
  env.image_id = j.value("image_id", "");
  env.role = j.value("role", "");
  if (env.role != "decoded" && env.role != "reference") {
    throw Error(ErrorCode::BadParams, "envelope role must be 'decoded' or 'reference'");
  }
  return env;
}

}  // namespace cmark::verify
