#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include "json.hpp"

#include "cmark/random.hpp"

namespace cmark::verify {

using BigInt = boost::multiprecision::cpp_int;
using Bits = std::vector<int>;  // entries in {-1, +1}

/// Which party a key pair (and its ciphertexts) belongs to: the decoder key
/// e1 or the reference-extractor key e2.
enum class KeyRole { Decoder, Reference };

std::string key_id(KeyRole role);
KeyRole key_role_from_id(const std::string& id);

// -- number theory ---------------------------------------------------------

BigInt mod_pow(BigInt base, BigInt exponent, const BigInt& modulus);
BigInt gcd(BigInt a, BigInt b);

struct ExtendedGcd {
  BigInt g;
  BigInt x;  // a*x + b*y = g
  BigInt y;
};
ExtendedGcd extended_gcd(const BigInt& a, const BigInt& b);

/// Inverse of a modulo m; throws BadParams when gcd(a, m) != 1.
BigInt mod_inverse(const BigInt& a, const BigInt& m);

/// Deterministic trial division; intended for small inputs.
bool is_prime_trial_division(const BigInt& n);
/// Miller-Rabin with random bases drawn from rng.
bool is_probable_prime(const BigInt& n, Rng& rng, int rounds = 40);
/// Random prime with exactly `bits` bits.
BigInt random_prime(unsigned bits, Rng& rng, int rounds = 40);

std::size_t bit_length(const BigInt& n);

// -- keys --------------------------------------------------------------------

struct PublicKey {
  BigInt p, q, n, e;
  KeyRole role = KeyRole::Decoder;
};

struct PrivateKey {
  BigInt p, q, n, d;
  KeyRole role = KeyRole::Decoder;
};

struct RsaKeyPair {
  BigInt p, q, n, phi, e, d;
  KeyRole role = KeyRole::Decoder;

  PublicKey public_key() const { return {p, q, n, e, role}; }
  PrivateKey private_key() const { return {p, q, n, d, role}; }
};

/// Builds a key pair from two distinct primes. Primality is checked with trial
/// division for moduli below 2^40 and Miller-Rabin above. When `e` is given it
/// must satisfy gcd(e, phi) = 1 and 1 < e < phi; otherwise e is drawn uniformly
/// from the valid candidates.
RsaKeyPair rsa_keygen(const BigInt& p, const BigInt& q, Rng& rng,
                      std::optional<BigInt> e = std::nullopt, KeyRole role = KeyRole::Decoder);

/// Generates primes of `prime_bits` bits and a key pair from them.
RsaKeyPair rsa_generate(unsigned prime_bits, Rng& rng, KeyRole role = KeyRole::Decoder);

nlohmann::json to_json(const PublicKey& key);
nlohmann::json to_json(const PrivateKey& key);
PublicKey public_key_from_json(const nlohmann::json& j);
PrivateKey private_key_from_json(const nlohmann::json& j);

/// Key directory layout: {decoder,reference}_key.{pub,priv}.json.
struct KeyStore {
  PublicKey decoder_public, reference_public;
  PrivateKey decoder_private, reference_private;

  static KeyStore generate(unsigned prime_bits, Rng& rng);
  void save(const std::filesystem::path& dir) const;
  static KeyStore load(const std::filesystem::path& dir);

  const PublicKey& public_key(KeyRole role) const {
    return role == KeyRole::Decoder ? decoder_public : reference_public;
  }
  const PrivateKey& private_key(KeyRole role) const {
    return role == KeyRole::Decoder ? decoder_private : reference_private;
  }
};

// -- encryption ---------------------------------------------------------------

/// Raw textbook transform m^k mod n.
inline BigInt rsa_apply(const BigInt& m, const BigInt& k, const BigInt& n) { return mod_pow(m, k, n); }

struct EncryptedMessage {
  std::vector<BigInt> chunks;
  unsigned chunk_bits = 0;
  unsigned total_bits = 0;
  std::string key_id;
};

/// Salt width used inside every chunk for a modulus of the given size.
unsigned salt_bits_for(unsigned chunk_bits);

/// +1 -> 1, -1 -> 0, MSB first; chunks of (chunk_bits - salt) payload bits each
/// prefixed with a random salt whose top bit is set, then c = m^e mod n.
EncryptedMessage rsa_encrypt(std::span<const int> bits, const PublicKey& key, Rng& rng);

/// Throws WrongKey on key-id mismatch or when unsalting fails, and
/// MalformedCipher for chunks >= n or inconsistent sizes.
Bits rsa_decrypt(const EncryptedMessage& cipher, const PrivateKey& key);

// -- verification -------------------------------------------------------------

/// Mismatch rate in percent.
double ber(std::span<const int> a, std::span<const int> b);

enum class Outcome { NonWatermarked, Real, Fake };
std::string to_string(Outcome outcome);

inline constexpr double kDefaultThreshold = 3.0 / 16.0 * 100.0;

struct Verdict {
  Outcome outcome = Outcome::NonWatermarked;
  double ber_c = 0.0;
  double ber_i = 0.0;
  double t1 = kDefaultThreshold;
  double t2 = kDefaultThreshold;
};

/// Two-threshold decision on already-computed BERs.
Outcome decide(double ber_c, double ber_i, double t1, double t2);

/// Decision from plaintext decoded and reference messages; identity bits are
/// the first C entries and contour bits the last C.
Verdict judge(std::span<const int> decoded, std::span<const int> reference, std::size_t C,
              double t1 = kDefaultThreshold, double t2 = kDefaultThreshold);

/// Decrypts both envelopes with their private keys and judges. Decryption
/// failures surface as VerificationUnavailable.
Verdict verify(const EncryptedMessage& decoded, const EncryptedMessage& reference,
               const KeyStore& keys, double t1, double t2, std::size_t C);

nlohmann::json to_json(const Verdict& verdict);

/// Client -> platform envelope.
struct Envelope {
  EncryptedMessage message;
  std::string image_id;
  std::string role;  // "decoded" or "reference"
};

nlohmann::json to_json(const Envelope& envelope);
Envelope envelope_from_json(const nlohmann::json& j);

}  // namespace cmark::verify
