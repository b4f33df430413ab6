#include "testing.hpp"

#include <filesystem>

#include "cmark/errors.hpp"
#include "cmark/secure_verifier.hpp"
#include "oracles.hpp"

using namespace cmark;
using namespace cmark::verify;

namespace {

Bits random_bits(std::size_t n, Rng& rng) {
  Bits b(n);
  for (auto& v : b) v = (rng() & 1) ? 1 : -1;
  return b;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::BadParams;
}

}  // namespace

TEST_CASE("toy key (5, 11, 3) has d = 27 and maps 4 -> 9 -> 4") {
  Rng rng(1);
  const auto k = rsa_keygen(5, 11, rng, BigInt(3));
  CHECK(k.n == 55);
  CHECK(k.phi == 40);
  CHECK(k.d == 27);
  CHECK(rsa_apply(4, k.e, k.n) == 9);
  CHECK(rsa_apply(9, k.d, k.n) == 4);
  CHECK(oracle::powmod(4, 3, 55) == 9);
  CHECK(oracle::powmod(9, 27, 55) == 4);
}

TEST_CASE("keygen rejects equal primes, composites and bad exponents") {
  Rng rng(2);
  CHECK(code_of([&] { rsa_keygen(7, 7, rng); }) == ErrorCode::EqualPrimes);
  CHECK(code_of([&] { rsa_keygen(9, 11, rng); }) == ErrorCode::NotPrime);
  CHECK(code_of([&] { rsa_keygen(5, 11, rng, BigInt(5)); }) == ErrorCode::BadParams);
  CHECK(code_of([&] { rsa_keygen(5, 11, rng, BigInt(41)); }) == ErrorCode::BadParams);
}

TEST_CASE("generated exponents are coprime to phi and inverse to d") {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto k = rsa_generate(20, rng);
    const auto phi = static_cast<long long>(k.phi);
    const auto e = static_cast<long long>(k.e);
    const auto g = oracle::egcd(e, phi);
    CHECK(g.g == 1);
    const auto d_oracle = static_cast<long long>(((g.x % phi) + phi) % phi);
    CHECK(k.d == d_oracle);
    CHECK(k.e > 1);
    CHECK(k.e < k.phi);
    CHECK((k.d * k.e) % k.phi == 1);
  }
}

TEST_CASE("mod_pow and mod_inverse agree with the 64-bit oracles") {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::uint64_t m = (rng() >> 2) | 3;
    const std::uint64_t b = rng() % m, e = rng();
    CHECK(mod_pow(BigInt(b), BigInt(e), BigInt(m)) == BigInt(oracle::powmod(b, e, m)));
  }
  CHECK(mod_inverse(3, 40) == 27);
  CHECK(code_of([] { mod_inverse(4, 40); }) == ErrorCode::BadParams);
}

TEST_CASE("primality tests agree on small numbers") {
  Rng rng(5);
  for (int n = 0; n < 2000; ++n) {
    bool naive = n >= 2;
    for (int d = 2; d * d <= n && naive; ++d) naive = n % d != 0;
    CHECK(is_prime_trial_division(n) == naive);
    if (n >= 2) CHECK(is_probable_prime(n, rng) == naive);
  }
  const auto p = random_prime(64, rng);
  CHECK(bit_length(p) == 64);
  CHECK(is_probable_prime(p, rng));
}

TEST_CASE("exhaustive round trip of every 8-bit message under the toy key") {
  Rng rng(6);
  const auto k = rsa_keygen(5, 11, rng, BigInt(3));
  for (int m = 0; m < 256; ++m) {
    Bits bits(8);
    for (int i = 0; i < 8; ++i) bits[static_cast<std::size_t>(i)] = ((m >> (7 - i)) & 1) ? 1 : -1;
    const auto c = rsa_encrypt(bits, k.public_key(), rng);
    for (const auto& chunk : c.chunks) CHECK(chunk < k.n);
    CHECK(rsa_decrypt(c, k.private_key()) == bits);
  }
}

TEST_CASE("round trip with 64-bit primes, and salting hides repeated messages") {
  Rng rng(7);
  const auto k = rsa_generate(64, rng);
  for (int t = 0; t < 200; ++t) {
    const Bits bits = random_bits(32, rng);
    const auto c = rsa_encrypt(bits, k.public_key(), rng);
    CHECK(c.total_bits == 32);
    CHECK(rsa_decrypt(c, k.private_key()) == bits);
  }
  const Bits zeros(32, -1);
  const auto a = rsa_encrypt(zeros, k.public_key(), rng);
  const auto b = rsa_encrypt(zeros, k.public_key(), rng);
  CHECK(a.chunks != b.chunks);
  for (const auto& chunk : a.chunks) {
    CHECK(chunk != 0);
    CHECK(chunk != 1);
  }
}

TEST_CASE("salt width for tiny moduli") {
  CHECK(salt_bits_for(5) == 2);
  CHECK(salt_bits_for(16) == 8);
  CHECK(salt_bits_for(127) == 8);
}

TEST_CASE("decrypting with the wrong key or a tampered cipher fails loudly") {
  Rng rng(8);
  const auto keys = KeyStore::generate(64, rng);
  const Bits bits = random_bits(32, rng);
  const auto c = rsa_encrypt(bits, keys.decoder_public, rng);
  CHECK(c.key_id == key_id(KeyRole::Decoder));
  CHECK(code_of([&] { rsa_decrypt(c, keys.reference_private); }) == ErrorCode::WrongKey);

  auto big = c;
  big.chunks[0] = keys.decoder_public.n + 1;
  CHECK(code_of([&] { rsa_decrypt(big, keys.decoder_private); }) == ErrorCode::MalformedCipher);

  auto relabelled = c;
  relabelled.key_id = key_id(KeyRole::Reference);
  // Same role label, different modulus and exponent: unsalting or range checks catch it.
  CHECK_THROWS_AS(rsa_decrypt(relabelled, keys.reference_private), Error);

  const auto r = rsa_encrypt(bits, keys.reference_public, rng);
  CHECK(code_of([&] { verify::verify(c, c, keys, kDefaultThreshold, kDefaultThreshold, 16); }) ==
        ErrorCode::VerificationUnavailable);
  const auto v = verify::verify(c, r, keys, kDefaultThreshold, kDefaultThreshold, 16);
  CHECK(v.outcome == Outcome::Real);
  CHECK(v.ber_c == 0.0);
}

TEST_CASE("ber counts mismatches as a percentage") {
  Rng rng(9);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 1 + rng() % 64;
    const Bits a = random_bits(n, rng), b = random_bits(n, rng);
    CHECK(ber(a, b) == doctest::Approx(oracle::ber(a, b)));
    CHECK(ber(a, b) == ber(b, a));
    CHECK(ber(a, a) == 0.0);
    Bits neg = a;
    for (auto& x : neg) x = -x;
    CHECK(ber(a, neg) == 100.0);
  }
  Bits a(32, 1), b(32, 1);
  for (int i = 0; i < 6; ++i) b[static_cast<std::size_t>(i)] = -1;
  CHECK(ber(a, b) == 18.75);
  CHECK(kDefaultThreshold == 18.75);
  CHECK(code_of([] { ber(Bits{1, 1}, Bits{1}); }) == ErrorCode::LengthMismatch);
}

TEST_CASE("decision matches the oracle on a 17x17 grid") {
  for (int i = 0; i <= 16; ++i) {
    for (int j = 0; j <= 16; ++j) {
      const double bc = 100.0 * i / 16, bi = 100.0 * j / 16;
      const auto got = decide(bc, bi, kDefaultThreshold, kDefaultThreshold);
      const auto want = oracle::decide(bc, bi, kDefaultThreshold, kDefaultThreshold);
      CHECK(static_cast<int>(got) == static_cast<int>(want));
    }
  }
  CHECK(decide(18.75, 18.75, 18.75, 18.75) == Outcome::Real);
  CHECK(decide(18.75, 25.0, 18.75, 18.75) == Outcome::Fake);
  CHECK(decide(25.0, 0.0, 18.75, 18.75) == Outcome::NonWatermarked);
}

TEST_CASE("judge slices identity first and contour last") {
  Bits ref(8, 1);
  Bits dec = ref;
  dec[0] = dec[1] = -1;  // identity half: 50%
  auto v = judge(dec, ref, 4);
  CHECK(v.ber_i == 50.0);
  CHECK(v.ber_c == 0.0);
  CHECK(v.outcome == Outcome::Fake);
  dec = ref;
  dec[6] = dec[7] = -1;  // contour half
  v = judge(dec, ref, 4);
  CHECK(v.outcome == Outcome::NonWatermarked);
  CHECK_THROWS_AS(judge(dec, ref, 3), Error);
}

TEST_CASE("key store and envelope survive serialization") {
  Rng rng(10);
  const auto keys = KeyStore::generate(64, rng);
  const auto dir = std::filesystem::temp_directory_path() / "cmark_keys_test";
  std::filesystem::remove_all(dir);
  keys.save(dir);
  const auto back = KeyStore::load(dir);
  CHECK(back.decoder_public.n == keys.decoder_public.n);
  CHECK(back.reference_private.d == keys.reference_private.d);
  CHECK(back.reference_private.role == KeyRole::Reference);

  const Bits bits = random_bits(32, rng);
  Envelope env{rsa_encrypt(bits, back.decoder_public, rng), "img_7", "decoded"};
  const auto env2 = envelope_from_json(to_json(env));
  CHECK(env2.image_id == "img_7");
  CHECK(env2.role == "decoded");
  CHECK(rsa_decrypt(env2.message, keys.decoder_private) == bits);

  std::filesystem::remove(dir / "reference_key.priv.json");
  CHECK(code_of([&] { KeyStore::load(dir); }) == ErrorCode::MissingFile);
  std::filesystem::remove_all(dir);
  CHECK(code_of([] { key_role_from_id("nobody"); }) == ErrorCode::BadParams);
}
