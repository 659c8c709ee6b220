#include "acrfence/sha256.hpp"

#include <array>
#include <cstdint>
#include <cstring>

#include "acrfence/value.hpp"

namespace acrfence {
namespace {

// FIPS 180-4 SHA-256.
struct Sha256 {
  uint32_t state[8] = {0x6a09e667u, 0xbb67ae85u, 0x3c6ef372u, 0xa54ff53au,
                       0x510e527fu, 0x9b05688cu, 0x1f83d9abu, 0x5be0cd19u};
  uint64_t total_len = 0;
  unsigned char buffer[64];
  size_t buffered = 0;

  static constexpr uint32_t k[64] = {
      0x428a2f98u, 0x71374491u, 0xb5c0fbcfu, 0xe9b5dba5u, 0x3956c25bu, 0x59f111f1u, 0x923f82a4u,
      0xab1c5ed5u, 0xd807aa98u, 0x12835b01u, 0x243185beu, 0x550c7dc3u, 0x72be5d74u, 0x80deb1feu,
      0x9bdc06a7u, 0xc19bf174u, 0xe49b69c1u, 0xefbe4786u, 0x0fc19dc6u, 0x240ca1ccu, 0x2de92c6fu,
      0x4a7484aau, 0x5cb0a9dcu, 0x76f988dau, 0x983e5152u, 0xa831c66du, 0xb00327c8u, 0xbf597fc7u,
      0xc6e00bf3u, 0xd5a79147u, 0x06ca6351u, 0x14292967u, 0x27b70a85u, 0x2e1b2138u, 0x4d2c6dfcu,
      0x53380d13u, 0x650a7354u, 0x766a0abbu, 0x81c2c92eu, 0x92722c85u, 0xa2bfe8a1u, 0xa81a664bu,
      0xc24b8b70u, 0xc76c51a3u, 0xd192e819u, 0xd6990624u, 0xf40e3585u, 0x106aa070u, 0x19a4c116u,
      0x1e376c08u, 0x2748774cu, 0x34b0bcb5u, 0x391c0cb3u, 0x4ed8aa4au, 0x5b9cca4fu, 0x682e6ff3u,
      0x748f82eeu, 0x78a5636fu, 0x84c87814u, 0x8cc70208u, 0x90befffau, 0xa4506cebu, 0xbef9a3f7u,
      0xc67178f2u};

  static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

  void process_block(const unsigned char* p) {
    uint32_t w[64];
    for (int i = 0; i < 16; ++i) {
      w[i] = (uint32_t(p[i * 4]) << 24) | (uint32_t(p[i * 4 + 1]) << 16) |
             (uint32_t(p[i * 4 + 2]) << 8) | uint32_t(p[i * 4 + 3]);
    }
    for (int i = 16; i < 64; ++i) {
      uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    uint32_t a = state[0], b = state[1], c = state[2], d = state[3];
    uint32_t e = state[4], f = state[5], g = state[6], h = state[7];
    for (int i = 0; i < 64; ++i) {
      uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      uint32_t ch = (e & f) ^ (~e & g);
      uint32_t temp1 = h + s1 + ch + k[i] + w[i];
      uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      uint32_t temp2 = s0 + maj;
      h = g;
      g = f;
      f = e;
      e = d + temp1;
      d = c;
      c = b;
      b = a;
      a = temp1 + temp2;
    }
    state[0] += a;
    state[1] += b;
    state[2] += c;
    state[3] += d;
    state[4] += e;
    state[5] += f;
    state[6] += g;
    state[7] += h;
  }

  void update(const unsigned char* data, size_t len) {
    total_len += len;
    while (len > 0) {
      size_t take = std::min(len, sizeof(buffer) - buffered);
      std::memcpy(buffer + buffered, data, take);
      buffered += take;
      data += take;
      len -= take;
      if (buffered == sizeof(buffer)) {
        process_block(buffer);
        buffered = 0;
      }
    }
  }

  std::array<unsigned char, 32> finish() {
    uint64_t bit_len = total_len * 8;
    unsigned char pad = 0x80;
    update(&pad, 1);
    unsigned char zero = 0;
    while (buffered != 56) update(&zero, 1);
    unsigned char len_be[8];
    for (int i = 0; i < 8; ++i) len_be[i] = static_cast<unsigned char>(bit_len >> (56 - i * 8));
    // bypass total_len accounting for the length block
    std::memcpy(buffer + buffered, len_be, 8);
    buffered += 8;
    process_block(buffer);
    buffered = 0;
    std::array<unsigned char, 32> out{};
    for (int i = 0; i < 8; ++i) {
      out[i * 4] = static_cast<unsigned char>(state[i] >> 24);
      out[i * 4 + 1] = static_cast<unsigned char>(state[i] >> 16);
      out[i * 4 + 2] = static_cast<unsigned char>(state[i] >> 8);
      out[i * 4 + 3] = static_cast<unsigned char>(state[i]);
    }
    return out;
  }
};

constexpr uint32_t Sha256::k[64];

std::array<unsigned char, 32> sha256_raw(std::string_view data) {
  Sha256 ctx;
  ctx.update(reinterpret_cast<const unsigned char*>(data.data()), data.size());
  return ctx.finish();
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  auto digest = sha256_raw(data);
  return to_hex(digest.data(), digest.size());
}

std::string hmac_sha256_hex(std::string_view key, std::string_view data) {
  std::array<unsigned char, 64> key_block{};
  if (key.size() > 64) {
    auto hashed = sha256_raw(key);
    std::memcpy(key_block.data(), hashed.data(), hashed.size());
  } else {
    std::memcpy(key_block.data(), key.data(), key.size());
  }
  std::string inner(64, '\0'), outer(64, '\0');
  for (int i = 0; i < 64; ++i) {
    inner[i] = static_cast<char>(key_block[i] ^ 0x36);
    outer[i] = static_cast<char>(key_block[i] ^ 0x5c);
  }
  auto inner_digest = sha256_raw(inner + std::string(data));
  std::string outer_msg = outer + std::string(reinterpret_cast<const char*>(inner_digest.data()),
                                              inner_digest.size());
  auto digest = sha256_raw(outer_msg);
  return to_hex(digest.data(), digest.size());
}

}  // namespace acrfence
