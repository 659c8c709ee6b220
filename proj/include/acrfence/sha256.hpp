#pragma once

#include <string>
#include <string_view>

namespace acrfence {

/// SHA-256 digest as lowercase hex.
std::string sha256_hex(std::string_view data);

/// HMAC-SHA256 as lowercase hex.
std::string hmac_sha256_hex(std::string_view key, std::string_view data);

}  // namespace acrfence
