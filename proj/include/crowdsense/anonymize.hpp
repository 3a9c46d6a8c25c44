#pragma once

#include <array>
#include <string>
#include <string_view>

#include <openssl/evp.h>
#include <openssl/hmac.h>

#include "crowdsense/error.hpp"

namespace crowdsense::ingest {

/// Token length in bytes (hex-encoded to twice as many characters).
inline constexpr std::size_t kTokenBytes = 16;

/// Keyed one-way device token: HMAC-SHA256(salt, raw_id) truncated to 16
/// bytes, lower-case hex.
inline std::string anonymize_id(std::string_view raw_id, std::string_view salt)
{
    if (raw_id.empty()) {
        throw ArgumentError("anonymize_id: empty device id");
    }
    if (salt.empty()) {
        throw ArgumentError("anonymize_id: empty salt");
    }
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (!HMAC(EVP_sha256(), salt.data(), static_cast<int>(salt.size()),
              reinterpret_cast<const unsigned char*>(raw_id.data()), raw_id.size(), digest.data(), &len) ||
        len < kTokenBytes) {
        throw std::runtime_error("HMAC-SHA256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out(2 * kTokenBytes, '0');
    for (std::size_t i = 0; i < kTokenBytes; ++i) {
        out[2 * i] = hex[digest[i] >> 4];
        out[2 * i + 1] = hex[digest[i] & 0x0F];
    }
    return out;
}

} // namespace crowdsense::ingest
