#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

namespace steerlm {

/// Incremental SHA-256 producing lowercase hex digests.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(std::string_view bytes);
    // Appends a little-endian u64 length followed by the bytes, so that
    // sequences of fields hash injectively.
    Sha256& update_field(std::string_view bytes);
    std::string hex_digest();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view bytes);

}  // namespace steerlm
