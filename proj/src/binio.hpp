#pragma once

// Little-endian helpers and the length-prefixed JSON container shared by the
// bundle and vector file formats:
//
//   [u64 LE header length N][N bytes of JSON][payload bytes ...]

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

namespace steerlm::detail {

static_assert(std::endian::native == std::endian::little, "steerlm file formats assume a little-endian host");

inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64(std::string_view in) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
    return v;
}

template <typename T>
void put_raw(std::string& out, const T* data, size_t count) {
    out.append(reinterpret_cast<const char*>(data), count * sizeof(T));
}

template <typename T>
void get_raw(std::string_view in, T* data, size_t count) {
    std::memcpy(data, in.data(), count * sizeof(T));
}

struct Container {
    nlohmann::json header;
    std::string_view payload;  // view into the caller's buffer
};

// Throws ParseError with `what` as context on a malformed container.
Container split_container(std::string_view bytes, const std::string& what);
std::string make_container(const nlohmann::json& header, std::string_view payload);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace steerlm::detail
