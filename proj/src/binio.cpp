#include "binio.hpp"

#include <fstream>
#include <sstream>

#include "steerlm/error.hpp"

namespace steerlm::detail {

Container split_container(std::string_view bytes, const std::string& what) {
    if (bytes.size() < 8) throw ParseError(what + ": file too short for header length prefix");
    uint64_t n = get_u64(bytes);
    if (n > bytes.size() - 8) throw ParseError(what + ": header length " + std::to_string(n) + " exceeds file size");
    Container c;
    try {
        c.header = nlohmann::json::parse(bytes.substr(8, n));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(what + ": header is not valid JSON (" + e.what() + ")");
    }
    if (!c.header.is_object()) throw ParseError(what + ": header is not a JSON object");
    c.payload = bytes.substr(8 + n);
    return c;
}

std::string make_container(const nlohmann::json& header, std::string_view payload) {
    std::string h = header.dump();
    std::string out;
    out.reserve(8 + h.size() + payload.size());
    put_u64(out, h.size());
    out += h;
    out.append(payload.data(), payload.size());
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write to '" + path.string() + "' failed");
}

}  // namespace steerlm::detail
