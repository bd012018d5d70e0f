#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace dynvocab {

using Json = nlohmann::ordered_json;

/// 64-bit FNV-1a, used for checkpoint and index fingerprints.
class Fnv1a {
public:
    void update(const void* data, std::size_t size);
    void update(std::string_view text) { update(text.data(), text.size()); }
    std::uint64_t digest() const { return state_; }
    std::string hex() const;

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

// Framed binary files: u64 little-endian header length, UTF-8 JSON header,
// then a raw payload (little-endian float64 arrays and/or text).
void write_framed_header(std::ostream& out, const Json& header);
Json read_framed_header(std::istream& in, const std::string& what);

void write_f64(std::ostream& out, std::span<const double> values);
void read_f64(std::istream& in, std::span<double> values, const std::string& what);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace dynvocab
