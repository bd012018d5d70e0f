#include "dynvocab/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace dynvocab {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

void Fnv1a::update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        state_ ^= bytes[i];
        state_ *= 0x100000001b3ULL;
    }
}

std::string Fnv1a::hex() const {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << state_;
    return out.str();
}

void write_framed_header(std::ostream& out, const Json& header) {
    const std::string text = header.dump();
    const std::uint64_t length = text.size();
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

Json read_framed_header(std::istream& in, const std::string& what) {
    std::uint64_t length = 0;
    if (!in.read(reinterpret_cast<char*>(&length), sizeof(length))) {
        throw std::runtime_error(what + ": truncated header length");
    }
    if (length > (1ULL << 32)) {
        throw std::runtime_error(what + ": implausible header length");
    }
    std::string text(length, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
        throw std::runtime_error(what + ": truncated header");
    }
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw std::runtime_error(what + ": malformed header JSON: " + e.what());
    }
}

void write_f64(std::ostream& out, std::span<const double> values) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
}

void read_f64(std::istream& in, std::span<double> values, const std::string& what) {
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size_bytes()))) {
        throw std::runtime_error(what + ": truncated array payload");
    }
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        lines.push_back(std::move(line));
    }
    return lines;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << text;
}

}  // namespace dynvocab
