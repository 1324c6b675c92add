#pragma once

#include <bit>
#include <boost/crc.hpp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xpe/tensor.hpp"

namespace xpe {

using Json = nlohmann::json;

/// CRC-64/XZ (ECMA-182 polynomial, reflected, all-ones init and xor-out).
inline std::uint64_t crc64(std::span<const unsigned char> bytes) {
    boost::crc_optimal<64, 0x42F0E1EBA9EA3693ull, ~0ull, ~0ull, true, true> crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::uint64_t parse_hex64(const std::string& s) {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(s, &used, 16);
    } catch (const std::exception&) {
        throw FormatError("bad checksum field '" + s + "'");
    }
    if (used != s.size()) throw FormatError("bad checksum field '" + s + "'");
    return v;
}

/// float32 values encoded little-endian regardless of host order.
inline std::vector<unsigned char> encode_f32(std::span<const float> values) {
    std::vector<unsigned char> bytes(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    return bytes;
}

inline std::vector<float> decode_f32(std::span<const unsigned char> bytes) {
    std::vector<float> values(bytes.size() / 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t(bytes[i * 4 + b]) << (8 * b);
        values[i] = std::bit_cast<float>(bits);
    }
    return values;
}

/// One-line JSON header terminated by '\n', then a raw byte payload.
/// The header's "checksum" field is the CRC-64 of the payload.
struct Container {
    Json header;
    std::vector<unsigned char> payload;
};

inline void write_container(const std::filesystem::path& path, Json header,
                            std::span<const unsigned char> payload) {
    header["payload_bytes"] = payload.size();
    header["checksum"] = hex64(crc64(payload));
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    const std::string line = header.dump() + "\n";
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw FormatError("'" + path.string() + "' has no header line");
    Container c;
    try {
        c.header = Json::parse(line);
    } catch (const Json::exception& e) {
        throw FormatError("'" + path.string() + "': unreadable header: " + e.what());
    }
    if (!c.header.contains("payload_bytes") || !c.header.contains("checksum")) {
        throw FormatError("'" + path.string() + "': header lacks payload_bytes/checksum");
    }
    const auto expected = c.header["payload_bytes"].get<std::size_t>();
    c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (c.payload.size() != expected) {
        throw IntegrityError("'" + path.string() + "': payload is " + std::to_string(c.payload.size()) +
                             " bytes, header says " + std::to_string(expected));
    }
    const auto stored = parse_hex64(c.header["checksum"].get<std::string>());
    const auto actual = crc64(c.payload);
    if (stored != actual) {
        throw IntegrityError("'" + path.string() + "': checksum mismatch (stored " + hex64(stored) +
                             ", computed " + hex64(actual) + ")");
    }
    return c;
}

/// Named tensors in a weight container: header lists name, shape, dtype and
/// byte offset for each; payload is the concatenation in listed order.
struct WeightFile {
    std::vector<std::string> order;
    std::map<std::string, Tensor> tensors;
    Json metadata;
    std::uint64_t checksum = 0;

    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("weight file has no tensor '" + name + "'");
        return it->second;
    }
};

using NamedTensors = std::vector<std::pair<std::string, const Tensor*>>;

inline std::vector<unsigned char> weights_payload(const NamedTensors& tensors) {
    std::vector<unsigned char> payload;
    for (const auto& [name, t] : tensors) {
        auto bytes = encode_f32(t->values());
        payload.insert(payload.end(), bytes.begin(), bytes.end());
    }
    return payload;
}

inline std::uint64_t weights_checksum(const NamedTensors& tensors) {
    return crc64(weights_payload(tensors));
}

inline std::uint64_t save_weights(const std::filesystem::path& path, const NamedTensors& tensors,
                                  Json metadata = Json::object()) {
    Json header;
    header["format"] = "xpe-weights";
    header["version"] = 1;
    header["metadata"] = std::move(metadata);
    Json entries = Json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        entries.push_back({{"name", name}, {"shape", t->shape()}, {"dtype", "f32"}, {"offset", offset}});
        offset += t->numel() * 4;
    }
    header["tensors"] = std::move(entries);
    auto payload = weights_payload(tensors);
    write_container(path, header, payload);
    return crc64(payload);
}

inline WeightFile load_weights(const std::filesystem::path& path) {
    auto c = read_container(path);
    if (c.header.value("format", "") != "xpe-weights") {
        throw FormatError("'" + path.string() + "' is not a weight container");
    }
    WeightFile wf;
    wf.metadata = c.header.value("metadata", Json::object());
    wf.checksum = parse_hex64(c.header["checksum"].get<std::string>());
    for (const auto& e : c.header.at("tensors")) {
        const auto name = e.at("name").get<std::string>();
        const auto shape = e.at("shape").get<Shape>();
        const auto offset = e.at("offset").get<std::size_t>();
        if (e.value("dtype", "f32") != "f32") throw FormatError("tensor '" + name + "': unsupported dtype");
        const std::size_t bytes = shape_numel(shape) * 4;
        if (offset + bytes > c.payload.size()) {
            throw FormatError("tensor '" + name + "' runs past the end of the payload");
        }
        auto values = decode_f32(std::span(c.payload).subspan(offset, bytes));
        wf.order.push_back(name);
        wf.tensors.emplace(name, Tensor(shape, std::move(values), name));
    }
    return wf;
}

}  // namespace xpe
