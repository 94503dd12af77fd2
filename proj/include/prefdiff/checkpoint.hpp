#pragma once

// Checkpoint format: one JSON document
//   {"meta": {"model_kind", "config", "seed", "format_version"},
//    "params": {name: {"shape": [...], "data": base64(little-endian f64)}}}

#include <bit>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "params.hpp"
#include "rng.hpp"

namespace prefdiff {

/// nlohmann::json keeps object keys sorted, so emitted documents do not
/// depend on insertion order.
using Json = nlohmann::json;

inline constexpr int checkpoint_format_version = 1;

namespace base64 {

inline constexpr std::string_view alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string encode(const std::vector<std::uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += alphabet[(v >> 18) & 63];
        out += alphabet[(v >> 12) & 63];
        out += alphabet[(v >> 6) & 63];
        out += alphabet[v & 63];
    }
    if (const std::size_t rest = bytes.size() - i; rest > 0) {
        const std::uint32_t v = (bytes[i] << 16) | (rest == 2 ? bytes[i + 1] << 8 : 0);
        out += alphabet[(v >> 18) & 63];
        out += alphabet[(v >> 12) & 63];
        out += rest == 2 ? alphabet[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

inline std::vector<std::uint8_t> decode(std::string_view text) {
    if (text.size() % 4 != 0) throw DataError("base64: length " + std::to_string(text.size()) + " is not a multiple of 4");
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=' && i + 4 == text.size() && k >= 2) {
                v[k] = 0;
                ++pad;
                continue;
            }
            if (pad > 0 || (v[k] = value(c)) < 0)
                throw DataError("base64: invalid character at offset " + std::to_string(i + k));
        }
        const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
        out.push_back(static_cast<std::uint8_t>(w >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
    }
    return out;
}

} // namespace base64

inline std::string encode_doubles(std::span<const double> values) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(values.size() * 8);
    for (double v : values) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
    }
    return base64::encode(bytes);
}

inline std::vector<double> decode_doubles(std::string_view text) {
    const auto bytes = base64::decode(text);
    if (bytes.size() % 8 != 0) throw DataError("checkpoint: payload of " + std::to_string(bytes.size()) +
                                               " bytes is not a whole number of doubles");
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

inline Json config_to_json(const BackboneConfig& c) {
    return Json{{"layers", c.layers}, {"width", c.width}, {"heads", c.heads}, {"max_len", c.max_len}};
}

inline BackboneConfig config_from_json(const Json& j) {
    BackboneConfig c;
    c.layers = j.value("layers", c.layers);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.max_len = j.value("max_len", c.max_len);
    c.validate();
    return c;
}

inline Json checkpoint_to_json(const ParameterStore& store) {
    Json config = config_to_json(store.config());
    config["vocab_size"] = store.meta().vocab_size;
    Json params = Json::object();
    for (const auto& [name, a] : store.params())
        params[name] = Json{{"shape", a.shape()}, {"data", encode_doubles(a.data())}};
    return Json{{"meta",
                 {{"model_kind", to_string(store.kind())},
                  {"config", config},
                  {"seed", store.meta().seed},
                  {"format_version", checkpoint_format_version}}},
                {"params", params}};
}

inline ParameterStore checkpoint_from_json(const Json& j) {
    try {
        const Json& meta = j.at("meta");
        const int version = meta.at("format_version").get<int>();
        if (version != checkpoint_format_version)
            throw DataError("checkpoint: unsupported format_version " + std::to_string(version));
        ModelMeta m;
        m.kind = parse_model_kind(meta.at("model_kind").get<std::string>());
        m.config = config_from_json(meta.at("config"));
        m.vocab_size = meta.at("config").at("vocab_size").get<std::size_t>();
        m.seed = meta.at("seed").get<std::uint64_t>();
        ParameterStore store(m);
        for (const auto& [name, p] : j.at("params").items()) {
            Shape shape = p.at("shape").get<Shape>();
            store.add(name, Array(std::move(shape), decode_doubles(p.at("data").get<std::string>())));
        }
        return store;
    } catch (const Json::exception& e) {
        throw DataError(std::string("checkpoint: ") + e.what());
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw Error("failed writing '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void save_checkpoint(const ParameterStore& store, const std::string& path) {
    write_text_file(path, checkpoint_to_json(store).dump() + "\n");
}

inline ParameterStore load_checkpoint(const std::string& path) {
    const std::string text = read_text_file(path);
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw DataError("checkpoint '" + path + "': " + e.what());
    }
    return checkpoint_from_json(j);
}

/// Stable digest of a checkpoint's serialized form.
inline std::uint64_t checkpoint_digest(const ParameterStore& store) { return fnv1a(checkpoint_to_json(store).dump()); }

inline std::string hex_digest(std::uint64_t d) {
    static constexpr char hex[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, d >>= 4) s[static_cast<std::size_t>(i)] = hex[d & 15];
    return s;
}

} // namespace prefdiff
