#pragma once

#include <fstream>

#include <json.hpp>

#include "qmm/core.hpp"
#include "qmm/nn/layers.hpp"

namespace qmm::nn {

// QMMC container, version 1:
//   bytes 0..3   ASCII "QMMC"
//   bytes 4..7   u32-le format version (1)
//   bytes 8..15  u64-le metadata length M
//   bytes 16..   M bytes of UTF-8 JSON metadata; its "arrays" list names each
//                weight array and its element count, in payload order
//   then         concatenated float32-le blobs, one per arrays entry
inline constexpr uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const fs::path& path, const nlohmann::json& meta_in,
                             const std::vector<ParamRef<float>>& params) {
    nlohmann::json meta = meta_in;
    nlohmann::json arrays = nlohmann::json::array();
    for (const auto& p : params)
        arrays.push_back({{"name", p.name}, {"len", p.values->size()}});
    meta["arrays"] = arrays;
    const std::string meta_text = meta.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open checkpoint for writing: " + path.string());
    auto put_u32 = [&](uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
        out.write(reinterpret_cast<const char*>(b), 4);
    };
    out.write("QMMC", 4);
    put_u32(kCheckpointVersion);
    uint64_t mlen = meta_text.size();
    put_u32(static_cast<uint32_t>(mlen & 0xffffffffull));
    put_u32(static_cast<uint32_t>(mlen >> 32));
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

    std::vector<unsigned char> buf;
    for (const auto& p : params) {
        buf.resize(p.values->size() * 4);
        size_t o = 0;
        for (float v : *p.values) {
            uint32_t bits = std::bit_cast<uint32_t>(v);
            buf[o++] = static_cast<unsigned char>(bits & 0xff);
            buf[o++] = static_cast<unsigned char>((bits >> 8) & 0xff);
            buf[o++] = static_cast<unsigned char>((bits >> 16) & 0xff);
            buf[o++] = static_cast<unsigned char>((bits >> 24) & 0xff);
        }
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size()));
    }
    if (!out)
        throw IoError("checkpoint write failed: " + path.string());
}

// Returns the metadata; caller reconstructs networks from meta["config"] and
// then fills weights with load_checkpoint_arrays.
inline nlohmann::json read_checkpoint_meta(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "QMMC")
        throw FormatError("checkpoint: bad magic: " + path.string());
    unsigned char b[12];
    in.read(reinterpret_cast<char*>(b), 12);
    if (!in)
        throw FormatError("checkpoint: truncated header: " + path.string());
    uint32_t version = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    uint64_t mlen = 0;
    for (int i = 0; i < 8; ++i)
        mlen |= static_cast<uint64_t>(b[4 + i]) << (8 * i);
    std::string meta_text(mlen, '\0');
    in.read(meta_text.data(), static_cast<std::streamsize>(mlen));
    if (!in)
        throw FormatError("checkpoint: truncated metadata: " + path.string());
    try {
        return nlohmann::json::parse(meta_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint: metadata parse error: " + std::string(e.what()));
    }
}

inline void load_checkpoint_arrays(const fs::path& path,
                                   const std::vector<ParamRef<float>>& params) {
    nlohmann::json meta = read_checkpoint_meta(path);
    const auto& arrays = meta.at("arrays");
    if (arrays.size() != params.size())
        throw FormatError("checkpoint: expected " + std::to_string(params.size()) +
                          " arrays, file has " + std::to_string(arrays.size()));

    std::ifstream in(path, std::ios::binary);
    uint64_t mlen = meta.dump().size(); // not reliable; recompute from header below
    {
        in.seekg(8, std::ios::beg);
        unsigned char b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        mlen = 0;
        for (int i = 0; i < 8; ++i)
            mlen |= static_cast<uint64_t>(b[i]) << (8 * i);
    }
    in.seekg(static_cast<std::streamoff>(16 + mlen), std::ios::beg);

    std::vector<unsigned char> buf;
    for (size_t s = 0; s < params.size(); ++s) {
        const auto& entry = arrays[s];
        if (entry.at("name").get<std::string>() != params[s].name)
            throw FormatError("checkpoint: array \"" + entry.at("name").get<std::string>() +
                              "\" does not match expected \"" + params[s].name + "\"");
        size_t len = entry.at("len").get<size_t>();
        if (len != params[s].values->size())
            throw FormatError("checkpoint: array \"" + params[s].name +
                              "\" length mismatch");
        buf.resize(len * 4);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!in)
            throw FormatError("checkpoint: truncated payload at \"" + params[s].name + "\"");
        for (size_t i = 0; i < len; ++i) {
            uint32_t bits = static_cast<uint32_t>(buf[4 * i]) |
                            (static_cast<uint32_t>(buf[4 * i + 1]) << 8) |
                            (static_cast<uint32_t>(buf[4 * i + 2]) << 16) |
                            (static_cast<uint32_t>(buf[4 * i + 3]) << 24);
            (*params[s].values)[i] = std::bit_cast<float>(bits);
        }
    }
}

} // namespace qmm::nn
