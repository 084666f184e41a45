#pragma once

#include "avad/ad/graph.hpp"
#include "avad/frames.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace avad::io {

struct IoFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr std::uint32_t kFrameBlobMagic = 0x52465641u;  // "AVFR"
constexpr std::uint32_t kFrameBlobVersion = 1;

/// Frame blob layout: magic, version, width, height, channels, frame count,
/// then raw 8-bit frames row-major.
inline void write_frames_blob(const std::string& path, const FrameSeq& frames) {
    if (frames.empty()) throw ad::ContractViolation("write_frames_blob: no frames");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open for write: " + path);
    std::uint32_t hdr[6] = {kFrameBlobMagic,
                            kFrameBlobVersion,
                            std::uint32_t(frames[0].w),
                            std::uint32_t(frames[0].h),
                            std::uint32_t(frames[0].c),
                            std::uint32_t(frames.size())};
    out.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
    for (const auto& f : frames)
        out.write(reinterpret_cast<const char*>(f.data.data()),
                  std::streamsize(f.data.size()));
    if (!out) throw IoFailure("write failed: " + path);
}

inline FrameSeq read_frames_blob(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("missing frame blob: " + path);
    std::uint32_t hdr[6];
    in.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
    if (!in || hdr[0] != kFrameBlobMagic) throw IoFailure("bad frame blob header: " + path);
    if (hdr[1] != kFrameBlobVersion) throw IoFailure("unsupported frame blob version: " + path);
    const int w = int(hdr[2]), h = int(hdr[3]), c = int(hdr[4]), n = int(hdr[5]);
    FrameSeq frames;
    frames.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        Frame f;
        f.w = w;
        f.h = h;
        f.c = c;
        f.data.resize(size_t(w) * size_t(h) * size_t(c));
        in.read(reinterpret_cast<char*>(f.data.data()), std::streamsize(f.data.size()));
        if (!in) throw IoFailure("truncated frame blob: " + path);
        frames.push_back(std::move(f));
    }
    return frames;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open for write: " + path);
    out << content;
    if (!out) throw IoFailure("write failed: " + path);
}

}  // namespace avad::io
