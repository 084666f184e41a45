#pragma once

#include "avad/ad/graph.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace avad::pipeline {

using ad::ContractViolation;

/// Temporal span whose conditioning frames produce one reused adapter.
enum class Granularity { segment10s, chunk30s, chunk60s, chunk120s, chunk240s, full_video };

inline const char* granularity_name(Granularity g) {
    switch (g) {
        case Granularity::segment10s: return "10s";
        case Granularity::chunk30s: return "30s";
        case Granularity::chunk60s: return "60s";
        case Granularity::chunk120s: return "120s";
        case Granularity::chunk240s: return "240s";
        case Granularity::full_video: return "full";
    }
    return "?";
}

inline Granularity granularity_from_name(const std::string& s) {
    if (s == "10s" || s == "segment10s") return Granularity::segment10s;
    if (s == "30s" || s == "chunk30s") return Granularity::chunk30s;
    if (s == "60s" || s == "chunk60s") return Granularity::chunk60s;
    if (s == "120s" || s == "chunk120s") return Granularity::chunk120s;
    if (s == "240s" || s == "chunk240s") return Granularity::chunk240s;
    if (s == "full" || s == "full_video" || s == "video") return Granularity::full_video;
    throw ContractViolation("unknown granularity: " + s);
}

inline const std::vector<Granularity>& all_granularities() {
    static const std::vector<Granularity> all = {
        Granularity::segment10s, Granularity::chunk30s,  Granularity::chunk60s,
        Granularity::chunk120s,  Granularity::chunk240s, Granularity::full_video};
    return all;
}

struct SamplingConfig {
    int k_frames{8};
    double segment_seconds{10.0};
    int segment_center_stride{16};
    Granularity granularity{Granularity::chunk120s};
};

/// Stride sampling, 1-based: S = max(1, floor(n/K)), indices {1, 1+S, ...,
/// 1+(K-1)S} clamped to n (short videos repeat the last frame).
inline std::vector<int> uniform_indices(int n, int k) {
    if (n < 1) throw ContractViolation("uniform_indices: n must be >= 1");
    if (k < 1) throw ContractViolation("uniform_indices: K must be >= 1");
    const int stride = std::max(1, n / k);
    std::vector<int> out(static_cast<size_t>(k), 0);
    for (int i = 0; i < k; ++i) out[size_t(i)] = std::min(n, 1 + i * stride);
    return out;
}

/// Same rule as frame-array offsets.
inline std::vector<int> uniform_indices_0based(int n, int k) {
    auto idx = uniform_indices(n, k);
    for (int& v : idx) --v;
    return idx;
}

struct Segment {
    int index{0};
    int center_frame{0};
    int lo{0}, hi{0};  // [lo, hi)
    int chunk_id{0};
    double s1{0}, s2{0}, s3{0};
    bool answer_slot_missed{false};
};

/// Overlapping windows centered at every stride-th frame (0, 16, 32, ...),
/// each spanning center +- round(seconds/2 * fps), clipped to the video.
inline std::vector<Segment> build_segments(int n, double fps, const SamplingConfig& sc = {}) {
    if (n < 1) throw ContractViolation("build_segments: empty video");
    if (fps <= 0) throw ContractViolation("build_segments: fps must be positive");
    const int half = int(std::lround(sc.segment_seconds / 2.0 * fps));
    std::vector<Segment> segs;
    for (int c = 0; c < n; c += sc.segment_center_stride) {
        Segment s;
        s.index = int(segs.size());
        s.center_frame = c;
        s.lo = std::max(0, c - half);
        s.hi = std::min(n, c + half);
        if (s.hi <= s.lo) s.hi = s.lo + 1;  // degenerate 1-frame videos
        segs.push_back(s);
    }
    return segs;
}

struct Chunk {
    int index{0};
    int lo{0}, hi{0};  // [lo, hi)
};

struct ChunkPlan {
    std::vector<Chunk> chunks;
    std::vector<int> segment_chunk;  // segment index -> chunk index
};

inline double granularity_seconds(Granularity g) {
    switch (g) {
        case Granularity::chunk30s: return 30.0;
        case Granularity::chunk60s: return 60.0;
        case Granularity::chunk120s: return 120.0;
        case Granularity::chunk240s: return 240.0;
        default: return 0.0;
    }
}

/// Non-overlapping chunks of round(seconds * fps) frames (the tail chunk may
/// be short); full_video yields one chunk; segment granularity gives every
/// segment its own chunk. Segments map to the chunk containing their center.
inline ChunkPlan build_chunks(int n, double fps, const std::vector<Segment>& segments,
                              Granularity g) {
    if (n < 1) throw ContractViolation("build_chunks: empty video");
    ChunkPlan plan;
    if (g == Granularity::segment10s) {
        for (const auto& s : segments) plan.chunks.push_back({s.index, s.lo, s.hi});
        plan.segment_chunk.resize(segments.size());
        for (size_t i = 0; i < segments.size(); ++i) plan.segment_chunk[i] = int(i);
        return plan;
    }
    if (g == Granularity::full_video) {
        plan.chunks.push_back({0, 0, n});
        plan.segment_chunk.assign(segments.size(), 0);
        return plan;
    }
    const int len = std::max(1, int(std::lround(granularity_seconds(g) * fps)));
    for (int lo = 0; lo < n; lo += len)
        plan.chunks.push_back({int(plan.chunks.size()), lo, std::min(n, lo + len)});
    plan.segment_chunk.resize(segments.size());
    for (size_t i = 0; i < segments.size(); ++i) {
        int c = std::min(segments[i].center_frame / len, int(plan.chunks.size()) - 1);
        plan.segment_chunk[i] = c;
    }
    return plan;
}

}  // namespace avad::pipeline
