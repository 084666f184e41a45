#pragma once

#include <cstdint>
#include <vector>

namespace avad {

/// One video frame, 8-bit, row-major, channel-last.
struct Frame {
    int h{0}, w{0}, c{1};
    std::vector<std::uint8_t> data;

    std::uint8_t at(int y, int x, int ch = 0) const {
        return data[size_t((y * w + x) * c + ch)];
    }
    std::uint8_t& at(int y, int x, int ch = 0) {
        return data[size_t((y * w + x) * c + ch)];
    }
};

using FrameSeq = std::vector<Frame>;

}  // namespace avad
