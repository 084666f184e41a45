#pragma once

#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>

namespace avad::io {

/// Streaming 64-bit FNV-1a. Used for config digests, dataset manifests and
/// checkpoint integrity checks; stable across platforms.
class Digest {
public:
    Digest& update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ull;
        }
        return *this;
    }

    Digest& update(std::string_view s) { return update(s.data(), s.size()); }

    template <class T>
    Digest& update_pod(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        return update(&v, sizeof(T));
    }

    std::uint64_t value() const { return h_; }

    std::string hex() const {
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << h_;
        return os.str();
    }

    static std::uint64_t of(std::string_view s) { return Digest().update(s).value(); }

private:
    std::uint64_t h_{0xcbf29ce484222325ull};
};

}  // namespace avad::io
