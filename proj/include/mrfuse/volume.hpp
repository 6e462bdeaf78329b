#ifndef MRFUSE_VOLUME_HPP
#define MRFUSE_VOLUME_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mrfuse/common.hpp"
#include "mrfuse/tensor.hpp"
#include "mrfuse/volume_header.hpp"

// Raw little-endian payload (<name>.vol) + text sidecar (<name>.volh).
// Payload order is channel-major then depth-major, identical to the in-memory
// [C,D,H,W] tensor layout, so IO is a straight byte copy per element.

namespace mrfuse {

namespace detail {

inline void check_little_endian() {
    const uint16_t probe = 1;
    uint8_t first;
    std::memcpy(&first, &probe, 1);
    require(first == 1, "volume io: writer requires a little-endian host");
}

inline std::string sidecar_path(const std::string& vol_path) {
    require(vol_path.size() > 4 && vol_path.substr(vol_path.size() - 4) == ".vol",
            "volume io: path must end in .vol, got " + vol_path);
    return vol_path + "h";
}

} // namespace detail

// Header must agree with the tensor: rank 4 [C,D,H,W] with C=channels and
// spatial dims matching. Values are converted to the header dtype; for u8 the
// values must already be whole numbers in [0,255].
template <typename T>
void write_volume(const std::string& vol_path, const Tensor<T>& t, const VolumeHeader& h) {
    detail::check_little_endian();
    require(t.rank() == 4, "write_volume: tensor must be [C,D,H,W], got " + shape_str(t.dims()));
    require(t.dim(0) == h.channels && t.dim(1) == h.dims[0] && t.dim(2) == h.dims[1] &&
                t.dim(3) == h.dims[2],
            "write_volume: tensor shape " + shape_str(t.dims()) + " does not match header");

    std::vector<char> payload(static_cast<size_t>(h.payload_bytes()));
    const int64_t n = t.size();
    switch (h.dtype) {
        case VolumeDtype::f32: {
            auto* out = reinterpret_cast<float*>(payload.data());
            for (int64_t i = 0; i < n; ++i) out[i] = static_cast<float>(t[i]);
            break;
        }
        case VolumeDtype::f64: {
            auto* out = reinterpret_cast<double*>(payload.data());
            for (int64_t i = 0; i < n; ++i) out[i] = static_cast<double>(t[i]);
            break;
        }
        case VolumeDtype::u8: {
            auto* out = reinterpret_cast<uint8_t*>(payload.data());
            for (int64_t i = 0; i < n; ++i) {
                const double v = static_cast<double>(t[i]);
                require(v == std::floor(v) && v >= 0.0 && v <= 255.0,
                        "write_volume: value " + std::to_string(v) + " cannot be stored as u8");
                out[i] = static_cast<uint8_t>(v);
            }
            break;
        }
    }

    std::ofstream f(vol_path, std::ios::binary);
    require(bool(f), "write_volume: cannot open " + vol_path);
    f.write(payload.data(), std::streamsize(payload.size()));
    require(bool(f), "write_volume: write failed for " + vol_path);
    f.close();

    std::ofstream s(detail::sidecar_path(vol_path), std::ios::binary);
    require(bool(s), "write_volume: cannot open sidecar for " + vol_path);
    s << serialize_volume_header(h);
    require(bool(s), "write_volume: sidecar write failed for " + vol_path);
}

template <typename T>
std::pair<Tensor<T>, VolumeHeader> read_volume(const std::string& vol_path) {
    detail::check_little_endian();
    std::ifstream s(detail::sidecar_path(vol_path));
    require(bool(s), "read_volume: missing sidecar " + detail::sidecar_path(vol_path));
    std::stringstream buf;
    buf << s.rdbuf();
    VolumeHeader h = parse_volume_header(buf.str(), detail::sidecar_path(vol_path));

    std::ifstream f(vol_path, std::ios::binary | std::ios::ate);
    require(bool(f), "read_volume: cannot open " + vol_path);
    const int64_t actual = f.tellg();
    require(actual == h.payload_bytes(),
            "read_volume: " + vol_path + " has " + std::to_string(actual) + " bytes, header implies " +
                std::to_string(h.payload_bytes()));
    f.seekg(0);
    std::vector<char> payload(static_cast<size_t>(actual));
    f.read(payload.data(), actual);
    require(f.gcount() == actual, "read_volume: short read on " + vol_path);

    Tensor<T> t({h.channels, h.dims[0], h.dims[1], h.dims[2]});
    const int64_t n = t.size();
    switch (h.dtype) {
        case VolumeDtype::f32: {
            const auto* in = reinterpret_cast<const float*>(payload.data());
            for (int64_t i = 0; i < n; ++i) t[i] = static_cast<T>(in[i]);
            break;
        }
        case VolumeDtype::f64: {
            const auto* in = reinterpret_cast<const double*>(payload.data());
            for (int64_t i = 0; i < n; ++i) t[i] = static_cast<T>(in[i]);
            break;
        }
        case VolumeDtype::u8: {
            const auto* in = reinterpret_cast<const uint8_t*>(payload.data());
            for (int64_t i = 0; i < n; ++i) t[i] = static_cast<T>(in[i]);
            break;
        }
    }
    return {std::move(t), h};
}

// Labels reader with range validation; the sidecar does not carry K, so the
// caller supplies it.
template <typename T>
Tensor<T> read_labels(const std::string& vol_path, int64_t K) {
    auto [t, h] = read_volume<T>(vol_path);
    require(h.role == VolumeRole::labels,
            "read_labels: " + vol_path + " has role " + role_name(h.role) + ", expected labels");
    require(h.channels == 1, "read_labels: labels must be single-channel");
    for (int64_t i = 0; i < t.size(); ++i) {
        const double v = static_cast<double>(t[i]);
        require(v == std::floor(v) && v >= 0 && v < double(K),
                "read_labels: " + vol_path + " contains value " + std::to_string(v) +
                    " outside [0," + std::to_string(K) + ")");
    }
    return t;
}

// [1,D,H,W] integer labels -> [K,D,H,W] indicator.
template <typename T>
Tensor<T> one_hot(const Tensor<T>& labels, int64_t K) {
    require(labels.rank() == 4 && labels.dim(0) == 1,
            "one_hot: expected [1,D,H,W], got " + shape_str(labels.dims()));
    Tensor<T> out({K, labels.dim(1), labels.dim(2), labels.dim(3)});
    const int64_t spatial = labels.size();
    for (int64_t i = 0; i < spatial; ++i) {
        const double v = static_cast<double>(labels[i]);
        require(v == std::floor(v) && v >= 0 && v < double(K),
                "one_hot: label " + std::to_string(v) + " outside [0," + std::to_string(K) + ")");
        out[static_cast<int64_t>(v) * spatial + i] = T(1);
    }
    return out;
}

// [K,D,H,W] scores/probabilities -> [1,D,H,W] argmax; ties go to the lowest
// class index.
template <typename T>
Tensor<T> argmax_labels(const Tensor<T>& probs) {
    require(probs.rank() == 4 && probs.dim(0) >= 1,
            "argmax_labels: expected [K,D,H,W], got " + shape_str(probs.dims()));
    const int64_t K = probs.dim(0);
    const int64_t spatial = probs.size() / K;
    Tensor<T> out({1, probs.dim(1), probs.dim(2), probs.dim(3)});
    for (int64_t i = 0; i < spatial; ++i) {
        int64_t best = 0;
        T best_v = probs[i];
        for (int64_t k = 1; k < K; ++k) {
            const T v = probs[k * spatial + i];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        out[i] = static_cast<T>(best);
    }
    return out;
}

} // namespace mrfuse

#endif
