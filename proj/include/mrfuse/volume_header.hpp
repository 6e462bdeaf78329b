#ifndef MRFUSE_VOLUME_HEADER_HPP
#define MRFUSE_VOLUME_HEADER_HPP

#include <array>
#include <cstdint>
#include <string>

namespace mrfuse {

enum class VolumeDtype { f32, f64, u8 };
enum class VolumeRole { intensity, labels, probabilities };

// Text sidecar (<name>.volh) describing a raw payload (<name>.vol).
// Key=value lines: dims=D,H,W  channels=C  dtype=f32|f64|u8
// voxel_mm=a,b,c  role=intensity|labels|probabilities
struct VolumeHeader {
    std::array<int64_t, 3> dims{0, 0, 0}; // D,H,W
    int64_t channels = 1;
    VolumeDtype dtype = VolumeDtype::f32;
    std::array<double, 3> voxel_mm{1.0, 1.0, 1.0};
    VolumeRole role = VolumeRole::intensity;

    int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    size_t element_size() const;
    int64_t payload_bytes() const { return voxel_count() * channels * int64_t(element_size()); }
};

std::string dtype_name(VolumeDtype t);
std::string role_name(VolumeRole r);
VolumeDtype parse_dtype(const std::string& s);
VolumeRole parse_role(const std::string& s);

std::string serialize_volume_header(const VolumeHeader& h);
VolumeHeader parse_volume_header(const std::string& text, const std::string& origin = "");

} // namespace mrfuse

#endif
