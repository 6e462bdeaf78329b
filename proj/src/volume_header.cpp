#include "mrfuse/volume_header.hpp"

#include <sstream>

#include "mrfuse/common.hpp"

namespace mrfuse {

size_t VolumeHeader::element_size() const {
    switch (dtype) {
    case VolumeDtype::f32: return 4;
    case VolumeDtype::f64: return 8;
    case VolumeDtype::u8: return 1;
    }
    return 0;
}

std::string dtype_name(VolumeDtype t) {
    switch (t) {
    case VolumeDtype::f32: return "f32";
    case VolumeDtype::f64: return "f64";
    case VolumeDtype::u8: return "u8";
    }
    return "?";
}

std::string role_name(VolumeRole r) {
    switch (r) {
    case VolumeRole::intensity: return "intensity";
    case VolumeRole::labels: return "labels";
    case VolumeRole::probabilities: return "probabilities";
    }
    return "?";
}

VolumeDtype parse_dtype(const std::string& s) {
    if (s == "f32") return VolumeDtype::f32;
    if (s == "f64") return VolumeDtype::f64;
    if (s == "u8") return VolumeDtype::u8;
    fail("unknown element type '" + s + "' (expected f32|f64|u8)");
}

VolumeRole parse_role(const std::string& s) {
    if (s == "intensity") return VolumeRole::intensity;
    if (s == "labels") return VolumeRole::labels;
    if (s == "probabilities") return VolumeRole::probabilities;
    fail("unknown volume role '" + s + "' (expected intensity|labels|probabilities)");
}

std::string serialize_volume_header(const VolumeHeader& h) {
    std::ostringstream os;
    os << "dims=" << h.dims[0] << "," << h.dims[1] << "," << h.dims[2] << "\n";
    os << "channels=" << h.channels << "\n";
    os << "dtype=" << dtype_name(h.dtype) << "\n";
    os << "voxel_mm=" << h.voxel_mm[0] << "," << h.voxel_mm[1] << "," << h.voxel_mm[2] << "\n";
    os << "role=" << role_name(h.role) << "\n";
    return os.str();
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

template <typename Num>
void parse_triple(const std::string& value, std::array<Num, 3>& out, const std::string& key) {
    std::istringstream is(value);
    std::string part;
    for (int i = 0; i < 3; ++i) {
        require(bool(std::getline(is, part, ',')), "volume header: " + key + " needs 3 comma-separated values");
        std::istringstream ps(trim(part));
        ps >> out[static_cast<size_t>(i)];
        require(!ps.fail(), "volume header: bad number in " + key + ": '" + part + "'");
    }
}

} // namespace

VolumeHeader parse_volume_header(const std::string& text, const std::string& origin) {
    VolumeHeader h;
    bool saw_dims = false;
    std::istringstream is(text);
    std::string line;
    const std::string where = origin.empty() ? "" : " in " + origin;
    while (std::getline(is, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        require(eq != std::string::npos, "volume header: malformed line '" + line + "'" + where);
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key == "dims") {
            parse_triple(value, h.dims, key);
            saw_dims = true;
        } else if (key == "channels") {
            h.channels = std::stoll(value);
        } else if (key == "dtype") {
            h.dtype = parse_dtype(value);
        } else if (key == "voxel_mm") {
            parse_triple(value, h.voxel_mm, key);
        } else if (key == "role") {
            h.role = parse_role(value);
        } else {
            fail("volume header: unknown key '" + key + "'" + where);
        }
    }
    require(saw_dims, "volume header: missing dims" + where);
    require(h.dims[0] >= 1 && h.dims[1] >= 1 && h.dims[2] >= 1,
            "volume header: dims must be >= 1" + where);
    require(h.channels >= 1, "volume header: channels must be >= 1" + where);
    return h;
}

} // namespace mrfuse
