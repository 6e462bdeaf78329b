#include "mrfuse/manifest.hpp"

#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "mrfuse/common.hpp"

namespace mrfuse {

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(bool(f), "manifest: cannot open " + path + " for hashing");
    uint64_t h = 0xcbf29ce484222325ull;
    std::vector<char> buf(1 << 16);
    while (f) {
        f.read(buf.data(), std::streamsize(buf.size()));
        std::streamsize got = f.gcount();
        if (got > 0) h = fnv1a(buf.data(), size_t(got), h);
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    std::ostringstream os;
    os << std::hex;
    for (int shift = 60; shift >= 0; shift -= 4) os << ((h >> shift) & 0xf);
    return os.str();
}

RunManifest::RunManifest(std::string command, std::vector<std::string> argv)
    : command_(std::move(command)), argv_(std::move(argv)) {}

void RunManifest::set_config(const std::map<std::string, std::string>& kv) {
    config_ = kv;
}

void RunManifest::add_output(const std::string& path) {
    outputs_.emplace_back(path, hash_hex(hash_file(path)));
}

void RunManifest::add_note(const std::string& key, const std::string& value) {
    notes_.emplace_back(key, value);
}

std::string RunManifest::to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["argv"] = argv_;
    j["config"] = config_;
    nlohmann::ordered_json outs = nlohmann::ordered_json::array();
    for (const auto& [path, hash] : outputs_) {
        outs.push_back({{"path", path}, {"fnv1a", hash}});
    }
    j["outputs"] = outs;
    if (!notes_.empty()) {
        nlohmann::ordered_json n;
        for (const auto& [k, v] : notes_) n[k] = v;
        j["notes"] = n;
    }
    return j.dump(2) + "\n";
}

void RunManifest::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    require(bool(f), "manifest: cannot write " + path);
    f << to_json();
    require(bool(f), "manifest: write failed for " + path);
}

} // namespace mrfuse
