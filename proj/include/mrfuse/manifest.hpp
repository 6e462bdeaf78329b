#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mrfuse {

// FNV-1a over raw bytes; stable across platforms, good enough for
// change-detection of run outputs (not cryptographic).
uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t hash_file(const std::string& path);
std::string hash_hex(uint64_t h);

// Records what a CLI run produced: command line, resolved config,
// output files with content hashes. Serialized as JSON next to the outputs.
class RunManifest {
public:
    RunManifest(std::string command, std::vector<std::string> argv);

    void set_config(const std::map<std::string, std::string>& kv);
    void add_output(const std::string& path);  // hashes the file now
    void add_note(const std::string& key, const std::string& value);

    std::string to_json() const;
    void save(const std::string& path) const;

private:
    std::string command_;
    std::vector<std::string> argv_;
    std::map<std::string, std::string> config_;
    std::vector<std::pair<std::string, std::string>> outputs_;  // path, hash
    std::vector<std::pair<std::string, std::string>> notes_;
};

} // namespace mrfuse
