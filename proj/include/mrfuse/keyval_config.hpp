#ifndef MRFUSE_KEYVAL_CONFIG_HPP
#define MRFUSE_KEYVAL_CONFIG_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mrfuse {

// key=value text config, one pair per line, '#' comments. Flags override file
// values, so commands merge: defaults < file < explicit flags.
class KeyValConfig {
public:
    KeyValConfig() = default;

    static KeyValConfig load(const std::string& path);
    static KeyValConfig parse(const std::string& text, const std::string& origin = "");

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;

    const std::map<std::string, std::string>& entries() const { return values_; }
    std::string serialize() const;

private:
    std::map<std::string, std::string> values_;
};

std::vector<std::string> split(const std::string& s, char sep);

} // namespace mrfuse

#endif
