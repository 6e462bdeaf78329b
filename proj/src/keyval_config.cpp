#include "mrfuse/keyval_config.hpp"

#include <fstream>
#include <sstream>

#include "mrfuse/common.hpp"

namespace mrfuse {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, sep)) parts.push_back(trim(part));
    return parts;
}

KeyValConfig KeyValConfig::load(const std::string& path) {
    std::ifstream f(path);
    require(bool(f), "config: cannot open " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return parse(buf.str(), path);
}

KeyValConfig KeyValConfig::parse(const std::string& text, const std::string& origin) {
    KeyValConfig cfg;
    std::istringstream is(text);
    std::string line;
    const std::string where = origin.empty() ? "" : " in " + origin;
    while (std::getline(is, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        require(eq != std::string::npos, "config: malformed line '" + line + "'" + where);
        cfg.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return cfg;
}

std::string KeyValConfig::get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

int64_t KeyValConfig::get_int(const std::string& key, int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stoll(it->second);
    } catch (const std::exception&) {
        fail("config: key '" + key + "' has non-integer value '" + it->second + "'");
    }
}

double KeyValConfig::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        fail("config: key '" + key + "' has non-numeric value '" + it->second + "'");
    }
}

std::vector<double> KeyValConfig::get_doubles(const std::string& key, const std::vector<double>& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const auto& part : split(it->second, ',')) {
        try {
            out.push_back(std::stod(part));
        } catch (const std::exception&) {
            fail("config: key '" + key + "' has non-numeric entry '" + part + "'");
        }
    }
    return out;
}

std::string KeyValConfig::serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
}

} // namespace mrfuse
