#ifndef MRFUSE_CSV_HPP
#define MRFUSE_CSV_HPP

#include <string>
#include <vector>

namespace mrfuse {

// Minimal CSV emitter with a stable number format (shortest round-trip via
// to_chars), so identical runs produce byte-identical files.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> columns);

    const std::vector<std::string>& columns() const { return columns_; }

    CsvWriter& begin_row();
    CsvWriter& cell(const std::string& value);
    CsvWriter& cell(double value);
    CsvWriter& cell(int64_t value);
    CsvWriter& cell(int value) { return cell(static_cast<int64_t>(value)); }

    std::string str() const;
    void save(const std::string& path) const;

    static std::string format_double(double v);

private:
    std::vector<std::string> columns_;
    std::string body_;
    size_t cells_in_row_ = 0;
    bool in_row_ = false;
};

// Tiny reader used by tests and the capacity study to reload emitted tables.
std::vector<std::vector<std::string>> read_csv(const std::string& path);

} // namespace mrfuse

#endif
