#include "mrfuse/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "mrfuse/common.hpp"

namespace mrfuse {

CsvWriter::CsvWriter(std::vector<std::string> columns) : columns_(std::move(columns)) {
    require(!columns_.empty(), "CsvWriter: need at least one column");
}

CsvWriter& CsvWriter::begin_row() {
    require(!in_row_ || cells_in_row_ == columns_.size(),
            "CsvWriter: previous row has " + std::to_string(cells_in_row_) + " of " +
                std::to_string(columns_.size()) + " cells");
    if (in_row_) body_ += '\n';
    in_row_ = true;
    cells_in_row_ = 0;
    return *this;
}

CsvWriter& CsvWriter::cell(const std::string& value) {
    require(in_row_, "CsvWriter: cell() before begin_row()");
    require(cells_in_row_ < columns_.size(), "CsvWriter: too many cells in row");
    if (cells_in_row_ > 0) body_ += ',';
    body_ += value;
    ++cells_in_row_;
    return *this;
}

CsvWriter& CsvWriter::cell(double value) { return cell(format_double(value)); }

CsvWriter& CsvWriter::cell(int64_t value) { return cell(std::to_string(value)); }

std::string CsvWriter::format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string CsvWriter::str() const {
    std::string out;
    for (size_t i = 0; i < columns_.size(); ++i) {
        if (i) out += ',';
        out += columns_[i];
    }
    out += '\n';
    out += body_;
    if (!body_.empty()) out += '\n';
    return out;
}

void CsvWriter::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    require(bool(f), "CsvWriter: cannot open " + path + " for writing");
    const std::string s = str();
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
    require(bool(f), "CsvWriter: write failed for " + path);
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream f(path);
    require(bool(f), "read_csv: cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(cell);
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace mrfuse
