#pragma once

#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bmfact::csv {

/// Splits one CSV record. Supports double-quoted fields with embedded
/// commas and doubled quotes; no multi-line fields.
inline std::vector<std::string> split_record(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t p = 0; p < line.size(); ++p) {
    const char c = line[p];
    if (quoted) {
      if (c == '"') {
        if (p + 1 < line.size() && line[p + 1] == '"') {
          cur.push_back('"');
          ++p;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  if (quoted) throw std::invalid_argument("csv: unterminated quote in record: " + line);
  fields.push_back(cur);
  return fields;
}

inline std::string escape_field(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += '"';
  return out;
}

/// Reads all records; first record is the header. Skips blank lines.
inline std::vector<std::vector<std::string>> read_records(std::istream& in) {
  std::vector<std::vector<std::string>> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    records.push_back(split_record(line));
  }
  return records;
}

inline void write_record(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t j = 0; j < fields.size(); ++j) {
    if (j) out << ',';
    out << escape_field(fields[j]);
  }
  out << '\n';
}

}  // namespace bmfact::csv
