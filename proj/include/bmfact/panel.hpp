#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "bmfact/csv.hpp"
#include "bmfact/types.hpp"

namespace bmfact {

/// Observed count tensor over (population, year, age) with exposures and an
/// observation mask. Cells with mask=false carry count 0 and contribute no
/// likelihood; they stand in for missing or held-out data.
struct CountPanel {
  std::vector<CountMatrix> counts;   // per population, years x ages
  std::vector<Matrix> offsets;       // same layout, strictly positive
  std::vector<BoolArray> mask;       // true = observed
  std::vector<std::string> population_labels;
  std::vector<int> year_labels;  // strictly increasing, unit spacing
  std::vector<int> age_labels;   // strictly increasing

  Index n_populations() const { return static_cast<Index>(counts.size()); }
  Index n_years() const { return counts.empty() ? 0 : counts.front().rows(); }
  Index n_ages() const { return counts.empty() ? 0 : counts.front().cols(); }

  Index n_observed() const {
    Index n = 0;
    for (const auto& m : mask) n += m.count();
    return n;
  }

  void validate() const {
    const Index n = n_populations();
    if (n == 0) throw std::invalid_argument("panel: no populations");
    if (offsets.size() != counts.size() || mask.size() != counts.size())
      throw std::invalid_argument("panel: counts/offsets/mask population counts differ");
    if (static_cast<Index>(population_labels.size()) != n)
      throw std::invalid_argument("panel: population label count mismatch");
    const Index t = n_years(), a = n_ages();
    if (static_cast<Index>(year_labels.size()) != t)
      throw std::invalid_argument("panel: year label count mismatch");
    if (static_cast<Index>(age_labels.size()) != a)
      throw std::invalid_argument("panel: age label count mismatch");
    for (std::size_t k = 1; k < year_labels.size(); ++k)
      if (year_labels[k] != year_labels[k - 1] + 1)
        throw std::invalid_argument("panel: year labels must increase with unit spacing");
    for (std::size_t k = 1; k < age_labels.size(); ++k)
      if (age_labels[k] <= age_labels[k - 1])
        throw std::invalid_argument("panel: age labels must be strictly increasing");
    for (Index i = 0; i < n; ++i) {
      if (counts[i].rows() != t || counts[i].cols() != a || offsets[i].rows() != t ||
          offsets[i].cols() != a || mask[i].rows() != t || mask[i].cols() != a)
        throw std::invalid_argument("panel: inconsistent tensor dimensions");
      if ((counts[i].array() < 0).any())
        throw std::invalid_argument("panel: negative count");
      if (!(offsets[i].array() > 0).all())
        throw std::invalid_argument("panel: nonpositive offset");
    }
  }

  /// Restricts to year indices [first, first+length).
  CountPanel slice_years(Index first, Index length) const {
    if (first < 0 || length < 1 || first + length > n_years())
      throw std::invalid_argument("panel: year slice out of range");
    CountPanel out;
    out.population_labels = population_labels;
    out.age_labels = age_labels;
    out.year_labels.assign(year_labels.begin() + first, year_labels.begin() + first + length);
    const Index n = n_populations(), a = n_ages();
    out.counts.reserve(n);
    out.offsets.reserve(n);
    out.mask.reserve(n);
    for (Index i = 0; i < n; ++i) {
      out.counts.push_back(counts[i].middleRows(first, length));
      out.offsets.push_back(offsets[i].middleRows(first, length));
      out.mask.push_back(mask[i].middleRows(first, length));
    }
    return out;
  }
};

enum class LogTransform { log1p };

/// Elementwise log(1 + y) view of a CountPanel.
struct LogPanel {
  std::vector<Matrix> values;  // per population, years x ages
  std::vector<BoolArray> mask;
  LogTransform transform_tag = LogTransform::log1p;

  Index n_populations() const { return static_cast<Index>(values.size()); }
  Index n_years() const { return values.empty() ? 0 : values.front().rows(); }
  Index n_ages() const { return values.empty() ? 0 : values.front().cols(); }
};

inline LogPanel to_log_panel(const CountPanel& panel) {
  LogPanel out;
  out.mask = panel.mask;
  out.values.reserve(panel.counts.size());
  for (const auto& y : panel.counts)
    out.values.push_back((y.cast<double>().array() + 1.0).log().matrix());
  return out;
}

inline double log1p_count(std::int64_t y) { return std::log1p(static_cast<double>(y)); }

/// Column-name mapping from a CSV file to panel roles. The population key is
/// the concatenation of the named grouping columns.
struct PanelSchema {
  std::vector<std::string> population_columns{"population"};
  std::string year_column = "year";
  std::string age_column = "age";
  std::string count_column = "count";
  std::string offset_column = "offset";  // optional in the file
  std::string key_separator = "|";
};

namespace detail {

inline int parse_int_field(const std::string& s, const char* what) {
  int v = 0;
  const auto* first = s.data();
  const auto* last = first + s.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last)
    throw std::invalid_argument(std::string("panel: field '") + what + "' is not an integer: " + s);
  return v;
}

inline std::int64_t parse_count_field(const std::string& s) {
  std::int64_t v = 0;
  const auto* first = s.data();
  const auto* last = first + s.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last)
    throw std::invalid_argument("panel: count is not a non-negative integer: " + s);
  if (v < 0) throw std::invalid_argument("panel: negative count: " + s);
  return v;
}

}  // namespace detail

/// Loads a long-format CSV into a dense panel over the cross product of the
/// observed label sets. Rows absent from the file become mask=false cells
/// with count 0. Without an offset column all offsets are 1.
inline CountPanel load_panel(std::istream& in, const PanelSchema& schema = {}) {
  const auto records = csv::read_records(in);
  if (records.empty()) throw std::invalid_argument("panel: empty CSV");
  const auto& header = records.front();
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t j = 0; j < header.size(); ++j) col[header[j]] = j;

  auto need = [&](const std::string& name) {
    const auto it = col.find(name);
    if (it == col.end()) throw std::invalid_argument("panel: missing column '" + name + "'");
    return it->second;
  };
  std::vector<std::size_t> pop_cols;
  for (const auto& c : schema.population_columns) pop_cols.push_back(need(c));
  const std::size_t year_col = need(schema.year_column);
  const std::size_t age_col = need(schema.age_column);
  const std::size_t count_col = need(schema.count_column);
  const bool has_offset = col.count(schema.offset_column) > 0;
  const std::size_t offset_col = has_offset ? col[schema.offset_column] : 0;

  struct Record {
    std::size_t pop;
    int year, age;
    std::int64_t count;
    double offset;
  };
  std::vector<Record> rows;
  rows.reserve(records.size() - 1);
  std::vector<std::string> pop_labels;
  std::unordered_map<std::string, std::size_t> pop_index;
  std::map<int, Index> year_set, age_set;

  for (std::size_t rix = 1; rix < records.size(); ++rix) {
    const auto& rec = records[rix];
    if (rec.size() != header.size())
      throw std::invalid_argument("panel: row " + std::to_string(rix + 1) + " has " +
                                  std::to_string(rec.size()) + " fields, header has " +
                                  std::to_string(header.size()));
    std::string key;
    for (std::size_t k = 0; k < pop_cols.size(); ++k) {
      if (k) key += schema.key_separator;
      key += rec[pop_cols[k]];
    }
    auto [it, inserted] = pop_index.try_emplace(key, pop_labels.size());
    if (inserted) pop_labels.push_back(key);
    Record r;
    r.pop = it->second;
    r.year = detail::parse_int_field(rec[year_col], "year");
    r.age = detail::parse_int_field(rec[age_col], "age");
    r.count = detail::parse_count_field(rec[count_col]);
    r.offset = has_offset ? std::stod(rec[offset_col]) : 1.0;
    if (!(r.offset > 0.0))
      throw std::invalid_argument("panel: nonpositive offset at (" + key + ", " +
                                  std::to_string(r.year) + ", " + std::to_string(r.age) + ")");
    year_set.emplace(r.year, 0);
    age_set.emplace(r.age, 0);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw std::invalid_argument("panel: no data rows");

  CountPanel panel;
  panel.population_labels = std::move(pop_labels);
  Index next = 0;
  for (auto& [year, idx] : year_set) {
    panel.year_labels.push_back(year);
    idx = next++;
  }
  next = 0;
  for (auto& [age, idx] : age_set) {
    panel.age_labels.push_back(age);
    idx = next++;
  }

  const Index n = static_cast<Index>(panel.population_labels.size());
  const Index t = static_cast<Index>(panel.year_labels.size());
  const Index a = static_cast<Index>(panel.age_labels.size());
  panel.counts.assign(n, CountMatrix::Zero(t, a));
  panel.offsets.assign(n, Matrix::Ones(t, a));
  panel.mask.assign(n, BoolArray::Constant(t, a, false));

  for (const auto& r : rows) {
    const Index i = static_cast<Index>(r.pop);
    const Index ti = year_set.at(r.year);
    const Index xi = age_set.at(r.age);
    if (panel.mask[i](ti, xi))
      throw std::invalid_argument("panel: duplicate cell (" + panel.population_labels[r.pop] +
                                  ", " + std::to_string(r.year) + ", " + std::to_string(r.age) +
                                  ")");
    panel.counts[i](ti, xi) = r.count;
    panel.offsets[i](ti, xi) = r.offset;
    panel.mask[i](ti, xi) = true;
  }
  panel.validate();
  return panel;
}

/// Writes observed cells back in load_panel's long format; masked cells are
/// omitted so a save/load round trip reproduces the panel exactly. The
/// offset column is emitted only when some offset differs from 1.
inline void save_panel(const CountPanel& panel, std::ostream& out) {
  bool any_offset = false;
  for (const auto& o : panel.offsets)
    if ((o.array() != 1.0).any()) any_offset = true;
  std::vector<std::string> header{"population", "year", "age", "count"};
  if (any_offset) header.push_back("offset");
  csv::write_record(out, header);
  char buf[64];
  for (Index i = 0; i < panel.n_populations(); ++i) {
    for (Index ti = 0; ti < panel.n_years(); ++ti) {
      for (Index xi = 0; xi < panel.n_ages(); ++xi) {
        if (!panel.mask[i](ti, xi)) continue;
        std::vector<std::string> rec{panel.population_labels[i],
                                     std::to_string(panel.year_labels[ti]),
                                     std::to_string(panel.age_labels[xi]),
                                     std::to_string(panel.counts[i](ti, xi))};
        if (any_offset) {
          std::snprintf(buf, sizeof(buf), "%.17g", panel.offsets[i](ti, xi));
          rec.emplace_back(buf);
        }
        csv::write_record(out, rec);
      }
    }
  }
}

}  // namespace bmfact
