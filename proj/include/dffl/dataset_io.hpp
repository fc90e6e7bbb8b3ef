#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "dffl/error.hpp"
#include "dffl/model.hpp"
#include "dffl/text.hpp"

namespace dffl {

// CSV fixture: header row, feature columns, then an integer `label` column.
inline void write_dataset_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (std::size_t f = 0; f < data.n_features; ++f) out << 'f' << f << ',';
  out << "label\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.row(i)) out << format_double(v) << ',';
    out << data.labels[i] << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

// class_count defaults to max(label) + 1.
inline Dataset read_dataset_csv(const std::filesystem::path& path,
                                std::optional<std::size_t> class_count = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + ": missing header");
  auto header = split(trim_cr(line), ',');
  if (header.empty() || header.back() != "label") {
    throw ValidationError(path.string() + ": last column must be 'label'");
  }
  Dataset data;
  data.n_features = header.size() - 1;
  std::size_t row = 1;
  std::size_t max_label = 0;
  while (std::getline(in, line)) {
    ++row;
    auto view = trim_cr(line);
    if (view.empty()) continue;
    auto cells = split(view, ',');
    std::string where = path.string() + ":" + std::to_string(row);
    if (cells.size() != header.size()) throw ValidationError(where + ": wrong column count");
    for (std::size_t f = 0; f < data.n_features; ++f) data.features.push_back(parse_double(cells[f], where));
    auto label = parse_int(cells.back(), where);
    if (label < 0) throw ValidationError(where + ": negative label");
    data.labels.push_back(static_cast<std::size_t>(label));
    max_label = std::max(max_label, static_cast<std::size_t>(label));
  }
  data.class_count = class_count.value_or(data.labels.empty() ? 1 : max_label + 1);
  data.validate();
  return data;
}

}  // namespace dffl
