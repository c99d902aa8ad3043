#include "loanrisk/csv.hpp"

#include <fstream>
#include <istream>

#include "loanrisk/errors.hpp"

namespace loanrisk {
namespace {

// Splits one logical record; may consume further physical lines for quoted newlines.
bool next_record(std::istream& in, std::vector<std::string>& cells, std::size_t& line, std::string_view source) {
  std::string text;
  if (!std::getline(in, text)) return false;
  ++line;
  const std::size_t first_line = line;
  cells.clear();
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0;; ++i) {
    if (i == text.size()) {
      if (!quoted) break;
      std::string more;
      if (!std::getline(in, more))
        throw FormatError(std::string(source) + ": unterminated quote starting at line " + std::to_string(first_line));
      ++line;
      cell.push_back('\n');
      text += more;
      --i;
      continue;
    }
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cell.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (c != '\r' || i + 1 != text.size()) {
      cell.push_back(c);
    }
  }
  cells.push_back(std::move(cell));
  return true;
}

}  // namespace

std::optional<std::size_t> CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  return std::nullopt;
}

std::size_t CsvTable::require_column(std::string_view name, std::string_view source) const {
  if (auto c = column(name)) return *c;
  throw DataError(std::string(source) + ": missing column '" + std::string(name) + "'");
}

CsvTable read_csv(std::istream& in, std::string_view source) {
  CsvTable t;
  std::size_t line = 0;
  if (!next_record(in, t.header, line, source)) throw FormatError(std::string(source) + ": empty file, no header");
  std::vector<std::string> cells;
  while (next_record(in, cells, line, source)) {
    if (cells.size() == 1 && cells[0].empty()) continue;
    if (cells.size() != t.header.size())
      throw FormatError(std::string(source) + ": line " + std::to_string(line) + " has " +
                        std::to_string(cells.size()) + " cells, header has " + std::to_string(t.header.size()));
    t.rows.push_back(cells);
  }
  return t;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_csv(in, path);
}

std::string csv_escape(std::string_view cell) {
  if (cell.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(cell);
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace loanrisk
