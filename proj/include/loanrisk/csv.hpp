#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace loanrisk {

/// A header row plus string cells. Quoted cells ("a,b", "say ""hi""") are supported.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(std::string_view name) const;
  /// Throws DataError naming `source` when the column is missing.
  std::size_t require_column(std::string_view name, std::string_view source = "csv") const;
};

/// Throws FormatError with the line number on ragged rows or unterminated quotes.
CsvTable read_csv(std::istream& in, std::string_view source = "csv");
CsvTable read_csv_file(const std::string& path);

/// Quotes a cell only when it contains a delimiter, quote or newline.
std::string csv_escape(std::string_view cell);

}  // namespace loanrisk
