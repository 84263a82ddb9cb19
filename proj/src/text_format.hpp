#ifndef ESPRUNE_SRC_TEXT_FORMAT_HPP_
#define ESPRUNE_SRC_TEXT_FORMAT_HPP_

// Helpers shared by the line-oriented document readers and writers.

#include <charconv>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "esprune/arch.hpp"

namespace esprune::text {

inline std::string join_ints(const std::vector<int>& values) {
  if (values.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

inline int parse_int(std::string_view text, std::string_view what) {
  int value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw FormatError("bad integer '" + std::string(text) + "' for " +
                      std::string(what));
  }
  return value;
}

inline std::vector<int> split_ints(std::string_view text, std::string_view what) {
  std::vector<int> out;
  if (text == "-") return out;
  while (true) {
    const auto comma = text.find(',');
    out.push_back(parse_int(text.substr(0, comma), what));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

// Reads the next non-blank, non-comment line.
inline bool next_line(std::istream& is, std::string& line) {
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    return true;
  }
  return false;
}

inline std::istringstream expect_record(std::istream& is, std::string_view key) {
  std::string line;
  if (!next_line(is, line)) {
    throw FormatError("unexpected end of document, expected '" +
                      std::string(key) + "'");
  }
  std::istringstream record(line);
  std::string word;
  record >> word;
  if (word != key) {
    throw FormatError("expected '" + std::string(key) + "', found '" + word + "'");
  }
  return record;
}

inline std::string_view field_value(const std::string& token, std::string_view key) {
  const std::string_view view(token);
  if (view.size() <= key.size() || view.substr(0, key.size()) != key ||
      view[key.size()] != '=') {
    throw FormatError("expected field '" + std::string(key) + "' in '" + token +
                      "'");
  }
  return view.substr(key.size() + 1);
}

}  // namespace esprune::text

#endif  // ESPRUNE_SRC_TEXT_FORMAT_HPP_
