// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value configuration text: one entry per line, '#' starts a
// comment, surrounding whitespace is ignored.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sbt {

class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::string_view text);
  static KeyValues load(const std::string& path);

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return values_; }

  /// Overlays `other` on top of this (other wins).
  void merge(const KeyValues& other);

  /// Throws std::invalid_argument naming the first key not in `allowed`.
  void reject_unknown(const std::vector<std::string>& allowed) const;

  /// Sorted "key=value\n" lines.
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

double parse_double(const std::string& key, const std::string& text);
std::int64_t parse_int(const std::string& key, const std::string& text);
std::uint64_t parse_uint(const std::string& key, const std::string& text);
bool parse_bool(const std::string& key, const std::string& text);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double value);
/// Shortest decimal text that parses back to the same float.
std::string format_float(float value);

}  // namespace sbt
