/*
 * Copyright 2026 The microdet Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#ifndef MICRODET_INI_HPP
#define MICRODET_INI_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "microdet/error.hpp"

namespace microdet {

/// Flat INI document: `[section]` headers, `key = value` lines, `#` or `;`
/// comment lines. Sections and keys keep their first-seen order.
class IniDocument {
 public:
  static IniDocument parse(const std::string& text, const std::string& source);
  static IniDocument load(const std::filesystem::path& path);

  bool has(const std::string& section, const std::string& key) const;
  std::optional<std::string> get(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& section, const std::string& key, int fallback) const;
  long long get_int64(const std::string& section, const std::string& key, long long fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  void set(const std::string& section, const std::string& key, const std::string& value);

  std::vector<std::string> sections() const;
  std::vector<std::string> keys(const std::string& section) const;

  /// Throws ConfigError naming the first section or `section.key` not listed.
  void require_known(const std::map<std::string, std::set<std::string>>& allowed) const;

  std::string to_string() const;

 private:
  struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;
  };
  const Section* find(const std::string& name) const;
  Section& section(const std::string& name);

  std::string source_;
  std::vector<Section> sections_;
};

/// Shortest decimal text that parses back to exactly `v`.
std::string ini_number(double v);

}  // namespace microdet

#endif  // MICRODET_INI_HPP
