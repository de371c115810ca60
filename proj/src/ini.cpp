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
#include "microdet/ini.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace microdet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

IniDocument IniDocument::parse(const std::string& text, const std::string& source) {
  IniDocument doc;
  doc.source_ = source;
  std::istringstream in(text);
  std::string raw;
  Section* current = nullptr;
  int line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw ConfigError(source + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line[0] == '[') {
      if (line.back() != ']') fail("unterminated section header");
      const std::string name = trim(line.substr(1, line.size() - 2));
      if (name.empty()) fail("empty section name");
      current = &doc.section(name);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    if (!current) fail("key outside any section");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) fail("empty key");
    for (const auto& [k, v] : current->entries)
      if (k == key) fail("duplicate key " + current->name + "." + key);
    current->entries.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return doc;
}

IniDocument IniDocument::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse(os.str(), path.string());
}

const IniDocument::Section* IniDocument::find(const std::string& name) const {
  for (const auto& s : sections_)
    if (s.name == name) return &s;
  return nullptr;
}

IniDocument::Section& IniDocument::section(const std::string& name) {
  for (auto& s : sections_)
    if (s.name == name) return s;
  sections_.push_back({name, {}});
  return sections_.back();
}

bool IniDocument::has(const std::string& section, const std::string& key) const {
  return get(section, key).has_value();
}

std::optional<std::string> IniDocument::get(const std::string& section, const std::string& key) const {
  const Section* s = find(section);
  if (!s) return std::nullopt;
  for (const auto& [k, v] : s->entries)
    if (k == key) return v;
  return std::nullopt;
}

std::string IniDocument::get_string(const std::string& section, const std::string& key,
                                    const std::string& fallback) const {
  return get(section, key).value_or(fallback);
}

long long IniDocument::get_int64(const std::string& section, const std::string& key, long long fallback) const {
  const auto v = get(section, key);
  if (!v) return fallback;
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v->c_str(), &end, 10);
  if (v->empty() || *end != '\0' || errno == ERANGE) {
    throw ConfigError(section + "." + key + ": expected an integer, got '" + *v + "'");
  }
  return x;
}

int IniDocument::get_int(const std::string& section, const std::string& key, int fallback) const {
  const long long x = get_int64(section, key, fallback);
  if (x < -2147483647LL || x > 2147483647LL) throw ConfigError(section + "." + key + ": integer out of range");
  return static_cast<int>(x);
}

double IniDocument::get_double(const std::string& section, const std::string& key, double fallback) const {
  const auto v = get(section, key);
  if (!v) return fallback;
  char* end = nullptr;
  const double x = std::strtod(v->c_str(), &end);
  if (v->empty() || *end != '\0' || !std::isfinite(x)) {
    throw ConfigError(section + "." + key + ": expected a number, got '" + *v + "'");
  }
  return x;
}

bool IniDocument::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const auto v = get(section, key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "on" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "off" || *v == "no") return false;
  throw ConfigError(section + "." + key + ": expected true or false, got '" + *v + "'");
}

void IniDocument::set(const std::string& sec, const std::string& key, const std::string& value) {
  Section& s = section(sec);
  for (auto& [k, v] : s.entries) {
    if (k == key) {
      v = value;
      return;
    }
  }
  s.entries.emplace_back(key, value);
}

std::vector<std::string> IniDocument::sections() const {
  std::vector<std::string> out;
  for (const auto& s : sections_) out.push_back(s.name);
  return out;
}

std::vector<std::string> IniDocument::keys(const std::string& section) const {
  std::vector<std::string> out;
  if (const Section* s = find(section))
    for (const auto& [k, v] : s->entries) out.push_back(k);
  return out;
}

void IniDocument::require_known(const std::map<std::string, std::set<std::string>>& allowed) const {
  for (const auto& s : sections_) {
    const auto it = allowed.find(s.name);
    if (it == allowed.end()) throw ConfigError(source_ + ": unknown section [" + s.name + "]");
    for (const auto& [k, v] : s.entries) {
      if (!it->second.count(k)) throw ConfigError(source_ + ": unknown key " + s.name + "." + k);
    }
  }
}

std::string ini_number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string IniDocument::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < sections_.size(); ++i) {
    if (i) os << "\n";
    os << "[" << sections_[i].name << "]\n";
    for (const auto& [k, v] : sections_[i].entries) os << k << " = " << v << "\n";
  }
  return os.str();
}

}  // namespace microdet
