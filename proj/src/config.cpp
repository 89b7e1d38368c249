#include "keygate/config.hpp"

#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace keygate {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueFile KeyValueFile::from_string(const std::string& text) {
  KeyValueFile kv;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::runtime_error("config line " + std::to_string(lineno) +
                                 ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": empty key");
    kv.sections_[section][key] = Entry{trim(line.substr(eq + 1)), false};
  }
  return kv;
}

KeyValueFile KeyValueFile::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config file: " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return from_string(buf.str());
}

std::string KeyValueFile::to_string() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& [section, entries] : sections_) {
    if (!first) os << '\n';
    first = false;
    if (!section.empty()) os << '[' << section << "]\n";
    for (const auto& [key, entry] : entries) os << key << " = " << entry.value << '\n';
  }
  return os.str();
}

void KeyValueFile::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write config file: " + path);
  os << to_string();
}

const KeyValueFile::Entry* KeyValueFile::find(const std::string& section,
                                              const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  auto k = s->second.find(key);
  if (k == s->second.end()) return nullptr;
  return &k->second;
}

bool KeyValueFile::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

std::string KeyValueFile::get_string(const std::string& section,
                                     const std::string& key) const {
  const Entry* e = find(section, key);
  if (!e)
    throw std::runtime_error("missing config key [" + section + "] " + key);
  e->consumed = true;
  return e->value;
}

std::string KeyValueFile::get_string_or(const std::string& section,
                                        const std::string& key,
                                        const std::string& fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  e->consumed = true;
  return e->value;
}

std::int64_t KeyValueFile::get_int_or(const std::string& section,
                                      const std::string& key,
                                      std::int64_t fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  e->consumed = true;
  try {
    size_t pos = 0;
    const std::int64_t v = std::stoll(e->value, &pos);
    if (pos != e->value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key [" + section + "] " + key +
                             ": not an integer: " + e->value);
  }
}

std::uint64_t KeyValueFile::get_uint_or(const std::string& section,
                                        const std::string& key,
                                        std::uint64_t fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  e->consumed = true;
  try {
    size_t pos = 0;
    const std::uint64_t v = std::stoull(e->value, &pos);
    if (pos != e->value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key [" + section + "] " + key +
                             ": not an unsigned integer: " + e->value);
  }
}

double KeyValueFile::get_double_or(const std::string& section,
                                   const std::string& key, double fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  e->consumed = true;
  if (e->value == "inf") return std::numeric_limits<double>::infinity();
  try {
    size_t pos = 0;
    const double v = std::stod(e->value, &pos);
    if (pos != e->value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key [" + section + "] " + key +
                             ": not a number: " + e->value);
  }
}

bool KeyValueFile::get_bool_or(const std::string& section, const std::string& key,
                               bool fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  e->consumed = true;
  if (e->value == "true" || e->value == "1") return true;
  if (e->value == "false" || e->value == "0") return false;
  throw std::runtime_error("config key [" + section + "] " + key +
                           ": not a boolean: " + e->value);
}

std::vector<std::string> KeyValueFile::get_list_or(
    const std::string& section, const std::string& key,
    const std::vector<std::string>& fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  e->consumed = true;
  std::vector<std::string> out;
  std::istringstream is(e->value);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void KeyValueFile::set(const std::string& section, const std::string& key,
                       const std::string& value) {
  sections_[section][key] = Entry{value, true};
}

void KeyValueFile::set_double(const std::string& section, const std::string& key,
                              double value) {
  std::ostringstream os;
  os.precision(17);
  os << value;
  set(section, key, os.str());
}

void KeyValueFile::set_int(const std::string& section, const std::string& key,
                           std::int64_t value) {
  set(section, key, std::to_string(value));
}

void KeyValueFile::check_consumed() const {
  for (const auto& [section, entries] : sections_)
    for (const auto& [key, entry] : entries)
      if (!entry.consumed)
        throw std::runtime_error("unknown config key [" + section + "] " + key);
}

}  // namespace keygate
