#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace keygate {

// Sectioned key-value config files:
//
//   # comment
//   [section]
//   key = value
//
// Readers mark keys as consumed; check_consumed() then rejects anything
// unknown, so typos fail loudly instead of silently using defaults.
class KeyValueFile {
 public:
  KeyValueFile() = default;

  static KeyValueFile load(const std::string& path);
  static KeyValueFile from_string(const std::string& text);
  void save(const std::string& path) const;
  std::string to_string() const;

  bool has(const std::string& section, const std::string& key) const;

  // Typed getters; the _or forms return the fallback when absent. All mark
  // the key consumed. Throws std::runtime_error on malformed values.
  std::string get_string(const std::string& section, const std::string& key) const;
  std::string get_string_or(const std::string& section, const std::string& key,
                            const std::string& fallback) const;
  std::int64_t get_int_or(const std::string& section, const std::string& key,
                          std::int64_t fallback) const;
  std::uint64_t get_uint_or(const std::string& section, const std::string& key,
                            std::uint64_t fallback) const;
  double get_double_or(const std::string& section, const std::string& key,
                       double fallback) const;  // accepts "inf"
  bool get_bool_or(const std::string& section, const std::string& key,
                   bool fallback) const;
  // comma-separated values
  std::vector<std::string> get_list_or(const std::string& section,
                                       const std::string& key,
                                       const std::vector<std::string>& fallback) const;

  void set(const std::string& section, const std::string& key,
           const std::string& value);
  void set_double(const std::string& section, const std::string& key, double value);
  void set_int(const std::string& section, const std::string& key, std::int64_t value);

  // Throws std::runtime_error naming the first key never consumed by a getter.
  void check_consumed() const;

 private:
  struct Entry {
    std::string value;
    mutable bool consumed = false;
  };
  // section -> key -> entry; std::map keeps serialization stable
  std::map<std::string, std::map<std::string, Entry>> sections_;

  const Entry* find(const std::string& section, const std::string& key) const;
};

}  // namespace keygate
