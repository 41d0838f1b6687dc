#pragma once

// Key/value config plumbing shared by the model configs, checkpoint echoes
// and the CLI's sectioned config files.

#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace discon {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Flat, ordered key -> value map. Ordering makes the text form canonical.
class KeyValues {
 public:
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, const char* value) { values_[key] = value; }
  void set(const std::string& key, double value);
  void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, long value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, std::uint64_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;

  // Typed reads; the fallback is used when the key is absent.
  std::string str(const std::string& key, const std::string& fallback) const;
  double real(const std::string& key, double fallback) const;
  int integer(const std::string& key, int fallback) const;
  std::uint64_t u64(const std::string& key, std::uint64_t fallback) const;
  bool boolean(const std::string& key, bool fallback) const;
  std::vector<int> int_list(const std::string& key, const std::vector<int>& fallback) const;
  std::vector<double> real_list(const std::string& key, const std::vector<double>& fallback) const;

  // Keys under `prefix.` with the prefix stripped.
  KeyValues section(const std::string& prefix) const;
  void merge(const std::string& prefix, const KeyValues& other);

  const std::map<std::string, std::string>& items() const { return values_; }
  std::string to_text() const;
  static KeyValues from_text(const std::string& text);

  friend bool operator==(const KeyValues&, const KeyValues&) = default;

 private:
  std::map<std::string, std::string> values_;
};

std::string format_real(double v);
std::string join_ints(const std::vector<int>& v, char sep = ',');
std::string join_reals(const std::vector<double>& v, char sep = ',');

// Sectioned file ("[section]" headers, "key = value" lines, '#' comments)
// flattened to "section.key". Parsed with boost::property_tree's INI reader.
KeyValues read_config_file(const std::filesystem::path& path);
KeyValues parse_config(const std::string& text);

// Throws ConfigError naming the first key not in `known`.
void require_known_keys(const KeyValues& kv, const std::set<std::string>& known);

}  // namespace discon
