#ifndef LTX_CONFIG_HPP
#define LTX_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ltx {

// Flat sectioned key=value settings. Keys are stored as "section.key".
//
//   # comment
//   include = base.cfg        (relative to the including file)
//   [model]
//   topology = rna
//
// Later assignments override earlier ones, including those pulled in by an
// include.
class ConfigMap {
 public:
  static ConfigMap parse(std::string_view text, const std::filesystem::path& base_dir = {});
  static ConfigMap load(const std::filesystem::path& file);

  // Canonical text: one "key = value" line per entry, sorted by key.
  std::string serialize() const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  std::optional<std::string> find(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& key, long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key) const;

  // Required variants throw ConfigError naming the key when missing.
  std::string require_string(const std::string& key) const;

  // Keys under "prefix." with the prefix stripped.
  ConfigMap section(const std::string& prefix) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  void parse_into(std::string_view text, const std::filesystem::path& base_dir, int depth);
  std::map<std::string, std::string> values_;
};

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace ltx

#endif  // LTX_CONFIG_HPP
