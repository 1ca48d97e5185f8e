#include "ltx/config.hpp"

#include "ltx/error.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace ltx {

namespace {

std::string_view trim(std::string_view s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::string read_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

ConfigMap ConfigMap::parse(std::string_view text, const std::filesystem::path& base_dir) {
  ConfigMap out;
  out.parse_into(text, base_dir, 0);
  return out;
}

ConfigMap ConfigMap::load(const std::filesystem::path& file) {
  ConfigMap out;
  out.parse_into(read_file(file), file.parent_path(), 0);
  return out;
}

void ConfigMap::parse_into(std::string_view text, const std::filesystem::path& base_dir,
                           int depth) {
  if (depth > 16) throw ConfigError("config include nesting too deep");
  std::string section;
  long line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto eol = text.find('\n', pos);
    std::string_view line =
        text.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos);
    pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
    ++line_no;

    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", line_no);
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected key = value", line_no);
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ParseError("empty key", line_no);
    if (key == "include") {
      const std::filesystem::path inc = base_dir / value;
      parse_into(read_file(inc), inc.parent_path(), depth + 1);
      continue;
    }
    values_[section.empty() ? key : section + "." + key] = value;
  }
}

std::string ConfigMap::serialize() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::optional<std::string> ConfigMap::find(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) const {
  return find(key).value_or(fallback);
}

std::string ConfigMap::require_string(const std::string& key) const {
  auto v = find(key);
  if (!v) throw ConfigError("missing config key '" + key + "'");
  return *v;
}

long ConfigMap::get_int(const std::string& key, long fallback) const {
  const auto v = find(key);
  if (!v) return fallback;
  long out = 0;
  const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size())
    throw ConfigError("config key '" + key + "' expects an integer, got '" + *v + "'");
  return out;
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
  const auto v = find(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double out = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument(*v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + *v + "'");
  }
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
  const auto v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError("config key '" + key + "' expects a boolean, got '" + *v + "'");
}

std::vector<std::string> ConfigMap::get_list(const std::string& key) const {
  std::vector<std::string> out;
  const auto v = find(key);
  if (!v) return out;
  std::string item;
  for (char c : *v + ",") {
    if (c == ',' || c == ' ') {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else {
      item += c;
    }
  }
  return out;
}

ConfigMap ConfigMap::section(const std::string& prefix) const {
  ConfigMap out;
  const std::string p = prefix + ".";
  for (const auto& [k, v] : values_)
    if (k.compare(0, p.size(), p) == 0) out.values_[k.substr(p.size())] = v;
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace ltx
