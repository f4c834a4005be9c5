#include "usm/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace usm {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool is_path_key(const std::string& key) {
  for (const char* suffix : {"_manifest", "_dir", "_checkpoint", "_path"}) {
    const std::string s(suffix);
    if (key.size() >= s.size() && key.compare(key.size() - s.size(), s.size(), s) == 0) return true;
  }
  return false;
}

}  // namespace

Config Config::load(const fs::path& path) {
  Config cfg;
  std::vector<fs::path> stack;
  cfg.load_file(path, stack);
  return cfg;
}

void Config::load_file(const fs::path& path, std::vector<fs::path>& stack) {
  const fs::path canonical = fs::weakly_canonical(path);
  if (std::find(stack.begin(), stack.end(), canonical) != stack.end())
    throw std::runtime_error("config: include cycle at " + path.string());
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  stack.push_back(canonical);
  const fs::path base = canonical.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include ", 0) == 0) {
      load_file(base / trim(line.substr(8)), stack);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": empty key");
    entries_[key] = {trim(line.substr(eq + 1)), base};
  }
  stack.pop_back();
}

void Config::set(const std::string& key, const std::string& value, const fs::path& base) {
  entries_[key] = {value, base};
}

void Config::set_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const Config::Entry& Config::entry(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw std::runtime_error("config: missing required key '" + key + "'");
  return it->second;
}

std::string Config::str(const std::string& key) const { return entry(key).value; }

std::string Config::str(const std::string& key, const std::string& fallback) const {
  return has(key) ? str(key) : fallback;
}

long long Config::integer(const std::string& key) const {
  const std::string& v = entry(key).value;
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw std::runtime_error("config: '" + key + "' is not an integer: " + v);
  return out;
}

long long Config::integer(const std::string& key, long long fallback) const {
  return has(key) ? integer(key) : fallback;
}

double Config::number(const std::string& key) const {
  const std::string& v = entry(key).value;
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw std::runtime_error("config: '" + key + "' is not a number: " + v);
  return out;
}

double Config::number(const std::string& key, double fallback) const {
  return has(key) ? number(key) : fallback;
}

bool Config::flag(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& v = entry(key).value;
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::runtime_error("config: '" + key + "' is not a boolean: " + v);
}

fs::path Config::path(const std::string& key) const {
  const Entry& e = entry(key);
  fs::path p(e.value);
  return p.is_absolute() ? p : (e.base / p).lexically_normal();
}

std::vector<std::string> Config::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, e] : entries_) out.push_back(k);
  return out;
}

std::string Config::dump() const {
  std::ostringstream os;
  for (const auto& [k, e] : entries_)
    os << k << " = " << (is_path_key(k) ? path(k).string() : e.value) << "\n";
  return os.str();
}

}  // namespace usm
