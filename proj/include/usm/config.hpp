// Flat key = value configuration with includes.
//
//   # comment
//   include base.cfg        (relative to this file; later keys override)
//   model.layers = 4
//
// Path-valued keys resolve relative to the file that set them.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace usm {

class Config {
 public:
  static Config load(const std::filesystem::path& path);

  // Command-line style override; paths resolve against `base`.
  void set(const std::string& key, const std::string& value,
           const std::filesystem::path& base = std::filesystem::current_path());
  // "key=value" form.
  void set_override(const std::string& assignment);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::string str(const std::string& key) const;
  std::string str(const std::string& key, const std::string& fallback) const;
  long long integer(const std::string& key) const;
  long long integer(const std::string& key, long long fallback) const;
  double number(const std::string& key) const;
  double number(const std::string& key, double fallback) const;
  bool flag(const std::string& key, bool fallback) const;
  std::filesystem::path path(const std::string& key) const;

  std::vector<std::string> keys() const;
  // Sorted "key = value" lines, path keys (ending in _manifest, _dir,
  // _checkpoint or _path) absolute.
  std::string dump() const;

 private:
  struct Entry {
    std::string value;
    std::filesystem::path base;
  };
  void load_file(const std::filesystem::path& path, std::vector<std::filesystem::path>& stack);
  const Entry& entry(const std::string& key) const;
  std::map<std::string, Entry> entries_;
};

}  // namespace usm
