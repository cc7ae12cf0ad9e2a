#pragma once

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mseu/common.hpp"

namespace mseu {

// key = value configuration, one pair per line, # starts a comment.

class KvConfig {
 public:
  static KvConfig parse(std::istream& in, const std::string& origin) {
    KvConfig kv;
    kv.origin_ = origin;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                 ": expected key=value, got '" + trimmed + "'");
      std::string key = trim(trimmed.substr(0, eq));
      std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
      for (const auto& it : kv.items_)
        if (it.key == key)
          throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": duplicate key '" +
                                   key + "'");
      kv.items_.push_back({key, value, false});
    }
    return kv;
  }

  static KvConfig parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    return parse(f, path);
  }

  static KvConfig parse_string(const std::string& text) {
    std::istringstream s(text);
    return parse(s, "<config>");
  }

  bool has(const std::string& key) const {
    for (const auto& it : items_)
      if (it.key == key) return true;
    return false;
  }

  int64_t get_int(const std::string& key, int64_t fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    try {
      size_t used = 0;
      int64_t out = std::stoll(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing");
      return out;
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' expects an integer, got '" + *v + "'");
    }
  }

  double get_double(const std::string& key, double fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    try {
      size_t used = 0;
      double out = std::stod(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing");
      return out;
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' expects a number, got '" + *v + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw std::runtime_error("config: key '" + key + "' expects a boolean, got '" + *v + "'");
  }

  std::string get_string(const std::string& key, const std::string& fallback) {
    const std::string* v = lookup(key);
    return v ? *v : fallback;
  }

  void require_all_used() const {
    std::string unknown;
    for (const auto& it : items_)
      if (!it.used) unknown += unknown.empty() ? it.key : ", " + it.key;
    if (!unknown.empty()) throw std::runtime_error("config: unknown key(s): " + unknown);
  }

 private:
  struct Item {
    std::string key;
    std::string value;
    bool used;
  };

  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  const std::string* lookup(const std::string& key) {
    for (auto& it : items_)
      if (it.key == key) {
        it.used = true;
        return &it.value;
      }
    return nullptr;
  }

  std::vector<Item> items_;
  std::string origin_;
};

}  // namespace mseu
