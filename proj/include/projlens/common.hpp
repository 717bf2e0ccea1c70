#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace projlens {

// Error categories map onto CLI exit codes: config -> 2, dependency -> 3,
// everything else -> 4.
enum class errc { config, parse, dependency, runtime };

class error : public std::runtime_error {
 public:
  error(errc kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  errc kind() const noexcept { return kind_; }

 private:
  errc kind_;
};

[[noreturn]] inline void throw_config(const std::string& msg) { throw error(errc::config, msg); }
[[noreturn]] inline void throw_parse(const std::string& msg) { throw error(errc::parse, msg); }
[[noreturn]] inline void throw_dependency(const std::string& msg) { throw error(errc::dependency, msg); }
[[noreturn]] inline void throw_runtime(const std::string& msg) { throw error(errc::runtime, msg); }

// --- string helpers -------------------------------------------------------

inline std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  for (size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

// Fixed-decimal formatting used for all report numbers.
inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

// --- content digest -------------------------------------------------------

// FNV-1a 64-bit. Manifest integrity checks only, not cryptographic.
class Fnv1a64 {
 public:
  void update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ull;
    }
  }
  void update(const void* data, size_t n) {
    update(std::string_view(static_cast<const char*>(data), n));
  }
  uint64_t value() const noexcept { return state_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  uint64_t state_ = 0xcbf29ce484222325ull;
};

inline uint64_t hash64(std::string_view bytes) {
  Fnv1a64 h;
  h.update(bytes);
  return h.value();
}

inline std::string digest_hex(std::string_view bytes) {
  Fnv1a64 h;
  h.update(bytes);
  return h.hex();
}

}  // namespace projlens
