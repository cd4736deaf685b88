#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace can::cli {

// Exit codes scripts depend on.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;    // bad flags, unknown keys, missing paths, config mismatch
inline constexpr int kExitFormat = 3;   // malformed or unreadable data/checkpoint files
inline constexpr int kExitNumeric = 4;  // non-finite training loss, failed gradient check

// Flat key=value configuration. Every key has a default; unknown keys are rejected.
class RunConfig {
 public:
  RunConfig();

  void set(const std::string& key, const std::string& value);
  // Accepts "key=value" (the --set form).
  void assign(std::string_view assignment);
  // One key=value per line; blank lines and lines starting with '#' are skipped.
  void load_file(const std::string& path);

  const std::string& get(const std::string& key) const;
  std::uint64_t integer(const std::string& key) const;
  double number(const std::string& key) const;
  std::vector<std::size_t> integers(const std::string& key) const;  // comma-separated, may be empty
  std::vector<std::string> words(const std::string& key) const;     // comma-separated, may be empty

  // Sorted key=value lines; loading this text reproduces the configuration.
  std::string text() const;

 private:
  std::map<std::string, std::string> values_;
};

// 40-hex-digit SHA-1, the same digest git uses for object ids.
std::string sha1_hex(std::string_view bytes);

// Entry point behind the `can` executable; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace can::cli
