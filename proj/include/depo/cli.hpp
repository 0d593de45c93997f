#pragma once

// Command-line front end. A run is described by a flat key = value
// registry; defaults are overlaid by a config file, the DEPO_OUT_DIR
// environment variable and command-line flags, in that order.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "depo/losses.hpp"
#include "depo/policy.hpp"
#include "depo/tasks.hpp"
#include "depo/trainer.hpp"

namespace depo::cli {

class RunConfig {
 public:
  struct Entry {
    std::string key;
    std::string value;
    std::string note;
  };

  /// Every tunable with its default.
  static RunConfig defaults();

  /// Throws std::invalid_argument for an unknown key or a value that does
  /// not parse as the key's type.
  void set(const std::string& key, const std::string& value);
  /// Applies one "key=value" or "key = value" assignment.
  void assign(const std::string& assignment);
  /// Lines of key = value; '#' starts a comment, blank lines are skipped.
  void merge_text(const std::string& text);
  void merge_file(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  long long integer(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> numbers(const std::string& key) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::map<std::string, std::string> as_map() const;
  /// Round-trips through merge_text.
  std::string to_text() const;

  Dims dims() const;
  Task task() const;
  SftConfig sft() const;
  RlConfig rl() const;
  DepoConfig depo() const;
  DecodeConfig decode() const;

 private:
  enum class Kind { kString, kReal, kInt, kU64, kBool, kList, kKlWeight, kRatio, kTaskName };

  void add(std::string key, Kind kind, std::string value, std::string note);
  std::size_t index_of(const std::string& key) const;

  std::vector<Entry> entries_;
  std::vector<Kind> kinds_;
};

/// Runs one subcommand; returns the process exit status. Reports go to
/// `out`, one-line failure reasons to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace depo::cli
