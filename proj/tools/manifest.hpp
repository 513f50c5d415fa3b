#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace uvflow::cli {

/// Record of one CLI run, written atomically next to its outputs.
class RunManifest {
 public:
  RunManifest(int argc, char** argv);

  void set_config_digest(std::string d) { config_digest_ = std::move(d); }
  void set_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }
  void set_value(const std::string& name, const std::string& v) { values_[name] = v; }
  /// Files are hashed directly; directories contribute every regular file
  /// below them, in path order.
  void add_input(const std::filesystem::path& p);
  void add_output(const std::filesystem::path& p);

  /// sha256 over the sorted output hashes: what --deterministic runs promise to reproduce.
  std::string output_digest() const;
  std::string to_json() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> argv_;
  std::string config_digest_;
  std::map<std::string, std::uint64_t> seeds_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> inputs_, outputs_, relative_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace uvflow::cli
