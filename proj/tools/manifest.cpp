#include "manifest.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>

#include "uvflow/checkpoint.hpp"
#include "uvflow/flowdit.hpp"
#include "uvflow/io.hpp"
#include "uvflow/landmarks.hpp"
#include "uvflow/toyfaces.hpp"

namespace uvflow::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// `rel` receives names relative to the root, so runs into different output
// locations compare equal.
void hash_into(const fs::path& p, std::map<std::string, std::string>& out, std::map<std::string, std::string>* rel) {
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      out[f.string()] = io::sha256_file(f);
      if (rel) (*rel)[fs::relative(f, p).string()] = out[f.string()];
    }
  } else if (fs::exists(p)) {
    out[p.string()] = io::sha256_file(p);
    if (rel) (*rel)[p.filename().string()] = out[p.string()];
  }
}

}  // namespace

RunManifest::RunManifest(int argc, char** argv) : start_(std::chrono::steady_clock::now()) {
  for (int i = 0; i < argc; ++i) argv_.emplace_back(argv[i]);
}

void RunManifest::add_input(const fs::path& p) { hash_into(p, inputs_, nullptr); }
void RunManifest::add_output(const fs::path& p) { hash_into(p, outputs_, &relative_); }

std::string RunManifest::output_digest() const {
  std::string all;
  for (const auto& [path, h] : relative_) all += path + ':' + h + '\n';
  return io::sha256_hex(all.data(), all.size());
}

std::string RunManifest::to_json() const {
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  json j;
  j["command_line"] = argv_;
  j["config_digest"] = config_digest_;
  j["seeds"] = seeds_;
  j["values"] = values_;
  j["inputs"] = inputs_;
  j["outputs"] = outputs_;
  j["output_digest"] = output_digest();
  j["wall_clock_s"] = wall;
  j["versions"] = {{"uvflow", UVFLOW_VERSION},
                   {"texture_layout", toy::kLayoutVersion},
                   {"model_checkpoint", dit::kVersion},
                   {"detector_checkpoint", lmk::kVersion}};
  return j.dump(2) + "\n";
}

void RunManifest::write(const fs::path& path) const { io::write_atomic(path, to_json()); }

}  // namespace uvflow::cli
