#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gradsed/model.hpp"

namespace gradsed::experiment {

// Flat "key = value" text. Lines starting with '#' and blank lines are
// ignored; keys are unique.
class Manifest {
 public:
  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);

  [[nodiscard]] bool has(const std::string& key) const { return entries_.count(key) != 0; }
  [[nodiscard]] const std::string& get(const std::string& key) const;
  [[nodiscard]] std::optional<std::string> find(const std::string& key) const;
  [[nodiscard]] double get_double(const std::string& key) const;
  [[nodiscard]] std::int64_t get_int(const std::string& key) const;
  [[nodiscard]] const std::map<std::string, std::string>& entries() const { return entries_; }

  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);
  static Manifest parse(const std::string& text);

 private:
  std::map<std::string, std::string> entries_;
};

// Checkpoint file: 16-byte header {"GSED", u32 version, u64 count} then
// count little-endian f64 values in layout order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_params(const std::filesystem::path& path, const model::ParamVector& params);
model::ParamVector read_params(const std::filesystem::path& path);

// One directory per run: manifest.txt, trace.csv and ckpt_<step>.bin files.
class CheckpointStore {
 public:
  static CheckpointStore create(const std::filesystem::path& dir);
  static CheckpointStore open(const std::filesystem::path& dir);

  void save(std::int64_t step, const model::ParamVector& params);
  [[nodiscard]] model::ParamVector load(std::int64_t step) const;
  [[nodiscard]] const std::vector<std::int64_t>& steps() const { return steps_; }
  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }
  [[nodiscard]] std::filesystem::path checkpoint_path(std::int64_t step) const;

 private:
  explicit CheckpointStore(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::filesystem::path dir_;
  std::vector<std::int64_t> steps_;
};

}  // namespace gradsed::experiment
