#include "gradsed/store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace gradsed::experiment {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint files assume a little-endian host");

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void Manifest::set(const std::string& key, double value) {
  std::ostringstream out;
  out << std::setprecision(17) << value;
  entries_[key] = out.str();
}

void Manifest::set(const std::string& key, std::int64_t value) { entries_[key] = std::to_string(value); }

const std::string& Manifest::get(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw std::runtime_error("manifest: missing key '" + key + "'");
  return it->second;
}

std::optional<std::string> Manifest::find(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

double Manifest::get_double(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  const double d = std::stod(v, &used);
  if (used != v.size()) throw std::runtime_error("manifest: '" + key + "' is not a number");
  return d;
}

std::int64_t Manifest::get_int(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  const long long i = std::stoll(v, &used);
  if (used != v.size()) throw std::runtime_error("manifest: '" + key + "' is not an integer");
  return i;
}

Manifest Manifest::parse(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw std::runtime_error("manifest: line " + std::to_string(lineno) + " has no '='");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw std::runtime_error("manifest: empty key on line " + std::to_string(lineno));
    if (m.has(key)) throw std::runtime_error("manifest: duplicate key '" + key + "'");
    m.entries_[key] = trim(t.substr(eq + 1));
  }
  return m;
}

Manifest Manifest::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest: cannot open " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str());
}

void Manifest::write(const fs::path& path) const {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("manifest: cannot write " + path.string());
    for (const auto& [k, v] : entries_) out << k << " = " << v << '\n';
  }
  fs::rename(tmp, path);
}

void write_params(const fs::path& path, const model::ParamVector& params) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t count = params.size();
    out.write("GSED", 4);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&count), sizeof count);
    out.write(reinterpret_cast<const char*>(params.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

model::ParamVector read_params(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::array<char, 4> magic{};
  std::uint32_t version = 0;
  std::uint64_t count = 0;
  in.read(magic.data(), 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!in || std::memcmp(magic.data(), "GSED", 4) != 0) throw std::runtime_error("checkpoint: bad header in " + path.string());
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version in " + path.string());
  model::ParamVector p;
  p.values.resize(count);
  in.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in || in.peek() != std::ifstream::traits_type::eof())
    throw std::runtime_error("checkpoint: truncated or oversized " + path.string());
  return p;
}

CheckpointStore CheckpointStore::create(const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".bin") throw std::runtime_error("store: " + dir.string() + " already holds checkpoints");
  return CheckpointStore(dir);
}

CheckpointStore CheckpointStore::open(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("store: no such directory " + dir.string());
  CheckpointStore store(dir);
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("ckpt_", 0) == 0 && entry.path().extension() == ".bin")
      store.steps_.push_back(std::stoll(name.substr(5, name.size() - 9)));
  }
  std::sort(store.steps_.begin(), store.steps_.end());
  return store;
}

fs::path CheckpointStore::checkpoint_path(std::int64_t step) const {
  std::ostringstream name;
  name << "ckpt_" << std::setw(8) << std::setfill('0') << step << ".bin";
  return dir_ / name.str();
}

void CheckpointStore::save(std::int64_t step, const model::ParamVector& params) {
  if (!steps_.empty() && step <= steps_.back()) throw std::invalid_argument("store: steps must increase");
  write_params(checkpoint_path(step), params);
  steps_.push_back(step);
}

model::ParamVector CheckpointStore::load(std::int64_t step) const {
  if (!std::binary_search(steps_.begin(), steps_.end(), step))
    throw std::runtime_error("store: no checkpoint at step " + std::to_string(step));
  return read_params(checkpoint_path(step));
}

}  // namespace gradsed::experiment
