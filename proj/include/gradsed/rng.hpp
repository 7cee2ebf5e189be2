#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace gradsed {

// Counter-based random stream. The key is a hash of (master_seed, purpose
// label, derived indices); draw i is a pure function of (key, i), so two
// streams with the same derivation path produce identical values on every
// platform. Normal variates use Box-Muller over our own uniforms rather than
// std::normal_distribution, whose output is implementation-defined.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::string_view purpose_label);

  // Child stream keyed by (this key, index). Does not advance this stream.
  [[nodiscard]] RngStream derive(std::uint64_t index) const;
  [[nodiscard]] RngStream derive(std::string_view label) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  [[nodiscard]] std::uint64_t master_seed() const { return master_seed_; }
  [[nodiscard]] const std::string& purpose_label() const { return label_; }
  [[nodiscard]] std::uint64_t counter() const { return counter_; }
  [[nodiscard]] std::uint64_t key() const { return key_; }

 private:
  RngStream(std::uint64_t master_seed, std::string label, std::uint64_t key);

  std::uint64_t master_seed_;
  std::string label_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed);

}  // namespace gradsed
