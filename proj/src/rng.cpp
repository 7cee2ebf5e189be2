#include "gradsed/rng.hpp"

#include <cmath>
#include <numbers>
#include <utility>

namespace gradsed {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = 0xCBF29CE484222325ULL ^ mix64(seed);
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return mix64(h);
}

RngStream::RngStream(std::uint64_t master_seed, std::string_view purpose_label)
    : RngStream(master_seed, std::string(purpose_label),
                hash_bytes(purpose_label, master_seed)) {}

RngStream::RngStream(std::uint64_t master_seed, std::string label, std::uint64_t key)
    : master_seed_(master_seed), label_(std::move(label)), key_(key) {}

RngStream RngStream::derive(std::uint64_t index) const {
  return RngStream(master_seed_, label_ + "/" + std::to_string(index),
                   mix64(key_ ^ mix64(index + 0x632BE59BD9B4E019ULL)));
}

RngStream RngStream::derive(std::string_view label) const {
  return RngStream(master_seed_, label_ + "/" + std::string(label), hash_bytes(label, key_));
}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t i = counter_++;
  return mix64(key_ + i * 0xD1B54A32D192ED03ULL);
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // rejection on the top of the range keeps the result unbiased
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t r = next_u64();
  while (r >= limit) r = next_u64();
  return r % n;
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

}  // namespace gradsed
