#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradsed/rng.hpp"

namespace gradsed::data {

inline constexpr int kPrime = 97;
inline constexpr int kNumOps = 4;

enum class OpKind { add = 0, sub = 1, mul = 2, sq = 3 };

inline constexpr std::array<OpKind, kNumOps> kAllOps{OpKind::add, OpKind::sub, OpKind::mul, OpKind::sq};

std::string_view op_name(OpKind op);
std::optional<OpKind> parse_op(std::string_view name);

// Exact op(a, b) mod p; sq is a^2 + b^2.
int apply_op(OpKind op, int a, int b, int p = kPrime);

struct Pair {
  int a = 0;
  int b = 0;
  friend bool operator==(const Pair&, const Pair&) = default;
};

// A set of (a, b) inputs with the label of every op attached.
struct Batch {
  std::vector<Pair> inputs;
  std::array<std::vector<int>, kNumOps> labels;

  [[nodiscard]] std::size_t size() const { return inputs.size(); }
  [[nodiscard]] std::span<const int> labels_for(OpKind op) const {
    return labels[static_cast<std::size_t>(op)];
  }
};

Batch make_batch(std::vector<Pair> inputs, int p = kPrime);

struct SplitSpec {
  int p = kPrime;
  double train_fraction = 0.5;
  std::uint64_t split_seed = 0;
};

struct Split {
  Batch train;
  Batch test;
  std::uint64_t fingerprint = 0;  // hash of the train ordering
};

// Deterministic Fisher-Yates shuffle of all p^2 ordered pairs; the first
// floor(fraction * p^2) go to train. Requires 0 < fraction < 1 and both
// sides non-empty.
Split build_split(const SplitSpec& spec, RngStream rng);

// n pairs drawn uniformly with replacement.
Batch sample_batch(const Batch& split, std::size_t n, RngStream& rng);

// Distinct (a, b) pairs drawn without replacement from all p^2 pairs.
struct ProbeSet {
  Batch probes;
  std::uint64_t probe_seed = 0;
};

inline constexpr std::size_t kProbeCount = 1024;

ProbeSet make_probe_set(std::uint64_t probe_seed, std::size_t count = kProbeCount, int p = kPrime);

}  // namespace gradsed::data
