#include "gradsed/data.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace gradsed::data {

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::sq: return "sq";
  }
  return "?";
}

std::optional<OpKind> parse_op(std::string_view name) {
  for (OpKind op : kAllOps)
    if (op_name(op) == name) return op;
  if (name == "addition") return OpKind::add;
  if (name == "subtraction") return OpKind::sub;
  if (name == "multiplication") return OpKind::mul;
  return std::nullopt;
}

int apply_op(OpKind op, int a, int b, int p) {
  const long la = a;
  const long lb = b;
  long r = 0;
  switch (op) {
    case OpKind::add: r = la + lb; break;
    case OpKind::sub: r = la - lb; break;
    case OpKind::mul: r = la * lb; break;
    case OpKind::sq: r = la * la + lb * lb; break;
  }
  r %= p;
  if (r < 0) r += p;
  return static_cast<int>(r);
}

Batch make_batch(std::vector<Pair> inputs, int p) {
  Batch batch;
  batch.inputs = std::move(inputs);
  for (OpKind op : kAllOps) {
    auto& labels = batch.labels[static_cast<std::size_t>(op)];
    labels.reserve(batch.inputs.size());
    for (const Pair& x : batch.inputs) labels.push_back(apply_op(op, x.a, x.b, p));
  }
  return batch;
}

Split build_split(const SplitSpec& spec, RngStream rng) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
    throw std::invalid_argument("build_split: train_fraction must lie in (0, 1)");
  const std::size_t total = static_cast<std::size_t>(spec.p) * static_cast<std::size_t>(spec.p);
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(total)));
  if (n_train == 0 || n_train == total) throw std::invalid_argument("build_split: empty train or test side");

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = total - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

  std::vector<Pair> train;
  std::vector<Pair> test;
  train.reserve(n_train);
  test.reserve(total - n_train);
  std::uint64_t fingerprint = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const Pair x{static_cast<int>(order[i] / static_cast<std::size_t>(spec.p)),
                 static_cast<int>(order[i] % static_cast<std::size_t>(spec.p))};
    if (i < n_train) {
      train.push_back(x);
      fingerprint = mix64(fingerprint ^ order[i]);
    } else {
      test.push_back(x);
    }
  }
  return Split{make_batch(std::move(train), spec.p), make_batch(std::move(test), spec.p), fingerprint};
}

Batch sample_batch(const Batch& split, std::size_t n, RngStream& rng) {
  if (split.size() == 0) throw std::invalid_argument("sample_batch: empty split");
  Batch out;
  out.inputs.reserve(n);
  for (auto& l : out.labels) l.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(rng.below(split.size()));
    out.inputs.push_back(split.inputs[j]);
    for (std::size_t op = 0; op < kNumOps; ++op) out.labels[op].push_back(split.labels[op][j]);
  }
  return out;
}

ProbeSet make_probe_set(std::uint64_t probe_seed, std::size_t count, int p) {
  const std::size_t total = static_cast<std::size_t>(p) * static_cast<std::size_t>(p);
  if (count > total) throw std::invalid_argument("make_probe_set: more probes than pairs");
  RngStream rng(probe_seed, "probes");
  // partial Fisher-Yates: the first `count` slots are a uniform sample without replacement
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Pair> pairs;
  pairs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(order[i], order[i + rng.below(total - i)]);
    pairs.push_back({static_cast<int>(order[i] / static_cast<std::size_t>(p)),
                     static_cast<int>(order[i] % static_cast<std::size_t>(p))});
  }
  return ProbeSet{make_batch(std::move(pairs), p), probe_seed};
}

}  // namespace gradsed::data
