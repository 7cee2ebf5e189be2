#include <doctest.h>

#include <set>
#include <utility>

#include "gradsed/data.hpp"
#include "gradsed/rng.hpp"

using namespace gradsed;
using data::OpKind;

TEST_CASE("apply_op examples") {
  CHECK(data::apply_op(OpKind::add, 3, 4) == 7);
  CHECK(data::apply_op(OpKind::sub, 2, 5) == 94);
  CHECK(data::apply_op(OpKind::sq, 5, 6) == 61);
  CHECK(data::apply_op(OpKind::mul, 96, 96) == 1);
}

TEST_CASE("label tables match brute force on all pairs") {
  std::vector<data::Pair> all;
  for (int a = 0; a < 97; ++a)
    for (int b = 0; b < 97; ++b) all.push_back({a, b});
  const data::Batch batch = data::make_batch(all);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const long a = all[i].a, b = all[i].b;
    CHECK(batch.labels_for(OpKind::add)[i] == (a + b) % 97);
    CHECK(batch.labels_for(OpKind::sub)[i] == ((a - b) % 97 + 97) % 97);
    CHECK(batch.labels_for(OpKind::mul)[i] == (a * b) % 97);
    CHECK(batch.labels_for(OpKind::sq)[i] == (a * a + b * b) % 97);
  }
}

TEST_CASE("op names round-trip") {
  for (OpKind op : data::kAllOps) CHECK(data::parse_op(data::op_name(op)) == op);
  CHECK_FALSE(data::parse_op("div").has_value());
}

TEST_CASE("split sizes, determinism and disjointness") {
  for (std::uint64_t seed : {0ull, 1ull, 42ull, 137ull, 2024ull}) {
    const data::SplitSpec spec{97, 0.5, seed};
    const auto s = data::build_split(spec, RngStream(seed, "split"));
    CHECK(s.train.size() == 4704);
    CHECK(s.test.size() == 4705);
    std::set<std::pair<int, int>> seen;
    for (const auto& p : s.train.inputs) seen.insert({p.a, p.b});
    for (const auto& p : s.test.inputs) seen.insert({p.a, p.b});
    CHECK(seen.size() == 9409);
    const auto again = data::build_split(spec, RngStream(seed, "split"));
    CHECK(again.train.inputs == s.train.inputs);
    CHECK(again.fingerprint == s.fingerprint);
  }
  const auto a = data::build_split({97, 0.5, 1}, RngStream(1, "split"));
  const auto b = data::build_split({97, 0.5, 2}, RngStream(2, "split"));
  CHECK(a.fingerprint != b.fingerprint);
  CHECK_THROWS(data::build_split({97, 1.0, 1}, RngStream(1, "split")));
  CHECK_THROWS(data::build_split({97, 0.0, 1}, RngStream(1, "split")));
  CHECK_THROWS(data::build_split({97, 1e-5, 1}, RngStream(1, "split")));
}

TEST_CASE("sample_batch draws labelled rows from the split") {
  const auto s = data::build_split({97, 0.5, 3}, RngStream(3, "split"));
  std::set<std::pair<int, int>> train;
  for (const auto& p : s.train.inputs) train.insert({p.a, p.b});
  RngStream r1(3, "batches"), r2(3, "batches");
  const auto b1 = data::sample_batch(s.train, 512, r1);
  const auto b2 = data::sample_batch(s.train, 512, r2);
  CHECK(b1.size() == 512);
  CHECK(b1.inputs == b2.inputs);
  for (std::size_t i = 0; i < b1.size(); ++i) {
    CHECK(train.count({b1.inputs[i].a, b1.inputs[i].b}) == 1);
    for (OpKind op : data::kAllOps)
      CHECK(b1.labels_for(op)[i] == data::apply_op(op, b1.inputs[i].a, b1.inputs[i].b));
  }
  const auto b3 = data::sample_batch(s.train, 512, r1);
  CHECK_FALSE(b3.inputs == b1.inputs);
}

TEST_CASE("probe sets are distinct pairs and reproducible") {
  const auto p = data::make_probe_set(7);
  CHECK(p.probes.size() == 1024);
  std::set<std::pair<int, int>> seen;
  for (const auto& x : p.probes.inputs) seen.insert({x.a, x.b});
  CHECK(seen.size() == 1024);
  CHECK(data::make_probe_set(7).probes.inputs == p.probes.inputs);
  CHECK_FALSE(data::make_probe_set(8).probes.inputs == p.probes.inputs);
}
