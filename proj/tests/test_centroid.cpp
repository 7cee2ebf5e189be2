#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gradsed/centroid.hpp"
#include "gradsed/data.hpp"
#include "gradsed/model.hpp"
#include "gradsed/rng.hpp"

using namespace gradsed;
using centroid::Matrix;

namespace {

struct Fixture {
  model::Transformer net{model::Architecture::single_task()};
  model::ParamVector params;
  data::Batch probes;

  Fixture() {
    params = net.init_params(RngStream(21, "init"));
    RngStream jitter(21, "jitter");
    for (double& v : params.values) v += 0.02 * jitter.normal();
    auto set = data::make_probe_set(3, 64);
    probes = std::move(set.probes);
  }
};

}  // namespace

TEST_CASE("median uses the mean of the two middle order statistics") {
  std::vector<double> v;
  for (int i = 20; i >= 1; --i) v.push_back(i);
  CHECK(centroid::median(v) == 10.5);
  CHECK(centroid::median({3.0, 1.0, 2.0}) == 2.0);
  CHECK_THROWS(centroid::median({}));
}

TEST_CASE("rank90 of identical probes is one") {
  Fixture f;
  std::vector<data::Pair> same(32, data::Pair{4, 9});
  const auto batch = data::make_batch(same);
  const Matrix c = centroid::centroid_matrix(f.net, f.params, centroid::probes_for(batch, data::OpKind::add, 0));
  CHECK(centroid::rank90(c) == 1);
  CHECK_THROWS(centroid::rank90(Matrix::Zero(4, 4)));
}

TEST_CASE("centroid matrix rows are the per-probe centroids") {
  Fixture f;
  const auto pr = centroid::probes_for(f.probes, data::OpKind::add, 0);
  const Matrix c = centroid::centroid_matrix(f.net, f.params, pr);
  REQUIRE(c.rows() == 64);
  for (Eigen::Index i : {0, 17, 63}) {
    const std::vector<data::Pair> one{f.probes.inputs[static_cast<std::size_t>(i)]};
    const std::vector<int> label{pr.labels[static_cast<std::size_t>(i)]};
    const Matrix single = f.net.centroids(f.params, one, label, 0);
    CHECK((single.row(0) - c.row(i)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("sensitivity is symmetric in the direction sign and invariant to probe order") {
  Fixture f;
  const auto dim = f.net.layout().attention_size();
  const auto v = centroid::random_direction(dim, RngStream(1, "dir"), 0);
  std::vector<double> neg(v);
  for (double& x : neg) x = -x;
  const auto pr = centroid::probes_for(f.probes, data::OpKind::add, 0);
  const double a = centroid::sensitivity(f.net, f.params, v, 0.005, pr);
  const double b = centroid::sensitivity(f.net, f.params, neg, 0.005, pr);
  CHECK(a > 0.0);
  CHECK(std::abs(a - b) <= 1e-10 * a);

  std::vector<data::Pair> rev(f.probes.inputs.rbegin(), f.probes.inputs.rend());
  const auto reversed = data::make_batch(rev);
  const double c = centroid::sensitivity(f.net, f.params, v, 0.005, centroid::probes_for(reversed, data::OpKind::add, 0));
  CHECK(std::abs(a - c) <= 1e-10 * a);

  std::vector<double> two(v);
  for (double& x : two) x *= 2.0;
  CHECK_THROWS(centroid::sensitivity(f.net, f.params, two, 0.005, pr));
  model::ParamVector zero_attn = f.params;
  model::insert_attention(f.net.layout(), std::vector<double>(dim, 0.0), zero_attn.values);
  CHECK_THROWS(centroid::sensitivity(f.net, zero_attn, v, 0.005, pr));
}

TEST_CASE("coupling ratio: random numerator is near one, scale-invariant, and baselines are cached") {
  Fixture f;
  const auto dim = f.net.layout().attention_size();
  const auto pr = centroid::probes_for(f.probes, data::OpKind::add, 0);
  const RngStream rand_stream(21, "rand-dirs");
  Matrix basis(1, static_cast<Eigen::Index>(dim));
  const auto v = centroid::random_direction(dim, RngStream(99, "fresh"), 0);
  std::copy(v.begin(), v.end(), basis.row(0).data());

  centroid::BaselineCache cache;
  centroid::CouplingOptions opts;
  const auto rep = centroid::coupling_ratio(f.net, f.params, basis, pr, rand_stream, 100, opts, &cache);
  CHECK(rep.a_random.size() == 20);
  CHECK(rep.ratios.size() == 1);
  CHECK(rep.ratios[0] > 0.5);
  CHECK(rep.ratios[0] < 2.0);
  CHECK(rep.rank90 > 0);
  CHECK(cache.size() == 1);

  const auto again = centroid::coupling_ratio(f.net, f.params, basis, pr, rand_stream, 100, opts, &cache);
  CHECK(again.a_random == rep.a_random);
  CHECK(again.ratios == rep.ratios);

  // Scaling the readout scales every centroid by the same constant.
  model::ParamVector scaled = f.params;
  const auto& head = f.net.layout().heads()[0];
  for (std::size_t i = head.w; i < head.w + 128 * 97; ++i) scaled.values[i] *= 3.0;
  const auto s = centroid::coupling_ratio(f.net, scaled, basis, pr, rand_stream, 100, opts);
  CHECK(s.ratios[0] == doctest::Approx(rep.ratios[0]).epsilon(1e-9));
  CHECK(s.a_random_median == doctest::Approx(9.0 * rep.a_random_median).epsilon(1e-9));

  const auto other_step = centroid::coupling_ratio(f.net, f.params, basis, pr, rand_stream, 125, opts, &cache);
  CHECK_FALSE(other_step.a_random == rep.a_random);

  Matrix skew = basis;
  skew *= 2.0;
  CHECK_THROWS(centroid::coupling_ratio(f.net, f.params, skew, pr, rand_stream, 100, opts));
}

TEST_CASE("coupling report CSV row follows the schema") {
  centroid::CouplingReport rep;
  rep.step = 250;
  rep.ratios = {2.0, 1.0, 0.5};
  rep.r_bar = 7.0 / 6.0;
  rep.a_dirs = {4.0, 2.0, 1.0};
  rep.a_random_median = 2.0;
  rep.rank90 = 40;
  std::ostringstream out;
  centroid::write_csv_header(out);
  centroid::write_csv_row(out, {"add42", "add", "gradient", 1500, 20, 3, 0.005}, rep);
  std::istringstream in(out.str());
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(std::count(header.begin(), header.end(), ',') == 16);
  CHECK(std::count(row.begin(), row.end(), ',') == 16);
  CHECK(row.rfind("add42,add,gradient,250,1500,20,3,0.005,2,1,0.5,", 0) == 0);
}
