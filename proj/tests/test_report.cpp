#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gradsed/report.hpp"

using namespace gradsed;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gradsed_report_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

const char* kCoupling =
    "run_id,op,estimator,step,grok_step,W,K,eps_rel,R1,R2,R3,Rbar,A_v1,A_v2,A_v3,A_rand_median,rank90\n";

void intervention(const fs::path& dir, const std::string& mode, std::uint64_t seed, std::optional<std::int64_t> grok) {
  report::InterventionEntry e;
  e.run_id = "iv_" + mode + std::to_string(seed);
  e.op = "add";
  e.mode = mode;
  e.flavor = "update";
  e.seed = seed;
  e.weight_decay = 1.0;
  e.grok_step = grok;
  e.final_step = grok ? *grok + 500 : 8000;
  e.final_test_acc = 0.99;
  fs::create_directories(dir);
  std::ofstream f(dir / (e.run_id + ".csv"));
  report::write_intervention_csv(f, e);
}

}  // namespace

TEST_CASE("speedup is a ratio of means") {
  const std::vector<double> control{3550, 3450, 3025}, remove_sed{2925, 2625, 2725};
  CHECK(std::round(100 * report::speedup(control, remove_sed)) / 100 == doctest::Approx(1.21));
  // a mean of per-seed ratios would give a different number here
  const std::vector<double> a{100, 300}, b{50, 300};
  CHECK(report::speedup(a, b) == doctest::Approx(400.0 / 350.0));
  CHECK_THROWS(report::speedup({}, b));
}

TEST_CASE("spread is max over min of the per-op means") {
  const std::vector<double> gradient_means{219.9, 191.1, 214.9, 120.7};
  CHECK(std::round(100 * report::spread(gradient_means)) / 100 == doctest::Approx(1.82));
  const std::vector<double> update_peaks{8.97, 3.52, 3.47, 3.64};
  // 8.97 / 3.47 = 2.585, quoted as 2.58
  CHECK(report::spread(update_peaks) == doctest::Approx(2.58).epsilon(0.005));
}

TEST_CASE("intervention CSV round trip") {
  const fs::path dir = scratch("iv");
  intervention(dir, "B", 42, 2925);
  intervention(dir, "E", 137, std::nullopt);
  const auto in = report::load_inputs(dir);
  REQUIRE(in.interventions.size() == 2);
  CHECK(in.interventions[0].mode == "B");
  CHECK(in.interventions[0].grok_step == 2925);
  CHECK_FALSE(in.interventions[1].grok_step.has_value());
  CHECK(in.interventions[1].final_step == 8000);
}

TEST_CASE("report tables, determinism and run ids") {
  const fs::path dir = scratch("full");
  std::ostringstream csv;
  csv << kCoupling;
  for (int s = 25; s <= 100; s += 25)
    csv << "add42,add,gradient," << s << ",75,20,3,0.005," << 10 * s << ",1,1," << 5 * s << ",1,1,1,0.1," << 60 - s / 5 << "\n";
  write(dir / "add42" / "analysis_gradient.csv", csv.str());
  write(dir / "add42" / "ablation_W.csv",
        "run_id,axis,value,peak_R1,peak_Rbar,peak_step\nadd42,W,1,648,300,75\nadd42,W,20,212,100,75\n");
  write(dir / "add42" / "trace.csv", "step,train_acc_0,test_acc_0\n0,0.01,0.01\n25,,0.5\n50,1,0.99\n");
  const std::vector<double> a{3550, 3450, 3025}, b{2925, 2625, 2725};
  const std::uint64_t seeds[] = {42, 137, 2024};
  for (int i = 0; i < 3; ++i) {
    intervention(dir / "iv", "A", seeds[i], static_cast<std::int64_t>(a[static_cast<std::size_t>(i)]));
    intervention(dir / "iv", "B", seeds[i], static_cast<std::int64_t>(b[static_cast<std::size_t>(i)]));
  }

  const auto in = report::load_inputs(dir);
  CHECK(in.coupling.size() == 4);
  CHECK(in.ablation.size() == 2);
  CHECK(in.traces.size() == 1);
  CHECK(std::isnan(in.traces[0].train_acc[0][1]));

  const auto r1 = report::render(in);
  const auto r2 = report::render(report::load_inputs(dir));
  CHECK(r1.markdown == r2.markdown);
  CHECK(r1.svgs == r2.svgs);
  CHECK(r1.markdown.find("1.21x") != std::string::npos);
  CHECK(r1.markdown.find("| add | 500.00 |") != std::string::npos);
  CHECK(r1.markdown.find("iv_A42") != std::string::npos);
  CHECK(r1.markdown.find("| A | 3550 | 3450 | 3025 | 3342 |") != std::string::npos);
  CHECK(r1.svgs.count("rbar_add42_add.svg") == 1);
  CHECK(r1.svgs.count("acc_add42.svg") == 1);
  CHECK(r1.svgs.at("rbar_add42_add.svg").find("grok 75") != std::string::npos);

  const fs::path out = scratch("out") / "report.md";
  report::emit_report(dir, out);
  std::ifstream f(out);
  std::stringstream text;
  text << f.rdbuf();
  CHECK(text.str() == r1.markdown);
  CHECK(fs::exists(out.parent_path() / "acc_add42.svg"));
}

TEST_CASE("empty input and schema mismatches are errors with no partial output") {
  const fs::path empty = scratch("empty");
  const fs::path out = scratch("empty_out") / "report.md";
  CHECK_THROWS(report::emit_report(empty, out));
  CHECK_FALSE(fs::exists(out));

  const fs::path bad = scratch("bad");
  write(bad / "a.csv", std::string(kCoupling) + "run,add,gradient,25\n");
  CHECK_THROWS(report::load_inputs(bad));
  const fs::path unknown = scratch("unknown");
  write(unknown / "b.csv", "x,y\n1,2\n");
  CHECK_THROWS(report::load_inputs(unknown));
  const fs::path nonnum = scratch("nonnum");
  write(nonnum / "c.csv", "run_id,axis,value,peak_R1,peak_Rbar,peak_step\nr,W,abc,1,1,1\n");
  CHECK_THROWS(report::load_inputs(nonnum));
}
