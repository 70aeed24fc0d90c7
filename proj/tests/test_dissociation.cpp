#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "golden_tables.hpp"
#include "headlab/dissociation.hpp"
#include "headlab/error.hpp"
#include "headlab/format.hpp"

using namespace headlab;
using namespace headlab::testing;

TEST_CASE("relative performance") {
  CHECK(*relative_performance(80.0, 80.0) == 1.0);
  CHECK(*relative_performance(94.13, 85.94) == doctest::Approx(0.91299).epsilon(1e-5));
  CHECK(*relative_performance(50.0, 0.0) == 0.0);
  CHECK_FALSE(relative_performance(0.0, 1.0));
  CHECK_FALSE(relative_performance(-0.2, 0.1));
  CHECK_FALSE(relative_performance(NAN, 0.1));
}

TEST_CASE("dual dissociation reproduces the paired rows") {
  for (const auto& row : kDualRows) {
    INFO(row.a << "/" << row.b);
    auto d = dual_dissociation(relative_performance(row.base_a, row.a_under_a),
                               relative_performance(row.base_a, row.a_under_b),
                               relative_performance(row.base_b, row.b_under_a),
                               relative_performance(row.base_b, row.b_under_b));
    CHECK(std::abs(d.d_a - row.d_a) <= 0.01);
    CHECK(std::abs(d.d_b - row.d_b) <= 0.01);
    CHECK(std::abs(d.d - row.d) <= 0.01);
  }
  auto c = classify_dual(6.905, 13.270);
  CHECK(c.label == DualLabel::Double);
  CHECK(c.distinct);
  CHECK_THROWS_AS(dual_dissociation(0.5, std::nullopt, 0.5, 0.5), ShapeError);
}

TEST_CASE("identical pruned performance gives zero dissociation") {
  auto d = dual_dissociation(0.8, 0.8, 0.7, 0.7);
  CHECK(d.d_a == 0.0);
  CHECK(d.d_b == 0.0);
  RpMatrix rp(4, std::vector<std::optional<double>>{0.9, 0.9, 0.9, 0.9});
  for (auto& v : multi_dissociation(rp).per_task) CHECK(*v == 0.0);
}

TEST_CASE("five-task table") {
  auto m = multi_dissociation(rp_matrix(five_task_table()));
  // Recomputed per-task scores; the QNLI and AG entries match the pairwise
  // table's column means, not the printed row where those two are swapped.
  const std::array<double, 5> recomputed{7.237, 5.260, 9.833, 11.079, 3.284};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(*m.per_task[i] == doctest::Approx(recomputed[i]).epsilon(2e-4));
    CHECK(std::abs(*m.per_task[i] - kPairwiseMeanDi[i]) <= 0.06);
  }
  for (std::size_t i : {0u, 1u, 4u}) CHECK(std::abs(*m.per_task[i] - kPrintedDi[i]) <= 0.06);
  double mean = 0;
  for (auto& v : m.per_task) mean += *v / 5.0;
  CHECK(*m.average == doctest::Approx(mean).epsilon(1e-12));
  auto c = classify_multi(m);
  CHECK(c.label == MultiLabel::Mild);
  CHECK(c.signs == std::vector<int>{1, 1, 1, 1, 1});
}

TEST_CASE("classification rules") {
  CHECK(classify_dual(12.0, -3.0).label == DualLabel::Single);
  CHECK(classify_dual(-3.0, 12.0).label == DualLabel::Single);
  CHECK(classify_dual(-1.0, -2.0).label == DualLabel::Inconsistent);
  CHECK(classify_dual(2.0, 3.0).label == DualLabel::Double);
  CHECK_FALSE(classify_dual(2.0, 3.0).distinct);
  CHECK(classify_dual(9.0, -1.0).label == DualLabel::None);
  CHECK(classify_dual(0.0, 4.0).label == DualLabel::None);
  CHECK(classify_dual(10.0, 10.0).distinct);
  MultiDissociation m{{10.0, 10.0}, 10.0};
  CHECK(classify_multi(m).label == MultiLabel::Distinct);
  m = {{5.0, 5.0}, 5.0};
  CHECK(classify_multi(m).label == MultiLabel::None);
  m = {{5.5, 5.0}, 5.25};
  CHECK(classify_multi(m).label == MultiLabel::Mild);
  m = {{5.5, std::nullopt}, std::nullopt};
  CHECK_THROWS_AS(classify_multi(m), ShapeError);
  CHECK_THROWS_AS(classify_dual(NAN, 1.0), ShapeError);
}

TEST_CASE("classification is total and deterministic") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-30, 30);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng);
    CHECK(classify_dual(a, b).label == classify_dual(a, b).label);
  }
}

TEST_CASE("dissociation properties on random matrices") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> perf(10, 95);
  for (int trial = 0; trial < 200; ++trial) {
    PerformanceTable t;
    t.tasks = {"a", "b"};
    t.base = {perf(rng), perf(rng)};
    t.pruned = {{perf(rng), perf(rng)}, {perf(rng), perf(rng)}};
    auto rp = rp_matrix(t);
    auto dual = dual_dissociation(rp);
    auto multi = multi_dissociation(rp);
    CHECK(dual.d_a == *multi.per_task[0]);
    CHECK(dual.d_b == *multi.per_task[1]);
    CHECK(dual.d == *multi.average);

    PerformanceTable scaled = t;
    const double c = 0.25 + trial * 0.01;
    scaled.base[0] *= c;
    for (auto& row : scaled.pruned) row[0] *= c;
    auto ds = dual_dissociation(rp_matrix(scaled));
    CHECK(ds.d_a == doctest::Approx(dual.d_a).epsilon(1e-9));
    CHECK(ds.d_b == doctest::Approx(dual.d_b).epsilon(1e-9));

    PerformanceTable swapped;
    swapped.tasks = {"b", "a"};
    swapped.base = {t.base[1], t.base[0]};
    swapped.pruned = {{t.pruned[1][1], t.pruned[1][0]}, {t.pruned[0][1], t.pruned[0][0]}};
    auto dw = dual_dissociation(rp_matrix(swapped));
    CHECK(dw.d_a == dual.d_b);
    CHECK(dw.d_b == dual.d_a);
    CHECK(dw.d == doctest::Approx(dual.d).epsilon(1e-15));
  }
}

TEST_CASE("undefined relative performance is flagged and excluded") {
  PerformanceTable t;
  t.tasks = {"cola", "sst", "qnli"};
  t.base = {0.0, 90.0, 88.0};
  t.pruned = {{-0.1, 80, 81}, {0.2, 70, 79}, {0.1, 82, 60}};
  auto r = make_dissociation_report(t, 0.3);
  CHECK_FALSE(r.scores.per_task[0]);
  CHECK(r.scores.per_task[1]);
  CHECK_FALSE(r.scores.average);
  CHECK(r.label == "unavailable");
  REQUIRE(r.flags.size() == 1);
  CHECK(r.flags[0].find("cola") != std::string::npos);
  auto j = to_json(r);
  CHECK(j["d_i"]["cola"].is_null());
  CHECK(j["d"].is_null());
}

TEST_CASE("prune table csv round trip") {
  std::ifstream in(HEADLAB_TEST_DATA "/table3.csv");
  REQUIRE(in);
  auto t = read_table_csv(in);
  CHECK(t.tasks == five_task_table().tasks);
  CHECK(t.pruned == five_task_table().pruned);
  CHECK(t.base == five_task_table().base);

  auto r = make_dissociation_report(t, 0.3);
  std::stringstream out;
  write_table_csv(out, r);
  CHECK(out.str().find("D_i,7.24,5.26,9.83,11.08,3.28\n") != std::string::npos);
  auto back = read_table_csv(out);
  CHECK(back.pruned == t.pruned);
  CHECK(back.base == t.base);

  std::stringstream missing("pruned_for_task,a,b\na,1,2\nbase,3,4\n");
  CHECK_THROWS_AS(read_table_csv(missing), DataError);
  std::stringstream bad("pruned_for_task,a,b\na,1,2\nb,x,2\nbase,3,4\n");
  CHECK_THROWS_WITH_AS(read_table_csv(bad), doctest::Contains("line 3"), DataError);
  std::stringstream ragged("pruned_for_task,a,b\na,1\n");
  CHECK_THROWS_AS(read_table_csv(ragged), DataError);
}

TEST_CASE("fixed two-decimal formatting rounds halves away from zero") {
  CHECK(fixed2(83.715) == "83.72");
  CHECK(fixed2(0.125) == "0.13");
  CHECK(fixed2(-0.125) == "-0.13");
  CHECK(fixed2(7.2349) == "7.23");
  CHECK(fixed2(-0.001) == "0.00");
  CHECK(sig9(1.0 / 3.0) == "0.333333333");
}
