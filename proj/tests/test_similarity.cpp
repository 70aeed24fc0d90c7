#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "headlab/error.hpp"
#include "headlab/similarity.hpp"
#include "headlab/stats.hpp"

using namespace headlab;

namespace {

// Rank = 1 + number of smaller values + half the number of other equal values.
std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < x[i]) ++less;
      if (j != i && x[j] == x[i]) ++equal;
    }
    r[i] = 1 + less + equal / 2;
  }
  return r;
}

double covariance_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return (sxy / n) / std::sqrt((sxx / n) * (syy / n));
}

Representations random_reps(std::mt19937_64& rng, std::size_t s, std::size_t d) {
  std::normal_distribution<double> g;
  Representations r(s, std::vector<double>(d));
  for (auto& v : r)
    for (auto& x : v) x = g(rng);
  return r;
}

}  // namespace

TEST_CASE("ranks and correlations") {
  CHECK(average_ranks(std::vector<double>{3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
  std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8.5};
  CHECK(*pearson(x, y) == doctest::Approx(covariance_pearson(x, y)).epsilon(1e-12));
  CHECK(*spearman(x, y) == doctest::Approx(1.0));
  CHECK_FALSE(pearson(x, std::vector<double>{1, 1, 1, 1}).has_value());
  CHECK_FALSE(pearson(std::vector<double>{1}, std::vector<double>{2}).has_value());
  CHECK_FALSE(linear_fit(std::vector<double>{2, 2}, std::vector<double>{1, 3}).has_value());
  CHECK(mean(std::vector<double>{}) == 0.0);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> small(0, 4);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(2 + t % 9);
    for (auto& e : v) e = small(rng);
    CHECK(average_ranks(v) == brute_ranks(v));
  }
}

TEST_CASE("cosine") {
  std::vector<double> a{1, 0}, b{0, 2}, c{-3, 0}, z{0, 0};
  CHECK(*cosine(a, b) == doctest::Approx(0.0));
  CHECK(*cosine(a, c) == doctest::Approx(-1.0));
  CHECK_FALSE(cosine(a, z).has_value());
  CHECK_THROWS_AS(cosine(a, std::vector<double>{1}), ShapeError);
}

TEST_CASE("DSE") {
  std::mt19937_64 rng(1);
  auto r = random_reps(rng, 5, 4);
  auto neg = r;
  for (auto& v : neg)
    for (auto& x : v) x = -x;
  std::vector<Representations> same{r, r}, flipped{r, neg};
  auto m = dse({"a", "b"}, same);
  CHECK(*m.values[0][1] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(*dse({"a", "b"}, flipped).values[0][1] == doctest::Approx(-1.0).epsilon(1e-6));

  // Hand-set 2-d vectors: cosines 1, 0 and -0.6 (vectors (1,0)/(−0.6,0.8)) average to 0.13333.
  Representations t1{{1, 0}, {0, 1}, {1, 0}}, t2{{2, 0}, {1, 0}, {-0.6, 0.8}};
  std::vector<Representations> hand{t1, t2};
  auto h = dse({"x", "y"}, hand);
  CHECK(*h.values[0][1] == doctest::Approx(0.4 / 3.0).epsilon(1e-12));
  CHECK(*h.values[1][0] == *h.values[0][1]);
  CHECK(*h.values[0][0] == doctest::Approx(1.0));

  Representations t3{{0, 0}, {0, 1}, {1, 0}};
  std::vector<Representations> with_zero{t1, t3};
  auto zf = dse({"x", "z"}, with_zero);
  CHECK(*zf.values[0][1] == doctest::Approx(1.0));  // sentences 2 and 3 agree exactly
  CHECK_FALSE(zf.flags.empty());

  std::vector<Representations> ragged{t1, Representations{{1, 0}, {0, 1}}};
  CHECK_THROWS_AS(dse({"x", "y"}, ragged), ShapeError);
}

TEST_CASE("RDM invariants") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    auto r = random_reps(rng, 2 + t % 7, 1 + t % 5);
    if (t % 10 == 0) r[0].assign(r[0].size(), 0.0);
    const auto d = rdm(r);
    for (std::size_t a = 0; a < d.size(); ++a) {
      CHECK(d[a][a] == 0.0);
      for (std::size_t b = 0; b < d.size(); ++b) {
        CHECK(d[a][b] == d[b][a]);
        CHECK(d[a][b] >= 0.0);
        CHECK(d[a][b] <= 2.0);
      }
    }
  }
}

TEST_CASE("CRA") {
  std::mt19937_64 rng(4);
  auto r = random_reps(rng, 6, 3);
  auto scaled = r;
  for (auto& v : scaled)
    for (auto& x : v) x *= 3.5;
  std::vector<Representations> pair{r, scaled};
  CHECK(*cra({"a", "b"}, pair).values[0][1] == doctest::Approx(1.0));

  // Rank invariance: a strictly increasing transform of the triangle keeps rho = 1.
  auto tri = upper_triangle(rdm(r));
  auto cubed = tri;
  for (auto& v : cubed) v = v * v * v + 2.0;
  CHECK(*spearman(tri, cubed) == doctest::Approx(1.0));

  // Two fixed four-sentence models against a brute-force rank oracle on six entries.
  Representations p{{1, 0}, {0, 1}, {1, 1}, {-1, 0.5}};
  Representations q{{1, 0.2}, {0.1, 1}, {-1, 1}, {0.5, 0.5}};
  std::vector<Representations> fixed{p, q};
  const auto got = *cra({"p", "q"}, fixed).values[0][1];
  auto cos = [](const std::vector<double>& u, const std::vector<double>& v) {
    return (u[0] * v[0] + u[1] * v[1]) / (std::hypot(u[0], u[1]) * std::hypot(v[0], v[1]));
  };
  std::vector<double> dp, dq;
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) {
      dp.push_back(1 - cos(p[a], p[b]));
      dq.push_back(1 - cos(q[a], q[b]));
    }
  CHECK(got == doctest::Approx(covariance_pearson(brute_ranks(dp), brute_ranks(dq))).epsilon(1e-12));
  const auto pear = *cra({"p", "q"}, fixed, RdmStatistic::Pearson).values[0][1];
  CHECK(pear == doctest::Approx(covariance_pearson(dp, dq)).epsilon(1e-12));

  // Symmetric in its arguments.
  std::vector<Representations> swapped{q, p};
  CHECK(*cra({"q", "p"}, swapped).values[0][1] == doctest::Approx(got).epsilon(1e-15));

  // Two sentences give a single RDM entry: no variance.
  Representations two{{1, 0}, {0, 1}};
  std::vector<Representations> tiny{two, two};
  auto undefined = cra({"a", "b"}, tiny);
  CHECK_FALSE(undefined.values[0][1].has_value());
  CHECK_FALSE(undefined.flags.empty());
}

TEST_CASE("AHP") {
  // Row = source, column = target. Target 2 sees sources 0 and 1 at 0.8 / 0.4.
  std::vector<std::vector<double>> p{{1, 0.5, 0.8}, {0.5, 1, 0.4}, {0.6, 0.6, 1}};
  auto m = ahp({"a", "b", "c"}, p);
  CHECK(*m.values[0][2] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(*m.values[1][2] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  // Target 1: sources 0 and 2 equal at 0.5 / 0.6 -> 5/11 and 6/11.
  CHECK(*m.values[0][1] == doctest::Approx(5.0 / 11.0).epsilon(1e-12));
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(*m.values[t][t] == 0.0);
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i) s += *m.values[i][t];
    CHECK(s == doctest::Approx(1.0));
  }

  std::vector<std::vector<double>> flat(4, std::vector<double>(4, 0.7));
  auto u = ahp({"a", "b", "c", "d"}, flat);
  for (std::size_t i = 1; i < 4; ++i) CHECK(*u.values[i][0] == doctest::Approx(1.0 / 3.0));

  auto scaled = p;
  for (auto& row : scaled) row[2] *= 7.0;
  auto ms = ahp({"a", "b", "c"}, scaled);
  for (std::size_t i = 0; i < 3; ++i) CHECK(*ms.values[i][2] == doctest::Approx(*m.values[i][2]).epsilon(1e-12));

  auto bad = p;
  bad[0][1] = 0.0;
  CHECK_THROWS_AS(ahp({"a", "b", "c"}, bad), ShapeError);
  CHECK_THROWS_AS(ahp({"a"}, {{1.0}}), ShapeError);
}

TEST_CASE("correlate") {
  std::vector<double> x{0, 1, 2, 3, 4}, y;
  for (double v : x) y.push_back(-2 * v + 1);
  auto c = correlate(x, y);
  CHECK(*c.pearson == doctest::Approx(-1.0));
  CHECK(*c.spearman == doctest::Approx(-1.0));
  CHECK(c.fit->slope == doctest::Approx(-2.0));
  CHECK(c.fit->intercept == doctest::Approx(1.0));
  CHECK(c.points.size() == 5);

  auto flat = correlate(x, std::vector<double>(5, 3.0));
  CHECK_FALSE(flat.pearson.has_value());
  CHECK_FALSE(flat.flags.empty());

  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(10), b(10);
    for (int i = 0; i < 10; ++i) a[i] = g(rng), b[i] = 0.5 * a[i] + g(rng);
    CHECK(std::abs(*correlate(a, b).pearson - covariance_pearson(a, b)) < 1e-9);
    CHECK(*correlate(a, b).pearson == *correlate(b, a).pearson);
  }
  CHECK_THROWS_AS(correlate(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ShapeError);
}

TEST_CASE("pair values and serialisation") {
  SimilarityMatrix m;
  m.metric = "AHP";
  m.tasks = {"a", "b", "c"};
  m.values = {{0.0, 0.2, 0.5}, {0.4, 0.0, std::nullopt}, {0.5, 0.3, 0.0}};
  auto pv = pair_values(m);
  REQUIRE(pv.size() == 2);
  CHECK(pv[0].value == doctest::Approx(0.3));
  CHECK(pv[1].b == 2);
  std::ostringstream csv;
  write_similarity_csv(csv, m);
  CHECK(csv.str() == "AHP,a,b,c\na,0,0.2,0.5\nb,0.4,0,nan\nc,0.5,0.3,0\n");
  CHECK(to_json(m)["values"][1][2].is_null());
}

TEST_CASE("sentence representations come from the pooled layer output") {
  ModelConfig cfg;
  Model model(cfg, 3);
  model.add_task("t", TaskKind::Classification, 2, Pooling::First, 4);
  std::vector<EncodedInput> probes{{{2, 5, 6, 3}, {0, 0, 0, 0}}, {{2, 7, 3}, {0, 0, 0}}};
  auto reps = sentence_representations(model, probes, 1);
  REQUIRE(reps.size() == 2);
  CHECK(reps[0].size() == cfg.model_dim);
  const auto cap = model.capture_head_outputs(probes[1], 0, Pooling::Mean);
  for (std::size_t k = 0; k < cfg.model_dim; ++k) CHECK(reps[1][k] == cap.pooled[1][k]);
  CHECK_THROWS_AS(sentence_representations(model, probes, 2), ShapeError);
}
