#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "headlab/autograd.hpp"
#include "headlab/error.hpp"
#include "headlab/optim.hpp"
#include "test_support.hpp"

using namespace headlab;
using headlab::testing::finite_difference_error;
using headlab::testing::random_tensor;

namespace {

constexpr int kSeeds = 20;
constexpr double kTolerance = 1e-3;

struct Dims {
  std::size_t r, k, c;
};

Dims random_dims(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(1, 4);
  return {d(rng), d(rng), d(rng)};
}

template <typename MakeInputs>
void check_primitive(const char* name, MakeInputs make, const headlab::testing::OpBuilder& op) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const auto inputs = make(rng);
    const double err = finite_difference_error(inputs, op, static_cast<std::uint64_t>(seed));
    INFO(std::string(name) << " seed " << seed);
    CHECK(err < kTolerance);
  }
}

}  // namespace

TEST_CASE("every primitive matches central finite differences") {
  check_primitive(
      "matmul",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.k), random_tensor(rng, d.k, d.c)};
      },
      [](Tape& t, auto v) { return t.matmul(v[0], v[1]); });
  check_primitive(
      "matmul_transposed",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.k), random_tensor(rng, d.c, d.k)};
      },
      [](Tape& t, auto v) { return t.matmul_transposed(v[0], v[1]); });
  check_primitive(
      "add",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.c), random_tensor(rng, d.r, d.c)};
      },
      [](Tape& t, auto v) { return t.add(v[0], v[1]); });
  check_primitive(
      "add_row_broadcast",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.c), random_tensor(rng, 1, d.c)};
      },
      [](Tape& t, auto v) { return t.add_row_broadcast(v[0], v[1]); });
  check_primitive(
      "scale_by_var",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.c), random_tensor(rng, 1, 1)};
      },
      [](Tape& t, auto v) { return t.scale(v[0], v[1]); });
  check_primitive(
      "scale_const",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.c)};
      },
      [](Tape& t, auto v) { return t.scale(v[0], -0.37f); });
  check_primitive(
      "mul_const",
      [](auto& rng) {
        return std::vector<Tensor>{random_tensor(rng, 3, 4)};
      },
      [](Tape& t, auto v) {
        Tensor c({3, 4}, {0.5f, -1.f, 2.f, 0.f, 1.f, 1.f, -.25f, 3.f, 0.f, 1.5f, -2.f, .75f});
        return t.mul_const(v[0], c);
      });
  check_primitive(
      "softmax_rows",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.c, -2.f, 2.f)};
      },
      [](Tape& t, auto v) { return t.softmax_rows(v[0]); });
  check_primitive(
      "layer_norm",
      [](auto& rng) {
        auto d = random_dims(rng);
        const std::size_t c = std::max<std::size_t>(d.c, 3);
        return std::vector<Tensor>{random_tensor(rng, d.r, c),
                                   random_tensor(rng, 1, c, 0.5f, 1.5f),
                                   random_tensor(rng, 1, c)};
      },
      [](Tape& t, auto v) { return t.layer_norm(v[0], v[1], v[2], 1e-5f); });
  check_primitive(
      "gelu",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.c, -3.f, 3.f)};
      },
      [](Tape& t, auto v) { return t.gelu(v[0]); });
  check_primitive(
      "relu",
      [](auto& rng) {
        auto d = random_dims(rng);
        Tensor x = random_tensor(rng, d.r, d.c, 0.05f, 1.f);
        std::bernoulli_distribution flip(0.5);
        for (auto& v : x.values())
          if (flip(rng)) v = -v;
        return std::vector<Tensor>{x};
      },
      [](Tape& t, auto v) { return t.relu(v[0]); });
  check_primitive(
      "concat_cols",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.k), random_tensor(rng, d.r, d.c)};
      },
      [](Tape& t, auto v) {
        std::vector<Var> parts{v[0], v[1], v[0]};
        return t.concat_cols(parts);
      });
  check_primitive(
      "slice_cols",
      [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, 3, 4)}; },
      [](Tape& t, auto v) { return t.slice_cols(v[0], 1, 2); });
  check_primitive(
      "slice_rows",
      [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, 4, 3)}; },
      [](Tape& t, auto v) { return t.slice_rows(v[0], 1, 2); });
  check_primitive(
      "gather_rows",
      [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, 4, 3)}; },
      [](Tape& t, auto v) {
        const std::int32_t ids[] = {2, 0, 2, 3};
        return t.gather_rows(v[0], ids);
      });
  check_primitive(
      "mean_rows",
      [](auto& rng) {
        auto d = random_dims(rng);
        return std::vector<Tensor>{random_tensor(rng, d.r, d.c)};
      },
      [](Tape& t, auto v) { return t.mean_rows(v[0]); });
  check_primitive(
      "cross_entropy",
      [](auto& rng) {
        std::uniform_int_distribution<std::size_t> d(2, 4);
        return std::vector<Tensor>{random_tensor(rng, 1, d(rng), -2.f, 2.f)};
      },
      [](Tape& t, auto v) { return t.cross_entropy(v[0], 1); });
  check_primitive(
      "squared_error",
      [](auto& rng) { return std::vector<Tensor>{random_tensor(rng, 1, 1)}; },
      [](Tape& t, auto v) { return t.squared_error(v[0], 0.3f); });
}

TEST_CASE("matmul with identity returns the other operand") {
  std::mt19937_64 rng(3);
  Tape tape;
  Tensor eye({2, 2}, {1.f, 0.f, 0.f, 1.f});
  Tensor m = random_tensor(rng, 2, 2);
  const auto& out = tape.value(tape.matmul(tape.constant(eye), tape.constant(m)));
  for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == m[i]);
}

TEST_CASE("softmax rows are normalised") {
  std::mt19937_64 rng(4);
  Tape tape;
  const auto& y = tape.value(tape.softmax_rows(tape.constant(random_tensor(rng, 4, 5, -10.f, 10.f))));
  for (std::size_t r = 0; r < 4; ++r) {
    float s = 0.f;
    for (std::size_t c = 0; c < 5; ++c) s += y.at(r, c);
    CHECK(std::abs(s - 1.0f) < 1e-6f);
  }
}

TEST_CASE("cross entropy vanishes for a large correct margin") {
  Tape tape;
  Var loss = tape.cross_entropy(tape.constant(Tensor({1, 3}, {0.f, 20.f, 0.f})), 1);
  CHECK(tape.value(loss)[0] < 1e-3f);
}

TEST_CASE("shape mismatch names the op and both shapes") {
  Tape tape;
  Var a = tape.constant(Tensor::matrix(2, 3));
  Var b = tape.constant(Tensor::matrix(2, 3));
  try {
    tape.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("backward rejects non-scalar loss and a second pass") {
  Tape tape;
  Var x = tape.variable(Tensor::matrix(2, 2, 1.0f));
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
  Tape t2;
  Var y = t2.variable(Tensor::scalar(2.0f));
  Var l = t2.squared_error(y, 0.0f);
  t2.backward(l);
  CHECK(t2.grad(y)[0] == doctest::Approx(4.0f));
  CHECK_THROWS(t2.backward(l));
  CHECK_THROWS(t2.relu(y));
  t2.clear();
  CHECK(t2.size() == 0);
}

TEST_CASE("sum(W x) gradient matches finite differences and has outer-product structure") {
  std::mt19937_64 rng(11);
  Tensor w = random_tensor(rng, 3, 4);
  Tensor x = random_tensor(rng, 4, 1);
  Parameter pw("w", w);
  Tape tape;
  Var out = tape.matmul(tape.parameter(pw), tape.constant(x));
  Var loss = tape.matmul(tape.constant(Tensor::matrix(1, 3, 1.0f)), out);
  tape.backward(loss);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(pw.grad.at(r, c) == x[c]);

  const double err = finite_difference_error(
      {w, x}, [](Tape& t, auto v) { return t.matmul(v[0], v[1]); }, 5);
  CHECK(err < kTolerance);
}

TEST_CASE("constants receive no gradient and zero-scaled parameters get exact zeros") {
  Parameter p("p", Tensor::matrix(2, 2, 3.0f));
  Tape tape;
  Var c = tape.constant(Tensor::matrix(2, 2, 1.0f));
  Var scaled = tape.scale(tape.parameter(p), 0.0f);
  Var loss = tape.mean_rows(tape.mean_rows(tape.add(scaled, c)));
  Var scalar = tape.matmul(loss, tape.constant(Tensor::matrix(2, 1, 1.0f)));
  tape.backward(scalar);
  CHECK(tape.grad(c).empty());
  for (float g : p.grad.values()) CHECK(g == 0.0f);
}

TEST_CASE("parameters unreachable from the loss keep zero gradient") {
  Parameter used("used", Tensor::scalar(1.0f));
  Parameter unused("unused", Tensor::scalar(1.0f));
  Tape tape;
  tape.parameter(unused);
  Var l = tape.squared_error(tape.parameter(used), 0.0f);
  tape.backward(l);
  CHECK(used.grad[0] == doctest::Approx(2.0f));
  CHECK(unused.grad[0] == 0.0f);
}

TEST_CASE("backward is bit-deterministic") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Parameter a("a", random_tensor(rng, 4, 4));
    Parameter g("g", random_tensor(rng, 1, 4));
    Parameter b("b", random_tensor(rng, 1, 4));
    Tape tape;
    Var x = tape.softmax_rows(tape.matmul(tape.parameter(a), tape.parameter(a)));
    x = tape.gelu(tape.layer_norm(x, tape.parameter(g), tape.parameter(b)));
    Var l = tape.cross_entropy(tape.mean_rows(x), 2);
    tape.backward(l);
    std::vector<float> out(a.grad.values().begin(), a.grad.values().end());
    out.insert(out.end(), g.grad.values().begin(), g.grad.values().end());
    return out;
  };
  const auto g1 = run();
  const auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(float)) == 0);
}

// --- optimizer -------------------------------------------------------------

TEST_CASE("warm-up rate by hand: proportion 0.1 of 100 steps") {
  WarmupSchedule s(1.0f, 0.1, 100, DecayMode::Constant);
  CHECK(s.warmup_steps() == 10);
  CHECK(s.rate(0) == doctest::Approx(0.1f));
  CHECK(s.rate(5) == doctest::Approx(0.6f));
  CHECK(s.rate(9) == doctest::Approx(1.0f));
  CHECK(s.rate(10) == doctest::Approx(1.0f));
  CHECK(s.rate(99) == doctest::Approx(1.0f));

  WarmupSchedule lin(1.0f, 0.1, 100, DecayMode::Linear);
  CHECK(lin.rate(10) == doctest::Approx(1.0f));
  CHECK(lin.rate(55) == doctest::Approx(0.5f));
  CHECK(lin.rate(100) == 0.0f);
}

TEST_CASE("zero gradients leave parameters unchanged") {
  std::vector<Parameter> params{Parameter("w", Tensor::matrix(2, 3, 0.7f))};
  AdamConfig cfg;
  cfg.learning_rate = 0.1f;
  cfg.total_steps = 50;
  Adam adam(cfg, params);
  for (int i = 0; i < 50; ++i) adam.step(params);
  for (float v : params[0].value.values()) CHECK(v == 0.7f);
}

TEST_CASE("Adam with zero betas is a sign-scaled step") {
  for (float g : {0.5f, -2.0f, 1e-3f}) {
    std::vector<Parameter> params{Parameter("w", Tensor::scalar(1.0f))};
    params[0].grad[0] = g;
    AdamConfig cfg;
    cfg.learning_rate = 0.01f;
    cfg.beta1 = 0.0f;
    cfg.beta2 = 0.0f;
    cfg.warmup_proportion = 0.0;
    cfg.total_steps = 3;
    Adam adam(cfg, params);
    adam.step(params);
    const double expected = 1.0 - 0.01 * g / (std::abs(g) + 1e-8);
    CHECK(params[0].value[0] == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("non-finite gradient aborts naming the parameter") {
  std::vector<Parameter> params{Parameter("layers.0.ffn.in.weight", Tensor::scalar(1.0f))};
  params[0].grad[0] = std::nanf("");
  AdamConfig cfg;
  cfg.total_steps = 2;
  Adam adam(cfg, params);
  try {
    adam.step(params);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("layers.0.ffn.in.weight") != std::string::npos);
  }
  CHECK(params[0].value[0] == 1.0f);
}

TEST_CASE("masked elements keep parameter and moments") {
  std::vector<Parameter> params{Parameter("w", Tensor::matrix(1, 3, 1.0f))};
  for (auto& g : params[0].grad.values()) g = 0.5f;
  AdamConfig cfg;
  cfg.learning_rate = 0.1f;
  cfg.total_steps = 5;
  Adam adam(cfg, params);
  std::vector<ElementMask> masks{{1, 0, 1}};
  adam.step(params, masks);
  CHECK(params[0].value[0] != 1.0f);
  CHECK(params[0].value[1] == 1.0f);
  CHECK(adam.first_moments()[0][1] == 0.0f);
  CHECK(adam.second_moments()[0][1] == 0.0f);
}

TEST_CASE("stepping past the planned steps is rejected") {
  std::vector<Parameter> params{Parameter("w", Tensor::scalar(1.0f))};
  AdamConfig cfg;
  cfg.total_steps = 1;
  Adam adam(cfg, params);
  adam.step(params);
  CHECK_THROWS(adam.step(params));
}
