#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "attnlens/autodiff.hpp"
#include "attnlens/tensor.hpp"

using namespace attnlens;

namespace {

Tensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                     double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(rows, cols);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor random_vec(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::vec(n);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("matmul forward", "[autodiff]") {
  Tape t;
  Var a = t.input(Tensor::from({2, 2}, {1, 2, 3, 4}));
  Var eye = t.constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
  Var b = t.constant(Tensor::from({2, 2}, {5, 6, 7, 8}));

  const Tensor& id = t.value(t.matmul(a, eye));
  CHECK(id(0, 0) == 1.0);
  CHECK(id(0, 1) == 2.0);
  CHECK(id(1, 0) == 3.0);
  CHECK(id(1, 1) == 4.0);

  const Tensor& c = t.value(t.matmul(a, b));
  CHECK(c(0, 0) == 19.0);
  CHECK(c(0, 1) == 22.0);
  CHECK(c(1, 0) == 43.0);
  CHECK(c(1, 1) == 50.0);
}

TEST_CASE("softmax forward", "[autodiff]") {
  Tape t;
  Var x = t.input(Tensor::row({0, 0}));
  const Tensor& p = t.value(t.softmax_rows(x));
  CHECK(p[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(p[1] == Catch::Approx(0.5).margin(1e-15));

  Var y = t.input(Tensor::row({std::log(3.0), 0, 0}));
  const Tensor& q = t.value(t.softmax_rows(y));
  CHECK(q[0] == Catch::Approx(0.6).margin(1e-12));
  CHECK(q[1] == Catch::Approx(0.2).margin(1e-12));
  CHECK(q[2] == Catch::Approx(0.2).margin(1e-12));
}

TEST_CASE("softmax rows sum to one for any finite input", "[autodiff]") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    double span = (trial % 5 + 1) * 40.0;  // up to +-200, stresses max-subtraction
    Tensor x = random_tensor(rng, 3, 7, -span, span);
    Tape t;
    const Tensor& p = t.value(t.softmax_rows(t.input(x)));
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < p.cols(); ++j) {
        CHECK(p(r, j) >= 0.0);
        s += p(r, j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("cross-entropy of a certain prediction is zero", "[autodiff]") {
  // With logit margin this large the non-target mass underflows to 0 exactly.
  Tape t;
  Var logits = t.input(Tensor::from({1, 2}, {1000.0, 0.0}));
  const Tensor& lp = t.value(t.log_softmax_pick(logits, {0}));
  CHECK(lp[0] == 0.0);
}

TEST_CASE("log-softmax pick matches manual computation", "[autodiff]") {
  std::mt19937_64 rng(12);
  Tensor logits = random_tensor(rng, 4, 6, -3.0, 3.0);
  std::vector<int> ids = {2, 0, 5, 3};
  Tape t;
  Var lp = t.log_softmax_pick(t.input(logits), ids);
  for (std::size_t r = 0; r < 4; ++r) {
    double mx = logits(r, 0);
    for (std::size_t j = 1; j < 6; ++j) mx = std::max(mx, logits(r, j));
    double z = 0.0;
    for (std::size_t j = 0; j < 6; ++j) z += std::exp(logits(r, j) - mx);
    double expect = logits(r, static_cast<std::size_t>(ids[r])) - mx - std::log(z);
    CHECK(t.value(lp)[r] == Catch::Approx(expect).margin(1e-14));
  }
}

TEST_CASE("dot of vector with itself has gradient 2x", "[autodiff]") {
  Tape t;
  Var x = t.input(Tensor::row({1, 2}), true);
  Var s = t.sum(t.mul(x, x));
  CHECK(t.value(s)[0] == 5.0);
  t.backward(s);
  Tensor g = t.grad(x);
  CHECK(g[0] == 2.0);
  CHECK(g[1] == 4.0);
}

TEST_CASE("softmax backward at symmetric point", "[autodiff]") {
  Tape t;
  Var x = t.input(Tensor::row({0, 0}), true);
  Var p = t.softmax_rows(x);
  t.backward(p, Tensor::row({1, -1}));
  Tensor g = t.grad(x);
  CHECK(g[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(g[1] == Catch::Approx(-0.5).margin(1e-15));
}

TEST_CASE("constant subgraph gets zero gradient", "[autodiff]") {
  Tape t;
  Var x = t.input(Tensor::row({1, 2}), true);
  Var c = t.constant(Tensor::row({5, 7}));
  Var s = t.sum(t.mul(t.add(x, c), c));
  t.backward(s);
  Tensor gc = t.grad(c);
  CHECK(gc[0] == 0.0);
  CHECK(gc[1] == 0.0);
  Tensor gx = t.grad(x);
  CHECK(gx[0] == 5.0);
  CHECK(gx[1] == 7.0);
}

TEST_CASE("off-path input gets zero gradient", "[autodiff]") {
  Tape t;
  Var x = t.input(Tensor::row({1, 2}), true);
  Var y = t.input(Tensor::row({3, 4}), true);
  Var s = t.sum(x);
  t.backward(s);
  Tensor gy = t.grad(y);
  CHECK(gy[0] == 0.0);
  CHECK(gy[1] == 0.0);
}

TEST_CASE("grad_check on sum of squares", "[autodiff]") {
  auto f = [](Tape& t, Var x) { return t.sum(t.mul(x, x)); };
  double err = grad_check(f, Tensor::row({1, 2, 3}), 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check on a constant function is exactly zero", "[autodiff]") {
  auto f = [](Tape& t, Var x) {
    (void)x;
    return t.input(Tensor::scalar(3.0));
  };
  CHECK(grad_check(f, Tensor::row({1, 2}), 1e-5) == 0.0);
}

TEST_CASE("grad_check per op on random shapes", "[autodiff]") {
  std::mt19937_64 rng(21);
  const double tol = 1e-5;
  const double eps = 1e-5;

  SECTION("matmul both sides") {
    Tensor a = random_tensor(rng, 3, 4);
    Tensor b = random_tensor(rng, 4, 5);
    auto fa = [&](Tape& t, Var x) { return t.sum(t.mul(t.matmul(x, t.constant(b)), t.constant(random_tensor(rng, 3, 5)))); };
    // fresh rng draw inside the lambda would differ per call; bind the probe first
    Tensor probe_a = random_tensor(rng, 3, 5);
    auto fa2 = [&](Tape& t, Var x) { return t.sum(t.mul(t.matmul(x, t.constant(b)), t.constant(probe_a))); };
    CHECK(grad_check(fa2, a, eps) < tol);
    Tensor probe_b = random_tensor(rng, 3, 5);
    auto fb = [&](Tape& t, Var x) { return t.sum(t.mul(t.matmul(t.constant(a), x), t.constant(probe_b))); };
    CHECK(grad_check(fb, b, eps) < tol);
    (void)fa;
  }
  SECTION("add, add_row, mul, scale") {
    Tensor a = random_tensor(rng, 2, 3);
    Tensor b = random_tensor(rng, 2, 3);
    Tensor bias = random_tensor(rng, 1, 3);
    Tensor probe = random_tensor(rng, 2, 3);
    auto f1 = [&](Tape& t, Var x) { return t.sum(t.mul(t.add(x, t.constant(b)), t.constant(probe))); };
    CHECK(grad_check(f1, a, eps) < tol);
    auto f2 = [&](Tape& t, Var x) { return t.sum(t.mul(t.add_row(t.constant(a), x), t.constant(probe))); };
    CHECK(grad_check(f2, bias, eps) < tol);
    auto f3 = [&](Tape& t, Var x) { return t.sum(t.mul(t.mul(x, t.constant(b)), t.constant(probe))); };
    CHECK(grad_check(f3, a, eps) < tol);
    auto f4 = [&](Tape& t, Var x) { return t.sum(t.mul(t.scale(x, -2.5), t.constant(probe))); };
    CHECK(grad_check(f4, a, eps) < tol);
  }
  SECTION("transpose, slice, concat, reshape") {
    Tensor a = random_tensor(rng, 3, 5);
    Tensor probe = random_tensor(rng, 5, 3);
    auto f1 = [&](Tape& t, Var x) { return t.sum(t.mul(t.transpose(x), t.constant(probe))); };
    CHECK(grad_check(f1, a, eps) < tol);
    Tensor probe2 = random_tensor(rng, 3, 2);
    auto f2 = [&](Tape& t, Var x) { return t.sum(t.mul(t.slice_cols(x, 1, 2), t.constant(probe2))); };
    CHECK(grad_check(f2, a, eps) < tol);
    Tensor probe3 = random_tensor(rng, 3, 10);
    auto f3 = [&](Tape& t, Var x) {
      Var left = t.slice_cols(x, 0, 2);
      Var right = t.slice_cols(x, 2, 3);
      return t.sum(t.mul(t.concat_cols({x, right, left}), t.constant(probe3)));
    };
    CHECK(grad_check(f3, a, eps) < tol);
    Tensor probe4 = random_tensor(rng, 5, 3);
    auto f4 = [&](Tape& t, Var x) { return t.sum(t.mul(t.reshape(x, {5, 3}), t.constant(probe4))); };
    CHECK(grad_check(f4, a, eps) < tol);
  }
  SECTION("gather with repeated ids") {
    Tensor table = random_tensor(rng, 6, 4);
    Tensor probe = random_tensor(rng, 5, 4);
    std::vector<int> ids = {1, 3, 1, 0, 5};
    auto f = [&](Tape& t, Var x) { return t.sum(t.mul(t.gather_rows(x, ids), t.constant(probe))); };
    CHECK(grad_check(f, table, eps) < tol);
  }
  SECTION("softmax and masked softmax") {
    Tensor a = random_tensor(rng, 4, 6, -2.0, 2.0);
    Tensor probe = random_tensor(rng, 4, 6);
    auto f1 = [&](Tape& t, Var x) { return t.sum(t.mul(t.softmax_rows(x), t.constant(probe))); };
    CHECK(grad_check(f1, a, eps) < tol);
    Tensor mask(4, 6);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (std::size_t r = 0; r < 4; ++r) {
      mask(r, r) = 1.0;  // keep at least one lane per row
      for (std::size_t j = 0; j < 6; ++j)
        if (mask(r, j) == 0.0 && coin(rng) < 0.6) mask(r, j) = 1.0;
    }
    auto f2 = [&](Tape& t, Var x) {
      return t.sum(t.mul(t.softmax_rows(x, t.constant(mask)), t.constant(probe)));
    };
    CHECK(grad_check(f2, a, eps) < tol);
  }
  SECTION("layer norm wrt input, gain, bias") {
    Tensor x0 = random_tensor(rng, 3, 8);
    Tensor g0 = random_tensor(rng, 1, 8, 0.5, 1.5);
    Tensor b0 = random_tensor(rng, 1, 8);
    Tensor probe = random_tensor(rng, 3, 8);
    auto fx = [&](Tape& t, Var x) {
      return t.sum(t.mul(t.layer_norm_rows(x, t.constant(g0), t.constant(b0)), t.constant(probe)));
    };
    CHECK(grad_check(fx, x0, eps) < tol);
    auto fg = [&](Tape& t, Var g) {
      return t.sum(t.mul(t.layer_norm_rows(t.constant(x0), g, t.constant(b0)), t.constant(probe)));
    };
    CHECK(grad_check(fg, g0, eps) < tol);
    auto fb = [&](Tape& t, Var b) {
      return t.sum(t.mul(t.layer_norm_rows(t.constant(x0), t.constant(g0), b), t.constant(probe)));
    };
    CHECK(grad_check(fb, b0, eps) < tol);
  }
  SECTION("relu away from the kink, exp") {
    Tensor a = random_tensor(rng, 2, 6);
    for (double& v : a.data()) v += (v >= 0.0 ? 0.2 : -0.2);
    Tensor probe = random_tensor(rng, 2, 6);
    auto f1 = [&](Tape& t, Var x) { return t.sum(t.mul(t.relu(x), t.constant(probe))); };
    CHECK(grad_check(f1, a, eps) < tol);
    auto f2 = [&](Tape& t, Var x) { return t.sum(t.mul(t.exp(x), t.constant(probe))); };
    CHECK(grad_check(f2, a, eps) < tol);
  }
  SECTION("log-softmax pick") {
    Tensor logits = random_tensor(rng, 3, 5, -2.0, 2.0);
    std::vector<int> ids = {4, 0, 2};
    Tensor probe = random_vec(rng, 3);
    auto f = [&](Tape& t, Var x) {
      return t.sum(t.mul(t.log_softmax_pick(x, ids), t.constant(probe)));
    };
    CHECK(grad_check(f, logits, eps) < tol);
  }
}

TEST_CASE("masked softmax ignores masked lanes exactly", "[autodiff]") {
  Tensor mask = Tensor::row({1, 0, 1});
  Tensor a = Tensor::row({0.3, -0.7, 1.1});
  Tensor b = Tensor::row({0.3, 1e300, 1.1});  // masked lane altered wildly

  auto run = [&](const Tensor& x) {
    Tape t;
    Var in = t.input(x, true);
    Var p = t.softmax_rows(in, t.constant(mask));
    Tensor out = t.value(p);
    t.backward(p, Tensor::row({1.0, 2.0, 3.0}));
    return std::make_pair(out, t.grad(in));
  };
  auto [pa, ga] = run(a);
  auto [pb, gb] = run(b);

  CHECK(pa[1] == 0.0);
  CHECK(ga[1] == 0.0);
  CHECK(std::memcmp(pa.raw(), pb.raw(), sizeof(double) * 3) == 0);
  CHECK(std::memcmp(ga.raw(), gb.raw(), sizeof(double) * 3) == 0);
}

TEST_CASE("gather accumulates over repeated ids", "[autodiff]") {
  Tape t;
  Var table = t.input(Tensor::from({3, 2}, {0, 0, 0, 0, 0, 0}), true);
  Var g = t.gather_rows(table, {1, 1, 0});
  t.backward(t.sum(g));
  Tensor d = t.grad(table);
  CHECK(d(0, 0) == 1.0);
  CHECK(d(1, 0) == 2.0);
  CHECK(d(2, 0) == 0.0);
}

TEST_CASE("backward is linear in the seed", "[autodiff]") {
  std::mt19937_64 rng(31);
  Tensor x0 = random_tensor(rng, 3, 4);
  Tensor w = random_tensor(rng, 4, 4);
  Tensor gamma = random_tensor(rng, 1, 4, 0.5, 1.5);
  Tensor beta = random_vec(rng, 4);
  Tensor seed = random_tensor(rng, 3, 4);
  beta = Tensor::from({1, 4}, beta.data());

  auto run = [&](double a) {
    Tape t;
    Var x = t.input(x0, true);
    Var h = t.layer_norm_rows(t.relu(t.matmul(x, t.constant(w))), t.constant(gamma),
                              t.constant(beta));
    Var out = t.softmax_rows(h);
    Tensor s = seed;
    for (double& v : s.data()) v *= a;
    t.backward(out, s);
    return t.grad(x);
  };
  Tensor g1 = run(1.0);
  Tensor ga = run(3.5);
  for (std::size_t i = 0; i < g1.size(); ++i)
    CHECK(std::abs(ga[i] - 3.5 * g1[i]) <= 1e-12);
}

TEST_CASE("evaluation is bit-deterministic", "[autodiff]") {
  std::mt19937_64 rng(41);
  Tensor x0 = random_tensor(rng, 4, 6);
  Tensor w = random_tensor(rng, 6, 6);
  auto run = [&]() {
    Tape t;
    Var x = t.input(x0, true);
    Var out = t.softmax_rows(t.matmul(t.relu(x), t.constant(w)));
    Tensor v = t.value(out);
    t.backward(out, Tensor(4, 6).fill(1.0));
    return std::make_pair(v, t.grad(x));
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  CHECK(std::memcmp(v1.raw(), v2.raw(), sizeof(double) * v1.size()) == 0);
  CHECK(std::memcmp(g1.raw(), g2.raw(), sizeof(double) * g1.size()) == 0);
}

TEST_CASE("shape errors fail fast", "[autodiff]") {
  Tape t;
  Var a = t.input(Tensor(2, 3));
  Var b = t.input(Tensor(2, 3));
  CHECK_THROWS_AS(t.matmul(a, b), ShapeError);
  CHECK_THROWS_AS(t.add(a, t.input(Tensor(3, 2))), ShapeError);
  CHECK_THROWS_AS(t.slice_cols(a, 2, 2), ShapeError);
  CHECK_THROWS_AS(t.gather_rows(a, {0, 2}), ShapeError);
  CHECK_THROWS_AS(t.log_softmax_pick(a, {0, 3}), ShapeError);
  CHECK_THROWS_AS(t.log_softmax_pick(a, {0}), ShapeError);
  Var s = t.sum(a);
  CHECK_THROWS_AS(t.backward(s, Tensor::row({1, 2})), ShapeError);

  Tape other;
  CHECK_THROWS_AS(other.relu(a), ShapeError);
}

TEST_CASE("non-finite values are rejected", "[autodiff]") {
  CHECK_THROWS_AS(Tensor::from({1, 2}, {1.0, std::numeric_limits<double>::infinity()}),
                  NumericError);
  Tape t;
  t.set_check_finite(true);
  Var x = t.input(Tensor::row({1000.0}));
  CHECK_THROWS_AS(t.exp(x), NumericError);
}

TEST_CASE("matmul throughput", "[.bench]") {
  const std::size_t n = 128;
  std::mt19937_64 rng(7);
  Tensor a = random_tensor(rng, n, n);
  Tensor b = random_tensor(rng, n, n);
  Tensor c(n, n);
  const int reps = 200;
  auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) {
    c.fill(0.0);
    Tape::matmul_acc(a.raw(), b.raw(), c.raw(), n, n, n);
  }
  auto t1 = std::chrono::steady_clock::now();
  double sec = std::chrono::duration<double>(t1 - t0).count();
  double gflops = 2.0 * n * n * n * reps / sec / 1e9;
  WARN("matmul " << n << "^3 x" << reps << ": " << sec << " s, " << gflops << " GFLOP/s");
  CHECK(c(0, 0) != 0.0);
}
