#include <cstring>
#include <functional>
#include <vector>

#include "doctest.h"
#include "stam/gradcheck.hpp"
#include "stam/rng.hpp"
#include "stam/tape.hpp"

using stam::Rng;
using stam::Tape;
using stam::TensorD;
using stam::TensorF;
using stam::Var;
using stam::concat_cols;
using stam::concat_rows;

namespace {

TensorD randu(Rng& rng, std::vector<int64_t> shape, double lo, double hi) {
  TensorD t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so relu kinks cannot interfere with the
// finite-difference step.
TensorD randu_signed_offzero(Rng& rng, std::vector<int64_t> shape) {
  TensorD t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) {
    double v = rng.uniform(0.2, 1.0);
    t[i] = rng.bernoulli(0.5) ? v : -v;
  }
  return t;
}

// Builds the graph once for analytic gradients, then replays it through the
// finite-difference oracle.
template <typename BuildFn>
double fd_check(std::vector<TensorD> params, BuildFn build) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (auto& p : params) vars.push_back(tape.leaf(p, true));
  Var<double> loss = build(tape, vars);
  tape.backward(loss);
  std::vector<TensorD> analytic;
  for (auto& v : vars) analytic.push_back(v.grad());
  std::function<double(const std::vector<TensorD>&)> f =
      [&build](const std::vector<TensorD>& ps) {
        Tape<double> t2;
        std::vector<Var<double>> vs;
        for (auto& p : ps) vs.push_back(t2.leaf(p, false));
        return build(t2, vs).value()[0];
      };
  return stam::finite_difference_check<double>(f, params, analytic);
}

}  // namespace

TEST_CASE("matmul identity and zero cases") {
  Tape<double> t;
  auto i2 = t.constant(TensorD::matrix({{1, 0}, {0, 1}}));
  auto a = t.constant(TensorD::matrix({{1, 2}, {3, 4}}));
  auto prod = matmul(i2, a);
  CHECK(prod.value() == TensorD::matrix({{1, 2}, {3, 4}}));

  auto z = t.constant(TensorD::matrix({{0}, {0}}));
  auto zz = matmul(i2, z);
  CHECK(zz.value() == TensorD::matrix({{0}, {0}}));
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Tape<double> t;
  auto a = t.constant(TensorD({3, 4}, 1.0));
  auto b = t.constant(TensorD({2, 2}, 1.0));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const stam::ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[3x4]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(7);
  TensorD a = randu(rng, {3, 4}, -1.0, 1.0);
  TensorD b = randu(rng, {4, 2}, -1.0, 1.0);
  TensorD r = randu(rng, {3, 2}, -1.0, 1.0);
  double err = fd_check({a, b}, [&r](Tape<double>& t, std::vector<Var<double>>& v) {
    return sum_all(multiply(matmul(v[0], v[1]), t.constant(r)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("softmax rows: symmetry, stabilization, reference values") {
  Tape<double> t;
  auto u = softmax_rows(t.constant(TensorD::row({0, 0, 0})));
  for (int j = 0; j < 3; ++j) CHECK(u.value()[j] == doctest::Approx(1.0 / 3.0));

  Tape<float> tf;
  auto big = softmax_rows(tf.constant(TensorF::row({1000.0f, 0.0f})));
  CHECK(big.value().all_finite());
  CHECK(big.value()[0] == doctest::Approx(1.0f));
  CHECK(big.value()[1] == doctest::Approx(0.0f).epsilon(1e-6));

  auto v = softmax_rows(t.constant(TensorD::row({1, 2, 3})));
  CHECK(v.value()[0] == doctest::Approx(0.090031).epsilon(1e-4));
  CHECK(v.value()[1] == doctest::Approx(0.244728).epsilon(1e-4));
  CHECK(v.value()[2] == doctest::Approx(0.665241).epsilon(1e-4));
}

TEST_CASE("softmax rows are stochastic on random input") {
  Rng rng(11);
  Tape<double> t;
  auto y = softmax_rows(t.constant(randu(rng, {6, 9}, -5.0, 5.0)));
  for (int64_t i = 0; i < 6; ++i) {
    double s = 0;
    for (int64_t j = 0; j < 9; ++j) {
      double e = y.value()(i, j);
      CHECK(e >= 0.0);
      CHECK(e <= 1.0);
      s += e;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("softmax gradients match finite differences") {
  Rng rng(13);
  TensorD x = randu(rng, {4, 5}, -2.0, 2.0);
  TensorD r = randu(rng, {4, 5}, -1.0, 1.0);
  double err = fd_check({x}, [&r](Tape<double>& t, std::vector<Var<double>>& v) {
    return sum_all(multiply(softmax_rows(v[0]), t.constant(r)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("layer_norm values") {
  Tape<double> t;
  auto gamma = t.constant(TensorD::row({1, 1, 1}));
  auto beta = t.constant(TensorD::row({0, 0, 0}));
  auto flat = layer_norm(t.constant(TensorD::row({4, 4, 4})), gamma, beta);
  for (int j = 0; j < 3; ++j) CHECK(flat.value()[j] == doctest::Approx(0.0));

  auto g2 = t.constant(TensorD::row({1, 1}));
  auto b2 = t.constant(TensorD::row({0, 0}));
  auto unit = layer_norm(t.constant(TensorD::row({1, -1})), g2, b2);
  CHECK(unit.value()[0] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(unit.value()[1] == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm gradients match finite differences") {
  Rng rng(17);
  TensorD x = randu(rng, {3, 6}, -1.5, 1.5);
  TensorD gamma = randu(rng, {1, 6}, 0.5, 1.5);
  TensorD beta = randu(rng, {1, 6}, -0.3, 0.3);
  TensorD r = randu(rng, {3, 6}, -1.0, 1.0);
  double err = fd_check({x, gamma, beta}, [&r](Tape<double>& t, std::vector<Var<double>>& v) {
    return sum_all(multiply(layer_norm(v[0], v[1], v[2]), t.constant(r)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise values") {
  Tape<double> t;
  auto s = add(t.constant(TensorD::row({1, 2})), t.constant(TensorD::row({3, 4})));
  CHECK(s.value() == TensorD::row({4, 6}));

  auto r = relu(t.constant(TensorD::row({-1, 2})));
  CHECK(r.value() == TensorD::row({0, 2}));

  auto m = mean_rows(t.constant(TensorD::matrix({{2}, {4}})));
  CHECK(m.value() == TensorD::row({3}));

  auto d = subtract(t.constant(TensorD::row({5, 1})), t.constant(TensorD::row({2, 3})));
  CHECK(d.value() == TensorD::row({3, -2}));

  auto p = multiply(t.constant(TensorD::row({2, 3})), t.constant(TensorD::row({4, -1})));
  CHECK(p.value() == TensorD::row({8, -3}));
}

TEST_CASE("elementwise rejects shape mismatch") {
  Tape<double> t;
  auto a = t.constant(TensorD({2, 3}, 1.0));
  auto b = t.constant(TensorD({3, 2}, 1.0));
  CHECK_THROWS_AS(add(a, b), stam::ShapeError);
}

TEST_CASE("structural ops and their gradients") {
  Rng rng(23);
  TensorD x = randu_signed_offzero(rng, {4, 3});
  TensorD bias = randu(rng, {1, 4}, -0.5, 0.5);
  TensorD gamma = randu(rng, {1, 4}, 0.8, 1.2);
  TensorD beta = randu(rng, {1, 4}, -0.2, 0.2);
  auto build = [](Tape<double>& t, std::vector<Var<double>>& v) {
    auto a = relu(v[0]);
    auto b = concat_cols<double>({a, scale(v[0], 0.5)});
    auto c = concat_rows<double>({b, multiply(b, b)});
    auto d = slice_cols(c, 1, 5);
    auto e = tile_rows(d, 2);
    auto f = repeat_rows_each(slice_rows(e, 0, 3), 2);
    auto g = add_rowvec(f, v[1]);
    auto h = matmul(transpose(g), g);
    auto sm = softmax_rows(h);
    auto ln = layer_norm(sm, v[2], v[3]);
    auto k = mean_rows(multiply(ln, ln));
    return sum_all(reshape(k, {4, 1}));
  };
  double err = fd_check({x, bias, gamma, beta}, build);
  CHECK(err < 1e-6);
}

TEST_CASE("backward gives ones for plain sum and p for half square sum") {
  Rng rng(29);
  TensorD p = randu(rng, {3, 4}, -2.0, 2.0);

  Tape<double> t1;
  auto v1 = t1.leaf(p, true);
  t1.backward(sum_all(v1));
  CHECK(v1.grad() == TensorD({3, 4}, 1.0));

  Tape<double> t2;
  auto v2 = t2.leaf(p, true);
  t2.backward(scale(sum_all(multiply(v2, v2)), 0.5));
  TensorD g = v2.grad();
  for (int64_t i = 0; i < p.numel(); ++i) CHECK(g[i] == doctest::Approx(p[i]).epsilon(1e-12));
}

TEST_CASE("backward on a non-scalar is a contract error") {
  Tape<double> t;
  auto v = t.leaf(TensorD({2, 2}, 1.0), true);
  auto y = relu(v);
  CHECK_THROWS_AS(t.backward(y), stam::ContractError);
}

TEST_CASE("gradient additivity over shared leaves") {
  Rng rng(31);
  TensorD p = randu(rng, {3, 3}, -1.0, 1.0);
  TensorD c = randu(rng, {3, 3}, -1.0, 1.0);

  auto grad_of = [&](int which) {
    Tape<double> t;
    auto v = t.leaf(p, true);
    auto f = scale(sum_all(multiply(v, v)), 0.5);
    auto g = sum_all(multiply(v, t.constant(c)));
    if (which == 0) t.backward(f);
    if (which == 1) t.backward(g);
    if (which == 2) t.backward(add(f, g));
    return v.grad();
  };
  TensorD gf = grad_of(0), gg = grad_of(1), gsum = grad_of(2);
  for (int64_t i = 0; i < p.numel(); ++i) {
    CHECK(gsum[i] == doctest::Approx(gf[i] + gg[i]).epsilon(1e-12));
  }
}

TEST_CASE("evaluation is bit-deterministic") {
  Rng rng(37);
  TensorD x = randu(rng, {5, 5}, -3.0, 3.0);
  auto run = [&]() {
    Tape<float> t;
    auto v = t.constant(x.cast<float>());
    auto y = softmax_rows(matmul(v, transpose(v)));
    return y.value();
  };
  stam::TensorF a = run(), b = run();
  REQUIRE(a.numel() == b.numel());
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.numel())) == 0);
}

TEST_CASE("masked cross-entropy matches finite differences") {
  Rng rng(41);
  TensorD logits = randu(rng, {4, 3}, -1.0, 1.0);
  TensorD target({4, 3});
  stam::Tensor<uint8_t> mask({4, 3});
  for (int64_t i = 0; i < 12; ++i) {
    target[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
    mask[i] = rng.bernoulli(0.7) ? 1 : 0;
  }
  mask[0] = 1;  // keep the mask nonempty
  auto build = [&](Tape<double>& t, std::vector<Var<double>>& v) {
    return bce_masked(softmax_rows(v[0]), target, mask);
  };
  double err = fd_check({logits}, build);
  CHECK(err < 1e-6);
}

TEST_CASE("masked cross-entropy rejects an empty mask") {
  Tape<double> t;
  auto p = t.constant(TensorD({2, 2}, 0.5));
  TensorD target({2, 2}, 1.0);
  stam::Tensor<uint8_t> mask({2, 2});
  CHECK_THROWS_AS(bce_masked(p, target, mask), stam::ContractError);
}

TEST_CASE("non-finite op output violates the contract") {
  Tape<double> t;
  auto huge = t.constant(TensorD({1, 2}, 1e308));
  CHECK_THROWS_AS(multiply(huge, huge), stam::ContractError);
}

TEST_CASE("finite difference oracle self-checks") {
  Rng rng(43);
  TensorD p = randu(rng, {1, 6}, -2.0, 2.0);
  std::function<double(const std::vector<TensorD>&)> f =
      [](const std::vector<TensorD>& ps) {
        double s = 0;
        for (int64_t i = 0; i < ps[0].numel(); ++i) s += ps[0][i] * ps[0][i];
        return 0.5 * s;
      };
  double err = stam::finite_difference_check<double>(f, {p}, {p});
  CHECK(err < 1e-9);

  int calls = 0;
  std::function<double(const std::vector<TensorD>&)> unstable =
      [&calls](const std::vector<TensorD>&) { return static_cast<double>(++calls); };
  CHECK_THROWS_AS(stam::finite_difference_check<double>(unstable, {p}, {p}),
                  stam::ContractError);
}
