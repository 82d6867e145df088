#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "mmkd/errors.hpp"
#include "mmkd/gradcheck.hpp"
#include "mmkd/ops.hpp"
#include "mmkd/rng.hpp"
#include "mmkd/tensor.hpp"

using namespace mmkd;
using namespace mmkd::ad;

TEST_SUITE("rng") {

TEST_CASE("mt19937_64 output stream matches the standard pin") {
  // The 10000th value of a default-constructed mt19937_64 is fixed by the
  // C++ standard; if this fails, nothing downstream is portable.
  std::mt19937_64 gen;
  std::uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = gen();
  CHECK(v == 9981545732273789042ULL);
}

TEST_CASE("seeded streams are reproducible") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform01() == b.uniform01());
  Rng c(42), d(42);
  for (int i = 0; i < 100; ++i) CHECK(c.normal() == d.normal());
}

TEST_CASE("uniform01 stays in the half-open unit interval") {
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("uniform_int respects bounds and rejects bad arguments") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const int v = rng.uniform_int(7);
    CHECK(v >= 0);
    CHECK(v < 7);
  }
  CHECK_THROWS_AS(rng.uniform_int(0), ParameterError);
}

TEST_CASE("shuffle is a permutation and is seed-stable") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  Rng rng(11);
  rng.shuffle(v);
  std::vector<int> w = v;
  std::sort(w.begin(), w.end());
  for (int i = 0; i < 50; ++i) CHECK(w[i] == i);

  std::vector<int> v2(50);
  std::iota(v2.begin(), v2.end(), 0);
  Rng rng2(11);
  rng2.shuffle(v2);
  CHECK(v == v2);
}

TEST_CASE("derive produces distinct decorrelated stream ids") {
  const std::uint64_t a = Rng::derive(123, 0);
  const std::uint64_t b = Rng::derive(123, 1);
  const std::uint64_t c = Rng::derive(124, 0);
  CHECK(a != b);
  CHECK(a != c);
  Rng ra(a), rb(b);
  bool any_diff = false;
  for (int i = 0; i < 16; ++i) any_diff = any_diff || (ra.next_u64() != rb.next_u64());
  CHECK(any_diff);
}

} // TEST_SUITE("rng")

TEST_SUITE("tensor") {

TEST_CASE("leaf construction validates shape against data") {
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({-1}), DimensionError);
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.size() == 6);
}

TEST_CASE("backward accumulates into leaves") {
  Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0}).set_requires_grad(true);
  Tensor y = Tensor::from_data({3}, {4.0, 5.0, 6.0}).set_requires_grad(true);
  Tensor loss = sum(mul(x, y));
  CHECK(loss.item() == doctest::Approx(32.0));
  backward(loss);
  REQUIRE(x.has_grad());
  REQUIRE(y.has_grad());
  CHECK(x.grad() == std::vector<double>{4.0, 5.0, 6.0});
  CHECK(y.grad() == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("a leaf used twice receives both contributions") {
  Tensor x = Tensor::from_data({2}, {3.0, -2.0}).set_requires_grad(true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK(x.grad() == std::vector<double>{6.0, -4.0});
}

TEST_CASE("backward demands a scalar root") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("backward cannot run twice on the same graph") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  Tensor loss = sum(x);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), ContractError);
}

TEST_CASE("no-grad mode produces constants") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  {
    NoGradGuard guard;
    Tensor y = scale(x, 2.0);
    CHECK_FALSE(y.requires_grad());
  }
  Tensor z = scale(x, 2.0);
  CHECK(z.requires_grad());
}

TEST_CASE("detach cuts the graph") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  Tensor d = scale(x, 3.0).detach();
  CHECK_FALSE(d.requires_grad());
  CHECK(d.value() == std::vector<double>{3.0, 6.0});
}

TEST_CASE("requires_grad can only be toggled on leaves") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(y.set_requires_grad(true), ContractError);
}

TEST_CASE("randn is seed-deterministic") {
  Rng r1(9), r2(9);
  Tensor a = Tensor::randn({4, 4}, r1, 0.02);
  Tensor b = Tensor::randn({4, 4}, r2, 0.02);
  CHECK(a.value() == b.value());
}

} // TEST_SUITE("tensor")

TEST_SUITE("ops") {

TEST_CASE("matmul matches the worked 2x2 example") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.value() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul reports both offending shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul_nt agrees with matmul against the transposed operand") {
  Rng rng(5);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0);
  Tensor b = Tensor::randn({5, 4}, rng, 1.0);
  std::vector<double> bt(4 * 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) bt[j * 5 + i] = b.value()[i * 4 + j];
  Tensor ref = matmul(a, Tensor::from_data({4, 5}, bt));
  Tensor got = matmul_nt(a, b);
  REQUIRE(got.shape() == Shape{3, 5});
  for (int i = 0; i < 15; ++i) CHECK(got.value()[i] == doctest::Approx(ref.value()[i]).epsilon(1e-12));
}

TEST_CASE("softmax_t matches the two-way oracle and normalizes") {
  Tensor z = Tensor::from_data({1, 2}, {1.0, 0.0});
  Tensor p = softmax_t(z, 1.0);
  CHECK(p.value()[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(p.value()[1] == doctest::Approx(0.2689414213699951).epsilon(1e-12));

  Rng rng(13);
  Tensor x = Tensor::randn({6, 9}, rng, 3.0);
  Tensor q = softmax_t(x, 0.7);
  for (int i = 0; i < 6; ++i) {
    double s = 0.0;
    for (int j = 0; j < 9; ++j) s += q.value()[i * 9 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax_t is invariant to a per-row shift") {
  Tensor x = Tensor::from_data({1, 4}, {1.0, 2.0, 3.0, 4.0});
  Tensor shifted = Tensor::from_data({1, 4}, {101.0, 102.0, 103.0, 104.0});
  Tensor p = softmax_t(x, 0.7);
  Tensor q = softmax_t(shifted, 0.7);
  for (int j = 0; j < 4; ++j) CHECK(std::fabs(p.value()[j] - q.value()[j]) < 1e-12);
}

TEST_CASE("softmax_t rejects bad temperature and non-finite input") {
  Tensor x = Tensor::zeros({1, 3});
  CHECK_THROWS_AS(softmax_t(x, 0.0), ParameterError);
  CHECK_THROWS_AS(softmax_t(x, -1.0), ParameterError);
  Tensor bad = Tensor::from_data({1, 3}, {1.0, std::numeric_limits<double>::infinity(), 0.0});
  CHECK_THROWS_AS(softmax_t(bad, 1.0), NumericError);
  CHECK_THROWS_AS(log_softmax_t(bad, 1.0), NumericError);
}

TEST_CASE("log_softmax_t is consistent with softmax_t") {
  Rng rng(21);
  Tensor x = Tensor::randn({4, 7}, rng, 2.0);
  Tensor p = softmax_t(x, 0.7);
  Tensor lp = log_softmax_t(x, 0.7);
  for (int i = 0; i < 28; ++i)
    CHECK(std::exp(lp.value()[i]) == doctest::Approx(p.value()[i]).epsilon(1e-12));
}

TEST_CASE("softmax gradient matches the closed form") {
  Tensor z = Tensor::from_data({1, 2}, {0.0, 0.0}).set_requires_grad(true);
  Tensor loss = sum(pick_per_row(softmax_t(z, 1.0), {0}));
  backward(loss);
  CHECK(z.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(z.grad()[1] == doctest::Approx(-0.25).epsilon(1e-12));
}

TEST_CASE("layer_norm maps a two-point row near unit scale") {
  Tensor x = Tensor::from_data({1, 2}, {1.0, 3.0});
  Tensor g = Tensor::full({2}, 1.0);
  Tensor b = Tensor::zeros({2});
  Tensor y = layer_norm(x, g, b, 1e-5);
  CHECK(std::fabs(y.value()[0] - (-1.0)) < 1e-4);
  CHECK(std::fabs(y.value()[1] - 1.0) < 1e-4);
  CHECK_THROWS_AS(layer_norm(x, g, b, 0.0), ParameterError);
}

TEST_CASE("layer_norm survives a constant row thanks to eps") {
  Tensor x = Tensor::full({1, 4}, 2.5);
  Tensor g = Tensor::full({4}, 1.0);
  Tensor b = Tensor::zeros({4});
  Tensor y = layer_norm(x, g, b, 1e-5);
  for (int j = 0; j < 4; ++j) CHECK(y.value()[j] == doctest::Approx(0.0));
}

TEST_CASE("standardize_rows matches the three-point oracle") {
  Tensor x = Tensor::from_data({1, 3}, {1.0, 2.0, 3.0});
  Tensor y = standardize_rows(x);
  CHECK(y.value()[0] == doctest::Approx(-1.224744871391589).epsilon(1e-12));
  CHECK(y.value()[1] == doctest::Approx(0.0));
  CHECK(y.value()[2] == doctest::Approx(1.224744871391589).epsilon(1e-12));
}

TEST_CASE("standardize_rows maps constant rows to zeros with zero gradient") {
  Tensor x = Tensor::full({2, 3}, 7.0).set_requires_grad(true);
  Tensor y = standardize_rows(x);
  for (double v : y.value()) CHECK(v == 0.0);
  backward(sum(y));
  for (double gv : x.grad()) CHECK(gv == 0.0);
}

TEST_CASE("gather_rows is bit-identical to slicing a contiguous range") {
  Rng rng(17);
  Tensor x = Tensor::randn({6, 5}, rng, 1.0);
  Tensor a = slice_rows(x, 2, 3);
  Tensor b = gather_rows(x, {2, 3, 4});
  CHECK(a.value() == b.value());
}

TEST_CASE("gather_rows backward accumulates duplicate rows") {
  Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
  Tensor g = gather_rows(x, {0, 0});
  backward(sum(g));
  CHECK(x.grad() == std::vector<double>{2, 2, 0, 0});
}

TEST_CASE("gather_rows rejects out-of-range rows") {
  Tensor x = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(gather_rows(x, {0, 2}), DimensionError);
  CHECK_THROWS_AS(gather_rows(x, {-1}), DimensionError);
}

TEST_CASE("concat_rows round-trips with slice_rows") {
  Rng rng(23);
  Tensor a = Tensor::randn({2, 3}, rng, 1.0);
  Tensor b = Tensor::randn({1, 3}, rng, 1.0);
  Tensor c = concat_rows({a, b});
  REQUIRE(c.shape() == Shape{3, 3});
  CHECK(slice_rows(c, 0, 2).value() == a.value());
  CHECK(slice_rows(c, 2, 1).value() == b.value());
  CHECK_THROWS_AS(concat_rows({a, Tensor::zeros({1, 4})}), DimensionError);
}

TEST_CASE("pick_per_row gathers and validates columns") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor p = pick_per_row(x, {2, 0});
  CHECK(p.value() == std::vector<double>{3, 4});
  CHECK_THROWS_AS(pick_per_row(x, {0, 3}), DimensionError);
  CHECK_THROWS_AS(pick_per_row(x, {0}), DimensionError);
}

TEST_CASE("div_rows divides per row and rejects zero divisors") {
  Tensor x = Tensor::from_data({2, 2}, {2, 4, 9, 3});
  Tensor v = Tensor::from_data({2}, {2.0, 3.0});
  Tensor y = div_rows(x, v);
  CHECK(y.value() == std::vector<double>{1, 2, 3, 1});
  Tensor z = Tensor::from_data({2}, {1.0, 0.0});
  CHECK_THROWS_AS(div_rows(x, z), NumericError);
}

TEST_CASE("gelu matches reference points") {
  Tensor x = Tensor::from_data({3}, {0.0, 1.0, -1.0});
  Tensor y = gelu(x);
  CHECK(y.value()[0] == doctest::Approx(0.0));
  CHECK(y.value()[1] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(y.value()[2] == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
}

TEST_CASE("sqrt_ and log_ enforce their domains") {
  CHECK_THROWS_AS(sqrt_(Tensor::from_data({1}, {-1.0})), NumericError);
  CHECK_THROWS_AS(log_(Tensor::from_data({1}, {0.0})), NumericError);
  CHECK_THROWS_AS(log_(Tensor::from_data({1}, {-2.0})), NumericError);
  CHECK(log_(Tensor::from_data({1}, {std::exp(1.0)})).value()[0] == doctest::Approx(1.0));
}

TEST_CASE("ops are deterministic across repeated evaluation") {
  Rng rng(31);
  Tensor a = Tensor::randn({8, 8}, rng, 1.0);
  Tensor b = Tensor::randn({8, 8}, rng, 1.0);
  Tensor c1 = matmul(a, b);
  Tensor c2 = matmul(a, b);
  CHECK(c1.value() == c2.value());
  Tensor s1 = softmax_t(a, 0.7);
  Tensor s2 = softmax_t(a, 0.7);
  CHECK(s1.value() == s2.value());
}

TEST_CASE("gradcheck: dense matmul chain with bias and gelu") {
  Rng rng(41);
  Tensor x = Tensor::randn({3, 4}, rng, 1.0).set_requires_grad(true);
  Tensor w = Tensor::randn({4, 5}, rng, 0.5).set_requires_grad(true);
  Tensor b = Tensor::randn({5}, rng, 0.5).set_requires_grad(true);
  auto f = [&]() { return sum(gelu(add_bias(matmul(x, w), b))); };
  CHECK(gradcheck_max_rel_error(f, {x, w, b}) < 1e-6);
}

TEST_CASE("gradcheck: matmul_nt") {
  Rng rng(43);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0).set_requires_grad(true);
  Tensor b = Tensor::randn({5, 4}, rng, 1.0).set_requires_grad(true);
  auto f = [&]() { return sum(mul(matmul_nt(a, b), matmul_nt(a, b))); };
  CHECK(gradcheck_max_rel_error(f, {a, b}) < 1e-6);
}

TEST_CASE("gradcheck: layer_norm") {
  Rng rng(47);
  Tensor x = Tensor::randn({3, 6}, rng, 2.0).set_requires_grad(true);
  Tensor g = Tensor::randn({6}, rng, 1.0).set_requires_grad(true);
  Tensor b = Tensor::randn({6}, rng, 1.0).set_requires_grad(true);
  Tensor probe = Tensor::randn({3, 6}, rng, 1.0);
  auto f = [&]() { return sum(mul(layer_norm(x, g, b, 1e-5), probe)); };
  CHECK(gradcheck_max_rel_error(f, {x, g, b}) < 1e-6);
}

TEST_CASE("gradcheck: softmax and log-softmax at distillation temperature") {
  Rng rng(53);
  Tensor x = Tensor::randn({3, 5}, rng, 1.5).set_requires_grad(true);
  Tensor probe = Tensor::randn({3, 5}, rng, 1.0);
  auto f1 = [&]() { return sum(mul(softmax_t(x, 0.7), probe)); };
  CHECK(gradcheck_max_rel_error(f1, {x}) < 1e-6);
  auto f2 = [&]() { return sum(mul(log_softmax_t(x, 0.7), probe)); };
  CHECK(gradcheck_max_rel_error(f2, {x}) < 1e-6);
}

TEST_CASE("gradcheck: standardize_rows") {
  Rng rng(59);
  Tensor x = Tensor::randn({3, 6}, rng, 2.0).set_requires_grad(true);
  Tensor probe = Tensor::randn({3, 6}, rng, 1.0);
  auto f = [&]() { return sum(mul(standardize_rows(x), probe)); };
  CHECK(gradcheck_max_rel_error(f, {x}) < 1e-6);
}

TEST_CASE("gradcheck: row normalization path used by cosine similarity") {
  Rng rng(61);
  Tensor x = Tensor::randn({4, 5}, rng, 1.0).set_requires_grad(true);
  auto f = [&]() {
    Tensor sq = row_sum(mul(x, x));
    Tensor norm = sqrt_(add_const(sq, 1e-8));
    Tensor unit = div_rows(x, norm);
    return sum(mul(matmul_nt(unit, unit), matmul_nt(unit, unit)));
  };
  CHECK(gradcheck_max_rel_error(f, {x}) < 1e-6);
}

TEST_CASE("gradcheck: structural ops") {
  Rng rng(67);
  Tensor x = Tensor::randn({5, 4}, rng, 1.0).set_requires_grad(true);
  auto f = [&]() {
    Tensor top = slice_rows(x, 0, 2);
    Tensor rest = gather_rows(x, {2, 3, 4, 2});
    Tensor both = concat_rows({top, rest});
    Tensor cols = slice_cols(both, 1, 2);
    Tensor picked = pick_per_row(both, {0, 1, 2, 3, 0, 1});
    return add(sum(mul(cols, cols)), sum(mul(picked, picked)));
  };
  CHECK(gradcheck_max_rel_error(f, {x}) < 1e-6);
}

TEST_CASE("gradcheck: scalar log of a positive reduction") {
  Rng rng(71);
  Tensor x = Tensor::randn({3, 3}, rng, 1.0).set_requires_grad(true);
  auto f = [&]() { return sum(log_(add_const(mul(x, x), 1.0))); };
  CHECK(gradcheck_max_rel_error(f, {x}) < 1e-6);
}

} // TEST_SUITE("ops")
