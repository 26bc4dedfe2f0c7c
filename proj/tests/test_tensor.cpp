#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstring>

#include "doctest.h"
#include "oracles.hpp"
#include "pseg/gradcheck.hpp"
#include "pseg/rng.hpp"
#include "pseg/tensor.hpp"

using namespace pseg;

namespace {

NdArray rand_array(Shape shape, uint64_t seed, float lo = -2.0f, float hi = 2.0f) {
  NdArray a(shape);
  Rng rng(seed);
  for (auto& x : a.v) x = rng.uniform(lo, hi);
  return a;
}

template <class F>
void check_op_gradient(const F& f, const std::vector<NdArray>& params, uint64_t seed = 0) {
  std::vector<std::string> names;
  for (size_t i = 0; i < params.size(); ++i) names.push_back("p" + std::to_string(i));
  const GradReport report = grad_check(f, params, names, 1e-3, 1e-4, seed);
  CHECK_MESSAGE(report.pass, "max rel err ", report.max_rel_err);
}

struct FlakyFunction {
  mutable int calls = 0;
  template <class T>
  TensorT<T> operator()(TapeT<T>&, const std::vector<TensorT<T>>& leaves) const {
    return scale(sum_all(leaves[0]), 1.0 + 1e-9 * (calls++));
  }
};

}  // namespace

TEST_CASE("matmul of ones gives the inner dimension") {
  Tape tape;
  auto a = tape.full({2, 3}, 1.0f);
  auto b = tape.full({3, 1}, 1.0f);
  auto c = matmul(a, b);
  CHECK(c.shape == Shape{2, 1});
  CHECK(c.at(0) == 3.0f);
  CHECK(c.at(1) == 3.0f);
}

TEST_CASE("relu clamps negatives") {
  Tape tape;
  auto x = tape.constant({3}, {-1.0f, 0.0f, 2.0f});
  auto y = relu(x);
  CHECK(y.at(0) == 0.0f);
  CHECK(y.at(1) == 0.0f);
  CHECK(y.at(2) == 2.0f);
}

TEST_CASE("broadcast add of token cube with a channel vector matches the loop oracle") {
  const int64_t classes = 2, n = 1, d = 2;
  const NdArray cube = rand_array({classes, n, d}, 7);
  const NdArray vec = rand_array({d}, 8);
  Tape tape;
  auto out = add(tape.constant(cube), tape.constant(vec));
  CHECK(out.shape == Shape{classes, n, d});
  for (int64_t k = 0; k < classes; ++k)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t t = 0; t < d; ++t) {
        const float expect = cube.v[static_cast<size_t>((k * n + j) * d + t)] + vec.v[static_cast<size_t>(t)];
        CHECK(out.at((k * n + j) * d + t) == expect);
      }
}

TEST_CASE("matmul against the float loop oracle") {
  const int64_t m = 4, k = 5, n = 3;
  const NdArray a = rand_array({m, k}, 21);
  const NdArray b = rand_array({k, n}, 22);
  Tape tape;
  auto c = matmul(tape.constant(a), tape.constant(b));
  const auto expect = oracle::matmul_f(a.v, b.v, m, k, n);
  for (int64_t i = 0; i < m * n; ++i) CHECK(c.at(i) == expect[static_cast<size_t>(i)]);
}

TEST_CASE("backward of sum(x*x) is 2x") {
  Tape tape;
  auto x = tape.leaf({2}, {1.0f, 2.0f}, true);
  auto loss = sum_all(mul(x, x));
  auto table = tape.backward(loss);
  const auto g = table.grad(x);
  CHECK(g[0] == doctest::Approx(2.0f));
  CHECK(g[1] == doctest::Approx(4.0f));
}

TEST_CASE("backward of mean(relu(x)) uses the zero subgradient at negatives") {
  Tape tape;
  auto x = tape.leaf({2}, {-1.0f, 3.0f}, true);
  auto loss = mean_all(relu(x));
  auto table = tape.backward(loss);
  const auto g = table.grad(x);
  CHECK(g[0] == 0.0f);
  CHECK(g[1] == doctest::Approx(0.5f));
}

TEST_CASE("gradients only flow to requires_grad leaves") {
  Tape tape;
  auto x = tape.leaf({2}, {1.0f, 2.0f}, true);
  auto c = tape.leaf({2}, {3.0f, 4.0f}, false);
  auto loss = sum_all(mul(x, c));
  auto table = tape.backward(loss);
  CHECK(table.reached(x));
  CHECK(!table.reached(c));
  const auto gc = table.grad(c);  // zeros for unreached leaves
  CHECK(gc[0] == 0.0f);
  CHECK(gc[1] == 0.0f);
}

// chain rule soundness per op kind, checked against central differences on
// seeded inputs in [-2, 2]
TEST_CASE("chain rule: elementwise binary ops with broadcasting") {
  auto f_add = [](auto& tape, const auto& leaves) {
    return sum_all(sigmoid(add(leaves[0], leaves[1])));
  };
  check_op_gradient(f_add, {rand_array({3, 1, 4}, 1), rand_array({2, 4}, 2)});

  auto f_sub = [](auto& tape, const auto& leaves) {
    return sum_all(sigmoid(sub(leaves[0], leaves[1])));
  };
  check_op_gradient(f_sub, {rand_array({2, 3}, 3), rand_array({3}, 4)});

  auto f_mul = [](auto& tape, const auto& leaves) {
    return sum_all(sigmoid(mul(leaves[0], leaves[1])));
  };
  check_op_gradient(f_mul, {rand_array({4, 1}, 5), rand_array({1, 5}, 6)});

  auto f_div = [](auto& tape, const auto& leaves) {
    using T = std::decay_t<decltype(leaves[0].scalar())>;
    auto denom = add(sigmoid(leaves[1]), tape.scalar_const(T(0.5)));
    return sum_all(div(leaves[0], denom));
  };
  check_op_gradient(f_div, {rand_array({3, 3}, 7), rand_array({3, 3}, 8)});
}

TEST_CASE("chain rule: matmul, transpose, reshape") {
  auto f = [](auto& tape, const auto& leaves) {
    auto prod = matmul(leaves[0], transpose(leaves[1]));  // (2,4)x(4,3)
    return sum_all(sigmoid(reshape(prod, {3, 2})));
  };
  check_op_gradient(f, {rand_array({2, 4}, 9), rand_array({3, 4}, 10)});
}

TEST_CASE("chain rule: relu, exp, log, sigmoid, scale") {
  auto f = [](auto& tape, const auto& leaves) {
    using T = std::decay_t<decltype(leaves[0].scalar())>;
    auto one = tape.scalar_const(T(1));
    auto softplus = log(add(exp(leaves[0]), one));
    return sum_all(add(relu(leaves[1]), scale(softplus, 0.75)));
  };
  check_op_gradient(f, {rand_array({5}, 11), rand_array({5}, 12, 0.1f, 2.0f)});
}

TEST_CASE("chain rule: reductions and logsumexp") {
  auto f_rows = [](auto& tape, const auto& leaves) {
    return sum_all(sigmoid(reduce_sum(leaves[0], {1}, false)));
  };
  check_op_gradient(f_rows, {rand_array({4, 6}, 13)});

  auto f_keep = [](auto& tape, const auto& leaves) {
    return sum_all(mul(leaves[0], reduce_sum(leaves[0], {0}, true)));
  };
  check_op_gradient(f_keep, {rand_array({3, 4}, 14)});

  auto f_lse = [](auto& tape, const auto& leaves) { return sum_all(logsumexp_last(leaves[0])); };
  check_op_gradient(f_lse, {rand_array({4, 7}, 15)});

  auto f_softmax = [](auto& tape, const auto& leaves) {
    return sum_all(mul(softmax_last(leaves[0]), leaves[1]));
  };
  check_op_gradient(f_softmax, {rand_array({3, 5}, 16), rand_array({3, 5}, 17)});
}

TEST_CASE("chain rule: slice, concat, gather") {
  auto f = [](auto& tape, const auto& leaves) {
    auto cat = concat_rows(leaves[0], leaves[1]);          // (5, 3)
    auto picked = gather_rows(cat, {4, 0, 2, 2});          // repeated row exercises accumulation
    auto sliced = slice_rows(picked, 1, 4);                // (3, 3)
    return sum_all(sigmoid(sliced));
  };
  check_op_gradient(f, {rand_array({2, 3}, 18), rand_array({3, 3}, 19)});
}

TEST_CASE("chain rule: bilinear upsample") {
  auto f = [](auto& tape, const auto& leaves) { return sum_all(sigmoid(upsample_bilinear(leaves[0], 3))); };
  check_op_gradient(f, {rand_array({3, 4, 2}, 20)});
}

TEST_CASE("backward is linear in the loss") {
  Tape tape;
  const NdArray xv = rand_array({6}, 23);
  auto x = tape.leaf(xv, true);
  auto l1 = sum_all(mul(x, x));
  auto l2 = sum_all(sigmoid(x));
  const float a = 1.75f, b = -0.5f;
  auto combined = add(scale(l1, a), scale(l2, b));
  const auto g = tape.backward(combined).grad(x);
  const auto g1 = tape.backward(l1).grad(x);
  const auto g2 = tape.backward(l2).grad(x);
  for (size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(a * g1[i] + b * g2[i]).epsilon(1e-6));
}

TEST_CASE("identical seeds give bit-identical values and gradients") {
  auto run = [](std::vector<float>* loss_out, std::vector<float>* grad_out) {
    Tape tape;
    const NdArray a = rand_array({8, 8}, 101);
    const NdArray b = rand_array({8, 8}, 102);
    auto x = tape.leaf(a, true);
    auto y = tape.leaf(b, false);
    auto loss = sum_all(sigmoid(matmul(x, y)));
    loss_out->push_back(loss.scalar());
    *grad_out = tape.backward(loss).grad(x);
  };
  std::vector<float> losses;
  std::vector<float> g1, g2;
  run(&losses, &g1);
  run(&losses, &g2);
  CHECK(std::memcmp(&losses[0], &losses[1], sizeof(float)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(float)) == 0);
}

TEST_CASE("shape mismatches raise shape-error") {
  Tape tape;
  auto a = tape.full({2, 3}, 1.0f);
  auto b = tape.full({2, 3}, 1.0f);
  CHECK_THROWS_WITH_AS((void)matmul(a, b), doctest::Contains("shape-error"), Error);
  CHECK_THROWS_AS((void)add(tape.full({2, 3}, 1.0f), tape.full({4}, 1.0f)), Error);
  CHECK_THROWS_AS((void)reshape(a, {7}), Error);
  CHECK_THROWS_AS((void)tape.backward(a), Error);  // loss must be scalar
}

TEST_CASE("non-finite results raise numeric-error instead of propagating") {
  Tape tape;
  auto big = tape.full({2}, 200.0f);
  CHECK_THROWS_WITH_AS((void)exp(big), doctest::Contains("numeric-error"), Error);
  CHECK_THROWS_AS((void)tape.leaf({1}, {std::numeric_limits<float>::quiet_NaN()}, false), Error);
}

TEST_CASE("grad_check validates d(x*x)/dx at x=3") {
  auto f = [](auto& tape, const auto& leaves) { return sum_all(mul(leaves[0], leaves[0])); };
  const GradReport report = grad_check(f, {NdArray({1}, {3.0f})}, {"x"}, 1e-3, 1e-4);
  CHECK(report.pass);
  CHECK(report.per_param[0].max_rel_err < 1e-6);
}

TEST_CASE("grad_check flags an injected wrong backward rule") {
  auto f = [](auto& tape, const auto& leaves) { return sum_all(mul(leaves[0], leaves[0])); };
  const GradReport report =
      grad_check(f, {NdArray({3}, {1.0f, -2.0f, 0.5f})}, {"x"}, 1e-3, 1e-4, 0, 10000, /*fault_scale=*/1.5);
  CHECK(!report.pass);
}

TEST_CASE("grad_check rejects a nondeterministic function") {
  CHECK_THROWS_WITH_AS((void)grad_check(FlakyFunction{}, {NdArray({2}, {1.0f, 2.0f})}, {"x"}),
                       doctest::Contains("nondeterminism"), Error);
}
