#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstring>
#include <vector>

#include "doctest.h"
#include "pseg/kernels.hpp"
#include "pseg/rng.hpp"

using namespace pseg;

namespace {

std::vector<float> rand_vec(int64_t n, uint64_t seed, float lo = -2.0f, float hi = 2.0f) {
  Rng rng(seed);
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

bool bits_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

struct ParallelOn {
  ParallelOn() { kern::set_parallel(true); }
  ~ParallelOn() { kern::set_parallel(true); }
};

}  // namespace

TEST_CASE("matmul variants are bit-identical to the serial reference") {
  ParallelOn guard;
  for (auto [m, k, n] : {std::tuple<int64_t, int64_t, int64_t>{3, 5, 7},
                         {64, 33, 65},
                         {1, 128, 1},
                         {100, 100, 100}}) {
    const auto a = rand_vec(m * k, 11 * m + n);
    const auto b = rand_vec(k * n, 13 * k + m);
    std::vector<float> ref(static_cast<size_t>(m * n)), prod(static_cast<size_t>(m * n));
    kern::ref::matmul(a.data(), b.data(), ref.data(), m, k, n);
    kern::matmul(a.data(), b.data(), prod.data(), m, k, n);
    CHECK(bits_equal(ref, prod));

    // A * B^T with B stored (n, k)
    const auto bt = rand_vec(n * k, 17);
    std::vector<float> ref_nt(static_cast<size_t>(m * n)), prod_nt(static_cast<size_t>(m * n));
    kern::ref::matmul_nt(a.data(), bt.data(), ref_nt.data(), m, k, n);
    kern::matmul_nt(a.data(), bt.data(), prod_nt.data(), m, k, n);
    CHECK(bits_equal(ref_nt, prod_nt));

    // A^T * B with A stored (k, m)
    const auto at = rand_vec(k * m, 19);
    const auto b2 = rand_vec(k * n, 23);
    std::vector<float> ref_tn(static_cast<size_t>(m * n)), prod_tn(static_cast<size_t>(m * n));
    kern::ref::matmul_tn(at.data(), b2.data(), ref_tn.data(), m, k, n);
    kern::matmul_tn(at.data(), b2.data(), prod_tn.data(), m, k, n);
    CHECK(bits_equal(ref_tn, prod_tn));
  }
}

TEST_CASE("matmul_nt/tn agree with explicit transposition") {
  const int64_t m = 4, k = 6, n = 5;
  const auto a = rand_vec(m * k, 1);
  const auto b = rand_vec(k * n, 2);
  std::vector<float> bt(static_cast<size_t>(n * k));
  for (int64_t i = 0; i < k; ++i)
    for (int64_t j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];
  std::vector<float> direct(static_cast<size_t>(m * n)), via_nt(static_cast<size_t>(m * n));
  kern::ref::matmul(a.data(), b.data(), direct.data(), m, k, n);
  kern::ref::matmul_nt(a.data(), bt.data(), via_nt.data(), m, k, n);
  for (size_t i = 0; i < direct.size(); ++i) CHECK(direct[i] == doctest::Approx(via_nt[i]).epsilon(1e-6));
}

TEST_CASE("broadcast plan rejects incompatible shapes") {
  CHECK_THROWS_AS((void)kern::make_bcast_plan({2, 3}, {4, 3}), Error);
  CHECK_THROWS_AS((void)kern::make_bcast_plan({2, 3, 4}, {2, 5, 4}), Error);
  const auto plan = kern::make_bcast_plan({2, 1, 4}, {3, 1});
  CHECK(plan.out_shape == Shape{2, 3, 4});
}

TEST_CASE("broadcast binary matches the serial reference bit for bit") {
  ParallelOn guard;
  const Shape sa{6, 1, 17}, sb{1, 9, 17};
  const auto plan = kern::make_bcast_plan(sa, sb);
  const auto a = rand_vec(numel(sa), 31);
  const auto b = rand_vec(numel(sb), 37);
  std::vector<float> ref(static_cast<size_t>(plan.n)), prod(static_cast<size_t>(plan.n));
  auto f = [](float x, float y) { return x * y + 0.25f * x; };
  kern::ref::broadcast_binary(plan, a.data(), b.data(), ref.data(), f);
  kern::broadcast_binary(plan, a.data(), b.data(), prod.data(), f);
  CHECK(bits_equal(ref, prod));
}

TEST_CASE("reduce_to gathers exactly like the reference on every axis subset") {
  ParallelOn guard;
  const Shape ss{5, 7, 9};
  const auto src = rand_vec(numel(ss), 41);
  for (const Shape& ds : {Shape{1, 7, 9}, Shape{5, 1, 9}, Shape{5, 7, 1}, Shape{1, 1, 9}, Shape{1, 1, 1}}) {
    std::vector<float> ref(static_cast<size_t>(numel(ds))), prod(static_cast<size_t>(numel(ds)));
    kern::ref::reduce_to(src.data(), ss, ref.data(), ds);
    kern::reduce_to(src.data(), ss, prod.data(), ds);
    CHECK(bits_equal(ref, prod));
  }
}

TEST_CASE("reduce_to computes plain sums") {
  const Shape ss{2, 3};
  const std::vector<float> src{1, 2, 3, 4, 5, 6};
  std::vector<float> rows(2), cols(3), all(1);
  kern::reduce_to(src.data(), ss, rows.data(), {2, 1});
  kern::reduce_to(src.data(), ss, cols.data(), {1, 3});
  kern::reduce_to(src.data(), ss, all.data(), {1, 1});
  CHECK(rows == std::vector<float>{6, 15});
  CHECK(cols == std::vector<float>{5, 7, 9});
  CHECK(all[0] == 21.0f);
}

TEST_CASE("logsumexp rows are stable and bit-identical to the reference") {
  ParallelOn guard;
  const int64_t rows = 33, cols = 29;
  auto in = rand_vec(rows * cols, 43, -80.0f, 80.0f);
  std::vector<float> ref(static_cast<size_t>(rows)), prod(static_cast<size_t>(rows));
  kern::ref::lse_rows(in.data(), ref.data(), rows, cols);
  kern::lse_rows(in.data(), prod.data(), rows, cols);
  CHECK(bits_equal(ref, prod));
  for (float v : prod) CHECK(std::isfinite(v));
}

TEST_CASE("bilinear upscale matches reference and preserves constants") {
  ParallelOn guard;
  const int64_t h = 5, w = 7, d = 3, u = 4;
  const auto in = rand_vec(h * w * d, 47);
  std::vector<float> ref(static_cast<size_t>(h * u * w * u * d)), prod(ref.size());
  kern::ref::bilinear_up(in.data(), ref.data(), h, w, d, u);
  kern::bilinear_up(in.data(), prod.data(), h, w, d, u);
  CHECK(bits_equal(ref, prod));

  std::vector<float> constant(static_cast<size_t>(h * w * d), 3.25f);
  std::vector<float> up(static_cast<size_t>(h * u * w * u * d));
  kern::bilinear_up(constant.data(), up.data(), h, w, d, u);
  for (float v : up) CHECK(v == 3.25f);
}

TEST_CASE("bilinear backward is the exact adjoint") {
  // <up(x), y> == <x, up_back(y)> for the linear map
  const int64_t h = 3, w = 4, d = 2, u = 2;
  const auto x = rand_vec(h * w * d, 53);
  const auto y = rand_vec(h * u * w * u * d, 59);
  std::vector<float> up(static_cast<size_t>(h * u * w * u * d));
  std::vector<float> back(static_cast<size_t>(h * w * d));
  kern::bilinear_up(x.data(), up.data(), h, w, d, u);
  kern::bilinear_up_back(y.data(), back.data(), h, w, d, u);
  double lhs = 0.0, rhs = 0.0;
  for (size_t i = 0; i < up.size(); ++i) lhs += static_cast<double>(up[i]) * y[i];
  for (size_t i = 0; i < back.size(); ++i) rhs += static_cast<double>(back[i]) * x[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
}

TEST_CASE("kernels are deterministic with parallelism toggled") {
  const int64_t m = 48, k = 48, n = 48;
  const auto a = rand_vec(m * k, 61);
  const auto b = rand_vec(k * n, 67);
  std::vector<float> serial(static_cast<size_t>(m * n)), parallel(static_cast<size_t>(m * n));
  kern::set_parallel(false);
  kern::matmul(a.data(), b.data(), serial.data(), m, k, n);
  kern::set_parallel(true);
  kern::matmul(a.data(), b.data(), parallel.data(), m, k, n);
  CHECK(bits_equal(serial, parallel));
}
