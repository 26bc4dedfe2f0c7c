// Times the OpenMP kernels against the serial reference implementations and
// verifies the results stay bit-identical (every kernel accumulates each
// output element in a fixed order, so the thread count must not change bits).

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "pseg/kernels.hpp"
#include "pseg/rng.hpp"

using namespace pseg;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<float> random_vec(int64_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(-1.0f, 1.0f);
  return v;
}

void report(const char* name, const std::string& size, double serial_ms, double omp_ms, bool bit_equal) {
  std::printf("%-18s %-14s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx   %s\n", name, size.c_str(),
              serial_ms, omp_ms, serial_ms / omp_ms, bit_equal ? "bit-equal" : "MISMATCH");
}

void bench_matmul(int64_t n, int reps) {
  const auto a = random_vec(n * n, 1);
  const auto b = random_vec(n * n, 2);
  std::vector<float> c_ref(static_cast<size_t>(n * n)), c_omp(static_cast<size_t>(n * n));
  const double t_ref = time_ms([&] { kern::ref::matmul(a.data(), b.data(), c_ref.data(), n, n, n); }, reps);
  kern::set_parallel(true);
  const double t_omp = time_ms([&] { kern::matmul(a.data(), b.data(), c_omp.data(), n, n, n); }, reps);
  const bool equal = std::memcmp(c_ref.data(), c_omp.data(), c_ref.size() * sizeof(float)) == 0;
  report("matmul", std::to_string(n) + "^3", t_ref, t_omp, equal);
}

void bench_broadcast_mul(int64_t c, int64_t hw, int64_t d, int reps) {
  // (C,hw,1) * (1,hw,d): the class-activation pattern
  const auto a = random_vec(c * hw, 3);
  const auto b = random_vec(hw * d, 4);
  auto plan = kern::make_bcast_plan({c, hw, 1}, {1, hw, d});
  std::vector<float> out_ref(static_cast<size_t>(plan.n)), out_omp(static_cast<size_t>(plan.n));
  auto f = [](float x, float y) { return x * y; };
  const double t_ref =
      time_ms([&] { kern::ref::broadcast_binary(plan, a.data(), b.data(), out_ref.data(), f); }, reps);
  kern::set_parallel(true);
  const double t_omp =
      time_ms([&] { kern::broadcast_binary(plan, a.data(), b.data(), out_omp.data(), f); }, reps);
  const bool equal = std::memcmp(out_ref.data(), out_omp.data(), out_ref.size() * sizeof(float)) == 0;
  char size[48];
  std::snprintf(size, sizeof(size), "%lldx%lldx%lld", static_cast<long long>(c), static_cast<long long>(hw),
                static_cast<long long>(d));
  report("broadcast_mul", size, t_ref, t_omp, equal);
}

void bench_reduce(int64_t c, int64_t hw, int64_t d, int reps) {
  const auto src = random_vec(c * hw * d, 5);
  const Shape ss{c, hw, d}, ds{c, 1, d};
  std::vector<float> out_ref(static_cast<size_t>(c * d)), out_omp(static_cast<size_t>(c * d));
  const double t_ref = time_ms([&] { kern::ref::reduce_to(src.data(), ss, out_ref.data(), ds); }, reps);
  kern::set_parallel(true);
  const double t_omp = time_ms([&] { kern::reduce_to(src.data(), ss, out_omp.data(), ds); }, reps);
  const bool equal = std::memcmp(out_ref.data(), out_omp.data(), out_ref.size() * sizeof(float)) == 0;
  char size[48];
  std::snprintf(size, sizeof(size), "%lldx%lldx%lld", static_cast<long long>(c), static_cast<long long>(hw),
                static_cast<long long>(d));
  report("reduce_spatial", size, t_ref, t_omp, equal);
}

void bench_lse(int64_t rows, int64_t cols, int reps) {
  const auto in = random_vec(rows * cols, 6);
  std::vector<float> out_ref(static_cast<size_t>(rows)), out_omp(static_cast<size_t>(rows));
  const double t_ref = time_ms([&] { kern::ref::lse_rows(in.data(), out_ref.data(), rows, cols); }, reps);
  kern::set_parallel(true);
  const double t_omp = time_ms([&] { kern::lse_rows(in.data(), out_omp.data(), rows, cols); }, reps);
  const bool equal = std::memcmp(out_ref.data(), out_omp.data(), out_ref.size() * sizeof(float)) == 0;
  report("logsumexp_rows", std::to_string(rows) + "x" + std::to_string(cols), t_ref, t_omp, equal);
}

void bench_bilinear(int64_t h, int64_t d, int64_t u, int reps) {
  const auto in = random_vec(h * h * d, 7);
  std::vector<float> out_ref(static_cast<size_t>(h * u * h * u * d)), out_omp(out_ref.size());
  const double t_ref = time_ms([&] { kern::ref::bilinear_up(in.data(), out_ref.data(), h, h, d, u); }, reps);
  kern::set_parallel(true);
  const double t_omp = time_ms([&] { kern::bilinear_up(in.data(), out_omp.data(), h, h, d, u); }, reps);
  const bool equal = std::memcmp(out_ref.data(), out_omp.data(), out_ref.size() * sizeof(float)) == 0;
  char size[48];
  std::snprintf(size, sizeof(size), "%lldx%lldx%lld u=%lld", static_cast<long long>(h),
                static_cast<long long>(h), static_cast<long long>(d), static_cast<long long>(u));
  report("bilinear_up", size, t_ref, t_omp, equal);
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP enabled, max threads = %d\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP; both columns run serial code\n");
#endif
  bench_matmul(128, 20);
  bench_matmul(256, 8);
  bench_matmul(512, 3);
  bench_broadcast_mul(16, 4096, 64, 20);
  bench_reduce(16, 4096, 64, 20);
  bench_lse(4096, 256, 20);
  bench_bilinear(64, 64, 4, 10);
  return 0;
}
