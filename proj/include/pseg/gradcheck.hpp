#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/rng.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

// Result of comparing analytic gradients against central finite differences.
struct GradReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
    int64_t elements_checked = 0;
  };
  std::vector<Entry> per_param;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

// Checks d loss / d params for a deterministic scalar-valued function.
//
// F must be callable for both scalar types:
//   template <class T> TensorT<T> operator()(TapeT<T>&, const std::vector<TensorT<T>>&) const;
//
// The analytic side runs the tape in double (64-bit). The numeric side
// re-evaluates the same function with Richardson-extrapolated central
// differences, D = (16 n(eps/4) - n(eps)) / 15, which cancels the eps^2
// truncation term that otherwise swamps small-magnitude gradients; the probe
// evaluations run in extended precision so that exact-zero gradients (for
// example attention key biases, which the row softmax cancels) measure as
// zero instead of difference-quotient rounding noise against the 1e-8 floor.
// Central differences also require the ReLU activation pattern to be
// identical across the probe interval; where the tape signatures show a kink
// crossing, the step is shrunk (by 4x, a few times) until the interval is
// smooth. Parameters larger than `subsample_above` elements are checked on a
// seeded random subsample of that size. `fault_scale` != 1 corrupts the
// analytic gradients before comparison; it exists as the negative control
// proving the comparator catches a wrong backward rule.
template <class F>
GradReport grad_check(const F& f, const std::vector<NdArray>& params, const std::vector<std::string>& names,
                      double eps = 1e-3, double tol = 1e-4, uint64_t seed = 0,
                      int64_t subsample_above = 10000, double fault_scale = 1.0) {
  if (eps <= 0) fail(ErrCode::Config, "grad_check eps must be positive");
  if (names.size() != params.size()) fail(ErrCode::Config, "grad_check names/params size mismatch");

  struct Eval {
    long double value = 0.0L;
    uint64_t signature = 0;
  };
  auto eval_numeric = [&](const std::vector<std::vector<long double>>& values) {
    TapeT<long double> tape;
    std::vector<TensorT<long double>> leaves;
    leaves.reserve(params.size());
    for (size_t p = 0; p < params.size(); ++p)
      leaves.push_back(tape.leaf(params[p].shape, values[p], false));
    TensorT<long double> loss = f(tape, leaves);
    if (loss.numel() != 1) fail(ErrCode::Shape, "grad_check function must return a scalar");
    return Eval{loss.scalar(), tape.activation_signature()};
  };

  auto eval_analytic = [&](const std::vector<std::vector<double>>& values,
                           std::vector<std::vector<double>>* grads) {
    TapeT<double> tape;
    std::vector<TensorT<double>> leaves;
    leaves.reserve(params.size());
    for (size_t p = 0; p < params.size(); ++p)
      leaves.push_back(tape.leaf(params[p].shape, values[p], true));
    TensorT<double> loss = f(tape, leaves);
    if (loss.numel() != 1) fail(ErrCode::Shape, "grad_check function must return a scalar");
    if (grads) {
      auto table = tape.backward(loss);
      grads->clear();
      for (const auto& leaf : leaves) grads->push_back(table.grad(leaf));
    }
    return loss.scalar();
  };

  std::vector<std::vector<double>> base_d(params.size());
  std::vector<std::vector<long double>> base(params.size());
  for (size_t p = 0; p < params.size(); ++p) {
    base_d[p].assign(params[p].v.begin(), params[p].v.end());
    base[p].assign(params[p].v.begin(), params[p].v.end());
  }

  // determinism gate: two evaluations must agree exactly
  const Eval e0 = eval_numeric(base);
  const Eval e1 = eval_numeric(base);
  if (e0.value != e1.value || e0.signature != e1.signature)
    fail(ErrCode::Nondeterminism, "function under check returned different values on repeat evaluation");

  std::vector<std::vector<double>> analytic;
  eval_analytic(base_d, &analytic);
  if (fault_scale != 1.0)
    for (auto& g : analytic)
      for (auto& x : g) x *= fault_scale;

  GradReport report;
  report.tolerance = tol;
  for (size_t p = 0; p < params.size(); ++p) {
    const int64_t n = params[p].numel();
    std::vector<int64_t> picks;
    if (n > subsample_above) {
      Rng rng = Rng::stream(seed, 1000 + p);
      picks.reserve(static_cast<size_t>(subsample_above));
      for (int64_t i = 0; i < subsample_above; ++i) picks.push_back(rng.uniform_int(n));
      std::sort(picks.begin(), picks.end());
      picks.erase(std::unique(picks.begin(), picks.end()), picks.end());
    } else {
      picks.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) picks[static_cast<size_t>(i)] = i;
    }
    GradReport::Entry entry;
    entry.name = names[p];
    entry.elements_checked = static_cast<int64_t>(picks.size());
    for (int64_t i : picks) {
      const long double saved = base[p][static_cast<size_t>(i)];
      auto probe_at = [&](long double at) {
        base[p][static_cast<size_t>(i)] = at;
        return eval_numeric(base);
      };
      long double step = static_cast<long double>(eps);
      long double numeric = 0.0L;
      for (int refine = 0; refine < 6; ++refine) {
        const Eval po = probe_at(saved + step);
        const Eval mo = probe_at(saved - step);
        const Eval pi = probe_at(saved + step / 4.0L);
        const Eval mi = probe_at(saved - step / 4.0L);
        const long double outer = (po.value - mo.value) / (2.0L * step);
        const long double inner = (pi.value - mi.value) / (step / 2.0L);
        numeric = (16.0L * inner - outer) / 15.0L;
        const bool smooth = po.signature == mo.signature && po.signature == pi.signature &&
                            po.signature == mi.signature;
        if (smooth) break;
        step *= 0.25L;
      }
      base[p][static_cast<size_t>(i)] = saved;
      entry.max_rel_err = std::max(
          entry.max_rel_err, rel_err(analytic[p][static_cast<size_t>(i)], static_cast<double>(numeric)));
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_param.push_back(std::move(entry));
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace pseg
