#include "asap/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace asap {

namespace {

struct Eval {
  double value;
  std::uint64_t signature;
  std::size_t exact_kinks;
};

Eval evaluate(const std::function<Tensor()>& f) {
  NoGradGuard no_grad;
  KinkProbe probe;
  const Tensor out = f();
  const double v = static_cast<double>(out.item());
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite function value");
  return {v, probe.signature(), probe.exact_kinks()};
}

}  // namespace

GradCheckReport finite_diff_check_leaf(const std::function<Tensor()>& f, Tensor leaf,
                                       const GradCheckOptions& opts) {
  if (!leaf.is_leaf() || !leaf.requires_grad()) {
    throw ContractError("finite_diff_check: perturbed tensor must be a requires_grad leaf");
  }
  leaf.zero_grad();
  Eval base;
  {
    KinkProbe probe;
    const Tensor out = f();
    if (!std::isfinite(static_cast<double>(out.item()))) {
      throw NumericError("finite_diff_check: non-finite function value");
    }
    out.backward();
    base = {static_cast<double>(out.item()), probe.signature(), probe.exact_kinks()};
  }
  std::vector<real> analytic(leaf.numel(), real(0));
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  std::vector<std::size_t> indices = opts.indices;
  if (indices.empty()) {
    indices.resize(leaf.numel());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  }

  GradCheckReport report;
  auto values = leaf.mutable_data();
  for (auto i : indices) {
    if (i >= values.size()) throw AxisError("finite_diff_check: index out of range");
    const real saved = values[i];
    values[i] = saved + static_cast<real>(opts.step);
    const Eval plus = evaluate(f);
    values[i] = saved - static_cast<real>(opts.step);
    const Eval minus = evaluate(f);
    values[i] = saved;

    if (plus.signature != base.signature || minus.signature != base.signature) {
      ++report.kinks;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * opts.step);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                  const GradCheckOptions& opts) {
  return finite_diff_check_leaf([&] { return f(x); }, x, opts);
}

}  // namespace asap
