#include "dproxy/diffmath.hpp"

#include <cmath>

namespace dproxy::diff {

namespace {

double evaluate(const LossBuilder& f, ParamStore<double>& store) {
  Tape<double> tape(true);
  return f(tape, store).item();
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& f, ParamStore<double>& store, double step, double tolerance,
                           double abs_floor) {
  if (!(step > 0.0 && step <= 1e-2)) {
    throw Error(ErrorCode::ConfigInvalid, "grad_check: step must lie in (0, 1e-2]");
  }

  store.zero_grad();
  {
    Tape<double> tape(true);
    Var<double> loss = f(tape, store);
    tape.backward(loss);
  }

  GradCheckReport report;
  report.max_rel_error = 0.0;
  for (auto& p : store) {
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double saved = p.value.data[k];
      p.value.data[k] = saved + step;
      const double up = evaluate(f, store);
      p.value.data[k] = saved - step;
      const double down = evaluate(f, store);
      p.value.data[k] = saved;

      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p.grad.data[k];
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        throw Error(ErrorCode::NonFiniteDetected, "grad_check: non-finite gradient for " + p.name);
      }
      const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.entries_checked;
      if (report.worst_param.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p.name;
        report.worst_index = k;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace dproxy::diff
