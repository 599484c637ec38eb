// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace mambamoe {
namespace {

double evaluate(const LossBuilder& fn) {
  Tape<double> tape;
  Var<double> loss = fn(tape);
  if (tape.stochastic()) {
    throw GradCheckError("grad_check: function consumes random draws; freeze the sampled masks first");
  }
  if (loss.value().numel() != 1) throw GradCheckError("grad_check: loss is not scalar");
  return loss.value()[0];
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& fn, const std::vector<Parameter<double>*>& params, double step,
                           double threshold, double floor) {
  const double base = evaluate(fn);
  if (evaluate(fn) != base) throw GradCheckError("grad_check: two forward passes disagree");

  for (Parameter<double>* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = fn(tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  report.threshold = threshold;
  for (Parameter<double>* p : params) {
    GradCheckEntry entry{p->name, p->value.numel()};
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + step;
      const double plus = evaluate(fn);
      p->value[i] = saved - step;
      const double minus = evaluate(fn);
      p->value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > entry.max_rel_error || i == 0) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.worst_analytic = analytic;
        entry.worst_numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace mambamoe
