#include "caf/grad_check.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace caf {
namespace {

struct Evaluation {
  double value;
  std::vector<std::uint8_t> branches;
};

Evaluation evaluate(const LossBuilder& loss) {
  Tape<double> tape;
  Var<double> l = loss(tape);
  if (l.value().size() != 1) throw ShapeError("grad_check: loss must be scalar");
  const double v = l.value()[0];
  if (!std::isfinite(v)) throw std::domain_error("grad_check: loss is not finite");
  return {v, tape.branch_pattern()};
}

std::vector<Index> sample_coords(Index size, std::size_t samples, std::mt19937_64& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(size));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (idx.size() <= samples) return idx;
  for (std::size_t i = 0; i < samples; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(samples);
  return idx;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

GradCheckReport grad_check(const LossBuilder& loss, std::span<Tensor4<double>* const> params,
                           const GradCheckOptions& opts) {
  std::vector<Tensor4<double>> analytic;
  std::vector<std::uint8_t> base_branches;
  {
    Tape<double> tape;
    Var<double> l = loss(tape);
    if (!std::isfinite(l.value()[0])) throw std::domain_error("grad_check: loss is not finite");
    base_branches = tape.branch_pattern();
    std::vector<std::optional<Var<double>>> bound;
    for (Tensor4<double>* p : params) bound.push_back(tape.find_param(*p));
    GradStore<double> grads = tape.backward(l);
    for (std::size_t k = 0; k < params.size(); ++k) {
      analytic.push_back(bound[k] ? grads[*bound[k]] : Tensor4<double>(params[k]->shape()));
    }
  }

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor4<double>& p = *params[k];
    std::mt19937_64 rng(opts.seed + 7919 * k);
    for (Index i : sample_coords(p.size(), opts.samples_per_tensor, rng)) {
      const double orig = p[i];
      p[i] = orig + opts.eps;
      const Evaluation plus = evaluate(loss);
      p[i] = orig - opts.eps;
      const Evaluation minus = evaluate(loss);
      p[i] = orig;
      if (plus.branches != base_branches || minus.branches != base_branches) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * opts.eps);
      const double a = analytic[k][i];
      const double err = relative_error(a, numeric);
      ++report.checked;
      if (err > report.max_rel_error || report.worst.empty()) {
        if (err >= report.max_rel_error) {
          report.max_rel_error = err;
          std::ostringstream os;
          os << "param[" << k << "] coord " << i << ": analytic " << a << " numeric " << numeric;
          report.worst = os.str();
        }
      }
    }
  }
  return report;
}

}  // namespace caf
