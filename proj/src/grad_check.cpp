#include "utixvec/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "utixvec/errors.hpp"
#include "utixvec/rng.hpp"

namespace utixvec {

namespace {

double evaluate(const std::function<Tensor<double>()>& loss) {
  NoGradGuard guard;
  const auto value = loss();
  if (value.numel() != 1) {
    throw UsageError("grad_check: loss must be scalar, got " + shape_string(value.shape()));
  }
  return value.item();
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor<double>()>& loss,
                           std::vector<Tensor<double>> params, const GradCheckOptions& options) {
  for (auto& p : params) p.zero_grad();
  const auto value = loss();
  if (value.numel() != 1) {
    throw UsageError("grad_check: loss must be scalar, got " + shape_string(value.shape()));
  }
  const double f0 = value.item();
  backward(value);

  GradCheckReport report;
  Rng rng(options.seed);
  const double eps = options.eps;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                     : std::vector<double>(p.numel(), 0.0);

    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.samples_per_tensor) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(options.samples_per_tensor);
      std::sort(coords.begin(), coords.end());
    }

    auto values = p.mutable_data();
    for (auto idx : coords) {
      const double saved = values[idx];
      auto probe = [&](double delta) {
        values[idx] = saved + delta;
        const double f = evaluate(loss);
        values[idx] = saved;
        return f;
      };
      const double fine = eps / 10.0;
      const double fp = probe(eps), fm = probe(-eps);
      const double gp = probe(fine), gm = probe(-fine);

      const double right = (gp - f0) / fine;
      const double left = (f0 - gm) / fine;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double numeric_fine = (gp - gm) / (2.0 * fine);
      const bool kink =
          std::abs(right - left) > options.kink_tolerance * (std::abs(right) + std::abs(left)) + 1e-7;
      const bool unstable = std::abs(numeric - numeric_fine) >
                            options.step_tolerance * (std::abs(numeric) + std::abs(numeric_fine)) + 1e-9;
      if (kink || unstable) {
        ++report.skipped_kinks;
        continue;
      }
      const double a = analytic[idx];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++report.checked;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_tensor = pi;
        report.worst_index = idx;
      }
    }
  }
  return report;
}

}  // namespace utixvec
