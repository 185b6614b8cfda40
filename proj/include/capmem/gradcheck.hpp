#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "capmem/tensor.hpp"

namespace capmem {

// Central-difference gradient verification at 64-bit precision. `f` must
// build a fresh graph from `points` and return a scalar. Returns the max
// over all coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double gradcheck(const std::function<Tensor64(std::vector<Tensor64>&)>& f,
                        std::vector<Tensor64> points, double epsilon = 1e-5) {
  for (auto& p : points) p.set_requires_grad(true);

  auto loss = f(points);
  if (loss.numel() != 1) throw TensorError("gradcheck: f must be scalar-valued");
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(points.size());
  for (auto& p : points) analytic.emplace_back(p.grad().begin(), p.grad().end());

  double max_err = 0.0;
  for (size_t pi = 0; pi < points.size(); ++pi) {
    auto& x = points[pi].data();
    for (size_t i = 0; i < x.size(); ++i) {
      const double keep = x[i];
      x[i] = keep + epsilon;
      const double fp = f(points).item();
      x[i] = keep - epsilon;
      const double fm = f(points).item();
      x[i] = keep;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double a = analytic[pi][i];
      if (!std::isfinite(numeric) || !std::isfinite(a))
        throw TensorError("gradcheck: non-finite value at input " + std::to_string(pi) +
                          " coordinate " + std::to_string(i));
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

inline double gradcheck(const std::function<Tensor64(Tensor64&)>& f, Tensor64 point,
                        double epsilon = 1e-5) {
  return gradcheck(
      [&f](std::vector<Tensor64>& pts) { return f(pts[0]); }, {std::move(point)}, epsilon);
}

}  // namespace capmem
