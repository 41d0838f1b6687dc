#pragma once

#include "discon/nn.hpp"
#include "discon/numerics.hpp"

#include <functional>
#include <string>
#include <vector>

namespace discon {

using ScalarFunction = std::function<Var(Graph&, Var)>;
using ParamLoss = std::function<Var(const BoundParams&)>;

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
double grad_check(const ScalarFunction& f, const Matrix& point, double step);

// Same measure over every entry of a parameter list. When max_coords > 0 a
// seeded subset of coordinates is checked instead of all of them.
double grad_check_params(const ParamLoss& f, std::vector<Matrix>& params, double step,
                         std::size_t max_coords = 0, std::uint64_t seed = 0);

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
};

// One entry per differentiable op at a seeded random point.
std::vector<GradCheckEntry> op_gradcheck_suite(std::uint64_t seed, double step = 1e-5);

}  // namespace discon
