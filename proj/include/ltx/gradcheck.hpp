#ifndef LTX_GRADCHECK_HPP
#define LTX_GRADCHECK_HPP

#include "ltx/nnet.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace ltx {

// |a - n| / max(|a|, |n|, floor)
double gradient_relative_error(double analytic, double numeric, double floor = 1e-6);

// Scalar objective of the model. With accumulate set it must also add its
// parameter gradients to the grad buffers.
using ModelObjective = std::function<double(TransducerModel&, bool accumulate)>;

struct ParamCheck {
  double worst = 0.0;
  std::size_t checked = 0;
  std::string worst_param;
};

// Central differences on every entry of the parameters whose names start
// with one of the prefixes (all parameters when empty). Gradients are
// zeroed first. fault scales the analytic gradients before comparison.
ParamCheck check_param_gradients(TransducerModel& model, const ModelObjective& objective,
                                 double eps, const std::vector<std::string>& prefixes = {},
                                 double fault = 1.0);

struct GradCheckOptions {
  double eps = 1e-5;
  int lattice_instances = 100;
  int model_instances = 20;
  std::uint64_t seed = 1;
  // Corrupts every analytic gradient; the suite must then fail.
  bool inject_fault = false;
};

struct GradCheckEntry {
  std::string component;
  double worst = 0.0;
  std::size_t checked = 0;
  double tolerance = 0.0;
  bool passed() const { return worst <= tolerance; }
};

// Small model used by the gradient suites.
ModelConfig tiny_model_config(Topology kind, std::uint64_t seed);

std::vector<GradCheckEntry> run_gradient_suite(const GradCheckOptions& options);

}  // namespace ltx

#endif  // LTX_GRADCHECK_HPP
