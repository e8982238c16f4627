#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stdemand/dataset.hpp"
#include "stdemand/model.hpp"
#include "stdemand/training.hpp"

namespace stdemand {

/// A tiny random problem: 3 nodes, window and horizon 2, hidden width 4, one MP layer, one FFN block,
/// both graphs and the encodings active.
struct MicroInstance {
  ForwardConfig config;
  Parameters<double> params;
  WindowData<double> window;
  GraphContext<double> graph;
  std::vector<int> masked;
  LossKind loss = LossKind::l1;
};

MicroInstance make_micro_instance(std::uint64_t seed);

struct TensorCheck {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// Compares every coordinate's analytic partial with a central difference of the given step.
/// Relative error is |a - n| / max(|a|, |n|, floor).
std::vector<TensorCheck> gradient_check(const MicroInstance& micro, double step = 1e-4, double floor = 1e-8);

}  // namespace stdemand
