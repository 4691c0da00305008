#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hysparse/tensor.hpp"

namespace hysparse {

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  /// ||analytic - numeric|| / max(||analytic||, ||numeric||) over the checked entries.
  double rel_error = 0.0;
};

/// Compares reverse-mode gradients of `loss_fn` (a scalar) against central
/// differences for each named tensor. `max_entries` > 0 checks an evenly
/// strided subset of that many entries per tensor.
std::vector<GradCheckEntry> check_gradients(const std::function<Tensor()>& loss_fn,
                                            const std::vector<std::pair<std::string, Tensor>>& params,
                                            double step = 1e-5, std::size_t max_entries = 0);

}  // namespace hysparse
