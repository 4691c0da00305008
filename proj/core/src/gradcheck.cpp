#include "hysparse/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace hysparse {

std::vector<GradCheckEntry> check_gradients(const std::function<Tensor()>& loss_fn,
                                            const std::vector<std::pair<std::string, Tensor>>& params,
                                            double step, std::size_t max_entries) {
  for (auto [name, t] : params) t.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, t] : params) analytic.emplace_back(t.grad().begin(), t.grad().end());
  for (auto [name, t] : params) t.zero_grad();

  NoGradGuard guard;
  std::vector<GradCheckEntry> out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].second;
    auto w = t.data();
    const std::size_t n = w.size();
    const std::size_t stride = max_entries > 0 && n > max_entries ? n / max_entries : 1;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    GradCheckEntry e{params[p].first, 0, 0.0};
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = w[i];
      w[i] = orig + step;
      const double up = loss_fn().item();
      w[i] = orig - step;
      const double down = loss_fn().item();
      w[i] = orig;
      const double num = (up - down) / (2.0 * step);
      const double ana = analytic[p][i];
      diff2 += (ana - num) * (ana - num);
      a2 += ana * ana;
      n2 += num * num;
      ++e.checked;
    }
    const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-300);
    e.rel_error = diff2 == 0.0 ? 0.0 : std::sqrt(diff2) / denom;
    out.push_back(e);
  }
  return out;
}

}  // namespace hysparse
