#include "mmkd/gradcheck.hpp"

#include <cmath>

#include "mmkd/errors.hpp"

namespace mmkd::ad {

double gradcheck_max_rel_error(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                               double h) {
  if (leaves.empty()) throw ParameterError("gradcheck: no leaves given");
  for (auto& leaf : leaves) {
    if (!leaf.requires_grad()) throw ContractError("gradcheck: leaf does not require gradients");
    leaf.clear_grad();
  }

  Tensor loss = f();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) analytic.push_back(leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.value().size(), 0.0));

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto& vals = leaves[k].mutable_value();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + h;
      const double up = f().item();
      vals[i] = saved - h;
      const double down = f().item();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double rel = std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-12);
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

} // namespace mmkd::ad
