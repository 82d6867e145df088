#pragma once

#include <functional>
#include <vector>

#include "mmkd/tensor.hpp"

namespace mmkd::ad {

// Compares reverse-mode gradients against central finite differences for a
// scalar-valued closure over the given leaves. Returns the worst relative
// error |analytic - numeric| / (|analytic| + |numeric| + 1e-12) across all
// elements of all leaves. The closure must rebuild its graph on every call.
double gradcheck_max_rel_error(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                               double h = 1e-5);

} // namespace mmkd::ad
