#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mmkd::gradsuite {

struct CheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Finite-difference verification of every differentiable operation and every
// loss against its reverse-mode gradient. Inputs are drawn from the seed;
// each case compares analytic gradients with central differences and passes
// when the worst relative error stays under the tolerance.
std::vector<CheckResult> run_all(uint64_t seed, double tolerance = 1e-5);

} // namespace mmkd::gradsuite
