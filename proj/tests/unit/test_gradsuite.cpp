#include <algorithm>
#include <set>
#include <string>

#include "doctest.h"
#include "mmkd/gradsuite.hpp"

namespace gs = mmkd::gradsuite;

TEST_SUITE("gradsuite") {

TEST_CASE("every op and loss survives finite differencing") {
    const auto results = gs::run_all(2024);
    CHECK(results.size() >= 30);
    for (const auto& r : results) {
        INFO(r.name, " err=", r.max_rel_err);
        CHECK(r.pass);
        CHECK(r.max_rel_err < 1e-5);
    }

    std::set<std::string> names;
    for (const auto& r : results) names.insert(r.name);
    for (const char* required :
         {"loss.autoregressive_ce", "loss.forward_kl", "loss.reverse_kl", "loss.jsd_beta_0.1",
          "loss.jsd_beta_0.5", "loss.jsd_beta_0.9", "loss.logit_mse", "loss.feature_cosine",
          "loss.feature_mse", "loss.attention_all", "loss.attention_image_to_answer",
          "loss.similarity", "op.matmul", "op.softmax_t", "op.layer_norm", "op.embed"}) {
        INFO(required);
        CHECK(names.count(required) == 1);
    }
}

TEST_CASE("the suite is a pure function of its seed") {
    const auto a = gs::run_all(7);
    const auto b = gs::run_all(7);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].max_rel_err == b[i].max_rel_err);
    }
}

} // TEST_SUITE

