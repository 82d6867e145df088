#include "mmkd/gradsuite.hpp"

#include <cmath>
#include <functional>
#include <utility>

#include "mmkd/gradcheck.hpp"
#include "mmkd/losses.hpp"
#include "mmkd/ops.hpp"
#include "mmkd/rng.hpp"
#include "mmkd/tensor.hpp"

namespace mmkd::gradsuite {

using ad::Shape;
using ad::Tensor;
namespace ls = losses;

namespace {

// All op checks reduce through a fixed random weighting so that gradients are
// position-dependent; a plain sum would hide any permutation mistakes.
Tensor weighted_sum(const Tensor& x, const Tensor& w) { return ad::sum(ad::mul(x, w)); }

Tensor leaf_randn(const Shape& shape, Rng& rng, double stddev) {
    Tensor t = Tensor::randn(shape, rng, stddev);
    t.set_requires_grad(true);
    return t;
}

// Values bounded away from zero, for sqrt/log/division inputs.
Tensor leaf_positive(const Shape& shape, Rng& rng) {
    std::vector<double> data(static_cast<size_t>(ad::numel(shape)));
    for (double& v : data) v = 0.5 + 1.5 * rng.uniform01();
    Tensor t = Tensor::from_data(shape, std::move(data));
    t.set_requires_grad(true);
    return t;
}

struct Harness {
    Rng rng;
    double tolerance;
    std::vector<CheckResult> results;

    explicit Harness(uint64_t seed, double tol) : rng(seed), tolerance(tol) {}

    void check(const std::string& name, const std::function<Tensor()>& f,
               std::vector<Tensor> leaves) {
        CheckResult r;
        r.name = name;
        r.max_rel_err = ad::gradcheck_max_rel_error(f, std::move(leaves));
        r.pass = r.max_rel_err < tolerance;
        results.push_back(std::move(r));
    }
};

void check_ops(Harness& h) {
    Rng& rng = h.rng;
    const Tensor w34 = Tensor::randn({3, 4}, rng, 1.0);
    const Tensor w32 = Tensor::randn({3, 2}, rng, 1.0);
    const Tensor w3 = Tensor::randn({3}, rng, 1.0);

    {
        Tensor a = leaf_randn({3, 4}, rng, 1.0), b = leaf_randn({3, 4}, rng, 1.0);
        h.check("op.add", [=] { return weighted_sum(ad::add(a, b), w34); }, {a, b});
        h.check("op.sub", [=] { return weighted_sum(ad::sub(a, b), w34); }, {a, b});
        h.check("op.mul", [=] { return weighted_sum(ad::mul(a, b), w34); }, {a, b});
        h.check("op.scale", [=] { return weighted_sum(ad::scale(a, -1.7), w34); }, {a});
        h.check("op.add_const", [=] { return weighted_sum(ad::add_const(a, 0.3), w34); }, {a});
        h.check("op.gelu", [=] { return weighted_sum(ad::gelu(a), w34); }, {a});
    }
    {
        Tensor x = leaf_randn({3, 4}, rng, 1.0), bias = leaf_randn({4}, rng, 1.0);
        h.check("op.add_bias", [=] { return weighted_sum(ad::add_bias(x, bias), w34); }, {x, bias});
    }
    {
        Tensor x = leaf_positive({3, 4}, rng);
        h.check("op.sqrt", [=] { return weighted_sum(ad::sqrt_(x), w34); }, {x});
        h.check("op.log", [=] { return weighted_sum(ad::log_(x), w34); }, {x});
    }
    {
        Tensor a = leaf_randn({3, 4}, rng, 1.0), b = leaf_randn({4, 2}, rng, 1.0);
        h.check("op.matmul", [=] { return weighted_sum(ad::matmul(a, b), w32); }, {a, b});
    }
    {
        Tensor a = leaf_randn({3, 4}, rng, 1.0), b = leaf_randn({2, 4}, rng, 1.0);
        const Tensor w = Tensor::randn({3, 2}, rng, 1.0);
        h.check("op.matmul_nt", [=] { return weighted_sum(ad::matmul_nt(a, b), w); }, {a, b});
    }
    {
        Tensor x = leaf_randn({4, 3}, rng, 1.0);
        const Tensor w23 = Tensor::randn({2, 3}, rng, 1.0);
        const Tensor w42 = Tensor::randn({4, 2}, rng, 1.0);
        const Tensor w33 = Tensor::randn({3, 3}, rng, 1.0);
        h.check("op.slice_rows", [=] { return weighted_sum(ad::slice_rows(x, 1, 2), w23); }, {x});
        h.check("op.slice_cols", [=] { return weighted_sum(ad::slice_cols(x, 1, 2), w42); }, {x});
        // A repeated row exercises gradient accumulation through the gather.
        h.check("op.gather_rows",
                [=] { return weighted_sum(ad::gather_rows(x, {0, 2, 2}), w33); }, {x});
        const Tensor w4 = Tensor::randn({4}, rng, 1.0);
        h.check("op.row_sum", [=] { return weighted_sum(ad::row_sum(x), w4); }, {x});
        h.check("op.sum", [=] { return ad::sum(x); }, {x});
        h.check("op.pick_per_row",
                [=] { return weighted_sum(ad::pick_per_row(x, {1, 0, 2, 1}), w4); }, {x});
    }
    {
        Tensor a = leaf_randn({2, 3}, rng, 1.0), b = leaf_randn({2, 3}, rng, 1.0);
        const Tensor w43 = Tensor::randn({4, 3}, rng, 1.0);
        h.check("op.concat_rows", [=] { return weighted_sum(ad::concat_rows({a, b}), w43); },
                {a, b});
    }
    {
        Tensor table = leaf_randn({5, 3}, rng, 1.0);
        const Tensor w43 = Tensor::randn({4, 3}, rng, 1.0);
        h.check("op.embed", [=] { return weighted_sum(ad::embed(table, {1, 0, 3, 1}), w43); },
                {table});
    }
    {
        Tensor x = leaf_randn({4, 3}, rng, 1.0);
        Tensor v = leaf_positive({4}, rng);
        const Tensor w = Tensor::randn({4, 3}, rng, 1.0);
        h.check("op.div_rows", [=] { return weighted_sum(ad::div_rows(x, v), w); }, {x, v});
    }
    {
        Tensor x = leaf_randn({3, 5}, rng, 1.0);
        Tensor gain = leaf_randn({5}, rng, 0.5);
        Tensor bias = leaf_randn({5}, rng, 0.5);
        const Tensor w = Tensor::randn({3, 5}, rng, 1.0);
        h.check("op.layer_norm",
                [=] { return weighted_sum(ad::layer_norm(x, gain, bias), w); }, {x, gain, bias});
        h.check("op.softmax_t", [=] { return weighted_sum(ad::softmax_t(x, 0.7), w); }, {x});
        h.check("op.log_softmax_t",
                [=] { return weighted_sum(ad::log_softmax_t(x, 2.0), w); }, {x});
        h.check("op.standardize_rows",
                [=] { return weighted_sum(ad::standardize_rows(x), w); }, {x});
    }
}

void check_losses(Harness& h) {
    Rng& rng = h.rng;
    const int seq = 6, vocab = 8;
    const std::vector<uint8_t> answer_mask = {0, 0, 0, 1, 1, 1};
    const std::vector<int> ids = {1, 5, 6, 3, 2, 7};

    const Tensor teacher_logits = Tensor::randn({seq - 1, vocab}, rng, 2.0);
    Tensor student_logits = leaf_randn({seq - 1, vocab}, rng, 2.0);

    h.check("loss.autoregressive_ce",
            [=] { return ls::autoregressive_ce(student_logits, ids, answer_mask); },
            {student_logits});
    h.check("loss.forward_kl",
            [=] { return ls::kl_logit_loss(teacher_logits, student_logits, 0.7, true, answer_mask); },
            {student_logits});
    h.check("loss.reverse_kl",
            [=] { return ls::kl_logit_loss(teacher_logits, student_logits, 0.7, false, answer_mask); },
            {student_logits});
    for (double beta : {0.1, 0.5, 0.9}) {
        h.check("loss.jsd_beta_" + std::to_string(beta).substr(0, 3),
                [=] { return ls::generalized_jsd(teacher_logits, student_logits, beta, 0.7,
                                                 answer_mask); },
                {student_logits});
    }
    h.check("loss.logit_mse",
            [=] { return ls::mse_logit_loss(teacher_logits, student_logits, answer_mask); },
            {student_logits});
    h.check("loss.forward_kl_standardized",
            [=] {
                return ls::kl_logit_loss(ls::logit_standardize(teacher_logits),
                                         ls::logit_standardize(student_logits), 0.7, true,
                                         answer_mask);
            },
            {student_logits});

    // Feature alignment: student width 4 projected to teacher width 6. The
    // projector is built at unit scale so the cosine normalization is
    // well-conditioned for finite differences.
    {
        const int s_dim = 4, t_dim = 6;
        Tensor sh = leaf_randn({seq, s_dim}, rng, 1.0);
        const Tensor th = Tensor::randn({seq, t_dim}, rng, 1.0);
        ls::FeatureProjector proj;
        proj.w1 = leaf_randn({s_dim, t_dim}, rng, 0.5);
        proj.b1 = leaf_randn({t_dim}, rng, 0.1);
        proj.w2 = leaf_randn({t_dim, t_dim}, rng, 0.5);
        proj.b2 = leaf_randn({t_dim}, rng, 0.1);
        std::vector<Tensor> leaves = {sh, proj.w1, proj.b1, proj.w2, proj.b2};
        h.check("loss.feature_cosine",
                [=] {
                    return ls::feature_align_loss({sh}, {th}, {proj}, ls::FeatureLoss::cosine,
                                                  answer_mask, {0});
                },
                leaves);
        h.check("loss.feature_mse",
                [=] {
                    return ls::feature_align_loss({sh}, {th}, {proj}, ls::FeatureLoss::mse,
                                                  answer_mask, {0});
                },
                leaves);
    }

    // Attention affinity over softmax-shaped maps; two student heads against
    // one teacher head, visual prefix of two tokens.
    {
        const int n_visual = 2;
        auto attn_map = [&](bool leaf) {
            std::vector<double> data(static_cast<size_t>(seq) * seq, 0.0);
            for (int i = 0; i < seq; ++i) {
                double total = 0.0;
                for (int j = 0; j <= i; ++j) {
                    data[static_cast<size_t>(i) * seq + j] = 0.1 + rng.uniform01();
                    total += data[static_cast<size_t>(i) * seq + j];
                }
                for (int j = 0; j <= i; ++j) data[static_cast<size_t>(i) * seq + j] /= total;
            }
            Tensor t = Tensor::from_data({seq, seq}, std::move(data));
            if (leaf) t.set_requires_grad(true);
            return t;
        };
        Tensor s1 = attn_map(true), s2 = attn_map(true);
        const Tensor t1 = attn_map(false);
        h.check("loss.attention_all",
                [=] {
                    return ls::attention_affinity_loss({s1, s2}, {t1}, ls::AttnGroup::all,
                                                       n_visual, answer_mask);
                },
                {s1, s2});
        h.check("loss.attention_image_to_answer",
                [=] {
                    return ls::attention_affinity_loss({s1, s2}, {t1},
                                                       ls::AttnGroup::image_to_answer, n_visual,
                                                       answer_mask);
                },
                {s1, s2});
    }

    {
        Tensor s_hv = leaf_randn({3, 4}, rng, 1.0);
        Tensor s_hq = leaf_randn({2, 4}, rng, 1.0);
        const Tensor t_hv = Tensor::randn({3, 6}, rng, 1.0);
        const Tensor t_hq = Tensor::randn({2, 6}, rng, 1.0);
        h.check("loss.similarity",
                [=] { return ls::similarity_affinity_loss(s_hv, s_hq, t_hv, t_hq); },
                {s_hv, s_hq});
    }
}

} // namespace

std::vector<CheckResult> run_all(uint64_t seed, double tolerance) {
    Harness h(seed, tolerance);
    check_ops(h);
    check_losses(h);
    return h.results;
}

} // namespace mmkd::gradsuite
