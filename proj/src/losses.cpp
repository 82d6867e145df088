#include "mmkd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "mmkd/errors.hpp"
#include "mmkd/ops.hpp"
#include "mmkd/rng.hpp"

namespace mmkd::losses {

namespace {

using ad::Tensor;

// Mean of a vector of per-position values, optionally rescaled.
Tensor mean_of(const Tensor& col, double extra_scale = 1.0) {
    const double n = static_cast<double>(col.size());
    return ad::scale(ad::sum(col), extra_scale / n);
}

Tensor unit_rows(const Tensor& x) {
    Tensor sq = ad::row_sum(ad::mul(x, x));
    Tensor norm = ad::sqrt_(ad::add_const(sq, 1e-12));
    return ad::div_rows(x, norm);
}

} // namespace

const char* logit_loss_name(LogitLoss v) {
    switch (v) {
    case LogitLoss::none: return "none";
    case LogitLoss::forward_kl: return "forward_kl";
    case LogitLoss::reverse_kl: return "reverse_kl";
    case LogitLoss::jsd: return "jsd";
    case LogitLoss::mse: return "mse";
    }
    return "?";
}

const char* feature_loss_name(FeatureLoss v) {
    switch (v) {
    case FeatureLoss::none: return "none";
    case FeatureLoss::cosine: return "cosine";
    case FeatureLoss::mse: return "mse";
    }
    return "?";
}

const char* affinity_loss_name(AffinityLoss v) {
    switch (v) {
    case AffinityLoss::none: return "none";
    case AffinityLoss::attention: return "attention";
    case AffinityLoss::similarity: return "similarity";
    }
    return "?";
}

const char* mask_policy_name(MaskPolicy v) {
    return v == MaskPolicy::answer_only ? "answer_only" : "all_tokens";
}

const char* attn_group_name(AttnGroup v) {
    return v == AttnGroup::all ? "all" : "image_to_answer";
}

LogitLoss logit_loss_from_name(const std::string& s) {
    if (s == "none") return LogitLoss::none;
    if (s == "forward_kl") return LogitLoss::forward_kl;
    if (s == "reverse_kl") return LogitLoss::reverse_kl;
    if (s == "jsd") return LogitLoss::jsd;
    if (s == "mse") return LogitLoss::mse;
    throw ConfigError("unknown logit loss '" + s +
                      "' (expected none, forward_kl, reverse_kl, jsd, or mse)");
}

FeatureLoss feature_loss_from_name(const std::string& s) {
    if (s == "none") return FeatureLoss::none;
    if (s == "cosine") return FeatureLoss::cosine;
    if (s == "mse") return FeatureLoss::mse;
    throw ConfigError("unknown feature loss '" + s + "' (expected none, cosine, or mse)");
}

AffinityLoss affinity_loss_from_name(const std::string& s) {
    if (s == "none") return AffinityLoss::none;
    if (s == "attention") return AffinityLoss::attention;
    if (s == "similarity") return AffinityLoss::similarity;
    throw ConfigError("unknown affinity loss '" + s + "' (expected none, attention, or similarity)");
}

MaskPolicy mask_policy_from_name(const std::string& s) {
    if (s == "answer_only") return MaskPolicy::answer_only;
    if (s == "all_tokens") return MaskPolicy::all_tokens;
    throw ConfigError("unknown mask policy '" + s + "' (expected answer_only or all_tokens)");
}

AttnGroup attn_group_from_name(const std::string& s) {
    if (s == "all") return AttnGroup::all;
    if (s == "image_to_answer") return AttnGroup::image_to_answer;
    throw ConfigError("unknown attention group '" + s + "' (expected all or image_to_answer)");
}

void DistillConfig::validate() const {
    if (!(temperature > 0.0))
        throw ParameterError("distill temperature must be positive, got " +
                             std::to_string(temperature));
    if (logit_loss == LogitLoss::jsd && !(jsd_beta > 0.0 && jsd_beta < 1.0))
        throw ParameterError("jsd beta must lie strictly between 0 and 1, got " +
                             std::to_string(jsd_beta));
    for (double w : {w_ce, w_logit, w_feature, w_affinity})
        if (!(w >= 0.0)) throw ParameterError("loss weights must be non-negative");
    if (feature_loss != FeatureLoss::none) {
        if (feature_layers.empty())
            throw ConfigError("feature alignment is enabled but feature_layers is empty");
        std::set<int> seen;
        for (int off : feature_layers) {
            if (off < 0)
                throw ConfigError("feature_layers entries are offsets from the last layer and "
                                  "must be non-negative, got " +
                                  std::to_string(off));
            if (!seen.insert(off).second)
                throw ConfigError("feature_layers contains duplicate offset " +
                                  std::to_string(off));
        }
    }
}

bool DistillConfig::any_distill_active() const {
    return (logit_loss != LogitLoss::none && w_logit != 0.0) ||
           (feature_loss != FeatureLoss::none && w_feature != 0.0) ||
           (affinity_loss != AffinityLoss::none && w_affinity != 0.0);
}

std::string DistillConfig::summary() const {
    std::ostringstream os;
    os << "logit=" << logit_loss_name(logit_loss);
    if (logit_loss != LogitLoss::none) {
        os << "(T=" << temperature;
        if (logit_loss == LogitLoss::jsd) os << ",beta=" << jsd_beta;
        if (standardize_logits) os << ",standardized";
        os << ",w=" << w_logit << ")";
    }
    os << " feature=" << feature_loss_name(feature_loss);
    if (feature_loss != FeatureLoss::none) {
        os << "(offsets=";
        for (size_t i = 0; i < feature_layers.size(); ++i)
            os << (i ? "," : "") << feature_layers[i];
        os << ",w=" << w_feature << ")";
    }
    os << " affinity=" << affinity_loss_name(affinity_loss);
    if (affinity_loss != AffinityLoss::none)
        os << "(" << attn_group_name(attn_group) << ",w=" << w_affinity << ")";
    return os.str();
}

std::vector<int> mask_to_logit_rows(const std::vector<uint8_t>& mask) {
    std::vector<int> rows;
    for (size_t p = 0; p < mask.size(); ++p) {
        if (!mask[p]) continue;
        if (p == 0)
            throw ContractError("token position 0 has no preceding logit row to supervise");
        rows.push_back(static_cast<int>(p) - 1);
    }
    if (rows.empty()) throw ContractError("loss mask selects no token positions");
    return rows;
}

std::vector<int> mask_to_token_rows(const std::vector<uint8_t>& mask) {
    std::vector<int> rows;
    for (size_t p = 0; p < mask.size(); ++p)
        if (mask[p]) rows.push_back(static_cast<int>(p));
    if (rows.empty()) throw ContractError("loss mask selects no token positions");
    return rows;
}

Tensor autoregressive_ce(const Tensor& logits, const std::vector<int>& target_ids,
                         const std::vector<uint8_t>& mask) {
    if (mask.size() != target_ids.size())
        throw DimensionError("mask length " + std::to_string(mask.size()) +
                             " does not match sequence length " +
                             std::to_string(target_ids.size()));
    std::vector<int> rows = mask_to_logit_rows(mask);
    std::vector<int> targets;
    targets.reserve(rows.size());
    for (int r : rows) targets.push_back(target_ids[static_cast<size_t>(r) + 1]);
    Tensor lp = ad::log_softmax_t(ad::gather_rows(logits, rows), 1.0);
    return mean_of(ad::pick_per_row(lp, targets), -1.0);
}

Tensor kl_logit_loss(const Tensor& teacher_logits, const Tensor& student_logits, double T,
                     bool forward, const std::vector<uint8_t>& mask, bool t_squared) {
    if (!(T > 0.0))
        throw ParameterError("temperature must be positive, got " + std::to_string(T));
    if (teacher_logits.shape() != student_logits.shape())
        throw DimensionError("teacher logits " + ad::shape_str(teacher_logits.shape()) +
                             " and student logits " + ad::shape_str(student_logits.shape()) +
                             " must match");
    std::vector<int> rows = mask_to_logit_rows(mask);
    Tensor ts = ad::gather_rows(teacher_logits.detach(), rows);
    Tensor ss = ad::gather_rows(student_logits, rows);
    Tensor per_row;
    if (forward) {
        Tensor pt = ad::softmax_t(ts, T);
        Tensor lpt = ad::log_softmax_t(ts, T);
        Tensor lps = ad::log_softmax_t(ss, T);
        per_row = ad::row_sum(ad::mul(pt, ad::sub(lpt, lps)));
    } else {
        Tensor ps = ad::softmax_t(ss, T);
        Tensor lps = ad::log_softmax_t(ss, T);
        Tensor lpt = ad::log_softmax_t(ts, T);
        per_row = ad::row_sum(ad::mul(ps, ad::sub(lps, lpt)));
    }
    return mean_of(per_row, t_squared ? T * T : 1.0);
}

Tensor generalized_jsd(const Tensor& teacher_logits, const Tensor& student_logits, double beta,
                       double T, const std::vector<uint8_t>& mask, bool t_squared) {
    if (!(beta > 0.0 && beta < 1.0))
        throw ParameterError("jsd beta must lie strictly between 0 and 1, got " +
                             std::to_string(beta));
    if (!(T > 0.0))
        throw ParameterError("temperature must be positive, got " + std::to_string(T));
    if (teacher_logits.shape() != student_logits.shape())
        throw DimensionError("teacher logits " + ad::shape_str(teacher_logits.shape()) +
                             " and student logits " + ad::shape_str(student_logits.shape()) +
                             " must match");
    std::vector<int> rows = mask_to_logit_rows(mask);
    Tensor ts = ad::gather_rows(teacher_logits.detach(), rows);
    Tensor ss = ad::gather_rows(student_logits, rows);
    Tensor pt = ad::softmax_t(ts, T);
    Tensor lpt = ad::log_softmax_t(ts, T);
    Tensor ps = ad::softmax_t(ss, T);
    Tensor lps = ad::log_softmax_t(ss, T);
    Tensor mix = ad::add(ad::scale(pt, beta), ad::scale(ps, 1.0 - beta));
    Tensor lmix = ad::log_(mix);
    Tensor kl_t = ad::row_sum(ad::mul(pt, ad::sub(lpt, lmix)));
    Tensor kl_s = ad::row_sum(ad::mul(ps, ad::sub(lps, lmix)));
    Tensor per_row = ad::add(ad::scale(kl_t, beta), ad::scale(kl_s, 1.0 - beta));
    return mean_of(per_row, t_squared ? T * T : 1.0);
}

Tensor mse_logit_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                      const std::vector<uint8_t>& mask) {
    if (teacher_logits.shape() != student_logits.shape())
        throw DimensionError("teacher logits " + ad::shape_str(teacher_logits.shape()) +
                             " and student logits " + ad::shape_str(student_logits.shape()) +
                             " must match");
    std::vector<int> rows = mask_to_logit_rows(mask);
    Tensor ts = ad::gather_rows(teacher_logits.detach(), rows);
    Tensor ss = ad::gather_rows(student_logits, rows);
    Tensor diff = ad::sub(ts, ss);
    const double count = static_cast<double>(rows.size()) * static_cast<double>(ts.cols());
    return ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / count);
}

Tensor logit_standardize(const Tensor& logits) { return ad::standardize_rows(logits); }

FeatureProjector FeatureProjector::init(int in_dim, int out_dim, uint64_t seed) {
    if (in_dim <= 0 || out_dim <= 0)
        throw DimensionError("projector dims must be positive, got " + std::to_string(in_dim) +
                             " -> " + std::to_string(out_dim));
    Rng rng(seed);
    FeatureProjector p;
    p.w1 = Tensor::randn({in_dim, out_dim}, rng, 0.02).set_requires_grad(true);
    p.b1 = Tensor::zeros({1, out_dim}).set_requires_grad(true);
    p.w2 = Tensor::randn({out_dim, out_dim}, rng, 0.02).set_requires_grad(true);
    p.b2 = Tensor::zeros({1, out_dim}).set_requires_grad(true);
    return p;
}

Tensor FeatureProjector::apply(const Tensor& h) const {
    Tensor hidden = ad::gelu(ad::add_bias(ad::matmul(h, w1), b1));
    return ad::add_bias(ad::matmul(hidden, w2), b2);
}

std::vector<Tensor> FeatureProjector::parameters() const { return {w1, b1, w2, b2}; }

std::vector<std::pair<std::string, Tensor>>
FeatureProjector::named_parameters(const std::string& prefix) const {
    return {{prefix + ".w1", w1}, {prefix + ".b1", b1}, {prefix + ".w2", w2}, {prefix + ".b2", b2}};
}

Tensor feature_align_loss(const std::vector<Tensor>& student_hidden,
                          const std::vector<Tensor>& teacher_hidden,
                          const std::vector<FeatureProjector>& projectors, FeatureLoss metric,
                          const std::vector<uint8_t>& mask,
                          const std::vector<int>& layer_offsets) {
    if (metric == FeatureLoss::none)
        throw ParameterError("feature_align_loss called with metric none");
    if (layer_offsets.empty()) throw ConfigError("feature alignment needs at least one layer");
    if (projectors.size() != layer_offsets.size())
        throw ContractError("expected one feature projector per aligned layer, got " +
                            std::to_string(projectors.size()) + " for " +
                            std::to_string(layer_offsets.size()) + " layers");
    const int n_student = static_cast<int>(student_hidden.size());
    const int n_teacher = static_cast<int>(teacher_hidden.size());
    std::vector<int> rows = mask_to_token_rows(mask);
    const double n = static_cast<double>(rows.size());

    Tensor total;
    for (size_t k = 0; k < layer_offsets.size(); ++k) {
        const int off = layer_offsets[k];
        if (off < 0 || off >= n_student || off >= n_teacher)
            throw ConfigError("feature layer offset " + std::to_string(off) +
                              " is out of range for a " + std::to_string(n_student) +
                              "-layer student and " + std::to_string(n_teacher) +
                              "-layer teacher");
        Tensor hs = ad::gather_rows(student_hidden[static_cast<size_t>(n_student - 1 - off)], rows);
        Tensor ht = ad::gather_rows(
            teacher_hidden[static_cast<size_t>(n_teacher - 1 - off)].detach(), rows);
        Tensor proj = projectors[k].apply(hs);
        Tensor layer_loss;
        if (metric == FeatureLoss::cosine) {
            Tensor cos = ad::row_sum(ad::mul(unit_rows(proj), unit_rows(ht)));
            layer_loss = ad::add_const(ad::scale(ad::sum(cos), -1.0 / n), 1.0);
        } else {
            Tensor diff = ad::sub(proj, ht);
            const double count = n * static_cast<double>(ht.cols());
            layer_loss = ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / count);
        }
        total = total.defined() ? ad::add(total, layer_loss) : layer_loss;
    }
    if (layer_offsets.size() > 1)
        total = ad::scale(total, 1.0 / static_cast<double>(layer_offsets.size()));
    return total;
}

namespace {

Tensor head_average(const std::vector<Tensor>& heads) {
    if (heads.empty()) throw ContractError("attention affinity needs at least one head");
    Tensor acc = heads[0];
    for (size_t h = 1; h < heads.size(); ++h) acc = ad::add(acc, heads[h]);
    return ad::scale(acc, 1.0 / static_cast<double>(heads.size()));
}

} // namespace

Tensor attention_affinity_loss(const std::vector<Tensor>& student_heads,
                               const std::vector<Tensor>& teacher_heads, AttnGroup group,
                               int n_visual, const std::vector<uint8_t>& answer_mask) {
    Tensor s_avg = head_average(student_heads);
    Tensor t_avg = head_average(teacher_heads).detach();
    if (s_avg.shape() != t_avg.shape())
        throw ContractError("attention maps disagree on sequence length (" +
                            ad::shape_str(s_avg.shape()) + " vs " + ad::shape_str(t_avg.shape()) +
                            "); both models must see the same tokenization");
    const int seq = s_avg.rows();
    if (group == AttnGroup::all) {
        // Causal masking zeroes the upper triangle on both sides, so restrict
        // the mean to the seq*(seq+1)/2 visible entries.
        Tensor diff = ad::sub(t_avg, s_avg);
        std::vector<double> vis(static_cast<size_t>(seq) * static_cast<size_t>(seq), 0.0);
        for (int i = 0; i < seq; ++i)
            for (int j = 0; j <= i; ++j) vis[static_cast<size_t>(i) * seq + j] = 1.0;
        Tensor visible = ad::mul(diff, Tensor::from_data({seq, seq}, vis));
        const double count = static_cast<double>(seq) * (seq + 1) / 2.0;
        return ad::scale(ad::sum(ad::mul(visible, visible)), 1.0 / count);
    }
    if (n_visual <= 0)
        throw ParameterError("image_to_answer affinity needs a positive visual token count");
    std::vector<int> answer_rows = mask_to_token_rows(answer_mask);
    Tensor s_block = ad::slice_cols(ad::gather_rows(s_avg, answer_rows), 1, n_visual);
    Tensor t_block = ad::slice_cols(ad::gather_rows(t_avg, answer_rows), 1, n_visual);
    Tensor diff = ad::sub(t_block, s_block);
    const double count = static_cast<double>(answer_rows.size()) * n_visual;
    return ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / count);
}

Tensor similarity_affinity_loss(const Tensor& student_hv, const Tensor& student_hq,
                                const Tensor& teacher_hv, const Tensor& teacher_hq) {
    if (student_hv.rows() != teacher_hv.rows())
        throw ContractError("visual token counts differ between models (" +
                            std::to_string(student_hv.rows()) + " vs " +
                            std::to_string(teacher_hv.rows()) + ")");
    if (student_hq.rows() != teacher_hq.rows())
        throw ContractError("question token counts differ between models (" +
                            std::to_string(student_hq.rows()) + " vs " +
                            std::to_string(teacher_hq.rows()) + ")");
    Tensor s_sim = ad::matmul_nt(unit_rows(student_hv), unit_rows(student_hq));
    Tensor t_sim = ad::matmul_nt(unit_rows(teacher_hv.detach()), unit_rows(teacher_hq.detach()));
    Tensor diff = ad::sub(t_sim, s_sim);
    const double count = static_cast<double>(s_sim.rows()) * static_cast<double>(s_sim.cols());
    return ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / count);
}

Tensor compose(const DistillConfig& config, const Components& components,
               std::vector<std::pair<std::string, double>>* logged) {
    config.validate();
    if (!components.ce.defined())
        throw ContractError("the autoregressive term is always required by compose");
    if (logged) logged->emplace_back("ce", components.ce.item());

    struct Term {
        const Tensor* value;
        double weight;
        const char* name;
        bool active;
    };
    const Term terms[] = {
        {&components.logit, config.w_logit, "logit",
         config.logit_loss != LogitLoss::none && config.w_logit != 0.0},
        {&components.feature, config.w_feature, "feature",
         config.feature_loss != FeatureLoss::none && config.w_feature != 0.0},
        {&components.affinity, config.w_affinity, "affinity",
         config.affinity_loss != AffinityLoss::none && config.w_affinity != 0.0},
    };

    // The CE term passes through untouched at unit weight so a config with no
    // active distillation terms reproduces the plain objective bit for bit.
    Tensor total = config.w_ce == 1.0 ? components.ce : ad::scale(components.ce, config.w_ce);
    for (const Term& term : terms) {
        if (!term.active) continue;
        if (!term.value->defined())
            throw ContractError(std::string(term.name) +
                                " loss is active in the config but its component was not computed");
        if (logged) logged->emplace_back(term.name, term.value->item());
        total = ad::add(total, term.weight == 1.0 ? *term.value
                                                  : ad::scale(*term.value, term.weight));
    }
    return total;
}

} // namespace mmkd::losses
