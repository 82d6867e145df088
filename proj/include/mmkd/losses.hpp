#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmkd/tensor.hpp"

namespace mmkd::losses {

using ad::Tensor;

enum class LogitLoss { none, forward_kl, reverse_kl, jsd, mse };
enum class FeatureLoss { none, cosine, mse };
enum class AffinityLoss { none, attention, similarity };
enum class MaskPolicy { answer_only, all_tokens };
enum class AttnGroup { all, image_to_answer };

const char* logit_loss_name(LogitLoss v);
const char* feature_loss_name(FeatureLoss v);
const char* affinity_loss_name(AffinityLoss v);
const char* mask_policy_name(MaskPolicy v);
const char* attn_group_name(AttnGroup v);
LogitLoss logit_loss_from_name(const std::string& s);
FeatureLoss feature_loss_from_name(const std::string& s);
AffinityLoss affinity_loss_from_name(const std::string& s);
MaskPolicy mask_policy_from_name(const std::string& s);
AttnGroup attn_group_from_name(const std::string& s);

struct DistillConfig {
    double temperature = 0.7;
    double jsd_beta = 0.5;
    bool scale_by_t_squared = true;
    LogitLoss logit_loss = LogitLoss::none;
    bool standardize_logits = false;
    MaskPolicy logit_mask = MaskPolicy::answer_only;
    FeatureLoss feature_loss = FeatureLoss::none;
    // Aligned from the end: offset 0 is the last layer of both models,
    // offset 1 the second-to-last, and so on.
    std::vector<int> feature_layers = {0};
    MaskPolicy feature_mask = MaskPolicy::answer_only;
    AffinityLoss affinity_loss = AffinityLoss::none;
    AttnGroup attn_group = AttnGroup::all;
    double w_ce = 1.0;
    double w_logit = 1.0;
    double w_feature = 1.0;
    double w_affinity = 1.0;

    void validate() const;
    bool any_distill_active() const;
    std::string summary() const; // compact human-readable description
};

// Mask positions are token positions; the logit row that predicts token p is
// p-1, so p must be positive. Throws on an empty selection.
std::vector<int> mask_to_logit_rows(const std::vector<uint8_t>& mask);
// Token positions themselves, for aligning hidden states.
std::vector<int> mask_to_token_rows(const std::vector<uint8_t>& mask);

// Mean over selected positions of -log softmax(logits)[target].
Tensor autoregressive_ce(const Tensor& logits, const std::vector<int>& target_ids,
                         const std::vector<uint8_t>& mask);

// Temperature-softened KL divergence between teacher and student logits.
// forward: KL(P_t || P_s); reverse: KL(P_s || P_t). Mean over selected
// positions, scaled by T² when t_squared is set.
Tensor kl_logit_loss(const Tensor& teacher_logits, const Tensor& student_logits, double T,
                     bool forward, const std::vector<uint8_t>& mask, bool t_squared = true);

// β·KL(P_t||M) + (1-β)·KL(P_s||M) with M = β·P_t + (1-β)·P_s.
Tensor generalized_jsd(const Tensor& teacher_logits, const Tensor& student_logits, double beta,
                       double T, const std::vector<uint8_t>& mask, bool t_squared = true);

Tensor mse_logit_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                      const std::vector<uint8_t>& mask);

// Per-row z-scoring of logits (population std); the assertable claim is that
// softmax_t of the result is invariant to positive affine maps of the input.
Tensor logit_standardize(const Tensor& logits);

// Trainable two-layer map from student width to teacher width, used only by
// feature alignment and dropped at inference.
struct FeatureProjector {
    Tensor w1, b1, w2, b2;

    static FeatureProjector init(int in_dim, int out_dim, uint64_t seed);
    Tensor apply(const Tensor& h) const;
    std::vector<Tensor> parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;
};

// Aligns hidden states at the selected token positions across the given
// from-the-end layer offsets; one projector per offset, in the same order.
Tensor feature_align_loss(const std::vector<Tensor>& student_hidden,
                          const std::vector<Tensor>& teacher_hidden,
                          const std::vector<FeatureProjector>& projectors, FeatureLoss metric,
                          const std::vector<uint8_t>& mask, const std::vector<int>& layer_offsets);

// MSE between head-averaged last-layer attention maps. group all covers every
// causally visible entry; image_to_answer covers answer rows x visual columns.
Tensor attention_affinity_loss(const std::vector<Tensor>& student_heads,
                               const std::vector<Tensor>& teacher_heads, AttnGroup group,
                               int n_visual, const std::vector<uint8_t>& answer_mask);

// MSE between the models' visual-to-question cosine-similarity matrices.
Tensor similarity_affinity_loss(const Tensor& student_hv, const Tensor& student_hq,
                                const Tensor& teacher_hv, const Tensor& teacher_hq);

// Named loss terms; undefined tensors mark inactive components.
struct Components {
    Tensor ce;
    Tensor logit;
    Tensor feature;
    Tensor affinity;
};

// Weighted sum of the active components. Zero-weight and inactive components
// are skipped outright so an all-zero config reduces bit-identically to the
// plain CE objective. logged (if given) receives each component's raw value.
Tensor compose(const DistillConfig& config, const Components& components,
               std::vector<std::pair<std::string, double>>* logged = nullptr);

} // namespace mmkd::losses
