#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mmkd/data.hpp"
#include "mmkd/losses.hpp"
#include "mmkd/model.hpp"
#include "mmkd/tensor.hpp"

namespace mmkd::train {

using ad::Tensor;

struct TrainConfig {
    std::string stage = "finetune"; // pretrain | finetune
    int batch_size = 128;
    double learning_rate = 2e-5;
    double warmup_ratio = 0.03;
    int epochs = 1;
    double weight_decay = 0.0;
    double grad_clip = 0.0; // global-norm cap; 0 disables
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;
    bool cache_teacher = false; // reuse teacher passes across epochs

    static TrainConfig pretrain_defaults();
    static TrainConfig finetune_defaults();
    void validate() const;
};

// Linear warmup from 0 to peak over ceil(warmup_ratio * total) steps, then
// cosine decay reaching 0 exactly at total_steps.
double lr_schedule(int64_t step, int64_t total_steps, double peak, double warmup_ratio = 0.03);

class AdamW {
public:
    AdamW(std::vector<Tensor> params, const TrainConfig& cfg);

    // One decoupled-weight-decay Adam update; missing grads count as zero so
    // every parameter advances through the same state arithmetic each step.
    void step(double lr);

    size_t n_params() const { return params_.size(); }
    int64_t t() const { return t_; }
    void set_t(int64_t t) { t_ = t; }
    std::vector<double>& m_state(size_t i) { return m_[i]; }
    std::vector<double>& v_state(size_t i) { return v_[i]; }
    void clear_grads();

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
    double beta1_, beta2_, eps_, weight_decay_, grad_clip_;
};

struct StepRecord {
    int64_t step = 0;
    double lr = 0.0;
    double total = 0.0;
    std::vector<std::pair<std::string, double>> components; // batch means
};

struct EpochRecord {
    int epoch = 0;
    std::vector<std::pair<std::string, double>> held_out; // mean loss components
};

struct RunLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    std::string checkpoint_path;

    void save_jsonl(const std::string& path) const;
};

// Connector pretraining: only the visual projector learns; every other
// parameter is hash-checked to be untouched. Distillation is not available
// in this stage and an active config is rejected.
RunLog train_stage1(model::TransformerLM& lm, const model::VisualEncoder& encoder,
                    const data::Dataset& pretrain, const data::Vocabulary& vocab,
                    const TrainConfig& cfg,
                    const losses::DistillConfig& distill = losses::DistillConfig{});

// Resumable fine-tuning engine. One optimizer step consumes one batch; the
// epoch shuffle is a pure function of (seed, epoch) so a run restored from a
// saved state continues bit-identically to one that never stopped.
class DistillRun {
public:
    DistillRun(model::TransformerLM& student, const model::TransformerLM& teacher,
               const model::VisualEncoder& encoder, const data::Dataset& train_set,
               const data::Vocabulary& vocab, const TrainConfig& cfg,
               const losses::DistillConfig& distill, const data::Dataset* held_out = nullptr);
    ~DistillRun();

    // Advances up to max_steps optimizer steps (all remaining when < 0).
    void run(int64_t max_steps = -1);
    bool finished() const { return next_step_ >= total_steps_; }
    int64_t steps_done() const { return next_step_; }
    int64_t total_steps() const { return total_steps_; }

    const RunLog& log() const { return log_; }
    RunLog& log() { return log_; }
    const std::vector<losses::FeatureProjector>& projectors() const { return projectors_; }

    // Mean loss components over a dataset, no gradients involved.
    std::vector<std::pair<std::string, double>> loss_components(const data::Dataset& ds,
                                                                int max_samples = -1) const;

    void save_state(const std::string& path) const;
    void load_state(const std::string& path);

private:
    struct TeacherPass;

    void step_once();
    losses::Components sample_losses(const data::Sample& sample, size_t index, bool allow_cache) const;
    TeacherPass teacher_pass(const data::Sample& sample, size_t index, bool allow_cache) const;

    model::TransformerLM* student_;
    const model::TransformerLM* teacher_;
    const model::VisualEncoder* encoder_;
    const data::Dataset* train_;
    const data::Vocabulary* vocab_;
    const data::Dataset* held_out_;
    TrainConfig cfg_;
    losses::DistillConfig distill_;
    std::vector<losses::FeatureProjector> projectors_;
    std::vector<std::pair<std::string, Tensor>> trainable_;
    std::unique_ptr<AdamW> opt_;
    int64_t steps_per_epoch_ = 0;
    int64_t total_steps_ = 0;
    int64_t next_step_ = 0;
    uint64_t teacher_hash_before_ = 0;
    RunLog log_;
    mutable std::vector<TeacherPass> cache_;
};

struct DistillResult {
    RunLog log;
    std::vector<losses::FeatureProjector> projectors;
};

// Runs stage-2 fine-tuning to completion.
DistillResult distill_stage2(model::TransformerLM& student, const model::TransformerLM& teacher,
                             const model::VisualEncoder& encoder, const data::Dataset& train_set,
                             const data::Vocabulary& vocab, const TrainConfig& cfg,
                             const losses::DistillConfig& distill,
                             const data::Dataset* held_out = nullptr);

} // namespace mmkd::train
