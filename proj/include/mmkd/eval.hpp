#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmkd/data.hpp"
#include "mmkd/losses.hpp"
#include "mmkd/model.hpp"
#include "mmkd/trainer.hpp"

namespace mmkd::eval {

// Greedy-decoded answer text for one sample's image and question.
std::string greedy_answer(const model::TransformerLM& lm, const model::VisualEncoder& encoder,
                          const data::Sample& sample, const data::Vocabulary& vocab);

struct EvalReport {
    double accuracy_pct = 0.0;
    std::map<std::string, double> family_accuracy_pct;
    std::map<std::string, int> family_count;
    std::optional<double> teacher_agreement_pct;
    double held_out_loss = 0.0; // mean per-sample answer-token cross entropy
    int sample_count = 0;
};

// Exact-match accuracy of greedy decodes against the stored answers, plus the
// per-family breakdown and the mean autoregressive loss on the same set.
EvalReport eval_qa_accuracy(const model::TransformerLM& lm, const model::VisualEncoder& encoder,
                            const data::Dataset& eval_set, const data::Vocabulary& vocab);

// Percentage of questions where the two models' greedy decodes coincide.
double teacher_agreement(const model::TransformerLM& student, const model::TransformerLM& teacher,
                         const model::VisualEncoder& encoder, const data::Dataset& eval_set,
                         const data::Vocabulary& vocab);

struct AblationArm {
    std::string name;
    losses::DistillConfig distill;
    // Arms probing data regeneration train on their own split; null means the
    // matrix-wide training set.
    std::shared_ptr<const data::Dataset> train_override;
};

struct AblationConfig {
    std::vector<AblationArm> arms;
    std::vector<uint64_t> seeds = {1, 2, 3};
    train::TrainConfig train; // stage-2 settings shared by every run; seed is overridden per run
    int workers = 1;
};

struct MetricStat {
    double mean = 0.0;
    double stddev = 0.0; // sample stddev, 0 for a single seed
};

struct ArmResult {
    std::string name;
    std::string distill_summary;
    std::vector<uint64_t> seeds;
    std::vector<EvalReport> per_seed;
    MetricStat accuracy;
    MetricStat agreement;
    MetricStat held_out_loss;
};

struct AblationReport {
    std::vector<ArmResult> rows;
};

// Trains one student per (arm, seed) from the same starting checkpoint, always
// prepending a plain fine-tuning baseline, and evaluates each run against the
// shared eval set. Runs are independent; `workers` of them execute in parallel.
AblationReport run_ablation(const model::TransformerLM& student_base,
                            const model::TransformerLM& teacher,
                            const model::VisualEncoder& encoder, const data::Dataset& train_set,
                            const data::Dataset& eval_set, const data::Vocabulary& vocab,
                            const AblationConfig& cfg);

// Table format is an aligned markdown table with columns config, accuracy,
// agreement, held-out loss. Records format is one structured line per row and
// parses back to an equal report. Neither embeds timestamps, so a rerun with
// the same seeds reproduces the bytes.
std::string format_report_table(const AblationReport& report);
std::string format_report_records(const AblationReport& report);
AblationReport parse_report_records(const std::string& text);

void emit_report(const AblationReport& report, const std::string& path, const std::string& format);

} // namespace mmkd::eval
