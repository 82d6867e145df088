#pragma once

#include <cstdint>

#include "mmkd/data.hpp"
#include "mmkd/model.hpp"

namespace mmkd::regen {

// Outcome of rewriting a dataset's answers with a model's own generations.
// Samples whose regeneration would not fit the model's sequence budget keep
// their original answer and provenance; they are counted, not dropped.
struct RegenReport {
    data::Dataset dataset;
    int regenerated = 0;
    int kept_original = 0;

    int attempted() const { return regenerated + kept_original; }
};

// Replaces every answer with the teacher's greedy continuation of the
// corresponding prompt. Questions and images are untouched; successfully
// rewritten samples are marked teacher_regenerated.
RegenReport regenerate_with_teacher(const data::Dataset& ds, const model::TransformerLM& teacher,
                                    const model::VisualEncoder& encoder,
                                    const data::Vocabulary& vocab);

// Rewrites a seed-deterministic subset of floor(fraction * N) samples with the
// student's greedy generations, marking them student_regenerated. During later
// distillation those samples carry teacher logits as supervision on the
// student-written tokens, exactly like any other sample in the mixed set.
RegenReport regenerate_with_student(const data::Dataset& ds, const model::TransformerLM& student,
                                    const model::VisualEncoder& encoder,
                                    const data::Vocabulary& vocab, double fraction,
                                    uint64_t rng_seed);

} // namespace mmkd::regen
