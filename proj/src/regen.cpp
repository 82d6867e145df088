#include "mmkd/regen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mmkd/errors.hpp"
#include "mmkd/rng.hpp"

namespace mmkd::regen {

namespace {

// Greedy-decodes a replacement answer for one sample. Returns false when the
// continuation cannot fit [answer..., EOS] inside the model's window, in which
// case the sample is left exactly as it was.
bool regenerate_sample(data::Sample& sample, const model::TransformerLM& lm,
                       const model::VisualEncoder& encoder, const data::Vocabulary& vocab,
                       data::Provenance provenance) {
    const int n_visual = encoder.spec().n_visual_tokens();
    const data::TokenizedSample tok = data::tokenize(sample.conversation, vocab, n_visual);

    // Prompt = everything up to and including the instruction/answer separator.
    auto sep_it = std::find(tok.ids.begin() + tok.first_text_pos(), tok.ids.end(), vocab.sep());
    if (sep_it == tok.ids.end()) throw ContractError("regenerate: tokenized sample has no separator");
    const std::vector<int> prompt(tok.ids.begin(), sep_it + 1);

    const int budget =
        lm.spec().max_seq - static_cast<int>(prompt.size()) - 1; // reserve room for EOS
    if (budget <= 0) return false;

    // Ask for one token beyond the budget: a continuation that long proves the
    // model ran past the window instead of closing the answer.
    const std::vector<int> out =
        model::generate(lm, encoder, sample.image, prompt, n_visual, budget + 1, vocab.eos());
    if (out.empty() || static_cast<int>(out.size()) > budget) return false;

    std::string text;
    for (int id : out) {
        if (!text.empty()) text += ' ';
        text += vocab.word(id);
    }
    sample.conversation.set_answer(text);
    sample.conversation.provenance = provenance;
    return true;
}

} // namespace

RegenReport regenerate_with_teacher(const data::Dataset& ds, const model::TransformerLM& teacher,
                                    const model::VisualEncoder& encoder,
                                    const data::Vocabulary& vocab) {
    RegenReport report;
    report.dataset = ds;
    for (data::Sample& sample : report.dataset.samples) {
        if (regenerate_sample(sample, teacher, encoder, vocab,
                              data::Provenance::teacher_regenerated)) {
            ++report.regenerated;
        } else {
            ++report.kept_original;
        }
    }
    return report;
}

RegenReport regenerate_with_student(const data::Dataset& ds, const model::TransformerLM& student,
                                    const model::VisualEncoder& encoder,
                                    const data::Vocabulary& vocab, double fraction,
                                    uint64_t rng_seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ParameterError("regenerate_with_student: fraction must be in [0, 1], got " +
                             std::to_string(fraction));
    }

    RegenReport report;
    report.dataset = ds;
    const int n = static_cast<int>(ds.samples.size());
    // Guard against products like 0.29 * 100 landing a hair below the integer.
    const int k = static_cast<int>(std::floor(fraction * n + 1e-9));

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(rng_seed);
    rng.shuffle(order);
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());

    for (int idx : order) {
        if (regenerate_sample(report.dataset.samples[static_cast<size_t>(idx)], student, encoder,
                              vocab, data::Provenance::student_regenerated)) {
            ++report.regenerated;
        } else {
            ++report.kept_original;
        }
    }
    return report;
}

} // namespace mmkd::regen
