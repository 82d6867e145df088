#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmkd/rng.hpp"

namespace mmkd::data {

// The toy world is a small grid of cells; each cell is either empty or holds
// one colored shape. Cell codes: 0 = empty, 1 + color*3 + shape otherwise.
inline constexpr int kNumColors = 4;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumCellCodes = 1 + kNumColors * kNumShapes;

const std::array<std::string, kNumColors>& color_names();
const std::array<std::string, kNumShapes>& shape_names();

struct GridConfig {
    int rows = 4;
    int cols = 4;
    int occupancy_pct = 50; // chance that a cell holds an object, in percent
};

struct ToyImage {
    int rows = 0;
    int cols = 0;
    std::vector<int> cells; // rows*cols codes, row-major

    int cell(int r, int c) const { return cells[static_cast<size_t>(r) * cols + c]; }
};

// Ground truth derived from an image by exhaustive enumeration.
struct Facts {
    int rows = 0;
    int cols = 0;
    std::vector<int> cells;
    std::array<int, kNumColors> color_count{};
    std::array<int, kNumShapes> shape_count{};
    std::array<int, kNumColors * kNumShapes> pair_count{};
    int total = 0;
};

enum class Family { count, presence, position, describe };
const char* family_name(Family f);
Family family_from_name(const std::string& name);

enum class Provenance { original, teacher_regenerated, student_regenerated };
const char* provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& name);

struct Turn {
    std::string role; // "instruction" or "answer"
    std::string text;
};

struct Conversation {
    std::vector<Turn> turns;
    Provenance provenance = Provenance::original;
    Family family = Family::count;

    const std::string& instruction() const;
    const std::string& answer() const;
    void set_answer(const std::string& text);
    void validate() const; // alternating roles starting with instruction, nonempty answer
};

struct Sample {
    ToyImage image;
    Conversation conversation;
};

struct Dataset {
    GridConfig grid;
    std::vector<Sample> samples;
};

ToyImage make_world(uint64_t rng_seed, const GridConfig& grid);
Facts compute_facts(const ToyImage& image);
Conversation make_conversation(const Facts& facts, uint64_t rng_seed,
                               const std::vector<Family>& template_set);

// Word used for a numeric answer; counts can reach rows*cols.
std::string number_word(int n);
// Phrase for one cell: "empty" or "<color> <shape>".
std::string cell_phrase(int code);

// Fixed word list padded with reserved filler up to vocab_size. The mapping is
// identical across runs and platforms.
class Vocabulary {
public:
    static Vocabulary standard(int vocab_size);

    int id(const std::string& word) const; // unknown word → tokenize error naming it
    const std::string& word(int id) const;
    int size() const { return static_cast<int>(words_.size()); }

    int pad() const { return 0; }
    int bos() const { return 1; }
    int eos() const { return 2; }
    int img() const { return 3; }
    int sep() const { return 4; }

private:
    std::vector<std::string> words_;
    std::vector<std::pair<std::string, int>> index_; // sorted for lookup
};

// Token layout: [BOS, IMG x n_visual, instruction words, SEP, answer words, EOS].
// Masks live in token space: position p selected means ids[p] is a prediction
// target (its logit row is p-1).
struct TokenizedSample {
    std::vector<int> ids;
    std::vector<uint8_t> answer_only; // answer tokens + EOS
    std::vector<uint8_t> all_tokens;  // everything after the visual prefix
    int n_visual = 0;

    int first_text_pos() const { return 1 + n_visual; }
    std::vector<int> selected(const std::vector<uint8_t>& mask) const;
};

TokenizedSample tokenize(const Conversation& conv, const Vocabulary& vocab, int n_visual);
// Reconstructs {instruction, answer} text from a tokenized sample.
std::pair<std::string, std::string> detokenize(const TokenizedSample& sample, const Vocabulary& vocab);
// Splits a whitespace-delimited phrase into vocabulary words.
std::vector<std::string> split_words(const std::string& text);

// Line-delimited dataset container: one header line with the schema version
// and grid config, then one record per sample.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

struct GenConfig {
    GridConfig grid;
    int n_train = 8000;
    int n_eval = 1000;
    int n_pretrain = 4000;
    std::vector<Family> families = {Family::count, Family::presence, Family::position,
                                    Family::describe};
    // Stage-1 data is caption-style: full-row descriptions only.
    std::vector<Family> pretrain_families = {Family::describe};
};

// Deterministic train/eval/pretrain generation from disjoint seed streams.
Dataset generate_split(const GenConfig& cfg, uint64_t seed, const std::string& split);

} // namespace mmkd::data
