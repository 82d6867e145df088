#include "mmkd/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mmkd/errors.hpp"

using nlohmann::json;

namespace mmkd::data {

const std::array<std::string, kNumColors>& color_names() {
    static const std::array<std::string, kNumColors> names = {"red", "green", "blue", "yellow"};
    return names;
}

const std::array<std::string, kNumShapes>& shape_names() {
    static const std::array<std::string, kNumShapes> names = {"circle", "square", "triangle"};
    return names;
}

const char* family_name(Family f) {
    switch (f) {
        case Family::count: return "count";
        case Family::presence: return "presence";
        case Family::position: return "position";
        case Family::describe: return "describe";
    }
    throw ContractError("family_name: bad enum value");
}

Family family_from_name(const std::string& name) {
    for (Family f : {Family::count, Family::presence, Family::position, Family::describe}) {
        if (name == family_name(f)) return f;
    }
    throw ConfigError("unknown question family '" + name + "'");
}

const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::original: return "original";
        case Provenance::teacher_regenerated: return "teacher_regenerated";
        case Provenance::student_regenerated: return "student_regenerated";
    }
    throw ContractError("provenance_name: bad enum value");
}

Provenance provenance_from_name(const std::string& name) {
    for (Provenance p : {Provenance::original, Provenance::teacher_regenerated,
                         Provenance::student_regenerated}) {
        if (name == provenance_name(p)) return p;
    }
    throw ConfigError("unknown provenance '" + name + "'");
}

const std::string& Conversation::instruction() const {
    validate();
    return turns[0].text;
}

const std::string& Conversation::answer() const {
    validate();
    return turns[1].text;
}

void Conversation::set_answer(const std::string& text) {
    validate();
    turns[1].text = text;
}

void Conversation::validate() const {
    if (turns.size() < 2) throw ContractError("conversation needs an instruction and an answer turn");
    for (size_t i = 0; i < turns.size(); ++i) {
        const std::string& want = (i % 2 == 0) ? "instruction" : "answer";
        if (turns[i].role != want) {
            throw ContractError("conversation turn " + std::to_string(i) + " has role '" +
                                turns[i].role + "', expected '" + want + "'");
        }
    }
    if (turns[1].text.empty()) throw ContractError("conversation answer text is empty");
}

namespace {

void check_grid(const GridConfig& grid) {
    if (grid.rows < 1 || grid.cols < 1) {
        throw ConfigError("grid must be at least 1x1, got " + std::to_string(grid.rows) + "x" +
                          std::to_string(grid.cols));
    }
    if (grid.occupancy_pct < 0 || grid.occupancy_pct > 100) {
        throw ConfigError("grid occupancy_pct must be in [0,100], got " +
                          std::to_string(grid.occupancy_pct));
    }
}

} // namespace

ToyImage make_world(uint64_t rng_seed, const GridConfig& grid) {
    check_grid(grid);
    Rng rng(rng_seed);
    ToyImage img;
    img.rows = grid.rows;
    img.cols = grid.cols;
    img.cells.resize(static_cast<size_t>(grid.rows) * grid.cols, 0);
    for (int& cell : img.cells) {
        if (rng.uniform_int(100) < grid.occupancy_pct) {
            cell = 1 + rng.uniform_int(kNumColors * kNumShapes);
        }
    }
    return img;
}

Facts compute_facts(const ToyImage& image) {
    Facts f;
    f.rows = image.rows;
    f.cols = image.cols;
    f.cells = image.cells;
    for (int code : image.cells) {
        if (code == 0) continue;
        if (code < 0 || code >= kNumCellCodes) {
            throw ContractError("invalid cell code " + std::to_string(code));
        }
        const int color = (code - 1) / kNumShapes;
        const int shape = (code - 1) % kNumShapes;
        f.color_count[color] += 1;
        f.shape_count[shape] += 1;
        f.pair_count[code - 1] += 1;
        f.total += 1;
    }
    return f;
}

std::string number_word(int n) { return std::to_string(n); }

std::string cell_phrase(int code) {
    if (code == 0) return "empty";
    if (code < 0 || code >= kNumCellCodes) {
        throw ContractError("invalid cell code " + std::to_string(code));
    }
    return color_names()[(code - 1) / kNumShapes] + " " + shape_names()[(code - 1) % kNumShapes];
}

Conversation make_conversation(const Facts& facts, uint64_t rng_seed,
                               const std::vector<Family>& template_set) {
    if (template_set.empty()) throw ConfigError("make_conversation: empty template set");
    Rng rng(rng_seed);
    const Family family = template_set[static_cast<size_t>(rng.uniform_int(
        static_cast<int>(template_set.size())))];

    std::string question;
    std::string answer;
    switch (family) {
        case Family::count: {
            const int kind = rng.uniform_int(3);
            if (kind == 0) {
                const int c = rng.uniform_int(kNumColors);
                question = "how many " + color_names()[c] + " objects";
                answer = number_word(facts.color_count[c]);
            } else if (kind == 1) {
                const int s = rng.uniform_int(kNumShapes);
                question = "how many " + shape_names()[s] + " objects";
                answer = number_word(facts.shape_count[s]);
            } else {
                question = "how many objects";
                answer = number_word(facts.total);
            }
            break;
        }
        case Family::presence: {
            const int k = rng.uniform_int(kNumColors * kNumShapes);
            question = "is there any " + cell_phrase(1 + k);
            answer = facts.pair_count[k] > 0 ? "yes" : "no";
            break;
        }
        case Family::position: {
            const int r = rng.uniform_int(facts.rows);
            const int c = rng.uniform_int(facts.cols);
            question = "what is in row " + std::to_string(r + 1) + " column " + std::to_string(c + 1);
            answer = cell_phrase(facts.cells[static_cast<size_t>(r) * facts.cols + c]);
            break;
        }
        case Family::describe: {
            const int r = rng.uniform_int(facts.rows);
            question = "describe row " + std::to_string(r + 1);
            std::string joined;
            for (int c = 0; c < facts.cols; ++c) {
                if (c > 0) joined += " ";
                joined += cell_phrase(facts.cells[static_cast<size_t>(r) * facts.cols + c]);
            }
            answer = joined;
            break;
        }
    }

    Conversation conv;
    conv.turns = {{"instruction", question}, {"answer", answer}};
    conv.family = family;
    conv.provenance = Provenance::original;
    return conv;
}

Vocabulary Vocabulary::standard(int vocab_size) {
    Vocabulary v;
    v.words_ = {"<pad>", "<bos>", "<eos>", "<img>", "<sep>"};
    for (const auto& w : color_names()) v.words_.push_back(w);
    for (const auto& w : shape_names()) v.words_.push_back(w);
    for (int n = 0; n <= 16; ++n) v.words_.push_back(number_word(n));
    for (const char* w : {"yes", "no", "empty", "how", "many", "objects", "is", "there", "any",
                          "what", "in", "row", "column", "describe"}) {
        v.words_.push_back(w);
    }
    if (vocab_size < static_cast<int>(v.words_.size())) {
        throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is smaller than the " +
                          std::to_string(v.words_.size()) + " core words");
    }
    while (static_cast<int>(v.words_.size()) < vocab_size) {
        v.words_.push_back("<reserved" + std::to_string(v.words_.size()) + ">");
    }
    v.index_.reserve(v.words_.size());
    for (size_t i = 0; i < v.words_.size(); ++i) {
        v.index_.emplace_back(v.words_[i], static_cast<int>(i));
    }
    std::sort(v.index_.begin(), v.index_.end());
    return v;
}

int Vocabulary::id(const std::string& word) const {
    auto it = std::lower_bound(index_.begin(), index_.end(), word,
                               [](const auto& entry, const std::string& w) { return entry.first < w; });
    if (it == index_.end() || it->first != word) {
        throw TokenizeError("word '" + word + "' is not in the vocabulary");
    }
    return it->second;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) {
        throw TokenizeError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                            std::to_string(size()));
    }
    return words_[static_cast<size_t>(id)];
}

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> words;
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

std::vector<int> TokenizedSample::selected(const std::vector<uint8_t>& mask) const {
    std::vector<int> out;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) out.push_back(static_cast<int>(i));
    }
    return out;
}

TokenizedSample tokenize(const Conversation& conv, const Vocabulary& vocab, int n_visual) {
    conv.validate();
    if (n_visual < 1) throw ContractError("tokenize: need at least one visual token");
    TokenizedSample s;
    s.n_visual = n_visual;
    s.ids.push_back(vocab.bos());
    for (int i = 0; i < n_visual; ++i) s.ids.push_back(vocab.img());
    for (const auto& w : split_words(conv.instruction())) s.ids.push_back(vocab.id(w));
    s.ids.push_back(vocab.sep());
    const size_t answer_start = s.ids.size();
    for (const auto& w : split_words(conv.answer())) s.ids.push_back(vocab.id(w));
    s.ids.push_back(vocab.eos());

    s.answer_only.assign(s.ids.size(), 0);
    s.all_tokens.assign(s.ids.size(), 0);
    for (size_t p = answer_start; p < s.ids.size(); ++p) s.answer_only[p] = 1;
    for (size_t p = static_cast<size_t>(s.first_text_pos()); p < s.ids.size(); ++p) {
        s.all_tokens[p] = 1;
    }
    return s;
}

std::pair<std::string, std::string> detokenize(const TokenizedSample& sample,
                                               const Vocabulary& vocab) {
    std::string instruction;
    std::string answer;
    bool in_answer = false;
    for (size_t p = static_cast<size_t>(sample.first_text_pos()); p < sample.ids.size(); ++p) {
        const int id = sample.ids[p];
        if (id == vocab.sep()) {
            in_answer = true;
            continue;
        }
        if (id == vocab.eos()) break;
        std::string& dst = in_answer ? answer : instruction;
        if (!dst.empty()) dst += " ";
        dst += vocab.word(id);
    }
    return {instruction, answer};
}

namespace {

json conversation_to_json(const Conversation& conv) {
    json turns = json::array();
    for (const auto& t : conv.turns) turns.push_back({{"role", t.role}, {"text", t.text}});
    return json{{"family", family_name(conv.family)},
                {"provenance", provenance_name(conv.provenance)},
                {"turns", turns}};
}

void require_keys(const json& obj, std::initializer_list<const char*> keys,
                  const std::string& where) {
    for (const char* k : keys) {
        if (!obj.contains(k)) throw IoError(where + ": missing field '" + k + "'");
    }
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* k : keys) known = known || (it.key() == k);
        if (!known) throw IoError(where + ": unknown field '" + it.key() + "'");
    }
}

} // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    json header{{"schema_version", 1},
                {"grid", {{"rows", ds.grid.rows},
                          {"cols", ds.grid.cols},
                          {"occupancy_pct", ds.grid.occupancy_pct}}}};
    out << header.dump() << "\n";
    for (const auto& sample : ds.samples) {
        json rec = conversation_to_json(sample.conversation);
        rec["cells"] = sample.image.cells;
        out << rec.dump() << "\n";
    }
    if (!out) throw IoError("failed while writing '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw IoError("dataset '" + path + "' is empty");

    Dataset ds;
    try {
        const json header = json::parse(line);
        require_keys(header, {"schema_version", "grid"}, "dataset header");
        if (header["schema_version"].get<int>() != 1) {
            throw IoError("unsupported dataset schema_version " +
                          header["schema_version"].dump());
        }
        const json& grid = header["grid"];
        require_keys(grid, {"rows", "cols", "occupancy_pct"}, "dataset header grid");
        ds.grid.rows = grid["rows"].get<int>();
        ds.grid.cols = grid["cols"].get<int>();
        ds.grid.occupancy_pct = grid["occupancy_pct"].get<int>();
        check_grid(ds.grid);
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw IoError("dataset '" + path + "' header: " + e.what());
    }

    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json rec = json::parse(line);
            const std::string where = "dataset line " + std::to_string(line_no);
            require_keys(rec, {"family", "provenance", "turns", "cells"}, where);
            Sample s;
            s.image.rows = ds.grid.rows;
            s.image.cols = ds.grid.cols;
            s.image.cells = rec["cells"].get<std::vector<int>>();
            if (s.image.cells.size() != static_cast<size_t>(ds.grid.rows) * ds.grid.cols) {
                throw IoError(where + ": expected " + std::to_string(ds.grid.rows * ds.grid.cols) +
                              " cells, got " + std::to_string(s.image.cells.size()));
            }
            for (int code : s.image.cells) {
                if (code < 0 || code >= kNumCellCodes) {
                    throw IoError(where + ": invalid cell code " + std::to_string(code));
                }
            }
            s.conversation.family = family_from_name(rec["family"].get<std::string>());
            s.conversation.provenance = provenance_from_name(rec["provenance"].get<std::string>());
            for (const json& t : rec["turns"]) {
                require_keys(t, {"role", "text"}, where + " turn");
                s.conversation.turns.push_back({t["role"].get<std::string>(),
                                                t["text"].get<std::string>()});
            }
            s.conversation.validate();
            ds.samples.push_back(std::move(s));
        } catch (const IoError&) {
            throw;
        } catch (const std::exception& e) {
            throw IoError("dataset line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return ds;
}

Dataset generate_split(const GenConfig& cfg, uint64_t seed, const std::string& split) {
    check_grid(cfg.grid);
    int n = 0;
    uint64_t tag = 0;
    const std::vector<Family>* families = &cfg.families;
    if (split == "train") {
        n = cfg.n_train;
        tag = 0;
    } else if (split == "eval") {
        n = cfg.n_eval;
        tag = 1;
    } else if (split == "pretrain") {
        n = cfg.n_pretrain;
        tag = 2;
        families = &cfg.pretrain_families;
    } else {
        throw ConfigError("unknown dataset split '" + split + "'");
    }
    if (n < 0) throw ConfigError("negative sample count for split '" + split + "'");

    Dataset ds;
    ds.grid = cfg.grid;
    ds.samples.reserve(static_cast<size_t>(n));
    const uint64_t split_seed = Rng::derive(seed, tag);
    for (int i = 0; i < n; ++i) {
        const uint64_t sample_seed = Rng::derive(split_seed, static_cast<uint64_t>(i));
        Sample s;
        s.image = make_world(Rng::derive(sample_seed, 0), cfg.grid);
        s.conversation = make_conversation(compute_facts(s.image), Rng::derive(sample_seed, 1),
                                           *families);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace mmkd::data
