#include "mmkd/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <thread>

#include "json.hpp"
#include "mmkd/errors.hpp"
#include "mmkd/tensor.hpp"

using nlohmann::json;
using mmkd::ad::NoGradGuard;

namespace mmkd::eval {

namespace {

std::vector<int> prompt_ids(const data::TokenizedSample& tok, const data::Vocabulary& vocab) {
    auto sep_it = std::find(tok.ids.begin() + tok.first_text_pos(), tok.ids.end(), vocab.sep());
    if (sep_it == tok.ids.end()) throw ContractError("eval: tokenized sample has no separator");
    return {tok.ids.begin(), sep_it + 1};
}

double mean_answer_ce(const model::TransformerLM& lm, const model::VisualEncoder& encoder,
                      const data::Dataset& ds, const data::Vocabulary& vocab) {
    NoGradGuard no_grad;
    double total = 0.0;
    for (const data::Sample& sample : ds.samples) {
        const data::TokenizedSample tok =
            data::tokenize(sample.conversation, vocab, encoder.spec().n_visual_tokens());
        const ad::Tensor h_v = lm.project_visual(encoder.encode(sample.image));
        const model::LMOutputs out = lm.forward(h_v, tok.ids, tok.n_visual);
        total += losses::autoregressive_ce(out.logits, tok.ids, tok.answer_only).item();
    }
    return total / static_cast<double>(ds.samples.size());
}

struct Stats {
    double mean = 0.0;
    double stddev = 0.0;
};

Stats stats_of(const std::vector<double>& xs) {
    Stats s;
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return s;
}

json report_to_json(const EvalReport& e) {
    json j;
    j["accuracy_pct"] = e.accuracy_pct;
    j["family_accuracy_pct"] = e.family_accuracy_pct;
    j["family_count"] = e.family_count;
    if (e.teacher_agreement_pct) {
        j["teacher_agreement_pct"] = *e.teacher_agreement_pct;
    } else {
        j["teacher_agreement_pct"] = nullptr;
    }
    j["held_out_loss"] = e.held_out_loss;
    j["sample_count"] = e.sample_count;
    return j;
}

EvalReport report_from_json(const json& j, const std::string& where) {
    for (const char* k : {"accuracy_pct", "family_accuracy_pct", "family_count",
                          "teacher_agreement_pct", "held_out_loss", "sample_count"}) {
        if (!j.contains(k)) throw IoError(where + ": missing field '" + k + "'");
    }
    EvalReport e;
    e.accuracy_pct = j["accuracy_pct"].get<double>();
    e.family_accuracy_pct = j["family_accuracy_pct"].get<std::map<std::string, double>>();
    e.family_count = j["family_count"].get<std::map<std::string, int>>();
    if (!j["teacher_agreement_pct"].is_null()) {
        e.teacher_agreement_pct = j["teacher_agreement_pct"].get<double>();
    }
    e.held_out_loss = j["held_out_loss"].get<double>();
    e.sample_count = j["sample_count"].get<int>();
    return e;
}

json stat_to_json(const MetricStat& s) { return json{{"mean", s.mean}, {"stddev", s.stddev}}; }

MetricStat stat_from_json(const json& j, const std::string& where) {
    if (!j.contains("mean") || !j.contains("stddev")) {
        throw IoError(where + ": metric needs 'mean' and 'stddev'");
    }
    return MetricStat{j["mean"].get<double>(), j["stddev"].get<double>()};
}

std::string format_stat(const MetricStat& s, const char* fmt) {
    char buf[80];
    std::snprintf(buf, sizeof(buf), fmt, s.mean, s.stddev);
    return buf;
}

// Byte length minus the extra UTF-8 bytes of the plus-minus sign, so padded
// columns line up on screen.
size_t display_width(const std::string& s) {
    size_t extra = 0;
    for (size_t pos = s.find("\xc2\xb1"); pos != std::string::npos; pos = s.find("\xc2\xb1", pos + 2))
        ++extra;
    return s.size() - extra;
}

} // namespace

std::string greedy_answer(const model::TransformerLM& lm, const model::VisualEncoder& encoder,
                          const data::Sample& sample, const data::Vocabulary& vocab) {
    const data::TokenizedSample tok =
        data::tokenize(sample.conversation, vocab, encoder.spec().n_visual_tokens());
    const std::vector<int> prompt = prompt_ids(tok, vocab);
    const std::vector<int> out = model::generate(lm, encoder, sample.image, prompt, tok.n_visual,
                                                 lm.spec().max_seq, vocab.eos());
    std::string text;
    for (int id : out) {
        if (!text.empty()) text += ' ';
        text += vocab.word(id);
    }
    return text;
}

EvalReport eval_qa_accuracy(const model::TransformerLM& lm, const model::VisualEncoder& encoder,
                            const data::Dataset& eval_set, const data::Vocabulary& vocab) {
    if (eval_set.samples.empty()) throw ContractError("eval_qa_accuracy: empty eval set");

    EvalReport report;
    report.sample_count = static_cast<int>(eval_set.samples.size());
    std::map<std::string, int> family_hits;
    for (const data::Sample& sample : eval_set.samples) {
        const std::string family = data::family_name(sample.conversation.family);
        const bool hit = greedy_answer(lm, encoder, sample, vocab) == sample.conversation.answer();
        report.family_count[family] += 1;
        family_hits[family] += hit ? 1 : 0;
    }
    int hits = 0;
    for (const auto& [family, n] : report.family_count) {
        hits += family_hits[family];
        report.family_accuracy_pct[family] = 100.0 * family_hits[family] / n;
    }
    report.accuracy_pct = 100.0 * hits / report.sample_count;
    report.held_out_loss = mean_answer_ce(lm, encoder, eval_set, vocab);
    return report;
}

double teacher_agreement(const model::TransformerLM& student, const model::TransformerLM& teacher,
                         const model::VisualEncoder& encoder, const data::Dataset& eval_set,
                         const data::Vocabulary& vocab) {
    if (student.spec().vocab_size != teacher.spec().vocab_size) {
        throw ConfigError("teacher_agreement: vocabulary sizes differ (" +
                          std::to_string(student.spec().vocab_size) + " vs " +
                          std::to_string(teacher.spec().vocab_size) + ")");
    }
    if (eval_set.samples.empty()) throw ContractError("teacher_agreement: empty eval set");

    int matches = 0;
    for (const data::Sample& sample : eval_set.samples) {
        if (greedy_answer(student, encoder, sample, vocab) ==
            greedy_answer(teacher, encoder, sample, vocab)) {
            ++matches;
        }
    }
    return 100.0 * matches / static_cast<double>(eval_set.samples.size());
}

AblationReport run_ablation(const model::TransformerLM& student_base,
                            const model::TransformerLM& teacher,
                            const model::VisualEncoder& encoder, const data::Dataset& train_set,
                            const data::Dataset& eval_set, const data::Vocabulary& vocab,
                            const AblationConfig& cfg) {
    if (cfg.seeds.empty()) throw ConfigError("run_ablation: at least one seed is required");
    if (cfg.workers < 1) throw ParameterError("run_ablation: workers must be at least 1");

    std::vector<AblationArm> arms;
    arms.push_back({"baseline", losses::DistillConfig{}, nullptr});
    arms.insert(arms.end(), cfg.arms.begin(), cfg.arms.end());

    std::set<std::string> names;
    for (const AblationArm& arm : arms) {
        if (!names.insert(arm.name).second) {
            throw ConfigError("run_ablation: duplicate arm name '" + arm.name + "'");
        }
        arm.distill.validate();
    }

    struct Job {
        size_t arm;
        size_t seed;
    };
    std::vector<Job> jobs;
    for (size_t a = 0; a < arms.size(); ++a) {
        for (size_t s = 0; s < cfg.seeds.size(); ++s) jobs.push_back({a, s});
    }
    std::vector<EvalReport> results(jobs.size());

    auto run_one = [&](const Job& job) {
        const AblationArm& arm = arms[job.arm];
        const data::Dataset& split = arm.train_override ? *arm.train_override : train_set;
        train::TrainConfig tc = cfg.train;
        tc.seed = cfg.seeds[job.seed];
        model::TransformerLM student = student_base.clone();
        train::distill_stage2(student, teacher, encoder, split, vocab, tc, arm.distill);
        EvalReport ev = eval_qa_accuracy(student, encoder, eval_set, vocab);
        ev.teacher_agreement_pct = teacher_agreement(student, teacher, encoder, eval_set, vocab);
        return ev;
    };

    const size_t nworkers = std::min<size_t>(static_cast<size_t>(cfg.workers), jobs.size());
    if (nworkers <= 1) {
        for (size_t j = 0; j < jobs.size(); ++j) results[j] = run_one(jobs[j]);
    } else {
        std::atomic<size_t> cursor{0};
        std::vector<std::exception_ptr> failures(nworkers);
        std::vector<std::thread> pool;
        for (size_t w = 0; w < nworkers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (;;) {
                        const size_t j = cursor.fetch_add(1);
                        if (j >= jobs.size()) return;
                        results[j] = run_one(jobs[j]);
                    }
                } catch (...) {
                    failures[w] = std::current_exception();
                }
            });
        }
        for (std::thread& t : pool) t.join();
        for (const std::exception_ptr& e : failures) {
            if (e) std::rethrow_exception(e);
        }
    }

    AblationReport report;
    for (size_t a = 0; a < arms.size(); ++a) {
        ArmResult row;
        row.name = arms[a].name;
        row.distill_summary = arms[a].distill.summary();
        row.seeds = cfg.seeds;
        std::vector<double> acc, agree, loss;
        for (size_t s = 0; s < cfg.seeds.size(); ++s) {
            const EvalReport& ev = results[a * cfg.seeds.size() + s];
            row.per_seed.push_back(ev);
            acc.push_back(ev.accuracy_pct);
            agree.push_back(ev.teacher_agreement_pct.value());
            loss.push_back(ev.held_out_loss);
        }
        const Stats sa = stats_of(acc), sg = stats_of(agree), sl = stats_of(loss);
        row.accuracy = {sa.mean, sa.stddev};
        row.agreement = {sg.mean, sg.stddev};
        row.held_out_loss = {sl.mean, sl.stddev};
        report.rows.push_back(std::move(row));
    }
    return report;
}

std::string format_report_table(const AblationReport& report) {
    const std::vector<std::string> header = {"config", "accuracy (%)", "agreement (%)",
                                             "held-out loss"};
    std::vector<std::vector<std::string>> rows;
    for (const ArmResult& row : report.rows) {
        rows.push_back({row.name, format_stat(row.accuracy, "%.2f \xc2\xb1 %.2f"),
                        format_stat(row.agreement, "%.2f \xc2\xb1 %.2f"),
                        format_stat(row.held_out_loss, "%.4f \xc2\xb1 %.4f")});
    }

    std::vector<size_t> width(header.size());
    for (size_t c = 0; c < header.size(); ++c) width[c] = display_width(header[c]);
    for (const auto& cells : rows) {
        for (size_t c = 0; c < cells.size(); ++c) {
            width[c] = std::max(width[c], display_width(cells[c]));
        }
    }

    auto emit_row = [&](const std::vector<std::string>& cells) {
        std::string line = "|";
        for (size_t c = 0; c < cells.size(); ++c) {
            line += ' ' + cells[c] + std::string(width[c] - display_width(cells[c]), ' ') + " |";
        }
        return line + '\n';
    };

    std::string out = emit_row(header);
    std::vector<std::string> rule;
    for (size_t c = 0; c < header.size(); ++c) rule.push_back(std::string(width[c], '-'));
    out += emit_row(rule);
    for (const auto& cells : rows) out += emit_row(cells);
    return out;
}

std::string format_report_records(const AblationReport& report) {
    std::string out;
    for (const ArmResult& row : report.rows) {
        json j;
        j["name"] = row.name;
        j["distill_summary"] = row.distill_summary;
        j["seeds"] = row.seeds;
        json per_seed = json::array();
        for (const EvalReport& ev : row.per_seed) per_seed.push_back(report_to_json(ev));
        j["per_seed"] = per_seed;
        j["accuracy"] = stat_to_json(row.accuracy);
        j["agreement"] = stat_to_json(row.agreement);
        j["held_out_loss"] = stat_to_json(row.held_out_loss);
        out += j.dump();
        out += '\n';
    }
    return out;
}

AblationReport parse_report_records(const std::string& text) {
    AblationReport report;
    size_t start = 0;
    int line_no = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line.empty()) continue;
        const std::string where = "report records line " + std::to_string(line_no);

        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError(where + ": " + e.what());
        }
        for (const char* k : {"name", "distill_summary", "seeds", "per_seed", "accuracy",
                              "agreement", "held_out_loss"}) {
            if (!j.contains(k)) throw IoError(where + ": missing field '" + k + "'");
        }
        ArmResult row;
        row.name = j["name"].get<std::string>();
        row.distill_summary = j["distill_summary"].get<std::string>();
        row.seeds = j["seeds"].get<std::vector<uint64_t>>();
        for (const json& ev : j["per_seed"]) row.per_seed.push_back(report_from_json(ev, where));
        row.accuracy = stat_from_json(j["accuracy"], where);
        row.agreement = stat_from_json(j["agreement"], where);
        row.held_out_loss = stat_from_json(j["held_out_loss"], where);
        report.rows.push_back(std::move(row));
    }
    return report;
}

void emit_report(const AblationReport& report, const std::string& path,
                 const std::string& format) {
    std::string body;
    if (format == "table") {
        body = format_report_table(report);
    } else if (format == "records") {
        body = format_report_records(report);
    } else {
        throw ParameterError("emit_report: unknown format '" + format + "'");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << body;
    if (!out) throw IoError("failed while writing '" + path + "'");
}

} // namespace mmkd::eval
