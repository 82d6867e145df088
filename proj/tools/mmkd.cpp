#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmkd/config.hpp"
#include "mmkd/data.hpp"
#include "mmkd/errors.hpp"
#include "mmkd/eval.hpp"
#include "mmkd/gradsuite.hpp"
#include "mmkd/losses.hpp"
#include "mmkd/model.hpp"
#include "mmkd/regen.hpp"
#include "mmkd/trainer.hpp"

namespace fs = std::filesystem;
namespace cf = mmkd::config;
namespace dt = mmkd::data;
namespace md = mmkd::model;
namespace ev = mmkd::eval;
namespace tr = mmkd::train;
using nlohmann::json;

namespace {

struct GlobalArgs {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_given = false;
    std::string out_dir = ".";
    int workers = 1;
};

cf::Experiment load_experiment_or_default(const GlobalArgs& g) {
    cf::Experiment exp;
    if (!g.config_path.empty()) exp = cf::load_experiment(g.config_path);
    if (g.seed_given) exp.train.seed = g.seed;
    return exp;
}

std::string out_path(const GlobalArgs& g, const std::string& name) {
    std::error_code ec;
    fs::create_directories(g.out_dir, ec);
    if (ec) throw mmkd::IoError("cannot create output directory '" + g.out_dir + "'");
    return (fs::path(g.out_dir) / name).string();
}

// Single-file commands default their inputs to the gen-data layout under the
// output directory, so the whole pipeline runs with nothing but --out.
std::string default_data(const GlobalArgs& g, const std::string& name,
                         const std::string& explicit_path) {
    return explicit_path.empty() ? (fs::path(g.out_dir) / name).string() : explicit_path;
}

void print_final_loss(const tr::RunLog& log) {
    if (!log.steps.empty()) {
        std::printf("  steps: %lld, final total loss %.6f\n",
                    static_cast<long long>(log.steps.back().step), log.steps.back().total);
    }
}

int cmd_gen_data(const GlobalArgs& g) {
    const cf::Experiment exp = load_experiment_or_default(g);
    const uint64_t seed = g.seed_given ? g.seed : 2024;
    for (const char* split : {"train", "eval", "pretrain"}) {
        const dt::Dataset ds = dt::generate_split(exp.data, seed, split);
        const std::string path = out_path(g, std::string(split) + ".mmds");
        dt::save_dataset(ds, path);
        std::printf("wrote %zu %s samples to %s\n", ds.samples.size(), split, path.c_str());
    }
    return 0;
}

int cmd_pretrain(const GlobalArgs& g, const std::string& data_path) {
    cf::Experiment exp = load_experiment_or_default(g);
    if (exp.train.stage != "pretrain") {
        // The subcommand implies the stage; only an explicit pretrain section
        // overrides the stock stage-1 settings.
        const uint64_t seed = exp.train.seed;
        exp.train = tr::TrainConfig::pretrain_defaults();
        exp.train.seed = seed;
    }
    const dt::Dataset pretrain = dt::load_dataset(default_data(g, "pretrain.mmds", data_path));
    const dt::Vocabulary vocab = dt::Vocabulary::standard(exp.teacher.vocab_size);
    const md::VisualEncoder encoder(exp.encoder);

    md::TransformerLM lm = md::TransformerLM::init(exp.teacher, exp.init_seed);
    tr::RunLog log = tr::train_stage1(lm, encoder, pretrain, vocab, exp.train);

    const std::string ckpt = out_path(g, "stage1.ckpt");
    md::save_model(lm, exp.encoder, ckpt);
    log.checkpoint_path = ckpt;
    log.save_jsonl(out_path(g, "stage1_log.jsonl"));
    std::printf("stage-1 checkpoint: %s\n", ckpt.c_str());
    print_final_loss(log);
    return 0;
}

int cmd_train(const GlobalArgs& g, const std::string& init_path, const std::string& data_path) {
    const cf::Experiment exp = load_experiment_or_default(g);
    md::TransformerLM lm = [&] {
        if (init_path.empty()) return md::TransformerLM::init(exp.teacher, exp.init_seed);
        return md::load_model(init_path).lm;
    }();
    const md::VisualEncoderSpec enc_spec =
        init_path.empty() ? exp.encoder : md::load_model(init_path).encoder_spec;
    const md::VisualEncoder encoder(enc_spec);
    const dt::Vocabulary vocab = dt::Vocabulary::standard(lm.spec().vocab_size);
    const dt::Dataset train_set = dt::load_dataset(default_data(g, "train.mmds", data_path));

    tr::TrainConfig cfg = exp.train;
    cfg.stage = "finetune";
    const md::TransformerLM frozen = lm.clone();
    tr::DistillResult result =
        tr::distill_stage2(lm, frozen, encoder, train_set, vocab, cfg, {});

    const std::string ckpt = out_path(g, "finetuned.ckpt");
    md::save_model(lm, enc_spec, ckpt);
    result.log.checkpoint_path = ckpt;
    result.log.save_jsonl(out_path(g, "train_log.jsonl"));
    std::printf("fine-tuned checkpoint: %s\n", ckpt.c_str());
    print_final_loss(result.log);
    return 0;
}

int cmd_distill(const GlobalArgs& g, const std::string& teacher_path,
                const std::string& student_path, const std::string& data_path,
                const std::string& held_out_path) {
    const cf::Experiment exp = load_experiment_or_default(g);
    const md::LoadedModel teacher = md::load_model(teacher_path);
    md::TransformerLM student = student_path.empty()
                                    ? md::init_student_from_teacher(teacher.lm, exp.student_keep_every)
                                    : md::load_model(student_path).lm;
    const md::VisualEncoder encoder(teacher.encoder_spec);
    const dt::Vocabulary vocab = dt::Vocabulary::standard(teacher.lm.spec().vocab_size);
    const dt::Dataset train_set = dt::load_dataset(default_data(g, "train.mmds", data_path));

    std::unique_ptr<dt::Dataset> held_out;
    if (!held_out_path.empty()) {
        held_out = std::make_unique<dt::Dataset>(dt::load_dataset(held_out_path));
    }

    tr::TrainConfig cfg = exp.train;
    cfg.stage = "finetune";
    std::printf("distilling with %s\n", exp.distill.summary().c_str());
    tr::DistillResult result = tr::distill_stage2(student, teacher.lm, encoder, train_set, vocab,
                                                  cfg, exp.distill, held_out.get());

    const std::string ckpt = out_path(g, "distilled.ckpt");
    md::save_model(student, teacher.encoder_spec, ckpt);
    result.log.checkpoint_path = ckpt;
    result.log.save_jsonl(out_path(g, "distill_log.jsonl"));
    std::printf("distilled checkpoint: %s\n", ckpt.c_str());
    print_final_loss(result.log);
    return 0;
}

json eval_report_json(const ev::EvalReport& r) {
    json j;
    j["accuracy_pct"] = r.accuracy_pct;
    j["family_accuracy_pct"] = r.family_accuracy_pct;
    j["family_count"] = r.family_count;
    j["teacher_agreement_pct"] =
        r.teacher_agreement_pct ? json(*r.teacher_agreement_pct) : json(nullptr);
    j["held_out_loss"] = r.held_out_loss;
    j["sample_count"] = r.sample_count;
    return j;
}

int cmd_eval(const GlobalArgs& g, const std::string& model_path, const std::string& teacher_path,
             const std::string& data_path) {
    const md::LoadedModel loaded = md::load_model(model_path);
    const md::VisualEncoder encoder(loaded.encoder_spec);
    const dt::Vocabulary vocab = dt::Vocabulary::standard(loaded.lm.spec().vocab_size);
    const dt::Dataset eval_set = dt::load_dataset(default_data(g, "eval.mmds", data_path));

    ev::EvalReport report = ev::eval_qa_accuracy(loaded.lm, encoder, eval_set, vocab);
    if (!teacher_path.empty()) {
        const md::LoadedModel teacher = md::load_model(teacher_path);
        report.teacher_agreement_pct =
            ev::teacher_agreement(loaded.lm, teacher.lm, encoder, eval_set, vocab);
    }

    std::printf("accuracy: %.2f%% over %d samples\n", report.accuracy_pct, report.sample_count);
    for (const auto& [family, pct] : report.family_accuracy_pct) {
        std::printf("  %-10s %.2f%% (%d samples)\n", family.c_str(), pct,
                    report.family_count.at(family));
    }
    if (report.teacher_agreement_pct) {
        std::printf("teacher agreement: %.2f%%\n", *report.teacher_agreement_pct);
    }
    std::printf("held-out loss: %.6f\n", report.held_out_loss);

    const std::string path = out_path(g, "eval_report.json");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw mmkd::IoError("cannot open '" + path + "' for writing");
    out << eval_report_json(report).dump(2) << '\n';
    std::printf("report: %s\n", path.c_str());
    return 0;
}

std::vector<ev::AblationArm> load_arms(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw mmkd::IoError("cannot open arms file '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw mmkd::ConfigError(std::string("arms file: ") + e.what());
    }
    if (!doc.is_array()) throw mmkd::ConfigError("arms file: top level must be an array");

    std::vector<ev::AblationArm> arms;
    for (const json& item : doc) {
        if (!item.is_object() || !item.contains("name")) {
            throw mmkd::ConfigError("arms file: every arm needs a 'name'");
        }
        for (auto it = item.begin(); it != item.end(); ++it) {
            const std::string& k = it.key();
            if (k != "name" && k != "distill" && k != "train_data") {
                throw mmkd::ConfigError("arms file: unknown key '" + k + "'");
            }
        }
        ev::AblationArm arm;
        arm.name = item["name"].get<std::string>();
        if (item.contains("distill")) {
            // Route the arm through the experiment parser so its distill
            // section gets the same typo and validity checking.
            const json wrapped = {{"distill", item["distill"]}};
            arm.distill = cf::parse_experiment(wrapped.dump()).distill;
        }
        if (item.contains("train_data")) {
            arm.train_override = std::make_shared<dt::Dataset>(
                dt::load_dataset(item["train_data"].get<std::string>()));
        }
        arms.push_back(std::move(arm));
    }
    return arms;
}

int cmd_ablate(const GlobalArgs& g, const std::string& teacher_path,
               const std::string& student_path, const std::string& train_path,
               const std::string& eval_path, const std::string& arms_path,
               std::vector<uint64_t> seeds) {
    const cf::Experiment exp = load_experiment_or_default(g);
    const md::LoadedModel teacher = md::load_model(teacher_path);
    const md::TransformerLM student_base =
        student_path.empty() ? md::init_student_from_teacher(teacher.lm, exp.student_keep_every)
                             : md::load_model(student_path).lm;
    const md::VisualEncoder encoder(teacher.encoder_spec);
    const dt::Vocabulary vocab = dt::Vocabulary::standard(teacher.lm.spec().vocab_size);
    const dt::Dataset train_set = dt::load_dataset(default_data(g, "train.mmds", train_path));
    const dt::Dataset eval_set = dt::load_dataset(default_data(g, "eval.mmds", eval_path));

    ev::AblationConfig cfg;
    if (!arms_path.empty()) cfg.arms = load_arms(arms_path);
    if (!seeds.empty()) cfg.seeds = std::move(seeds);
    cfg.train = exp.train;
    cfg.train.stage = "finetune";
    cfg.workers = g.workers;

    std::printf("running %zu arms x %zu seeds (plus baseline) with %d workers\n",
                cfg.arms.size(), cfg.seeds.size(), cfg.workers);
    const ev::AblationReport report =
        ev::run_ablation(student_base, teacher.lm, encoder, train_set, eval_set, vocab, cfg);

    const std::string table_path = out_path(g, "ablation.md");
    const std::string records_path = out_path(g, "ablation.jsonl");
    ev::emit_report(report, table_path, "table");
    ev::emit_report(report, records_path, "records");
    std::fputs(ev::format_report_table(report).c_str(), stdout);
    std::printf("reports: %s, %s\n", table_path.c_str(), records_path.c_str());
    return 0;
}

int cmd_gradcheck(const GlobalArgs& g) {
    const uint64_t seed = g.seed_given ? g.seed : 2024;
    const auto results = mmkd::gradsuite::run_all(seed);
    int failures = 0;
    for (const auto& r : results) {
        std::printf("%s  %-34s max rel err %.3e\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                    r.max_rel_err);
        if (!r.pass) ++failures;
    }
    std::printf("%zu checks, %d failures\n", results.size(), failures);
    if (failures > 0) {
        throw mmkd::NumericError(std::to_string(failures) + " gradient checks failed");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multimodal knowledge distillation workbench"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "experiment config file (structured text)");
    auto* seed_opt = app.add_option("--seed", g.seed, "seed override");
    app.add_option("--out", g.out_dir, "output directory")->capture_default_str();
    app.add_option("--workers", g.workers, "parallel runs for ablate")->capture_default_str();

    CLI::App* gen = app.add_subcommand("gen-data", "write train/eval/pretrain datasets");

    std::string pre_data;
    CLI::App* pre = app.add_subcommand("pretrain", "stage 1: train the visual projector");
    pre->add_option("--data", pre_data, "pretrain dataset (default <out>/pretrain.mmds)");

    std::string train_init, train_data;
    CLI::App* train = app.add_subcommand("train", "plain fine-tune (makes teachers and baselines)");
    train->add_option("--init", train_init, "starting checkpoint (default: fresh init)");
    train->add_option("--data", train_data, "train dataset (default <out>/train.mmds)");

    std::string di_teacher, di_student, di_data, di_held;
    CLI::App* di = app.add_subcommand("distill", "stage 2: distill a student from a teacher");
    di->add_option("--teacher", di_teacher, "teacher checkpoint")->required();
    di->add_option("--student-init", di_student,
                   "student starting checkpoint (default: depth-pruned teacher)");
    di->add_option("--data", di_data, "train dataset (default <out>/train.mmds)");
    di->add_option("--held-out", di_held, "dataset for per-epoch loss tracking");

    std::string ev_model, ev_teacher, ev_data;
    CLI::App* evc = app.add_subcommand("eval", "exact-match accuracy and agreement");
    evc->add_option("--model", ev_model, "checkpoint to evaluate")->required();
    evc->add_option("--teacher", ev_teacher, "teacher checkpoint for agreement");
    evc->add_option("--data", ev_data, "eval dataset (default <out>/eval.mmds)");

    std::string ab_teacher, ab_student, ab_train, ab_eval, ab_arms;
    std::vector<uint64_t> ab_seeds;
    CLI::App* ab = app.add_subcommand("ablate", "run a named matrix of distillation configs");
    ab->add_option("--teacher", ab_teacher, "teacher checkpoint")->required();
    ab->add_option("--student-init", ab_student,
                   "student starting checkpoint (default: depth-pruned teacher)");
    ab->add_option("--train-data", ab_train, "train dataset (default <out>/train.mmds)");
    ab->add_option("--eval-data", ab_eval, "eval dataset (default <out>/eval.mmds)");
    ab->add_option("--arms", ab_arms, "arms file: [{name, distill{...}, train_data?}, ...]");
    ab->add_option("--seeds", ab_seeds, "seeds to run per arm (default 1 2 3)");

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference suite over ops and losses");

    try {
        app.parse(argc, argv);
        g.seed_given = seed_opt->count() > 0;

        if (gen->parsed()) return cmd_gen_data(g);
        if (pre->parsed()) return cmd_pretrain(g, pre_data);
        if (train->parsed()) return cmd_train(g, train_init, train_data);
        if (di->parsed()) return cmd_distill(g, di_teacher, di_student, di_data, di_held);
        if (evc->parsed()) return cmd_eval(g, ev_model, ev_teacher, ev_data);
        if (ab->parsed()) {
            return cmd_ablate(g, ab_teacher, ab_student, ab_train, ab_eval, ab_arms, ab_seeds);
        }
        if (gc->parsed()) return cmd_gradcheck(g);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const mmkd::Error& e) {
        std::fprintf(stderr, "%s error: %s\n", e.error_class().c_str(), e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
