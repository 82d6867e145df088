#include "mmkd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "mmkd/container.hpp"
#include "mmkd/errors.hpp"
#include "mmkd/hash.hpp"
#include "mmkd/ops.hpp"
#include "mmkd/rng.hpp"

using nlohmann::json;

namespace mmkd::train {

namespace {

// Seed-tag lanes so the epoch shuffles and projector inits never collide.
constexpr uint64_t kShuffleTagBase = 100;
constexpr uint64_t kProjectorTagBase = 7000;

struct Forwarded {
    data::TokenizedSample tok;
    model::LMOutputs out;
};

Forwarded forward_sample(const model::TransformerLM& lm, const model::VisualEncoder& encoder,
                         const data::Vocabulary& vocab, const data::Sample& sample) {
    data::TokenizedSample tok =
        data::tokenize(sample.conversation, vocab, encoder.spec().n_visual_tokens());
    Tensor z = encoder.encode(sample.image);
    Tensor h_v = lm.project_visual(z);
    model::LMOutputs out = lm.forward(h_v, tok.ids, tok.n_visual);
    return {std::move(tok), std::move(out)};
}

uint64_t hash_except(const model::TransformerLM& lm, const std::string& skip) {
    uint64_t h = 0;
    for (const auto& [name, t] : lm.named_parameters()) {
        if (name == skip) continue;
        h = fnv1a64(name, h);
        h = fnv1a64(t.value(), h);
    }
    return h;
}

std::vector<int> epoch_order(size_t n, uint64_t seed, int64_t epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::derive(seed, kShuffleTagBase + static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

// Ordered accumulation of named values; every batch must log the same names.
void accumulate_named(std::vector<std::pair<std::string, double>>& sums,
                      const std::vector<std::pair<std::string, double>>& add) {
    if (sums.empty()) {
        sums = add;
        return;
    }
    if (sums.size() != add.size())
        throw ContractError("loss component set changed between samples");
    for (size_t i = 0; i < add.size(); ++i) {
        if (sums[i].first != add[i].first)
            throw ContractError("loss component order changed between samples");
        sums[i].second += add[i].second;
    }
}

bool logit_active(const losses::DistillConfig& d) {
    return d.logit_loss != losses::LogitLoss::none && d.w_logit != 0.0;
}
bool feature_active(const losses::DistillConfig& d) {
    return d.feature_loss != losses::FeatureLoss::none && d.w_feature != 0.0;
}
bool affinity_active(const losses::DistillConfig& d) {
    return d.affinity_loss != losses::AffinityLoss::none && d.w_affinity != 0.0;
}

// Instruction token positions: everything between the visual prefix and the
// separator, exclusive.
std::vector<int> instruction_rows(const data::TokenizedSample& tok, const data::Vocabulary& vocab) {
    std::vector<int> rows;
    for (int p = tok.first_text_pos(); p < static_cast<int>(tok.ids.size()); ++p) {
        if (tok.ids[static_cast<size_t>(p)] == vocab.sep()) break;
        rows.push_back(p);
    }
    if (rows.empty()) throw ContractError("sample has no instruction tokens");
    return rows;
}

std::vector<int> visual_rows(int n_visual) {
    std::vector<int> rows(static_cast<size_t>(n_visual));
    std::iota(rows.begin(), rows.end(), 1); // BOS sits at 0
    return rows;
}

} // namespace

TrainConfig TrainConfig::pretrain_defaults() {
    TrainConfig cfg;
    cfg.stage = "pretrain";
    cfg.batch_size = 256;
    cfg.learning_rate = 1e-3;
    return cfg;
}

TrainConfig TrainConfig::finetune_defaults() { return TrainConfig{}; }

void TrainConfig::validate() const {
    if (stage != "pretrain" && stage != "finetune")
        throw ConfigError("unknown training stage '" + stage + "' (expected pretrain or finetune)");
    if (batch_size < 1)
        throw ConfigError("batch_size must be at least 1, got " + std::to_string(batch_size));
    if (!(learning_rate > 0.0))
        throw ConfigError("learning_rate must be positive, got " + std::to_string(learning_rate));
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0)
        throw ConfigError("warmup_ratio must lie in [0, 1], got " + std::to_string(warmup_ratio));
    if (epochs < 1) throw ConfigError("epochs must be at least 1, got " + std::to_string(epochs));
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative (0 disables)");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw ConfigError("adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
}

double lr_schedule(int64_t step, int64_t total_steps, double peak, double warmup_ratio) {
    if (total_steps < 1)
        throw ParameterError("total_steps must be at least 1, got " + std::to_string(total_steps));
    if (!(peak > 0.0)) throw ParameterError("peak learning rate must be positive");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0)
        throw ParameterError("warmup_ratio must lie in [0, 1]");
    if (step < 0 || step > total_steps)
        throw ContractError("schedule step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
    // The small slack keeps ratios like 0.03 from rounding 3.0 up to 4 after
    // the inexact binary product.
    const auto warmup =
        static_cast<int64_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps) - 1e-9));
    if (warmup > 0 && step < warmup)
        return peak * static_cast<double>(step) / static_cast<double>(warmup);
    const int64_t span = total_steps - warmup;
    if (span <= 0) return peak;
    const double phase = M_PI * static_cast<double>(step - warmup) / static_cast<double>(span);
    return peak * 0.5 * (1.0 + std::cos(phase));
}

AdamW::AdamW(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay),
      grad_clip_(cfg.grad_clip) {
    if (params_.empty()) throw ContractError("optimizer needs at least one parameter");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void AdamW::step(double lr) {
    double factor = 1.0;
    if (grad_clip_ > 0.0) {
        double sq = 0.0;
        for (const Tensor& p : params_) {
            if (!p.has_grad()) continue;
            for (double g : p.grad()) sq += g * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > grad_clip_) factor = grad_clip_ / norm;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        std::vector<double>& value = params_[i].mutable_value();
        const std::vector<double>* grad = params_[i].has_grad() ? &params_[i].grad() : nullptr;
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (size_t j = 0; j < value.size(); ++j) {
            const double g = grad ? (*grad)[j] * factor : 0.0;
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            value[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * value[j]);
        }
    }
}

void AdamW::clear_grads() {
    for (Tensor& p : params_) p.clear_grad();
}

void RunLog::save_jsonl(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open run log for writing: " + path);
    for (const StepRecord& s : steps) {
        json rec{{"type", "step"}, {"step", s.step}, {"lr", s.lr}, {"total", s.total}};
        json comps = json::object();
        for (const auto& [name, value] : s.components) comps[name] = value;
        rec["components"] = comps;
        out << rec.dump() << "\n";
    }
    for (const EpochRecord& e : epochs) {
        json rec{{"type", "epoch"}, {"epoch", e.epoch}};
        json comps = json::object();
        for (const auto& [name, value] : e.held_out) comps[name] = value;
        rec["held_out"] = comps;
        out << rec.dump() << "\n";
    }
    if (!checkpoint_path.empty())
        out << json{{"type", "done"}, {"checkpoint", checkpoint_path}}.dump() << "\n";
    if (!out) throw IoError("failed while writing run log: " + path);
}

RunLog train_stage1(model::TransformerLM& lm, const model::VisualEncoder& encoder,
                    const data::Dataset& pretrain, const data::Vocabulary& vocab,
                    const TrainConfig& cfg, const losses::DistillConfig& distill) {
    cfg.validate();
    if (cfg.stage != "pretrain")
        throw ConfigError("stage-1 training requires stage=pretrain, got " + cfg.stage);
    if (distill.any_distill_active())
        throw ConfigError("distillation terms are limited to fine-tuning; disable them for stage 1");
    if (pretrain.samples.empty()) throw ContractError("stage-1 training set is empty");

    const uint64_t frozen_before = hash_except(lm, "proj_visual");
    lm.set_trainable(false);
    Tensor projector = lm.proj_visual_w;
    projector.set_requires_grad(true);

    AdamW opt({projector}, cfg);
    const auto n = static_cast<int64_t>(pretrain.samples.size());
    const int64_t spe = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = spe * cfg.epochs;

    RunLog log;
    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = epoch_order(pretrain.samples.size(), cfg.seed, epoch);
        for (int64_t b = 0; b < spe; ++b) {
            const size_t begin = static_cast<size_t>(b) * cfg.batch_size;
            const size_t end = std::min(pretrain.samples.size(),
                                        begin + static_cast<size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(end - begin);
            opt.clear_grads();
            double total_sum = 0.0;
            for (size_t k = begin; k < end; ++k) {
                const data::Sample& sample = pretrain.samples[static_cast<size_t>(order[k])];
                Forwarded fw = forward_sample(lm, encoder, vocab, sample);
                Tensor ce = losses::autoregressive_ce(fw.out.logits, fw.tok.ids, fw.tok.answer_only);
                total_sum += ce.item();
                ad::backward(ad::scale(ce, inv));
            }
            const double lr = lr_schedule(step + 1, total_steps, cfg.learning_rate, cfg.warmup_ratio);
            opt.step(lr);
            opt.clear_grads();
            ++step;
            log.steps.push_back({step, lr, total_sum * inv, {{"ce", total_sum * inv}}});
        }
    }

    if (hash_except(lm, "proj_visual") != frozen_before)
        throw ContractError("stage-1 freeze contract violated: a non-projector parameter changed");
    lm.set_trainable(true);
    return log;
}

struct DistillRun::TeacherPass {
    bool ready = false;
    Tensor logits;
    std::vector<Tensor> hidden;   // full depth; only the needed layers are set
    std::vector<Tensor> attn_last;
};

DistillRun::DistillRun(model::TransformerLM& student, const model::TransformerLM& teacher,
                       const model::VisualEncoder& encoder, const data::Dataset& train_set,
                       const data::Vocabulary& vocab, const TrainConfig& cfg,
                       const losses::DistillConfig& distill, const data::Dataset* held_out)
    : student_(&student),
      teacher_(&teacher),
      encoder_(&encoder),
      train_(&train_set),
      vocab_(&vocab),
      held_out_(held_out),
      cfg_(cfg),
      distill_(distill) {
    cfg_.validate();
    distill_.validate();
    if (cfg_.stage != "finetune")
        throw ConfigError("distillation fine-tuning requires stage=finetune, got " + cfg_.stage);
    if (student.spec().vocab_size != teacher.spec().vocab_size)
        throw ConfigError("student and teacher vocabularies differ (" +
                          std::to_string(student.spec().vocab_size) + " vs " +
                          std::to_string(teacher.spec().vocab_size) +
                          "); logit alignment needs a shared vocabulary");
    if (train_set.samples.empty()) throw ContractError("fine-tuning training set is empty");

    teacher_hash_before_ = teacher.param_hash();
    student_->set_trainable(true);
    trainable_ = student_->named_parameters();
    if (feature_active(distill_)) {
        for (size_t k = 0; k < distill_.feature_layers.size(); ++k) {
            projectors_.push_back(losses::FeatureProjector::init(
                student.spec().hidden_dim, teacher.spec().hidden_dim,
                Rng::derive(cfg_.seed, kProjectorTagBase + k)));
            for (auto& named : projectors_.back().named_parameters("fproj" + std::to_string(k)))
                trainable_.push_back(std::move(named));
        }
    }
    std::vector<Tensor> params;
    params.reserve(trainable_.size());
    for (const auto& [name, t] : trainable_) params.push_back(t);
    opt_ = std::make_unique<AdamW>(std::move(params), cfg_);

    const auto n = static_cast<int64_t>(train_set.samples.size());
    steps_per_epoch_ = (n + cfg_.batch_size - 1) / cfg_.batch_size;
    total_steps_ = steps_per_epoch_ * cfg_.epochs;
}

DistillRun::~DistillRun() = default;

DistillRun::TeacherPass DistillRun::teacher_pass(const data::Sample& sample, size_t index,
                                                 bool allow_cache) const {
    if (allow_cache) {
        if (cache_.empty()) cache_.resize(train_->samples.size());
        if (cache_[index].ready) return cache_[index];
    }
    ad::NoGradGuard no_grad;
    Forwarded fw = forward_sample(*teacher_, *encoder_, *vocab_, sample);
    TeacherPass pass;
    pass.ready = true;
    const int depth = teacher_->spec().num_layers;
    pass.hidden.resize(static_cast<size_t>(depth));
    if (logit_active(distill_)) pass.logits = fw.out.logits;
    if (feature_active(distill_))
        for (int off : distill_.feature_layers)
            pass.hidden[static_cast<size_t>(depth - 1 - off)] =
                fw.out.hidden_states[static_cast<size_t>(depth - 1 - off)];
    if (affinity_active(distill_)) {
        if (distill_.affinity_loss == losses::AffinityLoss::attention)
            pass.attn_last = fw.out.attention.back();
        else
            pass.hidden[static_cast<size_t>(depth - 1)] =
                fw.out.hidden_states[static_cast<size_t>(depth - 1)];
    }
    if (allow_cache) cache_[index] = pass;
    return pass;
}

losses::Components DistillRun::sample_losses(const data::Sample& sample, size_t index,
                                             bool allow_cache) const {
    Forwarded fw = forward_sample(*student_, *encoder_, *vocab_, sample);
    losses::Components comps;
    comps.ce = losses::autoregressive_ce(fw.out.logits, fw.tok.ids, fw.tok.answer_only);
    const bool need_teacher =
        logit_active(distill_) || feature_active(distill_) || affinity_active(distill_);
    if (!need_teacher) return comps;

    TeacherPass pass = teacher_pass(sample, index, allow_cache);

    if (logit_active(distill_)) {
        const auto& mask = distill_.logit_mask == losses::MaskPolicy::answer_only
                               ? fw.tok.answer_only
                               : fw.tok.all_tokens;
        Tensor tl = pass.logits;
        Tensor sl = fw.out.logits;
        if (distill_.standardize_logits) {
            tl = losses::logit_standardize(tl);
            sl = losses::logit_standardize(sl);
        }
        switch (distill_.logit_loss) {
        case losses::LogitLoss::forward_kl:
            comps.logit = losses::kl_logit_loss(tl, sl, distill_.temperature, true, mask,
                                                distill_.scale_by_t_squared);
            break;
        case losses::LogitLoss::reverse_kl:
            comps.logit = losses::kl_logit_loss(tl, sl, distill_.temperature, false, mask,
                                                distill_.scale_by_t_squared);
            break;
        case losses::LogitLoss::jsd:
            comps.logit = losses::generalized_jsd(tl, sl, distill_.jsd_beta, distill_.temperature,
                                                  mask, distill_.scale_by_t_squared);
            break;
        case losses::LogitLoss::mse:
            comps.logit = losses::mse_logit_loss(tl, sl, mask);
            break;
        case losses::LogitLoss::none:
            break;
        }
    }
    if (feature_active(distill_)) {
        const auto& mask = distill_.feature_mask == losses::MaskPolicy::answer_only
                               ? fw.tok.answer_only
                               : fw.tok.all_tokens;
        comps.feature = losses::feature_align_loss(fw.out.hidden_states, pass.hidden, projectors_,
                                                   distill_.feature_loss, mask,
                                                   distill_.feature_layers);
    }
    if (affinity_active(distill_)) {
        if (distill_.affinity_loss == losses::AffinityLoss::attention) {
            comps.affinity =
                losses::attention_affinity_loss(fw.out.attention.back(), pass.attn_last,
                                                distill_.attn_group, fw.tok.n_visual,
                                                fw.tok.answer_only);
        } else {
            const std::vector<int> vis = visual_rows(fw.tok.n_visual);
            const std::vector<int> ques = instruction_rows(fw.tok, *vocab_);
            Tensor s_last = fw.out.hidden_states.back();
            Tensor t_last = pass.hidden.back();
            comps.affinity = losses::similarity_affinity_loss(
                ad::gather_rows(s_last, vis), ad::gather_rows(s_last, ques),
                ad::gather_rows(t_last, vis), ad::gather_rows(t_last, ques));
        }
    }
    return comps;
}

void DistillRun::step_once() {
    const auto& samples = train_->samples;
    const int64_t epoch = next_step_ / steps_per_epoch_;
    const int64_t batch_idx = next_step_ % steps_per_epoch_;
    std::vector<int> order = epoch_order(samples.size(), cfg_.seed, epoch);

    const size_t begin = static_cast<size_t>(batch_idx) * cfg_.batch_size;
    const size_t end = std::min(samples.size(), begin + static_cast<size_t>(cfg_.batch_size));
    const double inv = 1.0 / static_cast<double>(end - begin);

    opt_->clear_grads();
    double total_sum = 0.0;
    std::vector<std::pair<std::string, double>> sums;
    for (size_t k = begin; k < end; ++k) {
        const auto idx = static_cast<size_t>(order[k]);
        losses::Components comps = sample_losses(samples[idx], idx, cfg_.cache_teacher);
        std::vector<std::pair<std::string, double>> logged;
        Tensor total = losses::compose(distill_, comps, &logged);
        total_sum += total.item();
        accumulate_named(sums, logged);
        ad::backward(ad::scale(total, inv));
    }
    const double lr = lr_schedule(next_step_ + 1, total_steps_, cfg_.learning_rate,
                                  cfg_.warmup_ratio);
    opt_->step(lr);
    opt_->clear_grads();
    ++next_step_;

    for (auto& [name, value] : sums) value *= inv;
    log_.steps.push_back({next_step_, lr, total_sum * inv, std::move(sums)});

    if (next_step_ % steps_per_epoch_ == 0 && held_out_ != nullptr) {
        EpochRecord rec;
        rec.epoch = static_cast<int>(next_step_ / steps_per_epoch_);
        rec.held_out = loss_components(*held_out_);
        log_.epochs.push_back(std::move(rec));
    }
}

void DistillRun::run(int64_t max_steps) {
    int64_t budget = max_steps < 0 ? total_steps_ - next_step_ : max_steps;
    while (budget-- > 0 && !finished()) step_once();
    if (finished() && teacher_->param_hash() != teacher_hash_before_)
        throw ContractError("teacher parameters changed during distillation");
}

std::vector<std::pair<std::string, double>>
DistillRun::loss_components(const data::Dataset& ds, int max_samples) const {
    if (ds.samples.empty()) throw ContractError("loss evaluation needs a non-empty dataset");
    ad::NoGradGuard no_grad;
    const size_t n = max_samples < 0
                         ? ds.samples.size()
                         : std::min(ds.samples.size(), static_cast<size_t>(max_samples));
    std::vector<std::pair<std::string, double>> sums;
    for (size_t i = 0; i < n; ++i) {
        losses::Components comps = sample_losses(ds.samples[i], i, /*allow_cache=*/false);
        std::vector<std::pair<std::string, double>> logged;
        Tensor total = losses::compose(distill_, comps, &logged);
        logged.insert(logged.begin(), {"total", total.item()});
        accumulate_named(sums, logged);
    }
    for (auto& [name, value] : sums) value /= static_cast<double>(n);
    return sums;
}

void DistillRun::save_state(const std::string& path) const {
    std::vector<io::ArrayRecord> arrays;
    json names = json::array();
    for (size_t i = 0; i < trainable_.size(); ++i) {
        const auto& [name, t] = trainable_[i];
        names.push_back(name);
        arrays.push_back({name, t.shape(), t.value()});
        arrays.push_back({"m." + name, t.shape(), opt_->m_state(i)});
        arrays.push_back({"v." + name, t.shape(), opt_->v_state(i)});
    }
    json meta{{"next_step", next_step_},
              {"adam_t", opt_->t()},
              {"total_steps", total_steps_},
              {"param_names", names}};
    io::write_container(path, "train_state", meta, arrays);
}

void DistillRun::load_state(const std::string& path) {
    io::Container c = io::read_container(path, "train_state");
    const auto names = c.meta.at("param_names").get<std::vector<std::string>>();
    if (names.size() != trainable_.size())
        throw ContractError("saved state has " + std::to_string(names.size()) +
                            " parameters, this run has " + std::to_string(trainable_.size()));
    if (c.meta.at("total_steps").get<int64_t>() != total_steps_)
        throw ContractError("saved state was produced by a run with a different step budget");
    for (size_t i = 0; i < trainable_.size(); ++i) {
        auto& [name, t] = trainable_[i];
        if (names[i] != name)
            throw ContractError("saved state parameter order mismatch at '" + names[i] + "'");
        const io::ArrayRecord& value = c.array(name);
        const io::ArrayRecord& m = c.array("m." + name);
        const io::ArrayRecord& v = c.array("v." + name);
        if (value.data.size() != t.value().size())
            throw ContractError("saved state shape mismatch for '" + name + "'");
        t.mutable_value() = value.data;
        opt_->m_state(i) = m.data;
        opt_->v_state(i) = v.data;
        t.clear_grad();
    }
    next_step_ = c.meta.at("next_step").get<int64_t>();
    opt_->set_t(c.meta.at("adam_t").get<int64_t>());
}

DistillResult distill_stage2(model::TransformerLM& student, const model::TransformerLM& teacher,
                             const model::VisualEncoder& encoder, const data::Dataset& train_set,
                             const data::Vocabulary& vocab, const TrainConfig& cfg,
                             const losses::DistillConfig& distill, const data::Dataset* held_out) {
    DistillRun run(student, teacher, encoder, train_set, vocab, cfg, distill, held_out);
    run.run();
    DistillResult result;
    result.log = run.log();
    result.projectors = run.projectors();
    return result;
}

} // namespace mmkd::train
