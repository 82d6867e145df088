#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mmkd/config.hpp"
#include "mmkd/data.hpp"
#include "mmkd/errors.hpp"
#include "mmkd/eval.hpp"
#include "mmkd/losses.hpp"
#include "mmkd/model.hpp"
#include "mmkd/ops.hpp"
#include "mmkd/regen.hpp"
#include "mmkd/tensor.hpp"
#include "mmkd/trainer.hpp"

namespace py = pybind11;
using namespace mmkd;
using mmkd::ad::Tensor;

namespace {

void bind_errors(py::module_& m) {
  // Most-derived translators must register last so they match first.
  static py::exception<Error> base(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<ParameterError>(m, "ParameterError", base);
  py::register_exception<ContractError>(m, "ContractError", base);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<TokenizeError>(m, "TokenizeError", base);
  py::register_exception<IoError>(m, "IoError", base);
}

void bind_tensor(py::module_& m) {
  py::class_<Tensor>(m, "Tensor")
      .def_static("from_data", &Tensor::from_data, py::arg("shape"), py::arg("values"))
      .def_property_readonly("shape", &Tensor::shape)
      .def_property_readonly("values", [](const Tensor& t) { return t.value(); })
      .def("item", &Tensor::item);

  m.def("matmul", &ad::matmul, py::arg("a"), py::arg("b"));
  m.def("softmax_t", &ad::softmax_t, py::arg("logits"), py::arg("temperature") = 1.0);
  m.def("log_softmax_t", &ad::log_softmax_t, py::arg("logits"), py::arg("temperature") = 1.0);
}

void bind_data(py::module_& m) {
  using namespace mmkd::data;

  py::enum_<Family>(m, "Family")
      .value("count", Family::count)
      .value("presence", Family::presence)
      .value("position", Family::position)
      .value("describe", Family::describe);

  py::enum_<Provenance>(m, "Provenance")
      .value("original", Provenance::original)
      .value("teacher_regenerated", Provenance::teacher_regenerated)
      .value("student_regenerated", Provenance::student_regenerated);

  py::class_<GridConfig>(m, "GridConfig")
      .def(py::init<>())
      .def_readwrite("rows", &GridConfig::rows)
      .def_readwrite("cols", &GridConfig::cols)
      .def_readwrite("occupancy_pct", &GridConfig::occupancy_pct);

  py::class_<ToyImage>(m, "ToyImage")
      .def_readonly("rows", &ToyImage::rows)
      .def_readonly("cols", &ToyImage::cols)
      .def_readonly("cells", &ToyImage::cells);

  py::class_<Conversation>(m, "Conversation")
      .def_property_readonly("instruction", &Conversation::instruction)
      .def_property_readonly("answer", &Conversation::answer)
      .def("set_answer", &Conversation::set_answer, py::arg("text"))
      .def_readonly("family", &Conversation::family)
      .def_readonly("provenance", &Conversation::provenance);

  py::class_<Sample>(m, "Sample")
      .def_readonly("image", &Sample::image)
      .def_readonly("conversation", &Sample::conversation);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init<>())
      .def_readwrite("grid", &Dataset::grid)
      .def_readonly("samples", &Dataset::samples)
      .def("__len__", [](const Dataset& d) { return d.samples.size(); });

  py::class_<GenConfig>(m, "GenConfig")
      .def(py::init<>())
      .def_readwrite("grid", &GenConfig::grid)
      .def_readwrite("n_train", &GenConfig::n_train)
      .def_readwrite("n_eval", &GenConfig::n_eval)
      .def_readwrite("n_pretrain", &GenConfig::n_pretrain)
      .def_readwrite("families", &GenConfig::families)
      .def_readwrite("pretrain_families", &GenConfig::pretrain_families);

  py::class_<Vocabulary>(m, "Vocabulary")
      .def_static("standard", &Vocabulary::standard, py::arg("vocab_size"))
      .def("id", &Vocabulary::id, py::arg("word"))
      .def("word", &Vocabulary::word, py::arg("id"))
      .def("size", &Vocabulary::size)
      .def_property_readonly("pad", &Vocabulary::pad)
      .def_property_readonly("bos", &Vocabulary::bos)
      .def_property_readonly("eos", &Vocabulary::eos)
      .def_property_readonly("img", &Vocabulary::img)
      .def_property_readonly("sep", &Vocabulary::sep);

  py::class_<TokenizedSample>(m, "TokenizedSample")
      .def_readonly("ids", &TokenizedSample::ids)
      .def_readonly("answer_only", &TokenizedSample::answer_only)
      .def_readonly("all_tokens", &TokenizedSample::all_tokens)
      .def_readonly("n_visual", &TokenizedSample::n_visual)
      .def("first_text_pos", &TokenizedSample::first_text_pos)
      .def("selected", &TokenizedSample::selected, py::arg("mask"));

  m.def("generate_split", &generate_split, py::arg("config"), py::arg("seed"), py::arg("split"));
  m.def("tokenize", &tokenize, py::arg("conversation"), py::arg("vocab"), py::arg("n_visual"));
  m.def("detokenize", &detokenize, py::arg("sample"), py::arg("vocab"));
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
  m.def("load_dataset", &load_dataset, py::arg("path"));
}

void bind_losses(py::module_& m) {
  using namespace mmkd::losses;

  py::enum_<LogitLoss>(m, "LogitLoss")
      .value("none", LogitLoss::none)
      .value("forward_kl", LogitLoss::forward_kl)
      .value("reverse_kl", LogitLoss::reverse_kl)
      .value("jsd", LogitLoss::jsd)
      .value("mse", LogitLoss::mse);

  py::enum_<FeatureLoss>(m, "FeatureLoss")
      .value("none", FeatureLoss::none)
      .value("cosine", FeatureLoss::cosine)
      .value("mse", FeatureLoss::mse);

  py::enum_<AffinityLoss>(m, "AffinityLoss")
      .value("none", AffinityLoss::none)
      .value("attention", AffinityLoss::attention)
      .value("similarity", AffinityLoss::similarity);

  py::enum_<MaskPolicy>(m, "MaskPolicy")
      .value("answer_only", MaskPolicy::answer_only)
      .value("all_tokens", MaskPolicy::all_tokens);

  py::enum_<AttnGroup>(m, "AttnGroup")
      .value("all", AttnGroup::all)
      .value("image_to_answer", AttnGroup::image_to_answer);

  py::class_<DistillConfig>(m, "DistillConfig")
      .def(py::init<>())
      .def_readwrite("temperature", &DistillConfig::temperature)
      .def_readwrite("jsd_beta", &DistillConfig::jsd_beta)
      .def_readwrite("scale_by_t_squared", &DistillConfig::scale_by_t_squared)
      .def_readwrite("logit_loss", &DistillConfig::logit_loss)
      .def_readwrite("standardize_logits", &DistillConfig::standardize_logits)
      .def_readwrite("logit_mask", &DistillConfig::logit_mask)
      .def_readwrite("feature_loss", &DistillConfig::feature_loss)
      .def_readwrite("feature_layers", &DistillConfig::feature_layers)
      .def_readwrite("feature_mask", &DistillConfig::feature_mask)
      .def_readwrite("affinity_loss", &DistillConfig::affinity_loss)
      .def_readwrite("attn_group", &DistillConfig::attn_group)
      .def_readwrite("w_ce", &DistillConfig::w_ce)
      .def_readwrite("w_logit", &DistillConfig::w_logit)
      .def_readwrite("w_feature", &DistillConfig::w_feature)
      .def_readwrite("w_affinity", &DistillConfig::w_affinity)
      .def("validate", &DistillConfig::validate)
      .def("any_distill_active", &DistillConfig::any_distill_active)
      .def("summary", &DistillConfig::summary);

  m.def("autoregressive_ce", &autoregressive_ce, py::arg("logits"), py::arg("target_ids"),
        py::arg("mask"));
  m.def("kl_logit_loss", &kl_logit_loss, py::arg("teacher_logits"), py::arg("student_logits"),
        py::arg("temperature"), py::arg("forward"), py::arg("mask"), py::arg("t_squared") = true);
  m.def("generalized_jsd", &generalized_jsd, py::arg("teacher_logits"), py::arg("student_logits"),
        py::arg("beta"), py::arg("temperature"), py::arg("mask"), py::arg("t_squared") = true);
  m.def("mse_logit_loss", &mse_logit_loss, py::arg("teacher_logits"), py::arg("student_logits"),
        py::arg("mask"));
  m.def("logit_standardize", &logit_standardize, py::arg("logits"));
}

void bind_model(py::module_& m) {
  using namespace mmkd::model;

  py::class_<ModelSpec>(m, "ModelSpec")
      .def(py::init<>())
      .def_readwrite("vocab_size", &ModelSpec::vocab_size)
      .def_readwrite("num_layers", &ModelSpec::num_layers)
      .def_readwrite("hidden_dim", &ModelSpec::hidden_dim)
      .def_readwrite("num_heads", &ModelSpec::num_heads)
      .def_readwrite("max_seq", &ModelSpec::max_seq)
      .def_readwrite("visual_dim", &ModelSpec::visual_dim)
      .def_readwrite("ffn_mult", &ModelSpec::ffn_mult)
      .def_readwrite("role", &ModelSpec::role)
      .def("validate", &ModelSpec::validate);

  m.def("teacher_spec", &teacher_spec);
  m.def("student_spec", &student_spec);

  py::class_<VisualEncoderSpec>(m, "VisualEncoderSpec")
      .def(py::init<>())
      .def_readwrite("grid_rows", &VisualEncoderSpec::grid_rows)
      .def_readwrite("grid_cols", &VisualEncoderSpec::grid_cols)
      .def_readwrite("patch_pixels", &VisualEncoderSpec::patch_pixels)
      .def_readwrite("visual_dim", &VisualEncoderSpec::visual_dim)
      .def_readwrite("seed", &VisualEncoderSpec::seed)
      .def("n_visual_tokens", &VisualEncoderSpec::n_visual_tokens);

  py::class_<VisualEncoder>(m, "VisualEncoder")
      .def(py::init<const VisualEncoderSpec&>(), py::arg("spec"))
      .def_property_readonly("spec", &VisualEncoder::spec)
      .def("encode", &VisualEncoder::encode, py::arg("image"))
      .def("param_hash", &VisualEncoder::param_hash);

  py::class_<LMOutputs>(m, "LMOutputs")
      .def_readonly("logits", &LMOutputs::logits)
      .def_readonly("hidden_states", &LMOutputs::hidden_states)
      .def_readonly("attention", &LMOutputs::attention);

  py::class_<TransformerLM>(m, "TransformerLM")
      .def_static("init", &TransformerLM::init, py::arg("spec"), py::arg("seed"))
      .def_property_readonly("spec", &TransformerLM::spec)
      .def("forward", &TransformerLM::forward, py::arg("h_v"), py::arg("ids"),
           py::arg("n_visual"))
      .def("project_visual", &TransformerLM::project_visual, py::arg("z_v"))
      .def("param_hash", &TransformerLM::param_hash)
      .def("clone", &TransformerLM::clone);

  m.def("generate", &generate, py::arg("lm"), py::arg("encoder"), py::arg("image"),
        py::arg("prompt_ids"), py::arg("n_visual"), py::arg("max_new"), py::arg("eos_id"));
  m.def("init_student_from_teacher", &init_student_from_teacher, py::arg("teacher"),
        py::arg("keep_every"));
  m.def("save_model", &save_model, py::arg("lm"), py::arg("encoder_spec"), py::arg("path"));

  py::class_<LoadedModel>(m, "LoadedModel")
      .def_readonly("lm", &LoadedModel::lm)
      .def_readonly("encoder_spec", &LoadedModel::encoder_spec);
  m.def("load_model", &load_model, py::arg("path"));
}

void bind_train(py::module_& m) {
  using namespace mmkd::train;

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_static("pretrain_defaults", &TrainConfig::pretrain_defaults)
      .def_static("finetune_defaults", &TrainConfig::finetune_defaults)
      .def_readwrite("stage", &TrainConfig::stage)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("warmup_ratio", &TrainConfig::warmup_ratio)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("grad_clip", &TrainConfig::grad_clip)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("cache_teacher", &TrainConfig::cache_teacher)
      .def("validate", &TrainConfig::validate);

  m.def("lr_schedule", &lr_schedule, py::arg("step"), py::arg("total_steps"), py::arg("peak"),
        py::arg("warmup_ratio") = 0.03);

  py::class_<StepRecord>(m, "StepRecord")
      .def_readonly("step", &StepRecord::step)
      .def_readonly("lr", &StepRecord::lr)
      .def_readonly("total", &StepRecord::total)
      .def_readonly("components", &StepRecord::components);

  py::class_<EpochRecord>(m, "EpochRecord")
      .def_readonly("epoch", &EpochRecord::epoch)
      .def_readonly("held_out", &EpochRecord::held_out);

  py::class_<RunLog>(m, "RunLog")
      .def_readonly("steps", &RunLog::steps)
      .def_readonly("epochs", &RunLog::epochs)
      .def_readonly("checkpoint_path", &RunLog::checkpoint_path)
      .def("save_jsonl", &RunLog::save_jsonl, py::arg("path"));

  m.def("train_stage1", &train_stage1, py::arg("lm"), py::arg("encoder"), py::arg("pretrain"),
        py::arg("vocab"), py::arg("config"),
        py::arg("distill") = losses::DistillConfig{});

  py::class_<DistillResult>(m, "DistillResult")
      .def_readonly("log", &DistillResult::log);

  m.def(
      "distill_stage2",
      [](model::TransformerLM& student, const model::TransformerLM& teacher,
         const model::VisualEncoder& encoder, const data::Dataset& train_set,
         const data::Vocabulary& vocab, const TrainConfig& cfg,
         const losses::DistillConfig& distill) {
        return distill_stage2(student, teacher, encoder, train_set, vocab, cfg, distill);
      },
      py::arg("student"), py::arg("teacher"), py::arg("encoder"), py::arg("train_set"),
      py::arg("vocab"), py::arg("config"), py::arg("distill") = losses::DistillConfig{});
}

void bind_eval(py::module_& m) {
  using namespace mmkd::eval;

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("accuracy_pct", &EvalReport::accuracy_pct)
      .def_readonly("family_accuracy_pct", &EvalReport::family_accuracy_pct)
      .def_readonly("family_count", &EvalReport::family_count)
      .def_readonly("teacher_agreement_pct", &EvalReport::teacher_agreement_pct)
      .def_readonly("held_out_loss", &EvalReport::held_out_loss)
      .def_readonly("sample_count", &EvalReport::sample_count);

  m.def("greedy_answer", &greedy_answer, py::arg("lm"), py::arg("encoder"), py::arg("sample"),
        py::arg("vocab"));
  m.def("eval_qa_accuracy", &eval_qa_accuracy, py::arg("lm"), py::arg("encoder"),
        py::arg("eval_set"), py::arg("vocab"));
  m.def("teacher_agreement", &teacher_agreement, py::arg("student"), py::arg("teacher"),
        py::arg("encoder"), py::arg("eval_set"), py::arg("vocab"));

  py::class_<AblationArm>(m, "AblationArm")
      .def(py::init<>())
      .def_readwrite("name", &AblationArm::name)
      .def_readwrite("distill", &AblationArm::distill)
      .def("set_train_override",
           [](AblationArm& arm, const data::Dataset& ds) {
             arm.train_override = std::make_shared<data::Dataset>(ds);
           },
           py::arg("dataset"));

  py::class_<AblationConfig>(m, "AblationConfig")
      .def(py::init<>())
      .def_readwrite("arms", &AblationConfig::arms)
      .def_readwrite("seeds", &AblationConfig::seeds)
      .def_readwrite("train", &AblationConfig::train)
      .def_readwrite("workers", &AblationConfig::workers);

  py::class_<MetricStat>(m, "MetricStat")
      .def_readonly("mean", &MetricStat::mean)
      .def_readonly("stddev", &MetricStat::stddev);

  py::class_<ArmResult>(m, "ArmResult")
      .def_readonly("name", &ArmResult::name)
      .def_readonly("distill_summary", &ArmResult::distill_summary)
      .def_readonly("seeds", &ArmResult::seeds)
      .def_readonly("per_seed", &ArmResult::per_seed)
      .def_readonly("accuracy", &ArmResult::accuracy)
      .def_readonly("agreement", &ArmResult::agreement)
      .def_readonly("held_out_loss", &ArmResult::held_out_loss);

  py::class_<AblationReport>(m, "AblationReport")
      .def_readonly("rows", &AblationReport::rows);

  m.def("run_ablation", &run_ablation, py::arg("student_base"), py::arg("teacher"),
        py::arg("encoder"), py::arg("train_set"), py::arg("eval_set"), py::arg("vocab"),
        py::arg("config"));
  m.def("format_report_table", &format_report_table, py::arg("report"));
  m.def("format_report_records", &format_report_records, py::arg("report"));
  m.def("parse_report_records", &parse_report_records, py::arg("text"));
  m.def("emit_report", &emit_report, py::arg("report"), py::arg("path"), py::arg("format"));
}

void bind_regen(py::module_& m) {
  using namespace mmkd::regen;

  py::class_<RegenReport>(m, "RegenReport")
      .def_readonly("dataset", &RegenReport::dataset)
      .def_readonly("regenerated", &RegenReport::regenerated)
      .def_readonly("kept_original", &RegenReport::kept_original)
      .def("attempted", &RegenReport::attempted);

  m.def("regenerate_with_teacher", &regenerate_with_teacher, py::arg("dataset"),
        py::arg("teacher"), py::arg("encoder"), py::arg("vocab"));
  m.def("regenerate_with_student", &regenerate_with_student, py::arg("dataset"),
        py::arg("student"), py::arg("encoder"), py::arg("vocab"), py::arg("fraction"),
        py::arg("rng_seed"));
}

void bind_config(py::module_& m) {
  using namespace mmkd::config;

  py::class_<Experiment>(m, "Experiment")
      .def(py::init<>())
      .def_readwrite("teacher", &Experiment::teacher)
      .def_readwrite("student_keep_every", &Experiment::student_keep_every)
      .def_readwrite("init_seed", &Experiment::init_seed)
      .def_readwrite("encoder", &Experiment::encoder)
      .def_readwrite("data", &Experiment::data)
      .def_readwrite("train", &Experiment::train)
      .def_readwrite("distill", &Experiment::distill);

  m.def("parse_experiment", &parse_experiment, py::arg("text"));
  m.def("load_experiment", &load_experiment, py::arg("path"));
}

} // namespace

PYBIND11_MODULE(_mmkd, m) {
  m.doc() = "teacher-student distillation engine for visual-prefix language models";

  bind_errors(m);
  bind_tensor(m);
  bind_data(m);
  bind_losses(m);
  bind_model(m);
  bind_train(m);
  bind_eval(m);
  bind_regen(m);
  bind_config(m);
}
