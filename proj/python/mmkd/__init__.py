"""Teacher-student distillation engine for visual-prefix language models.

Thin re-export of the compiled core. The C++ library owns all behavior; this
package exists so experiments can be scripted and inspected from Python.
"""

from ._mmkd import (
    # error classes
    Error,
    ConfigError,
    ParameterError,
    ContractError,
    DimensionError,
    NumericError,
    TokenizeError,
    IoError,
    # tensors and the few ops worth poking interactively
    Tensor,
    matmul,
    softmax_t,
    log_softmax_t,
    # data generation and tokenization
    Family,
    Provenance,
    GridConfig,
    ToyImage,
    Conversation,
    Sample,
    Dataset,
    GenConfig,
    Vocabulary,
    TokenizedSample,
    generate_split,
    tokenize,
    detokenize,
    save_dataset,
    load_dataset,
    # distillation losses
    LogitLoss,
    FeatureLoss,
    AffinityLoss,
    MaskPolicy,
    AttnGroup,
    DistillConfig,
    autoregressive_ce,
    kl_logit_loss,
    generalized_jsd,
    mse_logit_loss,
    logit_standardize,
    # models
    ModelSpec,
    teacher_spec,
    student_spec,
    VisualEncoderSpec,
    VisualEncoder,
    LMOutputs,
    TransformerLM,
    generate,
    init_student_from_teacher,
    save_model,
    LoadedModel,
    load_model,
    # training
    TrainConfig,
    lr_schedule,
    StepRecord,
    EpochRecord,
    RunLog,
    train_stage1,
    DistillResult,
    distill_stage2,
    # evaluation and the ablation runner
    EvalReport,
    greedy_answer,
    eval_qa_accuracy,
    teacher_agreement,
    AblationArm,
    AblationConfig,
    MetricStat,
    ArmResult,
    AblationReport,
    run_ablation,
    format_report_table,
    format_report_records,
    parse_report_records,
    emit_report,
    # answer regeneration
    RegenReport,
    regenerate_with_teacher,
    regenerate_with_student,
    # experiment config files
    Experiment,
    parse_experiment,
    load_experiment,
)

__all__ = [name for name in dir() if not name.startswith("_")]
