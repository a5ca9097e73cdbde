"""Few-shot textual attribute validation.

A dual-encoder scorer meta-trained over per-category episodes: an inner loop
minimizes prediction entropy on unlabeled support records, the outer loss
combines query cross-entropy with a KL term that keeps the pooled query and
support latent distributions aligned. This package re-exports the compiled
core; see the `metabridge` command-line tool for the file-based workflow.
"""

from ._core import (
    TOOL,
    AdaptedModel,
    CategoryResult,
    DatasetSplit,
    EncoderConfig,
    Episode,
    EpisodeLoss,
    EpochRecord,
    GradOrder,
    MetaConfig,
    ProductRecord,
    RepeatedMetrics,
    ScoreRow,
    SplitMetrics,
    Tensor,
    TrainResult,
    VariantMode,
    Vocab,
    __version__,
    adapt,
    build_vocab,
    episode_loss,
    evaluate_part,
    evaluate_repeated,
    generate_synthetic,
    init_params,
    kl_divergence,
    load_checkpoint,
    load_jsonl,
    metrics_report_json,
    pr_auc,
    predict,
    recall_at_precision,
    sample_episode,
    save_checkpoint,
    save_jsonl,
    split_by_category,
    support_entropy_loss,
    tokenize,
    train,
)

__all__ = [
    "TOOL",
    "AdaptedModel",
    "CategoryResult",
    "DatasetSplit",
    "EncoderConfig",
    "Episode",
    "EpisodeLoss",
    "EpochRecord",
    "GradOrder",
    "MetaConfig",
    "ProductRecord",
    "RepeatedMetrics",
    "ScoreRow",
    "SplitMetrics",
    "Tensor",
    "TrainResult",
    "VariantMode",
    "Vocab",
    "__version__",
    "adapt",
    "build_vocab",
    "episode_loss",
    "evaluate_part",
    "evaluate_repeated",
    "generate_synthetic",
    "init_params",
    "kl_divergence",
    "load_checkpoint",
    "load_jsonl",
    "metrics_report_json",
    "pr_auc",
    "predict",
    "recall_at_precision",
    "sample_episode",
    "save_checkpoint",
    "save_jsonl",
    "split_by_category",
    "support_entropy_loss",
    "tokenize",
    "train",
]
