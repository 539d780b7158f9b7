"""Style-transfer harmonization of 3D task-fMRI statistic maps across pipelines."""

__version__ = "0.1.0"

from .volume import (
    DomainLabel,
    Mask,
    NormParams,
    StatMap,
    DatasetSplit,
    denormalize,
    load_canonical,
    minmax_normalize,
    resample,
    save_canonical,
    split_groups,
)
from .synthetic import (
    ContentField,
    StyleParams,
    SyntheticConfig,
    generate_dataset,
    load_manifest,
    make_pipeline_styles,
    render_group,
)
from .evaluation import (
    MetricReport,
    TransferCase,
    TransferHandle,
    evaluate_transfers,
    cross_task_evaluation,
    inception_score,
    layerwise_feature_correlation,
    mse,
    pearson,
    transfer_accuracy,
)

__all__ = [name for name in dir() if not name.startswith("_")]
