"""Transformer-based time-series anomaly detection with an RBF layer.

The package trains a small Transformer encoder whose hidden stream passes
through a layer of radial-basis similarity scores, then combines the
reconstruction error with the dissimilarity to those learned centers into
a per-point anomaly score.
"""

from .data import (
    Anomaly,
    RawDataset,
    SynthSpec,
    WindowedDataset,
    default_synth_spec,
    generate_synthetic,
    load_csv,
    normalize,
    save_csv,
    windowize,
)
from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    DegenerateInitError,
    DimensionError,
    RestadError,
    TrainingError,
    UndefinedMetricError,
)
from .initialization import gamma_from_sigma, kmeans, kmeans_init, random_init, sigma_tilde
from .metrics import (
    EvalReport,
    LabeledScores,
    auc_pr,
    auc_roc,
    evaluate,
    f1_at_threshold,
    quantile_threshold,
    smooth_labels,
    vus,
)
from .model import (
    ModelConfig,
    RbfLayer,
    RestadModel,
    load_checkpoint,
    rbf_forward,
    save_checkpoint,
)
from .scoring import (
    CRITERIA,
    ScoreTrace,
    composite_score,
    dissimilarity,
    minmax,
    reconstruction_error,
    retarget,
    score_model,
    score_windows,
)
from .training import TrainConfig, TrainLog, fit, mse_loss, train_restad_kmeans

__version__ = "0.1.0"
