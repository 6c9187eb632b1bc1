"""Multi-scale convolutional network for multichannel time-series
classification: preprocessing, model, training, evaluation protocols,
interpretability analyses, synthetic data, and an HTTP service."""

from .data import (
    ClassSpec,
    ContinuousRecord,
    EpochSet,
    SynthResult,
    epochs_from_record,
    kfold,
    label_from_score,
    leave_one_record_out,
    read_epochs,
    read_record,
    synth_bandpower,
    synth_seizure_record,
    synth_ssvep,
    write_epochs,
    write_record,
)
from .evaluation import (
    ConfusionMatrix,
    DetectionResult,
    EvalResult,
    aggregate_folds,
    detect_onsets,
    evaluate,
    sliding_window_trace,
)
from .interpret import (
    ActivationPattern,
    RelevanceMap,
    activation_patterns,
    export_features,
    forward_model_patterns,
    lrp,
    relevance_spectrum,
)
from .model import (
    Checkpoint,
    MsnnConfig,
    MsnnModel,
    load_checkpoint,
    save_checkpoint,
)
from .preproc import (
    NormStats,
    RawRecord,
    apply_normalization,
    bandpass,
    baseline_correct,
    crop_epoch,
    fit_normalization,
    large_laplacian,
    welch_psd,
)
from .training import (
    AdamState,
    FitResult,
    TrainConfig,
    TrainReport,
    TrainingDivergedError,
    adam_step,
    cross_entropy,
    fit,
    grad_check,
    l1_l2_penalty,
    lr_at_epoch,
    split_train_val,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
