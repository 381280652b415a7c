"""Learned convolutional sparse coding for denoising quasi-periodic pulse signals."""

__version__ = "0.1.0"

from .csc import (
    Dictionary,
    code_density,
    estimate_lipschitz,
    ista_encode,
    reconstruct,
    smooth_soft_threshold,
    soft_threshold,
)
from .errors import PulseCscError
from .evalkit import (
    BlandAltman,
    GroupedMae,
    HrSeries,
    MaeSegment,
    WilcoxonResult,
    bland_altman,
    detect_peaks,
    group_mae,
    hr_from_peaks,
    mae_hr,
    snr_db,
    wilcoxon_signed_rank,
)
from .model import (
    UnfoldedModel,
    forward,
    init_ista,
    init_random,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    DatasetRecord,
    denoise_stream,
    evaluate_records,
    read_dataset,
    run_command,
    run_from_manifest,
    write_dataset,
)
from .signals import (
    BandPassSpec,
    Signal,
    design_cheby2_bandpass,
    filter_signal,
    normalize_01,
    resample,
)
from .synth import (
    ArtifactParamTable,
    ArtifactSpec,
    SegmentRecord,
    make_dataset,
    render_artifact,
    sample_artifact,
    synth_clean_ppg,
)
from .train import TrainConfig, adam_step, backward, loss, split_by_subject, train

__all__ = [
    "ArtifactParamTable",
    "ArtifactSpec",
    "BandPassSpec",
    "BlandAltman",
    "DatasetRecord",
    "Dictionary",
    "GroupedMae",
    "HrSeries",
    "MaeSegment",
    "PulseCscError",
    "SegmentRecord",
    "Signal",
    "TrainConfig",
    "UnfoldedModel",
    "WilcoxonResult",
    "adam_step",
    "backward",
    "bland_altman",
    "code_density",
    "denoise_stream",
    "design_cheby2_bandpass",
    "detect_peaks",
    "estimate_lipschitz",
    "evaluate_records",
    "filter_signal",
    "forward",
    "group_mae",
    "hr_from_peaks",
    "init_ista",
    "init_random",
    "ista_encode",
    "load_checkpoint",
    "loss",
    "mae_hr",
    "make_dataset",
    "normalize_01",
    "read_dataset",
    "reconstruct",
    "render_artifact",
    "resample",
    "run_command",
    "run_from_manifest",
    "sample_artifact",
    "save_checkpoint",
    "smooth_soft_threshold",
    "snr_db",
    "soft_threshold",
    "split_by_subject",
    "synth_clean_ppg",
    "train",
    "wilcoxon_signed_rank",
    "write_dataset",
]
