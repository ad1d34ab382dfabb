"""PhysNet rPPG networks, pulse analysis and synthetic data (C++ core)."""

from ._physnet import (
    IoError,
    PhysNet,
    ValidationError,
    average_hr,
    bandpass,
    detect_peaks,
    generate,
    hrv_features,
    load_tensor,
    make_dataset,
    metrics,
    neg_pearson_loss,
    run_cli,
    run_pipeline,
    save_tensor,
    train,
    variants,
    znormalize,
)

__all__ = [
    "IoError",
    "PhysNet",
    "ValidationError",
    "average_hr",
    "bandpass",
    "detect_peaks",
    "generate",
    "hrv_features",
    "load_tensor",
    "make_dataset",
    "metrics",
    "neg_pearson_loss",
    "run_cli",
    "run_pipeline",
    "save_tensor",
    "train",
    "variants",
    "znormalize",
]
