"""Talking-blob video generation: staged training, mask-guided sampling, evaluation."""

from ._core import (
    ConfigError,
    FormatError,
    IoError,
    MaskflowError,
    NumericalFault,
    StageContractError,
    config_hash,
    decode,
    default_config,
    encode,
    grad_check,
    load_checkpoint,
    make_sample,
    sample,
    sync_eval,
    train_stage,
    verify_mask_factorization,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "IoError",
    "MaskflowError",
    "NumericalFault",
    "StageContractError",
    "config_hash",
    "decode",
    "default_config",
    "encode",
    "grad_check",
    "load_checkpoint",
    "make_sample",
    "sample",
    "sync_eval",
    "train_stage",
    "verify_mask_factorization",
]
