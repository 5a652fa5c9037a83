"""Stratified K-fold assignment keyed on the event indicator."""
from __future__ import annotations

import numpy as np


def stratified_folds(event, n_folds: int, seed, strict: bool = True) -> np.ndarray:
    """Fold index per subject, balanced within each event stratum.

    With ``strict`` both strata need at least ``n_folds`` members;
    otherwise only the event stratum does.
    """
    event = np.asarray(event).astype(int)
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    rng = np.random.default_rng(seed)
    folds = np.empty(event.size, dtype=int)
    for stratum in (0, 1):
        idx = np.flatnonzero(event == stratum)
        if idx.size < n_folds and (strict or stratum == 1):
            kind = "events" if stratum else "censored subjects"
            raise ValueError(f"need >= {n_folds} {kind} for {n_folds}-fold stratification, got {idx.size}")
        idx = rng.permutation(idx)
        folds[idx] = np.arange(idx.size) % n_folds
    return folds


def fold_splits(folds: np.ndarray):
    """Yield ``(train_idx, val_idx)`` for each fold in order."""
    for k in range(int(folds.max()) + 1):
        yield np.flatnonzero(folds != k), np.flatnonzero(folds == k)
