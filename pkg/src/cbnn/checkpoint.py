"""Checkpoint serialization.

A checkpoint is a single JSON document holding the model kind, the full
variational state, the normalized-space constraint system, the dataset
normalization statistics and the training seed. JSON float repr
round-trips doubles exactly, so save/load is lossless.
"""

from __future__ import annotations

import json

import numpy as np

from .conditioning import ConstraintSystem
from .errors import ContractError
from .model import VariationalState
from .synthdata import NormStats

FORMAT_VERSION = 1


def save_checkpoint(
    path,
    kind: str,
    state: VariationalState,
    constraints: ConstraintSystem,
    stats: NormStats,
    seed: int,
    train_config: dict | None = None,
):
    if kind not in ("bnn", "bcpnn"):
        raise ContractError(f"unknown model kind {kind!r}")
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "state": state.to_dict(),
        "constraints": constraints.to_dict(),
        "stats": stats.to_dict(),
        "seed": seed,
        "train_config": train_config or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path) -> dict:
    """Returns dict with keys kind, state, constraints, stats, seed,
    train_config; tensors reconstructed."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractError("unsupported checkpoint format version")
    return {
        "kind": doc["kind"],
        "state": VariationalState.from_dict(doc["state"]),
        "constraints": ConstraintSystem.from_dict(doc["constraints"]),
        "stats": NormStats.from_dict(doc["stats"]),
        "seed": doc["seed"],
        "train_config": doc["train_config"],
    }


def stats_compatible(a: NormStats, b: NormStats, rtol: float = 1e-9) -> bool:
    return (
        np.allclose(a.x_mean, b.x_mean, rtol=rtol)
        and np.allclose(a.x_std, b.x_std, rtol=rtol)
        and np.allclose(a.y_mean, b.y_mean, rtol=rtol)
        and np.allclose(a.y_std, b.y_std, rtol=rtol)
    )
