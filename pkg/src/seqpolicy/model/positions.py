"""Patch and local position encodings: index computation only.

Patch positions: a patch's normalized row/col intervals are quantized onto a
128-way grid. Training picks a uniform index inside the closed quantized
interval; evaluation takes the rounded interval mean, which reproduces the
worked example: an 80x64 image patch covering rows [0.25, 0.5] and columns
[0.4, 0.6] quantizes to [32, 64] and [51, 77], giving eval indices 48 and 64.

Local positions: within a timestep, observation elements count 0, 1, 2, ...;
the separator and all action elements each get one dedicated table slot.
"""

from __future__ import annotations

import numpy as np

from ..errors import CapacityError
from ..sequencer import ElementSequence, ElementSource
from .config import ModelConfig

TRAIN_MODES = ("pretrain", "finetune", "train")


def quantize_patch_interval(interval: tuple[float, float], vocab: int = 128) -> tuple[int, int]:
    """Closed quantized index interval for one normalized patch extent."""
    lo, hi = interval
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError(f"patch interval ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1")
    lo_q = int(np.rint(lo * vocab))
    hi_q = int(np.rint(hi * vocab))
    # keep indices addressable in the vocab-row table
    lo_q = min(lo_q, vocab - 1)
    hi_q = min(hi_q, vocab - 1)
    return lo_q, hi_q


def patch_position_index(
    interval: tuple[float, float],
    mode: str,
    rng: np.random.Generator | None = None,
    vocab: int = 128,
) -> int:
    """Row or column encoding index for one patch."""
    lo_q, hi_q = quantize_patch_interval(interval, vocab)
    if mode in TRAIN_MODES:
        if rng is None:
            raise ValueError("train-mode patch positions need a random stream")
        return int(rng.integers(lo_q, hi_q + 1))
    return int(np.rint((lo_q + hi_q) / 2.0))


def local_position_indices(seq: ElementSequence, cfg: ModelConfig) -> np.ndarray:
    """Resolve per-element local position table indices for one sequence."""
    return resolve_local_indices(seq.sources, seq.local_pos, cfg)


def resolve_local_indices(
    sources: np.ndarray, local_pos: np.ndarray, cfg: ModelConfig
) -> np.ndarray:
    """Vectorized resolution; works on (L,) or (B, L) arrays.

    Observation ordinals map straight through, the separator and action
    elements use the two reserved top slots, padding maps to slot 0 (its
    embedding is never added).
    """
    out = np.zeros(sources.shape, dtype=np.int64)
    obs = (
        (sources == ElementSource.TEXT)
        | (sources == ElementSource.PATCH)
        | (sources == ElementSource.TENSOR)
    )
    if np.any(obs):
        ordinals = local_pos[obs]
        if int(ordinals.max()) >= cfg.max_observation_elements:
            raise CapacityError(
                f"observation has {int(ordinals.max()) + 1} elements, "
                f"local position table holds {cfg.max_observation_elements}"
            )
        out[obs] = ordinals
    out[sources == ElementSource.SEPARATOR] = cfg.separator_local_index
    out[sources == ElementSource.ACTION] = cfg.action_local_index
    return out
