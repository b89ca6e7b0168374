"""Input masking for masked-reconstruction pretraining.

Notes: each content position (never the class token) is independently
replaced by the reserved mask token id with probability rate. Measurements:
each timestep row is independently replaced by the per-feature training-set
mean row. Positions and original values are recorded so the reconstruction
losses can target exactly what was hidden.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import MeasurementWindow, TokenSequence
from .errors import ConfigError, ShapeError


@dataclass
class MaskedSample:
    """A masked input plus everything needed to score its reconstruction."""

    masked_input: TokenSequence | MeasurementWindow
    mask_positions: list[int]
    original_targets: np.ndarray
    mask_rate_used: float


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"mask rate must be in [0, 1), got {rate}")


def mask_notes(
    seq: TokenSequence,
    rate: float,
    rng: np.random.Generator,
    mask_token_id: int,
) -> MaskedSample:
    """Independently mask content token positions; position 0 is exempt."""
    _check_rate(rate)
    ids = seq.token_ids.copy()
    content = np.arange(1, len(ids))
    if rate > 0.0 and len(content) > 0:
        hit = content[rng.random(len(content)) < rate]
    else:
        hit = np.empty(0, dtype=np.int64)
    positions = [int(p) for p in np.sort(hit)]
    masked = ids.copy()
    masked[positions] = mask_token_id
    return MaskedSample(
        masked_input=TokenSequence(masked),
        mask_positions=positions,
        original_targets=ids,
        mask_rate_used=rate,
    )


def mask_measurements(
    win: MeasurementWindow,
    rate: float,
    rng: np.random.Generator,
    mean_row: np.ndarray,
) -> MaskedSample:
    """Independently replace whole timestep rows with the training mean row."""
    _check_rate(rate)
    mean_row = np.asarray(mean_row, dtype=np.float64)
    if mean_row.shape != (win.num_features,):
        raise ShapeError(
            f"mean_row has shape {mean_row.shape}, expected ({win.num_features},)")
    values = win.values.copy()
    if rate > 0.0:
        hit = np.flatnonzero(rng.random(win.num_timesteps) < rate)
    else:
        hit = np.empty(0, dtype=np.int64)
    positions = [int(t) for t in hit]
    masked = values.copy()
    masked[positions, :] = mean_row
    return MaskedSample(
        masked_input=MeasurementWindow(masked),
        mask_positions=positions,
        original_targets=values,
        mask_rate_used=rate,
    )


def restore(sample: MaskedSample) -> TokenSequence | MeasurementWindow:
    """Undo the masking; mainly a test hook for the round-trip invariant."""
    if isinstance(sample.masked_input, TokenSequence):
        ids = sample.masked_input.token_ids.copy()
        ids[sample.mask_positions] = sample.original_targets[sample.mask_positions]
        return TokenSequence(ids)
    values = sample.masked_input.values.copy()
    values[sample.mask_positions, :] = sample.original_targets[sample.mask_positions, :]
    return MeasurementWindow(values)
