"""Pretraining losses: bidirectional contrastive alignment and masked
reconstruction for both modalities, plus their weighted combination.

The alignment loss contrasts unit-norm class embeddings of measurement
windows against those of notes, in both directions. Candidates for an anchor
are its own positive plus every embedding from a *different* stay; other
entries sharing the anchor's stay are excluded from the denominator because
they are not true negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import substrate as S
from .errors import BatchError, ConfigError, ContractError
from .substrate import Tensor

# additive mask: exp(-1e30) underflows to exactly 0.0, so excluded candidates
# contribute nothing to the denominator while every value stays finite
_EXCLUDE = -1e30


def _stacked(embeds) -> Tensor:
    if isinstance(embeds, Tensor):
        return embeds
    return S.stack_rows([e if isinstance(e, Tensor) else Tensor(e) for e in embeds])


@dataclass
class AlignmentBatch:
    """N positive (measurement, note) embedding pairs with stay identity.

    m_embeds / t_embeds are (N, proj_dim) matrices or sequences of unit-norm
    vectors; entry i of both comes from stay stay_ids[i].
    """

    m_embeds: Tensor
    t_embeds: Tensor
    stay_ids: list
    temperature: float

    def __post_init__(self):
        self.m_embeds = _stacked(self.m_embeds)
        self.t_embeds = _stacked(self.t_embeds)
        n = self.m_embeds.shape[0]
        if n < 2:
            raise BatchError(f"alignment needs at least 2 pairs, got {n}")
        if self.t_embeds.shape[0] != n or len(self.stay_ids) != n:
            raise BatchError(
                f"pair lists disagree: {n} measurement embeds, "
                f"{self.t_embeds.shape[0]} note embeds, {len(self.stay_ids)} stay ids")
        if self.m_embeds.shape[1] != self.t_embeds.shape[1]:
            raise BatchError(
                f"embedding dims differ: {self.m_embeds.shape[1]} vs {self.t_embeds.shape[1]}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    @property
    def num_pairs(self) -> int:
        return self.m_embeds.shape[0]


def _candidate_mask(stay_ids: Sequence, include_positive: bool) -> np.ndarray:
    """mask[j, c] = 0 if candidate c is in anchor j's denominator, else -1e30."""
    ids = np.asarray(stay_ids, dtype=object)
    same_stay = ids[:, None] == ids[None, :]
    allowed = ~same_stay
    if include_positive:
        np.fill_diagonal(allowed, True)
    return np.where(allowed, 0.0, _EXCLUDE)


def alignment_loss(
    batch: AlignmentBatch,
    include_positive_in_denominator: bool = True,
) -> Tensor:
    """Bidirectional contrastive loss over the batch, scalar Tensor.

    Per anchor, the positive-pair logit is contrasted against candidates from
    other stays; both directions are averaged with a 1/(2N) prefactor and
    summed. With include_positive_in_denominator the per-anchor terms are
    nonnegative; without it only the strict negative set appears below the
    fraction bar.
    """
    n = batch.num_pairs
    sims = S.mul(S.matmul(batch.m_embeds, S.transpose(batch.t_embeds)),
                 1.0 / batch.temperature)
    mask = Tensor(_candidate_mask(batch.stay_ids, include_positive_in_denominator))
    positives = S.diag_part(sims)
    # measurement anchors rank note candidates along rows; note anchors rank
    # measurement candidates along columns of the same similarity matrix
    m2t = S.sub(S.logsumexp(S.add(sims, mask), axis=1), positives)
    t2m = S.sub(S.logsumexp(S.add(sims, mask), axis=0), positives)
    return S.mul(S.add(S.tsum(m2t), S.tsum(t2m)), 1.0 / (2.0 * n))


class MaskedLossResult(NamedTuple):
    """Scalar loss plus how many positions contributed (0 => no-mask)."""

    loss: Tensor
    num_masked: int

    @property
    def no_mask(self) -> bool:
        return self.num_masked == 0


def note_recon_loss(
    recon: Tensor,
    targets,
    mask_positions,
) -> MaskedLossResult:
    """Mean cross-entropy of reconstruction logits at the masked positions.

    recon is (L, vocab); targets are the original token ids (length L);
    mask_positions index into [1, L) (the class token is never masked).
    An empty mask set yields loss 0 with the no-mask flag.
    """
    positions = sorted(int(p) for p in mask_positions)
    if not positions:
        return MaskedLossResult(Tensor(0.0), 0)
    length = recon.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    if min(positions) < 1 or max(positions) >= length:
        raise ContractError(
            f"mask positions must lie in [1, {length}), got {positions}")
    logp = S.log_softmax(S.take_rows(recon, positions), axis=-1)
    picked = S.take_index_pairs(logp, np.arange(len(positions)), targets[positions])
    return MaskedLossResult(S.neg(S.tmean(picked)), len(positions))


def meas_recon_loss(
    recon: Tensor,
    targets,
    mask_timesteps,
    beta: float = 1.0,
) -> MaskedLossResult:
    """Mean smooth-L1 between reconstructed and original measurement rows.

    recon is ((T+1), F) including the class position, so reconstruction row
    t+1 corresponds to target row t. Loss averages over masked timesteps and
    all F features; quadratic below beta, linear above.
    """
    if beta <= 0:
        raise ConfigError(f"smooth-L1 beta must be > 0, got {beta}")
    steps = sorted(int(t) for t in mask_timesteps)
    if not steps:
        return MaskedLossResult(Tensor(0.0), 0)
    targets = np.asarray(targets, dtype=np.float64)
    num_steps = targets.shape[0]
    if min(steps) < 0 or max(steps) >= num_steps:
        raise ContractError(
            f"mask timesteps must lie in [0, {num_steps}), got {steps}")
    rows = S.take_rows(recon, [t + 1 for t in steps])
    diff = S.sub(rows, Tensor(targets[steps]))
    return MaskedLossResult(S.tmean(S.smooth_l1(diff, beta)), len(steps))


@dataclass
class ObjectiveBreakdown:
    """Total pretraining loss with its components kept for logging."""

    total: Tensor
    align: Tensor
    note_recon: Tensor
    meas_recon: Tensor
    weights: tuple[float, float, float]

    def scalars(self) -> dict[str, float]:
        return {
            "loss_total": self.total.item(),
            "loss_align": self.align.item(),
            "loss_note_recon": self.note_recon.item(),
            "loss_meas_recon": self.meas_recon.item(),
        }


def combine(align, note_recon, meas_recon, weights=(1.0, 1.0, 1.0)) -> ObjectiveBreakdown:
    """Weighted sum of the three loss components."""
    if any(w < 0 for w in weights):
        raise ConfigError(f"objective weights must be >= 0, got {weights}")
    align = align if isinstance(align, Tensor) else Tensor(align)
    note_recon = note_recon if isinstance(note_recon, Tensor) else Tensor(note_recon)
    meas_recon = meas_recon if isinstance(meas_recon, Tensor) else Tensor(meas_recon)
    wa, wn, wm = (float(w) for w in weights)
    total = S.add(S.add(S.mul(align, wa), S.mul(note_recon, wn)), S.mul(meas_recon, wm))
    return ObjectiveBreakdown(total=total, align=align, note_recon=note_recon,
                              meas_recon=meas_recon, weights=(wa, wn, wm))
