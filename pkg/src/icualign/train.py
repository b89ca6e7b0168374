"""Optimization loops for pretraining and fine-tuning.

Decoupled-weight-decay adaptive optimizer with parameter groups, cosine
annealing over total steps, deterministic epoch orchestration driven by
named rng streams, resumable checkpoints (parameters + optimizer moments +
schedule + rng states), and grid search.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import special

from . import data as D
from . import encoders as E
from . import masking as M
from . import objective as O
from . import substrate as S
from .errors import ConfigError, ContractError, NonFiniteGradientError
from .seeding import named_rng, restore_rng, rng_state
from .substrate import GradientTape, Tensor

log = logging.getLogger(__name__)

# hyperparameter domains used by the default pretraining search; values
# outside these lists are allowed but logged as explicit overrides
PRETRAIN_GRID = {
    "lr": [1e-4, 1e-5, 1e-6],
    "weight_decay": [0.2, 0.1, 0.01],
    "dropout_text": [0.0, 0.1],
    "dropout_meas": [0.0, 0.1],
    "temperature": [0.1, 0.07, 0.05],
    "batch_size": [16, 32, 64, 128],
    "mask_rate_notes": [0.0, 0.1, 0.2],
    "mask_rate_meas": [0.0, 0.1, 0.2],
}

LINEAR_EVAL_GRID = {
    "batch_size": [8, 16, 32, 64],
    "epochs": [1, 2, 3, 4, 5],
    "lr": [1e-3, 1e-4, 1e-5],
}

HEAD_LR_GRID = [1e-2, 1e-3, 1e-4]
RANDOM_INIT_EPOCHS_GRID = [5, 10, 15, 20]


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    """Adaptive moments plus decoupled weight decay, with parameter groups.

    Group learning-rate multipliers let a freshly initialized head train
    faster than a pretrained backbone.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    group_of: dict[str, str] = field(default_factory=dict)
    group_lr_mult: dict[str, float] = field(default_factory=dict)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_mult(self, name: str) -> float:
        return self.group_lr_mult.get(self.group_of.get(name, "default"), 1.0)


def optimizer_step(
    state: OptimizerState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float | None = None,
) -> dict[str, Tensor]:
    """One decoupled-decay adaptive update; returns fresh parameter tensors.

    Weight decay multiplies parameters directly by (1 - lr*wd) and never
    enters the moment estimates. Aborts (before touching any state) on a
    non-finite gradient, naming the offending parameter.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)
    base_lr = state.lr if lr is None else lr
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new_params: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        eff_lr = base_lr * state.lr_mult(name)
        value = p.data * (1.0 - eff_lr * state.weight_decay)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        value = value - eff_lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_params[name] = S.parameter(value)
    return new_params


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    norm = S.global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# ---------------------------------------------------------------------------
# schedule

@dataclass
class ScheduleState:
    base_lr: float
    total_steps: int
    current_step: int = 0


def cosine_lr(sched: ScheduleState) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if sched.current_step > sched.total_steps:
        raise ContractError(
            f"schedule overran: step {sched.current_step} > total {sched.total_steps}")
    frac = sched.current_step / max(sched.total_steps, 1)
    return 0.5 * sched.base_lr * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class TrainRunConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    temperature: float = 0.07
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mask_rate_notes: float = 0.1
    mask_rate_meas: float = 0.1
    dropout_text: float | None = None   # None keeps the encoder config's rate
    dropout_meas: float | None = None
    smooth_l1_beta: float = 1.0
    clip_norm: float = 1.0
    include_positive_in_denominator: bool = True
    seed: int = 0
    checkpoint_every: int = 0           # epochs; 0 = final checkpoint only
    max_window_len: int | None = None   # None derives from the encoder config

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 for contrastive batches, got {self.batch_size}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if any(w < 0 for w in self.weights):
            raise ConfigError(f"objective weights must be >= 0, got {self.weights}")
        for rate in (self.mask_rate_notes, self.mask_rate_meas):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"mask rates must be in [0, 1), got {rate}")

    def log_off_grid(self) -> None:
        for key, domain in PRETRAIN_GRID.items():
            value = getattr(self, key)
            if value is not None and value not in domain:
                log.info("pretrain: %s=%r is outside the default search domain "
                         "%r (explicit override)", key, value, domain)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = tuple(d["weights"])
        return cls(**d)


# ---------------------------------------------------------------------------
# pretraining

@dataclass
class PretrainResult:
    text_cfg: E.EncoderConfig
    meas_cfg: E.EncoderConfig
    text_params: dict[str, Tensor]
    meas_params: dict[str, Tensor]
    tokenizer: D.WordTokenizer
    mean_row: np.ndarray
    history: list[dict]
    run_cfg: TrainRunConfig
    checkpoint_path: str | None = None


def _merge_params(text_params, meas_params) -> dict[str, Tensor]:
    flat = {f"text.{k}": v for k, v in text_params.items()}
    flat.update({f"meas.{k}": v for k, v in meas_params.items()})
    return flat


def _split_params(flat) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    text = {k[len("text."):]: v for k, v in flat.items() if k.startswith("text.")}
    meas = {k[len("meas."):]: v for k, v in flat.items() if k.startswith("meas.")}
    return text, meas


def _chunk_pairs(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Contiguous chunks; a trailing singleton is folded into its neighbor so
    every contrastive batch has at least two pairs."""
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _pooled_recon(losses: list[O.MaskedLossResult]) -> Tensor:
    """Position-weighted mean of per-sample masked losses (0 if nothing masked)."""
    total = sum(r.num_masked for r in losses)
    if total == 0:
        return Tensor(0.0)
    pooled = None
    for r in losses:
        if r.num_masked == 0:
            continue
        term = S.mul(r.loss, r.num_masked / total)
        pooled = term if pooled is None else S.add(pooled, term)
    return pooled


def batch_objective(
    text_cfg: E.EncoderConfig,
    text_params: dict[str, Tensor],
    meas_cfg: E.EncoderConfig,
    meas_params: dict[str, Tensor],
    batch: D.PairBatch,
    cfg: TrainRunConfig,
    tokenizer,
    mean_row: np.ndarray,
    rng_mask: np.random.Generator | None = None,
    rng_drop: np.random.Generator | None = None,
    train: bool = True,
) -> O.ObjectiveBreakdown:
    """Forward both encoders over a pair batch and assemble the full loss.

    Inputs are masked before encoding whenever the corresponding loss weight
    and mask rate are both positive, so the alignment and reconstruction
    terms share one forward pass.
    """
    w_align, w_note, w_meas = cfg.weights
    note_rate = cfg.mask_rate_notes if w_note > 0 else 0.0
    meas_rate = cfg.mask_rate_meas if w_meas > 0 else 0.0

    m_embeds, t_embeds = [], []
    note_losses, meas_losses = [], []
    for win, seq in zip(batch.windows, batch.notes):
        if note_rate > 0:
            ms = M.mask_notes(seq, note_rate, rng_mask, tokenizer.mask_token_id)
            seq_in, note_mask, note_targets = ms.masked_input, ms.mask_positions, ms.original_targets
        else:
            seq_in, note_mask, note_targets = seq, [], seq.token_ids
        if meas_rate > 0:
            ms = M.mask_measurements(win, meas_rate, rng_mask, mean_row)
            win_in, meas_mask, meas_targets = ms.masked_input, ms.mask_positions, ms.original_targets
        else:
            win_in, meas_mask, meas_targets = win, [], win.values

        t_out = E.encode_text(text_cfg, text_params, seq_in, train=train, rng=rng_drop)
        m_out = E.encode_measurements(meas_cfg, meas_params, win_in, train=train, rng=rng_drop)
        m_embeds.append(m_out.cls_aligned)
        t_embeds.append(t_out.cls_aligned)
        if note_mask:
            note_losses.append(O.note_recon_loss(t_out.recon, note_targets, note_mask))
        if meas_mask:
            meas_losses.append(O.meas_recon_loss(m_out.recon, meas_targets, meas_mask,
                                                 beta=cfg.smooth_l1_beta))

    align = O.alignment_loss(
        O.AlignmentBatch(m_embeds=m_embeds, t_embeds=t_embeds,
                         stay_ids=batch.stay_ids, temperature=cfg.temperature),
        include_positive_in_denominator=cfg.include_positive_in_denominator)
    return O.combine(align, _pooled_recon(note_losses), _pooled_recon(meas_losses),
                     weights=cfg.weights)


def _retrieval_r1(
    text_cfg, text_params, meas_cfg, meas_params, records, tokenizer, max_window_len,
) -> tuple[float, float]:
    """Deterministic R@1 in both directions over one note per stay (index 0)."""
    usable = [r for r in records if r.notes]
    if len(usable) < 2:
        return float("nan"), float("nan")
    m_rows, t_rows = [], []
    for rec in usable:
        win = D.center_crop(E.MeasurementWindow(rec.values), max_window_len)
        m_rows.append(E.encode_measurements(meas_cfg, meas_params, win).cls_aligned.data)
        seq = tokenizer.encode(rec.notes[0].text, max_len=text_cfg.max_seq_len)
        t_rows.append(E.encode_text(text_cfg, text_params, seq).cls_aligned.data)
    sims = np.stack(m_rows) @ np.stack(t_rows).T
    m2n = float(np.mean(sims.argmax(axis=1) == np.arange(len(usable)))) * 100.0
    n2m = float(np.mean(sims.argmax(axis=0) == np.arange(len(usable)))) * 100.0
    return m2n, n2m


def save_train_checkpoint(
    path,
    result: PretrainResult,
    opt: OptimizerState | None = None,
    sched: ScheduleState | None = None,
    rngs: dict[str, np.random.Generator] | None = None,
    epochs_done: int | None = None,
) -> None:
    """Encoder checkpoint, optionally extended with exact-resume state."""
    configs = {"text": result.text_cfg, "meas": result.meas_cfg}
    params = _merge_params(result.text_params, result.meas_params)
    extra_arrays = {"mean_row": result.mean_row}
    extra: dict = {
        "run_config": result.run_cfg.to_dict(),
        "tokenizer": result.tokenizer.to_dict(),
        "history": result.history,
    }
    if opt is not None:
        for name in params:
            extra_arrays[f"opt.m.{name}"] = opt.m.get(
                name, np.zeros_like(params[name].data))
            extra_arrays[f"opt.v.{name}"] = opt.v.get(
                name, np.zeros_like(params[name].data))
        extra["optimizer"] = {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "weight_decay": opt.weight_decay, "step": opt.step,
        }
    if sched is not None:
        extra["schedule"] = dataclasses.asdict(sched)
    if rngs is not None:
        extra["rng"] = {name: rng_state(g) for name, g in rngs.items()}
    if epochs_done is not None:
        extra["epochs_done"] = epochs_done
    E.save_checkpoint(path, configs, params, extra=extra, extra_arrays=extra_arrays)


def load_train_checkpoint(path) -> tuple[PretrainResult, dict, dict[str, np.ndarray]]:
    """Returns (result, extra header dict, extra arrays) for eval or resume."""
    configs, params, arrays, extra = E.load_checkpoint(path)
    text_params, meas_params = _split_params(params)
    result = PretrainResult(
        text_cfg=configs["text"],
        meas_cfg=configs["meas"],
        text_params=text_params,
        meas_params=meas_params,
        tokenizer=D.WordTokenizer.from_dict(extra["tokenizer"]),
        mean_row=arrays["mean_row"],
        history=list(extra.get("history", [])),
        run_cfg=TrainRunConfig.from_dict(extra["run_config"]),
        checkpoint_path=str(path),
    )
    return result, extra, arrays


def pretrain(
    train_records: list[D.StayRecord],
    val_records: list[D.StayRecord],
    cfg: TrainRunConfig,
    text_cfg: E.EncoderConfig,
    meas_cfg: E.EncoderConfig,
    out_dir=None,
    resume=None,
    tokenizer: D.WordTokenizer | None = None,
) -> PretrainResult:
    """Alignment + masked-reconstruction pretraining over positive pairs.

    Each epoch resamples one note per stay, shuffles, batches, masks both
    modalities, and takes one optimizer step per batch under the cosine
    schedule. Validation retrieval R@1 (both directions) is logged per epoch.
    Checkpoints carry optimizer/schedule/rng state so an interrupted run can
    resume bitwise-exactly.
    """
    cfg.log_off_grid()
    if cfg.dropout_text is not None:
        text_cfg = dataclasses.replace(text_cfg, dropout_rate=cfg.dropout_text)
    if cfg.dropout_meas is not None:
        meas_cfg = dataclasses.replace(meas_cfg, dropout_rate=cfg.dropout_meas)
    max_window = cfg.max_window_len or (meas_cfg.max_seq_len - 1)

    usable = [r for r in train_records if r.notes]
    if len(usable) < 2:
        raise ConfigError("pretraining needs at least 2 stays with retained notes")
    records_by_id = {r.stay_id: r for r in usable}
    steps_per_epoch = len(_chunk_pairs(np.arange(len(usable)), cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch

    if resume is not None:
        result, extra, arrays = load_train_checkpoint(resume)
        text_cfg, meas_cfg = result.text_cfg, result.meas_cfg
        tokenizer = result.tokenizer
        mean_row = result.mean_row
        text_params, meas_params = result.text_params, result.meas_params
        history = result.history
        epochs_done = int(extra["epochs_done"])
        opt = OptimizerState(**{k: v for k, v in extra["optimizer"].items() if k != "step"},
                             step=int(extra["optimizer"]["step"]))
        flat = _merge_params(text_params, meas_params)
        opt.m = {k: arrays[f"opt.m.{k}"] for k in flat}
        opt.v = {k: arrays[f"opt.v.{k}"] for k in flat}
        sched = ScheduleState(**extra["schedule"])
        rngs = {name: restore_rng(state) for name, state in extra["rng"].items()}
    else:
        if tokenizer is None:
            tokenizer = D.WordTokenizer.build(
                note.text for rec in usable for note in rec.notes)
        if text_cfg.vocab_size is None:
            text_cfg = dataclasses.replace(text_cfg, vocab_size=tokenizer.vocab_size)
        mean_row = np.concatenate([r.values for r in usable], axis=0).mean(axis=0)
        rngs = {name: named_rng(cfg.seed, name)
                for name in ("init", "sampling", "masking", "dropout")}
        text_params = E.init_text_params(text_cfg, rngs["init"])
        meas_params = E.init_measurement_params(meas_cfg, rngs["init"])
        opt = OptimizerState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                             eps=cfg.eps, weight_decay=cfg.weight_decay)
        sched = ScheduleState(base_lr=cfg.lr, total_steps=total_steps)
        history = []
        epochs_done = 0

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def snapshot(path, epochs_completed):
        res = PretrainResult(text_cfg, meas_cfg, text_params, meas_params,
                             tokenizer, mean_row, history, cfg,
                             checkpoint_path=str(path))
        save_train_checkpoint(path, res, opt=opt, sched=sched,
                              rngs=rngs, epochs_done=epochs_completed)
        return res

    result = None
    for epoch in range(epochs_done, cfg.epochs):
        t0 = time.monotonic()
        pairs = D.sample_epoch_pairs(usable, rngs["sampling"])
        order = rngs["sampling"].permutation(len(pairs))
        epoch_losses: list[dict] = []
        lr = cosine_lr(sched)
        for chunk in _chunk_pairs(order, cfg.batch_size):
            batch = D.build_pair_batch(records_by_id, [pairs[i] for i in chunk],
                                       tokenizer, text_cfg.max_seq_len,
                                       max_window, rngs["sampling"])
            flat = _merge_params(text_params, meas_params)
            with GradientTape() as tape:
                breakdown = batch_objective(
                    text_cfg, text_params, meas_cfg, meas_params, batch, cfg,
                    tokenizer, mean_row, rng_mask=rngs["masking"],
                    rng_drop=rngs["dropout"], train=True)
            if not math.isfinite(breakdown.total.item()):
                log.error("pretrain: non-finite loss at epoch %d; aborting "
                          "(last-good checkpoint retained)", epoch)
                raise NonFiniteGradientError("<loss>")
            tape.backward(breakdown.total)
            grads = {name: tape.grad(p) for name, p in flat.items()}
            clip_gradients(grads, cfg.clip_norm)
            lr = cosine_lr(sched)
            flat = optimizer_step(opt, flat, grads, lr=lr)
            sched.current_step += 1
            text_params, meas_params = _split_params(flat)
            epoch_losses.append(breakdown.scalars())

        val_m2n, val_n2m = _retrieval_r1(text_cfg, text_params, meas_cfg, meas_params,
                                         val_records, tokenizer, max_window)
        row = {
            "epoch": epoch,
            "lr": lr,
            **{k: float(np.mean([e[k] for e in epoch_losses])) for k in epoch_losses[0]},
            "val_r1_m2n": val_m2n,
            "val_r1_n2m": val_n2m,
            "val_r1_mean": float(np.mean([val_m2n, val_n2m])),
            "wall_seconds": time.monotonic() - t0,
        }
        history.append(row)
        if out_dir is not None:
            with open(out_dir / "log.jsonl", "a") as fh:
                fh.write(json.dumps(row) + "\n")
        done = epoch + 1
        if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            result = snapshot(out_dir / f"checkpoint_epoch{done:04d}.ckpt", done)

    if out_dir is not None:
        result = snapshot(out_dir / "checkpoint_final.ckpt", cfg.epochs)
    if result is None:
        result = PretrainResult(text_cfg, meas_cfg, text_params, meas_params,
                                tokenizer, mean_row, history, cfg)
    return result


# ---------------------------------------------------------------------------
# fine-tuning

@dataclass
class FinetuneConfig:
    task: str = "ihm"                  # "ihm" | "phenotyping"
    epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-4
    head_lr: float = 1e-3              # fresh classifier group
    weight_decay: float = 0.01
    freeze_backbone: bool = False
    dropout: float | None = None       # None keeps the encoder config's rate
    clip_norm: float = 1.0
    seed: int = 0
    ihm_hours: float = 48.0
    max_window_len: int | None = None

    def __post_init__(self):
        if self.task not in ("ihm", "phenotyping"):
            raise ConfigError(f"task must be 'ihm' or 'phenotyping', got {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class FinetuneResult:
    meas_cfg: E.EncoderConfig
    backbone: dict[str, Tensor]
    head: dict[str, Tensor]
    history: list[dict]
    cfg: FinetuneConfig


def task_labels(records: list[D.StayRecord], task: str) -> np.ndarray:
    if task == "ihm":
        missing = [r.stay_id for r in records if r.ihm is None]
        if missing:
            raise ConfigError(f"stays lack mortality labels: {missing[:5]}")
        return np.asarray([[r.ihm] for r in records], dtype=np.float64)
    missing = [r.stay_id for r in records if r.phenotypes is None]
    if missing:
        raise ConfigError(f"stays lack phenotype labels: {missing[:5]}")
    return np.stack([r.phenotypes for r in records]).astype(np.float64)


def _task_window(rec: D.StayRecord, cfg: FinetuneConfig) -> E.MeasurementWindow:
    """Mortality reads the initial hours of the stay; phenotyping the whole stay."""
    values = rec.values
    if cfg.task == "ihm":
        keep = rec.hours <= cfg.ihm_hours
        values = values[keep] if keep.any() else values[:1]
    return E.MeasurementWindow(values)


def _head_logits(features: Tensor, head: dict[str, Tensor]) -> Tensor:
    return S.add(S.matmul(features, head["w"]), head["b"])


def backbone_features(
    meas_cfg: E.EncoderConfig,
    backbone: dict[str, Tensor],
    records: list[D.StayRecord],
    cfg: FinetuneConfig,
    cache: dict | None = None,
) -> np.ndarray:
    """Eval-mode class-state features with deterministic center cropping."""
    max_window = cfg.max_window_len or (meas_cfg.max_seq_len - 1)
    rows = []
    for rec in records:
        if cache is not None and (rec.stay_id, cfg.task) in cache:
            rows.append(cache[(rec.stay_id, cfg.task)])
            continue
        win = D.center_crop(_task_window(rec, cfg), max_window)
        feat = E.encode_measurements(meas_cfg, backbone, win).cls_raw.data
        if cache is not None:
            cache[(rec.stay_id, cfg.task)] = feat
        rows.append(feat)
    return np.stack(rows)


def finetune(
    train_records: list[D.StayRecord],
    cfg: FinetuneConfig,
    meas_cfg: E.EncoderConfig,
    backbone: dict[str, Tensor] | None = None,
    feature_cache: dict | None = None,
) -> FinetuneResult:
    """Train a sigmoid linear head on the measurement class state.

    backbone=None fine-tunes from random initialization. With
    freeze_backbone the encoder is never touched: features are extracted
    once (eval mode, center crop) and only the head trains on them.
    """
    if cfg.dropout is not None:
        meas_cfg = dataclasses.replace(meas_cfg, dropout_rate=cfg.dropout)
    rng_init = named_rng(cfg.seed, "finetune_init")
    rng_order = named_rng(cfg.seed, "finetune_order")
    rng_drop = named_rng(cfg.seed, "finetune_dropout")
    if backbone is None:
        if cfg.freeze_backbone:
            log.warning("finetune: freezing a randomly initialized backbone")
        backbone = E.init_measurement_params(meas_cfg, rng_init)

    labels = task_labels(train_records, cfg.task)
    n_out = labels.shape[1]
    head = {
        "w": S.parameter(E.truncated_normal((meas_cfg.hidden_dim, n_out), rng_init)),
        "b": S.parameter(np.zeros(n_out)),
    }

    opt_params: dict[str, Tensor] = {f"head.{k}": v for k, v in head.items()}
    if not cfg.freeze_backbone:
        opt_params.update({f"backbone.{k}": v for k, v in backbone.items()})
    opt = OptimizerState(
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        group_of={name: ("head" if name.startswith("head.") else "backbone")
                  for name in opt_params},
        group_lr_mult={"head": cfg.head_lr / cfg.lr if cfg.lr > 0 else 1.0,
                       "backbone": 1.0},
    )
    n = len(train_records)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    sched = ScheduleState(base_lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch)
    max_window = cfg.max_window_len or (meas_cfg.max_seq_len - 1)

    frozen_feats = None
    if cfg.freeze_backbone:
        frozen_feats = backbone_features(meas_cfg, backbone, train_records, cfg,
                                         cache=feature_cache)

    history = []
    for epoch in range(cfg.epochs):
        order = rng_order.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            y = labels[idx]
            with GradientTape() as tape:
                if frozen_feats is not None:
                    feats = Tensor(frozen_feats[idx])
                else:
                    outs = []
                    for i in idx:
                        rec = train_records[int(i)]
                        win = D.crop_window(_task_window(rec, cfg), max_window, rng_order)
                        outs.append(E.encode_measurements(
                            meas_cfg, backbone, win, train=True, rng=rng_drop).cls_raw)
                    feats = S.stack_rows(outs)
                loss = S.tmean(S.bce_with_logits(_head_logits(feats, head), y))
            tape.backward(loss)
            grads = {name: tape.grad(p) for name, p in opt_params.items()}
            clip_gradients(grads, cfg.clip_norm)
            lr = cosine_lr(sched)
            new_params = optimizer_step(opt, opt_params, grads, lr=lr)
            sched.current_step += 1
            opt_params = new_params
            head = {k[len("head."):]: v for k, v in opt_params.items()
                    if k.startswith("head.")}
            if not cfg.freeze_backbone:
                backbone = {k[len("backbone."):]: v for k, v in opt_params.items()
                            if k.startswith("backbone.")}
            losses.append(loss.item())
        history.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))})
    return FinetuneResult(meas_cfg=meas_cfg, backbone=backbone, head=head,
                          history=history, cfg=cfg)


def task_scores(
    result: FinetuneResult,
    records: list[D.StayRecord],
    feature_cache: dict | None = None,
) -> np.ndarray:
    """Per-stay sigmoid probabilities from a fine-tuned model (eval mode)."""
    feats = backbone_features(result.meas_cfg, result.backbone, records, result.cfg,
                              cache=feature_cache)
    logits = feats @ result.head["w"].data + result.head["b"].data
    return special.expit(logits)


# ---------------------------------------------------------------------------
# grid search

@dataclass
class GridTrial:
    index: int
    config: dict
    score: float


@dataclass
class GridResult:
    best: GridTrial
    trials: list[GridTrial]

    def table(self) -> list[GridTrial]:
        """Trials sorted by score descending, ties by trial index."""
        return sorted(self.trials, key=lambda t: (-t.score, t.index))


def iter_grid(space: dict[str, list]) -> list[dict]:
    if not space or any(len(v) == 0 for v in space.values()):
        raise ConfigError("grid space must have at least one value per axis")
    keys = list(space)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def grid_search(space: dict[str, list], run_trial: Callable[[dict], float]) -> GridResult:
    """Exhaustive search; argmax of the trial score, ties won by the lowest
    trial index (enumeration order is the cross product of the given lists)."""
    trials = []
    for i, config in enumerate(iter_grid(space)):
        score = float(run_trial(config))
        trials.append(GridTrial(index=i, config=config, score=score))
        log.info("grid trial %d/%d: %s -> %.4f", i + 1, 0, config, score)
    best = max(trials, key=lambda t: (t.score, -t.index))
    return GridResult(best=best, trials=trials)


def pretrain_grid_search(
    train_records,
    val_records,
    base_cfg: TrainRunConfig,
    text_cfg: E.EncoderConfig,
    meas_cfg: E.EncoderConfig,
    space: dict[str, list] | None = None,
    budget_epochs: int = 5,
) -> GridResult:
    """Grid-search pretraining hyperparameters at a small epoch budget,
    scored by mean validation top-1 retrieval recall over both directions."""
    space = space or PRETRAIN_GRID

    def run_trial(config: dict) -> float:
        overrides = dict(config)
        if "weights" in overrides:
            overrides["weights"] = tuple(overrides["weights"])
        cfg = dataclasses.replace(base_cfg, epochs=budget_epochs, **overrides)
        result = pretrain(train_records, val_records, cfg, text_cfg, meas_cfg)
        return result.history[-1]["val_r1_mean"]

    return grid_search(space, run_trial)
