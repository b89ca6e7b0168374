"""Evaluation protocols and their metrics.

Cross-modal retrieval recall@k, AUC-ROC (rank formulation, half credit for
ties), average precision, macro/micro AUC for multi-label phenotyping,
zero-shot mortality scoring against anchor phrases, linear probing of frozen
embeddings, and the semi-supervised label-fraction comparison.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import encoders as E
from . import substrate as S
from .errors import ConfigError, UndefinedMetricError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metric primitives

def auc_roc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties get
    half credit (rank / Mann-Whitney formulation)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC-ROC needs both classes, got {n_pos} positives / {n_neg} negatives")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average rank, 1-based
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_pr(scores, labels) -> float:
    """Average precision: mean, over positives in score-descending order, of
    precision at each positive's rank. Ties keep stable input order."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if int((labels == 1).sum()) == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            total += hits / rank
    return total / hits


def macro_micro_auc(scores, labels) -> tuple[float, float]:
    """Per-label mean AUC (degenerate columns excluded with a warning) and
    AUC over all (score, label) pairs flattened."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ConfigError(f"scores/labels must share (n, L) shape, got "
                          f"{scores.shape} vs {labels.shape}")
    per_label = []
    skipped = []
    for j in range(scores.shape[1]):
        col = labels[:, j]
        if (col == 1).any() and (col == 0).any():
            per_label.append(auc_roc(scores[:, j], col))
        else:
            skipped.append(j)
    if skipped:
        log.warning("macro AUC: excluded %d single-class label columns: %s",
                    len(skipped), skipped)
    if not per_label:
        raise UndefinedMetricError("all label columns are single-class")
    macro = float(np.mean(per_label))
    micro = auc_roc(scores.ravel(), labels.ravel())
    return macro, micro


@dataclass
class RetrievalIndex:
    """Unit-norm query/candidate embeddings with multi-positive ground truth."""

    queries: np.ndarray
    candidates: np.ndarray
    positives: list[set[int]]

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.candidates = np.asarray(self.candidates, dtype=np.float64)
        if len(self.positives) != self.queries.shape[0]:
            raise ConfigError("one positive set required per query")
        if any(len(p) == 0 for p in self.positives):
            raise ConfigError("every query needs at least one correct candidate")


def recall_at_k(index: RetrievalIndex, k: int) -> float:
    """Percent of queries whose top-k by cosine similarity hits a correct
    candidate. Descending order with stable tie-break by candidate index."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    n_candidates = index.candidates.shape[0]
    if k > n_candidates:
        log.warning("recall_at_k: k=%d exceeds %d candidates; clamping", k, n_candidates)
        k = n_candidates
    sims = index.queries @ index.candidates.T
    hits = 0
    for q in range(sims.shape[0]):
        top = np.argsort(-sims[q], kind="stable")[:k]
        if index.positives[q].intersection(top.tolist()):
            hits += 1
    return 100.0 * hits / sims.shape[0]


# ---------------------------------------------------------------------------
# reports

def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    n_samples: int
    config_fingerprint: str = ""
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=str)


# ---------------------------------------------------------------------------
# embedding extraction

def encode_stay_windows(
    meas_cfg: E.EncoderConfig,
    meas_params,
    windows: list[E.MeasurementWindow],
) -> np.ndarray:
    return np.stack([
        E.encode_measurements(meas_cfg, meas_params, w).cls_aligned.data
        for w in windows])


def encode_texts(
    text_cfg: E.EncoderConfig,
    text_params,
    tokenizer,
    texts: list[str],
) -> np.ndarray:
    rows = []
    for text in texts:
        seq = tokenizer.encode(text, max_len=text_cfg.max_seq_len)
        if np.any(seq.token_ids == tokenizer.UNK):
            log.warning("encode_texts: unknown words in %r mapped to the "
                        "unknown token", text)
        rows.append(E.encode_text(text_cfg, text_params, seq).cls_aligned.data)
    return np.stack(rows)


def build_retrieval_indices(
    records: list[D.StayRecord],
    result,
    max_window_len: int | None = None,
    single_positive: bool = False,
) -> tuple[RetrievalIndex, RetrievalIndex]:
    """Embed every stay window and every retained note; returns the
    (measurement->note, note->measurement) index pair.

    Ground truth is any note of the same stay unless single_positive, which
    keeps only each stay's first note as correct (and as the sole candidate
    per stay in the note pool).
    """
    usable = [r for r in records if r.notes]
    max_window = max_window_len or (result.meas_cfg.max_seq_len - 1)
    windows = [D.center_crop(E.MeasurementWindow(r.values), max_window) for r in usable]
    m_embeds = encode_stay_windows(result.meas_cfg, result.meas_params, windows)

    note_texts, note_owner = [], []
    for i, rec in enumerate(usable):
        notes = rec.notes[:1] if single_positive else rec.notes
        for note in notes:
            note_texts.append(note.text)
            note_owner.append(i)
    t_embeds = encode_texts(result.text_cfg, result.text_params, result.tokenizer,
                            note_texts)
    owner = np.asarray(note_owner)
    note_sets = [set(np.flatnonzero(owner == i).tolist()) for i in range(len(usable))]
    m2n = RetrievalIndex(queries=m_embeds, candidates=t_embeds, positives=note_sets)
    n2m = RetrievalIndex(queries=t_embeds, candidates=m_embeds,
                         positives=[{int(owner[j])} for j in range(len(note_texts))])
    return m2n, n2m


def retrieval_report(
    records: list[D.StayRecord],
    result,
    ks=(1, 5, 10),
    max_window_len: int | None = None,
    single_positive: bool = False,
) -> EvalReport:
    m2n, n2m = build_retrieval_indices(records, result, max_window_len,
                                       single_positive)
    metrics = {}
    for k in ks:
        metrics[f"m2n_recall@{k}"] = recall_at_k(m2n, k)
        metrics[f"n2m_recall@{k}"] = recall_at_k(n2m, k)
    return EvalReport(task="retrieval", metrics=metrics,
                      n_samples=len(m2n.positives),
                      config_fingerprint=config_fingerprint(
                          {"ks": list(ks), "single_positive": single_positive}))


# ---------------------------------------------------------------------------
# zero-shot mortality

DEFAULT_ANCHORS = ("patient deceased", "discharged today")


def zero_shot_probabilities(
    result,
    windows: list[E.MeasurementWindow],
    anchors: tuple[str, str] = DEFAULT_ANCHORS,
) -> np.ndarray:
    """P(first anchor) per window: softmax (temperature 1) over the cosine
    similarities between the window embedding and the two anchor embeddings."""
    anchor_embeds = encode_texts(result.text_cfg, result.text_params,
                                 result.tokenizer, list(anchors))
    m_embeds = encode_stay_windows(result.meas_cfg, result.meas_params, windows)
    sims = m_embeds @ anchor_embeds.T                      # (n, 2) cosines
    probs = S.softmax(S.Tensor(sims), axis=-1).data
    return probs[:, 0]


def zero_shot_ihm(
    result,
    records: list[D.StayRecord],
    anchors: tuple[str, str] = DEFAULT_ANCHORS,
    ihm_hours: float = 48.0,
    max_window_len: int | None = None,
) -> EvalReport:
    """Label-free mortality scoring against two anchor phrases, where the
    first anchor names the positive (deceased) class."""
    if len(anchors) != 2:
        raise ConfigError(f"zero-shot needs exactly 2 anchor phrases, got {len(anchors)}")
    labeled = [r for r in records if r.ihm is not None]
    max_window = max_window_len or (result.meas_cfg.max_seq_len - 1)
    windows = []
    for rec in labeled:
        keep = rec.hours <= ihm_hours
        values = rec.values[keep] if keep.any() else rec.values[:1]
        windows.append(D.center_crop(E.MeasurementWindow(values), max_window))
    probs = zero_shot_probabilities(result, windows, anchors)
    labels = np.asarray([r.ihm for r in labeled])
    return EvalReport(
        task="zero_shot_ihm",
        metrics={"auc_roc": auc_roc(probs, labels), "auc_pr": auc_pr(probs, labels)},
        n_samples=len(labeled),
        config_fingerprint=config_fingerprint({"anchors": list(anchors)}),
        extras={"anchors": list(anchors)},
    )


# ---------------------------------------------------------------------------
# linear probe

def _task_report(task: str, scores: np.ndarray, labels: np.ndarray,
                 fingerprint: str, extras: dict | None = None) -> EvalReport:
    if task == "ihm":
        metrics = {"auc_roc": auc_roc(scores[:, 0], labels[:, 0]),
                   "auc_pr": auc_pr(scores[:, 0], labels[:, 0])}
    else:
        macro, micro = macro_micro_auc(scores, labels)
        metrics = {"macro_auc_roc": macro, "micro_auc_roc": micro}
    return EvalReport(task=task, metrics=metrics, n_samples=len(labels),
                      config_fingerprint=fingerprint, extras=extras or {})


def linear_eval(
    result,
    task: str,
    records_by_split: dict[str, list[D.StayRecord]],
    grid: dict[str, list] | None = None,
    base_cfg=None,
    seed: int = 0,
) -> EvalReport:
    """Train a linear classifier on the frozen pretrained encoder.

    Searches the (batch size, epochs, learning rate) grid, selects by
    validation loss, and reports test metrics for the selected trial.
    Frozen features are extracted once and shared across trials.
    """
    from . import train as T

    grid = grid or T.LINEAR_EVAL_GRID
    base_cfg = base_cfg or T.FinetuneConfig(task=task, freeze_backbone=True, seed=seed)
    if not base_cfg.freeze_backbone:
        raise ConfigError("linear evaluation requires freeze_backbone")
    train_records = records_by_split["train"]
    val_records = records_by_split["validation"]
    test_records = records_by_split["test"]

    cache: dict = {}
    val_labels = T.task_labels(val_records, task)

    trials_cfg: list = []

    def run_trial(config: dict) -> float:
        cfg = dataclasses.replace(base_cfg, task=task, freeze_backbone=True, **config)
        fit = T.finetune(train_records, cfg, result.meas_cfg,
                         backbone=result.meas_params, feature_cache=cache)
        val_scores = T.task_scores(fit, val_records, feature_cache=cache)
        eps = 1e-12
        val_loss = float(-np.mean(val_labels * np.log(val_scores + eps)
                                  + (1 - val_labels) * np.log(1 - val_scores + eps)))
        trials_cfg.append((config, val_loss, fit))
        return -val_loss                      # grid search maximizes

    search = T.grid_search(grid, run_trial)
    best_config, best_loss, best_fit = trials_cfg[search.best.index]
    test_scores = T.task_scores(best_fit, test_records, feature_cache=cache)
    report = _task_report(task, test_scores, T.task_labels(test_records, task),
                          config_fingerprint({"grid": {k: list(v) for k, v in grid.items()},
                                              "seed": seed}),
                          extras={"selected_config": best_config,
                                  "validation_loss": best_loss})
    return report


# ---------------------------------------------------------------------------
# semi-supervised comparison

@dataclass
class SemiSupervisedResult:
    rows: list[dict]       # one per (init, fraction, seed)
    summary: list[dict]    # mean/std per (init, fraction)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0].keys()))
            writer.writeheader()
            writer.writerows(self.rows)

    def mean_metric(self, init: str, fraction: str, metric: str) -> float:
        for row in self.summary:
            if row["init"] == init and row["fraction"] == fraction:
                return row[f"{metric}_mean"]
        raise KeyError((init, fraction, metric))


def semi_supervised_eval(
    task: str,
    records_by_split: dict[str, list[D.StayRecord]],
    manifest: D.SplitManifest,
    meas_cfg: E.EncoderConfig,
    pretrained_params=None,
    fractions=("1", "10", "50", "100"),
    repeats: int = 5,
    base_cfg=None,
    random_init_cfg=None,
    seed: int = 0,
) -> SemiSupervisedResult:
    """Fine-tune at each label fraction from the pretrained checkpoint and
    from random init, aggregating mean/std of the test metrics over seeds.

    The random-init arm may use its own config (more epochs is the usual
    concession to training from scratch).
    """
    from . import train as T

    base_cfg = base_cfg or T.FinetuneConfig(task=task)
    random_init_cfg = random_init_cfg or base_cfg
    train_by_id = {r.stay_id: r for r in records_by_split["train"]}
    test_records = records_by_split["test"]
    test_labels = T.task_labels(test_records, task)

    arms = []
    if pretrained_params is not None:
        arms.append(("pretrained", base_cfg, pretrained_params))
    arms.append(("random", random_init_cfg, None))

    rows = []
    for fraction in fractions:
        if fraction not in manifest.fractions:
            raise ConfigError(f"manifest lacks the {fraction}% label fraction")
        ids = manifest.fractions[fraction]
        subset = [train_by_id[sid] for sid in ids if sid in train_by_id]
        labels = T.task_labels(subset, task)
        if task == "ihm" and (labels.min() == labels.max()):
            log.warning("semi-supervised: fraction %s%% has a single class; "
                        "proceeding anyway", fraction)
        for arm, cfg, init_params in arms:
            for rep in range(repeats):
                run_cfg = dataclasses.replace(cfg, task=task, seed=seed + 1000 * rep)
                fit = T.finetune(subset, run_cfg, meas_cfg, backbone=init_params)
                scores = T.task_scores(fit, test_records)
                report = _task_report(task, scores, test_labels, fingerprint="")
                rows.append({"init": arm, "fraction": fraction, "seed": run_cfg.seed,
                             "n_train": len(subset), **report.metrics})

    summary = []
    metric_names = [k for k in rows[0] if k not in ("init", "fraction", "seed", "n_train")]
    for fraction in fractions:
        for arm, _, _ in arms:
            group = [r for r in rows if r["init"] == arm and r["fraction"] == fraction]
            entry = {"init": arm, "fraction": fraction, "repeats": len(group)}
            for metric in metric_names:
                vals = np.asarray([g[metric] for g in group])
                entry[f"{metric}_mean"] = float(vals.mean())
                entry[f"{metric}_std"] = float(vals.std())
            summary.append(entry)
    return SemiSupervisedResult(rows=rows, summary=summary)
