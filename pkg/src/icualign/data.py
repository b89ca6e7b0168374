"""Dataset contract and construction.

Covers: the on-disk stay format (one CSV per stay + notes.csv + labels.csv +
schema.json), benchmark-style ingestion (uniform resampling, forward-fill
imputation with per-feature normal-value fallback, categorical integer
encoding, z-normalization), note pairing rules, per-epoch positive sampling,
window cropping, stratified nested splits, a word-level tokenizer, and a
synthetic paired-stay generator whose notes verbalize the same latent state
that drives the measurements (so cross-modal alignment is learnable without
real data).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import MeasurementWindow, TokenSequence
from .errors import ConfigError, DataError, SchemaError

log = logging.getLogger(__name__)

NUM_PHENOTYPES = 25

RETAINED_NOTE_TYPES = (
    "Echo",
    "ECG",
    "Nursing",
    "Physician",
    "Respiratory",
    "Radiology",
    "Discharge Summary",
)

# types we know exist but deliberately drop; anything else triggers a warning
KNOWN_EXCLUDED_NOTE_TYPES = (
    "Social Work",
    "Case Management",
    "Nutrition",
    "Pharmacy",
    "Rehab Services",
    "General",
)


# ---------------------------------------------------------------------------
# schema and records

@dataclass
class FeatureSpec:
    name: str
    kind: str = "continuous"          # "continuous" | "categorical"
    normal: float = 0.0               # imputation fallback (raw scale)
    categories: list[float] | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise SchemaError(f"unknown feature kind {self.kind!r} for {self.name}")
        if self.kind == "categorical" and not self.categories:
            raise SchemaError(f"categorical feature {self.name} needs categories")


@dataclass
class DatasetSchema:
    features: list[FeatureSpec]
    resample_hours: float = 1.0

    @property
    def num_features(self) -> int:
        return len(self.features)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    def to_dict(self) -> dict:
        return {
            "resample_hours": self.resample_hours,
            "features": [dataclasses.asdict(f) for f in self.features],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        return cls(
            features=[FeatureSpec(**f) for f in d["features"]],
            resample_hours=float(d.get("resample_hours", 1.0)),
        )


@dataclass
class Note:
    note_type: str
    timestamp: float
    text: str


@dataclass
class StayRecord:
    """One ICU stay: its measurement window, notes, and task labels."""

    stay_id: str
    admission_id: str
    hours: np.ndarray
    values: np.ndarray                 # (T, F); NaN marks missing before prepare
    notes: list[Note] = field(default_factory=list)
    ihm: int | None = None
    phenotypes: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def window_bounds(self) -> tuple[float, float]:
        return float(self.hours[0]), float(self.hours[-1])

    @property
    def num_timesteps(self) -> int:
        return self.values.shape[0]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# tokenizer

class WordTokenizer:
    """Lowercase word-level tokenizer with reserved {pad, class, mask, unk} ids.

    Any object exposing encode/vocab_size/mask_token_id works as a drop-in
    replacement; this built-in keeps the artifact self-contained.
    """

    PAD, CLS, MASK, UNK = 0, 1, 2, 3
    RESERVED = ("[pad]", "[cls]", "[mask]", "[unk]")
    _WORD = re.compile(r"[a-z0-9]+")

    def __init__(self, words: list[str]):
        self._words = list(words)
        self._index = {w: i + len(self.RESERVED) for i, w in enumerate(self._words)}

    @classmethod
    def build(cls, texts, min_count: int = 1, max_size: int | None = None) -> "WordTokenizer":
        counts: dict[str, int] = {}
        for text in texts:
            for w in cls._WORD.findall(text.lower()):
                counts[w] = counts.get(w, 0) + 1
        words = sorted((w for w, c in counts.items() if c >= min_count),
                       key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[: max(0, max_size - len(cls.RESERVED))]
        return cls(words)

    @property
    def vocab_size(self) -> int:
        return len(self._words) + len(self.RESERVED)

    @property
    def cls_token_id(self) -> int:
        return self.CLS

    @property
    def mask_token_id(self) -> int:
        return self.MASK

    def encode(self, text: str, max_len: int | None = None) -> TokenSequence:
        ids = [self.CLS]
        for w in self._WORD.findall(text.lower()):
            ids.append(self._index.get(w, self.UNK))
        if max_len is not None:
            ids = ids[:max_len]
        return TokenSequence(np.asarray(ids, dtype=np.int64))

    def has_word(self, word: str) -> bool:
        return word.lower() in self._index

    def to_dict(self) -> dict:
        return {"words": self._words}

    @classmethod
    def from_dict(cls, d: dict) -> "WordTokenizer":
        return cls(d["words"])


# ---------------------------------------------------------------------------
# ingestion

def _resample(hours: np.ndarray, values: np.ndarray, interval: float) -> np.ndarray:
    """Bucket observations into uniform bins, keeping the last value per bin."""
    n_bins = int(math.floor(hours.max() / interval + 1e-9)) + 1
    out = np.full((n_bins, values.shape[1]), np.nan)
    order = np.argsort(hours, kind="stable")
    for idx in order:
        b = int(math.floor(hours[idx] / interval + 1e-9))
        row = values[idx]
        seen = ~np.isnan(row)
        out[b, seen] = row[seen]
    return out


def _impute(values: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Forward fill; leading gaps fall back to the per-feature normal value."""
    out = values.copy()
    for f in range(out.shape[1]):
        col = out[:, f]
        last = np.nan
        for t in range(len(col)):
            if np.isnan(col[t]):
                col[t] = normals[f] if np.isnan(last) else last
            else:
                last = col[t]
    return out


def _encode_categoricals(values: np.ndarray, schema: DatasetSchema) -> np.ndarray:
    out = values.copy()
    for f, spec in enumerate(schema.features):
        if spec.kind != "categorical":
            continue
        cats = np.asarray(spec.categories, dtype=np.float64)
        col = out[:, f]
        # nearest-category snap tolerates float round-trips through CSV
        idx = np.abs(col[:, None] - cats[None, :]).argmin(axis=1)
        out[:, f] = idx.astype(np.float64)
    return out


def compute_norm_stats(records: list[StayRecord]) -> NormStats:
    stacked = np.concatenate([r.values for r in records], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-8)
    return NormStats(mean=mean, std=std)


def prepare_records(
    records: list[StayRecord],
    schema: DatasetSchema,
    stats: NormStats | None = None,
) -> tuple[list[StayRecord], NormStats]:
    """Resample, impute, integer-encode categoricals, and z-normalize.

    stats defaults to statistics of the given records; pass train-split stats
    to normalize validation/test without leakage.
    """
    normals = np.asarray([f.normal for f in schema.features], dtype=np.float64)
    imputed: list[StayRecord] = []
    skipped = 0
    for rec in records:
        if rec.values.shape[0] == 0:
            skipped += 1
            continue
        if rec.values.shape[1] != schema.num_features:
            raise SchemaError(
                f"stay {rec.stay_id}: {rec.values.shape[1]} columns, "
                f"schema has {schema.num_features}")
        vals = _resample(rec.hours, rec.values, schema.resample_hours)
        vals = _impute(vals, normals)
        vals = _encode_categoricals(vals, schema)
        hours = np.arange(vals.shape[0], dtype=np.float64) * schema.resample_hours
        imputed.append(dataclasses.replace(rec, hours=hours, values=vals))
    if skipped:
        log.warning("prepare_records: skipped %d empty stays", skipped)
    if stats is None:
        stats = compute_norm_stats(imputed)
    out = [dataclasses.replace(r, values=(r.values - stats.mean) / stats.std)
           for r in imputed]
    return out, stats


def read_dataset(path) -> tuple[list[StayRecord], DatasetSchema]:
    """Load a raw dataset directory (no imputation or normalization yet)."""
    root = Path(path)
    schema = DatasetSchema.from_dict(json.loads((root / "schema.json").read_text()))

    admission_of: dict[str, str] = {}
    with open(root / "stays.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            admission_of[row["stay_id"]] = row["admission_id"]

    notes_by_admission: dict[str, list[Note]] = {}
    with open(root / "notes.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"admission_id", "note_type", "timestamp", "text"}
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise SchemaError(f"notes.csv missing columns: {sorted(missing)}")
        for row in reader:
            notes_by_admission.setdefault(row["admission_id"], []).append(
                Note(row["note_type"], float(row["timestamp"]), row["text"]))

    labels: dict[str, tuple[int, np.ndarray]] = {}
    with open(root / "labels.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        phen_cols = [c for c in (reader.fieldnames or []) if c.startswith("phen_")]
        for row in reader:
            phen = np.asarray([int(row[c]) for c in phen_cols], dtype=np.int64)
            labels[row["stay_id"]] = (int(row["ihm"]), phen)

    records: list[StayRecord] = []
    skipped = 0
    for stay_file in sorted((root / "stays").glob("*.csv")):
        stay_id = stay_file.stem
        with open(stay_file, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[0] != "hours":
                raise SchemaError(f"{stay_file}: first column must be 'hours'")
            missing_cols = [n for n in schema.feature_names if n not in header[1:]]
            if missing_cols:
                raise SchemaError(f"{stay_file}: missing feature columns {missing_cols}")
            col_of = {name: header.index(name) for name in schema.feature_names}
            hours, rows = [], []
            for raw in reader:
                hours.append(float(raw[0]))
                rows.append([float(raw[col_of[n]]) if raw[col_of[n]] != "" else np.nan
                             for n in schema.feature_names])
        if not rows:
            skipped += 1
            log.warning("read_dataset: stay %s has no rows, skipping", stay_id)
            continue
        admission_id = admission_of.get(stay_id, stay_id)
        ihm, phen = labels.get(stay_id, (None, None))
        records.append(StayRecord(
            stay_id=stay_id,
            admission_id=admission_id,
            hours=np.asarray(hours, dtype=np.float64),
            values=np.asarray(rows, dtype=np.float64),
            notes=list(notes_by_admission.get(admission_id, [])),
            ihm=ihm,
            phenotypes=phen,
        ))
    if skipped:
        log.warning("read_dataset: skipped %d empty stays", skipped)
    return records, schema


def ingest(path, stats: NormStats | None = None):
    """read_dataset followed by prepare_records; returns (records, schema, stats)."""
    records, schema = read_dataset(path)
    records, stats = prepare_records(records, schema, stats)
    return records, schema, stats


# ---------------------------------------------------------------------------
# note pairing and positive sampling

def pair_notes(
    records: list[StayRecord],
    retained_types=RETAINED_NOTE_TYPES,
    on_unknown: str = "drop",
) -> tuple[list[StayRecord], int]:
    """Apply the note retention rules; returns (filtered records, pair count).

    A note survives iff its type is retained AND its timestamp lies inside
    the stay's measurement window (inclusive endpoints) -- except Discharge
    Summary notes, which summarize the whole admission and are always kept.
    """
    if on_unknown not in ("drop", "error"):
        raise ConfigError(f"on_unknown must be 'drop' or 'error', got {on_unknown!r}")
    retained = set(retained_types)
    known = retained | set(KNOWN_EXCLUDED_NOTE_TYPES)
    out: list[StayRecord] = []
    total_pairs = 0
    unknown_seen: set[str] = set()
    for rec in records:
        lo, hi = rec.window_bounds
        kept: list[Note] = []
        for note in rec.notes:
            if note.note_type not in known and note.note_type not in unknown_seen:
                unknown_seen.add(note.note_type)
                if on_unknown == "error":
                    raise DataError(f"unknown note type {note.note_type!r}")
                log.warning("pair_notes: dropping unknown note type %r", note.note_type)
            if note.note_type not in retained:
                continue
            if note.note_type != "Discharge Summary" and not (lo <= note.timestamp <= hi):
                continue
            kept.append(note)
        total_pairs += len(kept)
        out.append(dataclasses.replace(rec, notes=kept))
    return out, total_pairs


def sample_epoch_pairs(
    records: list[StayRecord],
    rng: np.random.Generator,
) -> list[tuple[str, int]]:
    """One uniformly chosen note index per stay; fresh draw each call."""
    pairs: list[tuple[str, int]] = []
    empty = 0
    for rec in records:
        if not rec.notes:
            empty += 1
            continue
        pairs.append((rec.stay_id, int(rng.integers(len(rec.notes)))))
    if empty:
        log.warning("sample_epoch_pairs: excluded %d stays with no retained notes", empty)
    return pairs


def crop_window(win: MeasurementWindow, max_len: int, rng: np.random.Generator) -> MeasurementWindow:
    """Uniformly positioned contiguous slice when the window exceeds max_len."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    if win.num_timesteps <= max_len:
        return win
    start = int(rng.integers(0, win.num_timesteps - max_len + 1))
    return MeasurementWindow(win.values[start:start + max_len])


def center_crop(win: MeasurementWindow, max_len: int) -> MeasurementWindow:
    """Deterministic middle slice; the evaluation-time counterpart of crop_window."""
    if win.num_timesteps <= max_len:
        return win
    start = (win.num_timesteps - max_len) // 2
    return MeasurementWindow(win.values[start:start + max_len])


# ---------------------------------------------------------------------------
# splits

@dataclass
class SplitManifest:
    train: list[str]
    validation: list[str]
    test: list[str]
    fractions: dict[str, list[str]] = field(default_factory=dict)

    def validate(self) -> None:
        tr, va, te = set(self.train), set(self.validation), set(self.test)
        if tr & va or tr & te or va & te:
            raise DataError("split manifest: train/validation/test overlap")
        ordered = sorted(self.fractions, key=lambda k: float(k))
        prev: set[str] = set()
        for key in ordered:
            ids = set(self.fractions[key])
            if not ids <= tr:
                raise DataError(f"fraction {key}% is not a subset of train")
            if not prev <= ids:
                raise DataError(f"fraction manifests are not nested at {key}%")
            prev = ids

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation,
                "test": self.test, "fractions": self.fractions}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(train=list(d["train"]), validation=list(d["validation"]),
                   test=list(d["test"]), fractions={k: list(v) for k, v in
                                                    d.get("fractions", {}).items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _largest_remainder(total: int, ratios) -> list[int]:
    raw = [total * r for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    short = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (raw[i] - counts[i]), reverse=True)
    for i in order[:short]:
        counts[i] += 1
    return counts


def make_splits(
    records: list[StayRecord],
    ratios=(0.70, 0.15, 0.15),
    rng: np.random.Generator | None = None,
    fractions=(0.01, 0.10, 0.50),
) -> SplitManifest:
    """Disjoint stratified train/validation/test splits plus nested,
    label-stratified train subsets at the given label fractions."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    rng = rng or np.random.default_rng(0)
    n = len(records)
    targets = _largest_remainder(n, ratios)

    strata: dict[object, list[str]] = {}
    for rec in records:
        key = rec.ihm if rec.ihm is not None else "unlabeled"
        strata.setdefault(key, []).append(rec.stay_id)
    for ids in strata.values():
        rng.shuffle(ids)

    # controlled rounding: per-stratum floor allocation, then hand the
    # leftover units to splits that are still short, largest fraction first
    alloc: dict[object, list[int]] = {}
    leftovers: list[tuple[float, object, int]] = []
    deficits = list(targets)
    for key, ids in strata.items():
        base = [int(math.floor(len(ids) * r)) for r in ratios]
        alloc[key] = base
        for s in range(len(ratios)):
            deficits[s] -= base[s]
            leftovers.append((len(ids) * ratios[s] - base[s], key, s))
    remaining = {key: len(ids) - sum(alloc[key]) for key, ids in strata.items()}
    for _, key, s in sorted(leftovers, key=lambda t: -t[0]):
        if remaining[key] > 0 and deficits[s] > 0:
            alloc[key][s] += 1
            remaining[key] -= 1
            deficits[s] -= 1
    for key in strata:                      # mop up any unmatched pairs
        while remaining[key] > 0:
            s = next(i for i, d in enumerate(deficits) if d > 0)
            alloc[key][s] += 1
            remaining[key] -= 1
            deficits[s] -= 1

    splits: list[list[str]] = [[], [], []]
    for key, ids in strata.items():
        cursor = 0
        for s, count in enumerate(alloc[key]):
            splits[s].extend(ids[cursor:cursor + count])
            cursor += count
    train, validation, test = (sorted(s) for s in splits)

    # nested label fractions: per-class shuffled pools, prefix sampling
    by_class: dict[object, list[str]] = {}
    label_of = {rec.stay_id: (rec.ihm if rec.ihm is not None else "unlabeled")
                for rec in records}
    for sid in train:
        by_class.setdefault(label_of[sid], []).append(sid)
    for ids in by_class.values():
        rng.shuffle(ids)
    frac_manifests: dict[str, list[str]] = {}
    for frac in sorted(fractions):
        chosen: list[str] = []
        for key, ids in sorted(by_class.items(), key=lambda kv: str(kv[0])):
            want = math.ceil(frac * len(ids))
            if frac * len(ids) < 1:
                log.warning(
                    "make_splits: fraction %.0f%% under-represents class %s; "
                    "keeping one stay", 100 * frac, key)
            chosen.extend(ids[:max(1, want)])
        frac_manifests[str(round(frac * 100))] = sorted(chosen)
    frac_manifests["100"] = list(train)

    manifest = SplitManifest(train=train, validation=validation, test=test,
                             fractions=frac_manifests)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# synthetic paired-stay generator

SEVERITY_DIRECTION = {
    "heart_rate": 1.0,
    "systolic_bp": -1.0,
    "diastolic_bp": -0.8,
    "mean_bp": -0.9,
    "respiratory_rate": 1.0,
    "oxygen_saturation": -1.0,
    "temperature": 0.8,
    "glucose": 0.7,
    "ph": -0.8,
    "fio2": 1.0,
    "height": 0.0,
    "weight": 0.0,
}

_CONTINUOUS = [
    # name, normal, scale
    ("heart_rate", 86.0, 18.0),
    ("systolic_bp", 118.0, 16.0),
    ("diastolic_bp", 62.0, 11.0),
    ("mean_bp", 78.0, 12.0),
    ("respiratory_rate", 19.0, 5.0),
    ("oxygen_saturation", 98.0, 3.0),
    ("temperature", 37.0, 0.8),
    ("glucose", 128.0, 35.0),
    ("ph", 7.4, 0.08),
    ("fio2", 0.21, 0.2),
    ("height", 170.0, 12.0),
    ("weight", 81.0, 18.0),
]

_CATEGORICAL = [
    # name, normal, categories
    ("capillary_refill", 0.0, [0.0, 1.0]),
    ("gcs_eye", 4.0, [1.0, 2.0, 3.0, 4.0]),
    ("gcs_motor", 6.0, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
    ("gcs_verbal", 5.0, [1.0, 2.0, 3.0, 4.0, 5.0]),
    ("gcs_total", 15.0, [float(v) for v in range(3, 16)]),
]

PHENOTYPE_WORDS = [
    "sepsis", "pneumonia", "asthma", "arrhythmia", "hypertension",
    "diabetes", "stroke", "anemia", "copd", "cirrhosis",
    "nephritis", "pancreatitis", "embolism", "meningitis", "seizure",
    "fracture", "hemorrhage", "ischemia", "edema", "delirium",
    "hypotension", "bradycardia", "tachycardia", "hypoxemia", "oliguria",
]


def default_schema() -> DatasetSchema:
    features = [FeatureSpec(name, "continuous", normal) for name, normal, _ in _CONTINUOUS]
    features += [FeatureSpec(name, "categorical", normal, categories=list(cats))
                 for name, normal, cats in _CATEGORICAL]
    return DatasetSchema(features=features)


@dataclass
class SyntheticConfig:
    """Knobs of the synthetic world: stay-length and note-count distributions,
    missingness, trajectory shape, label thresholds, and note vocabulary."""

    min_hours: int = 24
    max_hours: int = 48
    max_notes: int = 4
    missing_rate: float = 0.04
    excluded_note_rate: float = 0.12
    out_of_window_rate: float = 0.15
    ihm_threshold: float = 0.72
    phen_base_rate: float = 0.08
    phen_severity_gain: float = 0.30
    noise_scale: float = 0.10
    static_offset_scale: float = 0.6
    sin_amp: float = 0.25
    feature_mentions: int = 6
    severity_band_words: tuple = ("stable", "improving", "serious", "critical")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["severity_band_words"] = list(self.severity_band_words)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "severity_band_words" in d:
            d["severity_band_words"] = tuple(d["severity_band_words"])
        return cls(**d)

    def severity_band(self, severity: float) -> str:
        idx = min(len(self.severity_band_words) - 1,
                  int(severity * len(self.severity_band_words)))
        return self.severity_band_words[idx]


def _level_word(z: float) -> str:
    if z > 1.6:
        return "severely elevated"
    if z > 0.8:
        return "very high"
    if z > 0.3:
        return "high"
    if z < -1.6:
        return "severely depressed"
    if z < -0.8:
        return "very low"
    if z < -0.3:
        return "low"
    return "normal"


NOTE_TYPE_WORDS = {
    "Echo": "echo exam",
    "ECG": "ecg tracing",
    "Nursing": "nursing assessment",
    "Physician": "physician progress",
    "Respiratory": "respiratory therapy",
    "Radiology": "radiology impression",
    "Discharge Summary": "discharge summary",
}


def _note_text(
    cfg: SyntheticConfig,
    note_type: str,
    severity: float,
    active_phens: list[int],
    mention_levels: list[tuple[str, float]],
    disposition: str | None,
) -> str:
    """Deterministic verbalization of the stay's latent state; only the
    note-type header varies across a stay's notes."""
    parts = [NOTE_TYPE_WORDS.get(note_type, "progress note"),
             f"patient condition {cfg.severity_band(severity)}"]
    for name, z in mention_levels:
        parts.append(f"{name.replace('_', ' ')} {_level_word(z)}")
    if active_phens:
        parts.append(" ".join(PHENOTYPE_WORDS[j] for j in active_phens) + " noted")
    if disposition:
        parts.append(disposition)
    return " . ".join(parts)


def generate_synthetic(
    n_stays: int,
    rng: np.random.Generator,
    cfg: SyntheticConfig | None = None,
) -> tuple[list[StayRecord], DatasetSchema]:
    """Sample paired stays from a latent clinical state.

    Each stay draws a severity scalar and a phenotype subset; measurements
    are noisy trajectories conditioned on that state and the notes verbalize
    the same state (severity band, phenotype names, per-feature level words,
    and an outcome phrase in the discharge summary). The mortality label is
    a threshold on severity, so alignment, reconstruction, and the
    downstream tasks are all learnable from the generated data alone.
    """
    if n_stays < 2:
        raise ConfigError(f"need at least 2 stays, got {n_stays}")
    cfg = cfg or SyntheticConfig()
    schema = default_schema()
    names = schema.feature_names
    n_feat = schema.num_features

    # world parameters shared by every stay in the dataset
    phen_effect = rng.normal(0.0, 0.35, size=(NUM_PHENOTYPES, n_feat))
    phen_effect *= rng.random((NUM_PHENOTYPES, n_feat)) < 0.25
    phen_weight = rng.random(NUM_PHENOTYPES)
    periods = rng.uniform(8.0, 30.0, size=n_feat)

    scale_of = {name: scale for name, _, scale in _CONTINUOUS}
    normal_of = {f.name: f.normal for f in schema.features}
    sev_dir = np.asarray([SEVERITY_DIRECTION.get(n, 0.0) for n in names])

    in_window_types = [t for t in RETAINED_NOTE_TYPES if t != "Discharge Summary"]
    records: list[StayRecord] = []
    for i in range(n_stays):
        severity = float(rng.random())
        active = [j for j in range(NUM_PHENOTYPES)
                  if rng.random() < cfg.phen_base_rate + cfg.phen_severity_gain
                  * severity * phen_weight[j]]
        phen_vec = np.zeros(NUM_PHENOTYPES, dtype=np.int64)
        phen_vec[active] = 1
        ihm = int(severity > cfg.ihm_threshold)

        T = int(rng.integers(cfg.min_hours, cfg.max_hours + 1))
        t_axis = np.arange(T, dtype=np.float64)
        phase = rng.uniform(0, 2 * np.pi, size=n_feat)
        drift = rng.normal(0.0, 0.25, size=n_feat)
        static_offset = rng.normal(0.0, cfg.static_offset_scale, size=n_feat)
        phen_shift = phen_effect[active].sum(axis=0) if active else np.zeros(n_feat)

        z = (0.9 * sev_dir[None, :] * (2 * severity - 1)
             + 0.4 * phen_shift[None, :]
             + static_offset[None, :]
             + cfg.sin_amp * np.sin(2 * np.pi * t_axis[:, None] / periods[None, :] + phase[None, :])
             + drift[None, :] * (t_axis[:, None] / max(T - 1, 1) - 0.5)
             + cfg.noise_scale * rng.normal(size=(T, n_feat)))

        values = np.zeros((T, n_feat))
        for f, name in enumerate(names):
            if name in scale_of:                      # continuous
                values[:, f] = normal_of[name] + scale_of[name] * z[:, f]
            else:                                     # categorical, severity-coupled
                spec = schema.features[f]
                lo, hi = spec.categories[0], spec.categories[-1]
                center = hi - (hi - lo) * (0.65 * severity + 0.1 * (z[:, f] - z[:, f].mean()))
                values[:, f] = np.clip(np.round(center), lo, hi)
        values[:, names.index("oxygen_saturation")] = np.minimum(
            values[:, names.index("oxygen_saturation")], 100.0)
        values[:, names.index("fio2")] = np.clip(values[:, names.index("fio2")], 0.21, 1.0)
        # height/weight are admission constants
        for static in ("height", "weight"):
            f = names.index(static)
            values[:, f] = values[0, f]

        if cfg.missing_rate > 0:
            holes = rng.random(values.shape) < cfg.missing_rate
            values = np.where(holes, np.nan, values)

        feature_levels = []
        for f, name in enumerate(names):
            if name in scale_of and scale_of[name] > 0:
                col = values[:, f]
                col = col[~np.isnan(col)]
                mean = col.mean() if len(col) else normal_of[name]
                feature_levels.append((name, (mean - normal_of[name]) / scale_of[name]))
        # every note of a stay describes the same feature subset, so all of a
        # stay's notes carry consistent measurement-grounded content
        mentions = min(cfg.feature_mentions, len(feature_levels))
        picked = rng.choice(len(feature_levels), size=mentions, replace=False)
        mention_levels = [feature_levels[int(idx)] for idx in np.sort(picked)]

        notes: list[Note] = []
        n_notes = int(rng.integers(1, cfg.max_notes + 1))
        for _ in range(n_notes):
            if rng.random() < cfg.excluded_note_rate:
                ntype = str(rng.choice(KNOWN_EXCLUDED_NOTE_TYPES))
            else:
                ntype = str(rng.choice(in_window_types))
            if rng.random() < cfg.out_of_window_rate:
                ts = float(T - 1 + rng.uniform(1.0, 24.0))
            else:
                ts = float(rng.uniform(0, T - 1))
            notes.append(Note(ntype, ts, _note_text(
                cfg, ntype, severity, active, mention_levels, disposition=None)))
        disposition = ("patient deceased" if ihm
                       else "patient discharged home today")
        notes.append(Note("Discharge Summary", float(T - 1 + rng.uniform(1.0, 24.0)),
                          _note_text(cfg, "Discharge Summary", severity, active,
                                     mention_levels, disposition=disposition)))

        records.append(StayRecord(
            stay_id=f"stay{i:05d}",
            admission_id=f"adm{i:05d}",
            hours=t_axis,
            values=values,
            notes=notes,
            ihm=ihm,
            phenotypes=phen_vec,
            meta={"severity": severity},
        ))
    return records, schema


# ---------------------------------------------------------------------------
# on-disk dataset round trip

def _fmt(x: float) -> str:
    return "" if np.isnan(x) else f"{x:.10g}"


def write_dataset(out_dir, records: list[StayRecord], schema: DatasetSchema) -> None:
    root = Path(out_dir)
    (root / "stays").mkdir(parents=True, exist_ok=True)
    (root / "schema.json").write_text(json.dumps(schema.to_dict(), indent=2))

    ordered = sorted(records, key=lambda r: r.stay_id)
    with open(root / "stays.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stay_id", "admission_id"])
        for rec in ordered:
            writer.writerow([rec.stay_id, rec.admission_id])

    for rec in ordered:
        with open(root / "stays" / f"{rec.stay_id}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["hours"] + schema.feature_names)
            for t in range(rec.num_timesteps):
                writer.writerow([_fmt(rec.hours[t])] + [_fmt(v) for v in rec.values[t]])

    with open(root / "notes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["admission_id", "note_type", "timestamp", "text"])
        for rec in ordered:
            for note in rec.notes:
                writer.writerow([rec.admission_id, note.note_type,
                                 _fmt(note.timestamp), note.text])

    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stay_id", "ihm"] + [f"phen_{j + 1:02d}" for j in range(NUM_PHENOTYPES)])
        for rec in ordered:
            phen = rec.phenotypes if rec.phenotypes is not None else np.zeros(NUM_PHENOTYPES, int)
            writer.writerow([rec.stay_id, rec.ihm if rec.ihm is not None else 0]
                            + [int(v) for v in phen])


# ---------------------------------------------------------------------------
# full pipeline entry point

@dataclass
class PreparedDataset:
    records: list[StayRecord]
    schema: DatasetSchema
    manifest: SplitManifest
    by_split: dict[str, list[StayRecord]]
    stats: NormStats
    num_pairs: int


def load_prepared_dataset(path) -> PreparedDataset:
    """Read a dataset directory and run the full preparation pipeline:
    impute/encode, z-normalize with train-split statistics only, apply the
    note retention rules, and bucket records by split."""
    root = Path(path)
    records, schema = read_dataset(root)
    manifest = SplitManifest.load(root / "splits.json")
    manifest.validate()
    train_ids = set(manifest.train)
    train_raw = [r for r in records if r.stay_id in train_ids]
    if not train_raw:
        raise SchemaError(f"{root}: no stays belong to the train split")
    _, stats = prepare_records(train_raw, schema)
    records, _ = prepare_records(records, schema, stats)
    records, num_pairs = pair_notes(records)
    by_id = {r.stay_id: r for r in records}
    by_split = {
        "train": [by_id[s] for s in manifest.train if s in by_id],
        "validation": [by_id[s] for s in manifest.validation if s in by_id],
        "test": [by_id[s] for s in manifest.test if s in by_id],
    }
    return PreparedDataset(records=records, schema=schema, manifest=manifest,
                           by_split=by_split, stats=stats, num_pairs=num_pairs)


# ---------------------------------------------------------------------------
# batching

@dataclass
class PairBatch:
    """Aligned positive pairs: windows[i] and notes[i] come from stay_ids[i]."""

    windows: list[MeasurementWindow]
    notes: list[TokenSequence]
    stay_ids: list[str]

    def __len__(self) -> int:
        return len(self.stay_ids)


def build_pair_batch(
    records_by_id: dict[str, StayRecord],
    pairs: list[tuple[str, int]],
    tokenizer,
    max_seq_len: int,
    max_window_len: int,
    rng: np.random.Generator,
) -> PairBatch:
    windows, notes, stay_ids = [], [], []
    for stay_id, note_idx in pairs:
        rec = records_by_id[stay_id]
        win = crop_window(MeasurementWindow(rec.values), max_window_len, rng)
        windows.append(win)
        notes.append(tokenizer.encode(rec.notes[note_idx].text, max_len=max_seq_len))
        stay_ids.append(stay_id)
    return PairBatch(windows=windows, notes=notes, stay_ids=stay_ids)
