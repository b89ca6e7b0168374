"""Modality-specific transformer encoders and their projection heads.

Both encoders share the same pre-norm transformer stack (self-attention +
GELU feed-forward, residual connections, final layer norm). They differ only
in how positions enter:

* text: learned token embeddings + learned positional embeddings; position 0
  carries a reserved class token id.
* measurements: a learned linear map embeds each timestep, a learned class
  vector is prepended, and fixed sinusoidal positional encodings are added.

Each forward returns the final hidden states, the raw class state, its
unit-normalized projection into the shared alignment space, and per-position
reconstruction logits/values for the masked-prediction losses.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import substrate as S
from .errors import CheckpointError, ConfigError, DataError, SequenceLengthError
from .substrate import Tensor

CHECKPOINT_MAGIC = b"ICAL"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    """Architecture hyperparameters for one encoder.

    vocab_size is set for the text encoder, num_features for the measurement
    encoder. proj_dim defaults to hidden_dim; the feed-forward inner width is
    fixed at 4x hidden_dim.
    """

    num_layers: int = 8
    hidden_dim: int = 128
    num_heads: int = 8
    max_seq_len: int = 256
    dropout_rate: float = 0.0
    init_std: float = 0.02
    vocab_size: int | None = None
    num_features: int | None = None
    proj_dim: int | None = None

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.proj_dim is None:
            self.proj_dim = self.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def ff_dim(self) -> int:
        return 4 * self.hidden_dim


@dataclass
class TokenSequence:
    """Token ids with the reserved class token at position 0."""

    token_ids: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.token_ids.ndim != 1 or len(self.token_ids) < 1:
            raise DataError("token_ids must be a non-empty 1-D index array")

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class MeasurementWindow:
    """A (T x F) block of z-normalized measurements at uniform spacing."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"measurement window must be (T, F) with T >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("measurement window contains non-finite values")

    @property
    def num_timesteps(self) -> int:
        return self.values.shape[0]

    @property
    def num_features(self) -> int:
        return self.values.shape[1]


@dataclass
class EncoderOutput:
    hidden: Tensor        # (seq_len, hidden_dim) final-layer states
    cls_raw: Tensor       # (hidden_dim,) class state before projection
    cls_aligned: Tensor   # (proj_dim,) unit-norm alignment embedding
    recon: Tensor         # (seq_len, vocab_size) or (seq_len, num_features)


def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    """Fixed sin/cos positional table: sin at even dims, cos at odd dims."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal positional dim must be even, got {dim}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((max_len, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def truncated_normal(shape, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with resampling outside 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def _init_block(params: dict, prefix: str, cfg: EncoderConfig, rng) -> None:
    d, f, std = cfg.hidden_dim, cfg.ff_dim, cfg.init_std
    params[prefix + "ln1.gain"] = S.parameter(np.ones(d))
    params[prefix + "ln1.bias"] = S.parameter(np.zeros(d))
    for name in ("wq", "wk", "wv", "wo"):
        params[prefix + f"attn.{name}"] = S.parameter(truncated_normal((d, d), rng, std))
        params[prefix + f"attn.b{name[1]}"] = S.parameter(np.zeros(d))
    params[prefix + "ln2.gain"] = S.parameter(np.ones(d))
    params[prefix + "ln2.bias"] = S.parameter(np.zeros(d))
    params[prefix + "ff.w1"] = S.parameter(truncated_normal((d, f), rng, std))
    params[prefix + "ff.b1"] = S.parameter(np.zeros(f))
    params[prefix + "ff.w2"] = S.parameter(truncated_normal((f, d), rng, std))
    params[prefix + "ff.b2"] = S.parameter(np.zeros(d))


def _init_common(params: dict, cfg: EncoderConfig, rng, recon_dim: int) -> None:
    d, std = cfg.hidden_dim, cfg.init_std
    for i in range(cfg.num_layers):
        _init_block(params, f"block{i}.", cfg, rng)
    params["final_ln.gain"] = S.parameter(np.ones(d))
    params["final_ln.bias"] = S.parameter(np.zeros(d))
    params["align_proj.w"] = S.parameter(truncated_normal((d, cfg.proj_dim), rng, std))
    params["align_proj.b"] = S.parameter(np.zeros(cfg.proj_dim))
    params["recon_proj.w"] = S.parameter(truncated_normal((d, recon_dim), rng, std))
    params["recon_proj.b"] = S.parameter(np.zeros(recon_dim))


def init_text_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    if cfg.vocab_size is None:
        raise ConfigError("text encoder requires vocab_size")
    params: dict[str, Tensor] = {}
    params["token_embed"] = S.parameter(
        truncated_normal((cfg.vocab_size, cfg.hidden_dim), rng, cfg.init_std))
    params["pos_embed"] = S.parameter(
        truncated_normal((cfg.max_seq_len, cfg.hidden_dim), rng, cfg.init_std))
    _init_common(params, cfg, rng, recon_dim=cfg.vocab_size)
    return params


def init_measurement_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    if cfg.num_features is None:
        raise ConfigError("measurement encoder requires num_features")
    params: dict[str, Tensor] = {}
    params["input_proj.w"] = S.parameter(
        truncated_normal((cfg.num_features, cfg.hidden_dim), rng, cfg.init_std))
    params["input_proj.b"] = S.parameter(np.zeros(cfg.hidden_dim))
    params["cls_embed"] = S.parameter(truncated_normal((cfg.hidden_dim,), rng, cfg.init_std))
    _init_common(params, cfg, rng, recon_dim=cfg.num_features)
    return params


def _attention(cfg: EncoderConfig, params: dict, prefix: str, x: Tensor) -> Tensor:
    q = S.add(S.matmul(x, params[prefix + "attn.wq"]), params[prefix + "attn.bq"])
    k = S.add(S.matmul(x, params[prefix + "attn.wk"]), params[prefix + "attn.bk"])
    v = S.add(S.matmul(x, params[prefix + "attn.wv"]), params[prefix + "attn.bv"])
    scale = 1.0 / np.sqrt(cfg.head_dim)
    heads = []
    for h in range(cfg.num_heads):
        lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
        qh, kh, vh = S.slice_cols(q, lo, hi), S.slice_cols(k, lo, hi), S.slice_cols(v, lo, hi)
        scores = S.mul(S.matmul(qh, S.transpose(kh)), scale)
        heads.append(S.matmul(S.softmax(scores, axis=-1), vh))
    ctx = heads[0] if len(heads) == 1 else S.concat(heads, axis=1)
    return S.add(S.matmul(ctx, params[prefix + "attn.wo"]), params[prefix + "attn.bo"])


def _stack(cfg: EncoderConfig, params: dict, x: Tensor, train: bool, rng) -> Tensor:
    drop = cfg.dropout_rate if train else 0.0
    h = x
    if drop > 0.0:
        h = S.dropout(h, drop, rng)
    for i in range(cfg.num_layers):
        p = f"block{i}."
        a = _attention(cfg, params, p, S.layer_norm(h, params[p + "ln1.gain"], params[p + "ln1.bias"]))
        if drop > 0.0:
            a = S.dropout(a, drop, rng)
        h = S.add(h, a)
        f = S.layer_norm(h, params[p + "ln2.gain"], params[p + "ln2.bias"])
        f = S.gelu(S.add(S.matmul(f, params[p + "ff.w1"]), params[p + "ff.b1"]))
        f = S.add(S.matmul(f, params[p + "ff.w2"]), params[p + "ff.b2"])
        if drop > 0.0:
            f = S.dropout(f, drop, rng)
        h = S.add(h, f)
    return S.layer_norm(h, params["final_ln.gain"], params["final_ln.bias"])


def _heads(cfg: EncoderConfig, params: dict, h: Tensor) -> EncoderOutput:
    cls_row = S.take_rows(h, [0])                                # (1, d)
    projected = S.add(S.matmul(cls_row, params["align_proj.w"]), params["align_proj.b"])
    cls_aligned = S.l2_normalize(S.reshape(projected, (cfg.proj_dim,)))
    recon = S.add(S.matmul(h, params["recon_proj.w"]), params["recon_proj.b"])
    return EncoderOutput(
        hidden=h,
        cls_raw=S.reshape(cls_row, (cfg.hidden_dim,)),
        cls_aligned=cls_aligned,
        recon=recon,
    )


def encode_text(
    cfg: EncoderConfig,
    params: dict[str, Tensor],
    seq: TokenSequence,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    if cfg.vocab_size is None:
        raise ConfigError("text encoder requires vocab_size")
    ids = seq.token_ids
    if len(ids) > cfg.max_seq_len:
        raise SequenceLengthError(
            f"token sequence length {len(ids)} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DataError(
            f"token ids must lie in [0, {cfg.vocab_size}), got range "
            f"[{ids.min()}, {ids.max()}]")
    x = S.add(S.take_rows(params["token_embed"], ids),
              S.take_rows(params["pos_embed"], np.arange(len(ids))))
    h = _stack(cfg, params, x, train, rng)
    return _heads(cfg, params, h)


def encode_measurements(
    cfg: EncoderConfig,
    params: dict[str, Tensor],
    win: MeasurementWindow,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    if cfg.num_features is None:
        raise ConfigError("measurement encoder requires num_features")
    if win.num_features != cfg.num_features:
        raise DataError(
            f"window has {win.num_features} features, encoder expects {cfg.num_features}")
    seq_len = win.num_timesteps + 1
    if seq_len > cfg.max_seq_len:
        raise SequenceLengthError(
            f"window of {win.num_timesteps} timesteps plus class token exceeds "
            f"max_seq_len {cfg.max_seq_len}")
    embedded = S.add(S.matmul(Tensor(win.values), params["input_proj.w"]), params["input_proj.b"])
    cls = S.reshape(params["cls_embed"], (1, cfg.hidden_dim))
    x = S.concat([cls, embedded], axis=0)
    x = S.add(x, Tensor(sinusoidal_positions(seq_len, cfg.hidden_dim)))
    h = _stack(cfg, params, x, train, rng)
    return _heads(cfg, params, h)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout: MAGIC | u32 version | u64 header length | header JSON | payload.
# The header echoes the encoder configs, names every array with its shape and
# byte offset, and carries a sha256 over the payload. All values are stored
# as little-endian float64.

def save_checkpoint(
    path,
    configs: dict[str, EncoderConfig],
    params: dict[str, Tensor],
    extra: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    extra_arrays = extra_arrays or {}
    names = list(params) + [f"__array__{k}" for k in extra_arrays]
    arrays = [params[k].data for k in params] + [np.asarray(v, dtype=np.float64)
                                                 for v in extra_arrays.values()]
    payload = b"".join(a.astype("<f8").tobytes(order="C") for a in arrays)
    header = {
        "configs": {k: asdict(v) for k, v in configs.items()},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "dtype": "<f8",
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(
    path,
    expect_configs: dict[str, EncoderConfig] | None = None,
) -> tuple[dict[str, EncoderConfig], dict[str, Tensor], dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (configs, params, extra_arrays, extra).

    Verifies the payload checksum and, when expect_configs is given, rejects
    the file if the stored configs differ.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt file)")
    configs = {k: EncoderConfig(**v) for k, v in header["configs"].items()}
    if expect_configs is not None:
        got = {k: asdict(v) for k, v in configs.items()}
        want = {k: asdict(v) for k, v in expect_configs.items()}
        if got != want:
            raise CheckpointError(
                f"{path}: checkpoint configs do not match the expected configs: "
                f"stored {got}, expected {want}")
    params: dict[str, Tensor] = {}
    extra_arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        arr = arr.astype(np.float64).reshape(shape)
        if entry["name"].startswith("__array__"):
            extra_arrays[entry["name"][len("__array__"):]] = arr
        else:
            params[entry["name"]] = S.parameter(arr)
    return configs, params, extra_arrays, header.get("extra", {})
