"""Operator-facing command line.

Commands: generate, ingest, pretrain, gridsearch, eval
{retrieval|zeroshot|linear|semisup}, inspect-checkpoint.

Configuration is layered: built-in defaults <- JSON config file (--config)
<- command-line overrides (--set key.path=value). Every run writes its fully
resolved manifest into the output directory before doing any work. All
randomness flows from the single manifest seed through named sub-streams.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import encoders as E
from . import evaluation as V
from . import train as T
from .errors import ConfigError, IcuAlignError, SchemaError
from .seeding import named_rng

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


# ---------------------------------------------------------------------------
# layered configuration

def _deep_update(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_set(assignments: list[str]) -> dict:
    root: dict = {}
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = root
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    return root


def resolve_config(defaults: dict, config_path: str | None, sets: list[str]) -> dict:
    resolved = copy.deepcopy(defaults)
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {config_path} is not valid JSON: {err}")
        resolved = _deep_update(resolved, file_cfg)
    resolved = _deep_update(resolved, _parse_set(sets or []))
    return resolved


def default_out_root() -> Path:
    return Path(os.environ.get("ICUALIGN_OUT", "runs"))


def write_manifest(out_dir: Path, command: str, config: dict) -> None:
    """Persist the resolved run description before any work happens."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": config.get("seed"),
        "config": config,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _print_metrics(title: str, metrics: dict[str, float]) -> None:
    print(title)
    for name, value in metrics.items():
        print(f"  {name:<24} {value:.4f}")


# ---------------------------------------------------------------------------
# generate

GENERATE_DEFAULTS = {
    "seed": 0,
    "n_stays": 200,
    "split_ratios": [0.70, 0.15, 0.15],
    "fractions": [0.01, 0.10, 0.50],
    "synthetic": D.SyntheticConfig().to_dict(),
}


def cmd_generate(args) -> int:
    config = resolve_config(GENERATE_DEFAULTS, args.config, args.set)
    out_dir = Path(args.out)
    if int(config["n_stays"]) < 2:
        raise ConfigError(f"n_stays must be >= 2, got {config['n_stays']}")
    syn_cfg = D.SyntheticConfig.from_dict(config["synthetic"])
    write_manifest(out_dir, "generate", config)
    seed = int(config["seed"])
    records, schema = D.generate_synthetic(int(config["n_stays"]),
                                           named_rng(seed, "data"), syn_cfg)
    manifest = D.make_splits(records, tuple(config["split_ratios"]),
                             named_rng(seed, "splits"),
                             fractions=tuple(config["fractions"]))
    D.write_dataset(out_dir, records, schema)
    manifest.save(out_dir / "splits.json")
    print(f"wrote {len(records)} stays to {out_dir} "
          f"(train/val/test = {len(manifest.train)}/{len(manifest.validation)}"
          f"/{len(manifest.test)})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ingest

def cmd_ingest(args) -> int:
    prepared = D.load_prepared_dataset(args.data)
    counts = {split: len(recs) for split, recs in prepared.by_split.items()}
    print(f"dataset {args.data}: {len(prepared.records)} stays, "
          f"{prepared.num_pairs} positive pairs after note rules")
    print(f"splits: {counts}")
    print(f"features: {prepared.schema.num_features} "
          f"({', '.join(prepared.schema.feature_names[:6])}, ...)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pretrain

PRETRAIN_DEFAULTS = {
    "seed": 0,
    "data": None,
    "run": T.TrainRunConfig().to_dict(),
    "text": {"num_layers": 8, "hidden_dim": 128, "num_heads": 8, "max_seq_len": 256},
    "meas": {"num_layers": 8, "hidden_dim": 128, "num_heads": 8, "max_seq_len": 256},
}


def _encoder_cfgs(config: dict, num_features: int) -> tuple[E.EncoderConfig, E.EncoderConfig]:
    text_cfg = E.EncoderConfig(**config["text"])
    meas_cfg = E.EncoderConfig(**{**config["meas"], "num_features": num_features})
    return text_cfg, meas_cfg


def cmd_pretrain(args) -> int:
    config = resolve_config(PRETRAIN_DEFAULTS, args.config, args.set)
    if args.data:
        config["data"] = args.data
    if not config["data"]:
        raise ConfigError("pretrain needs a dataset: pass --data or set data in the config")
    config["run"]["seed"] = int(config.get("seed", config["run"].get("seed", 0)))
    out_dir = Path(args.out) if args.out else default_out_root() / "pretrain"
    write_manifest(out_dir, "pretrain", config)

    prepared = D.load_prepared_dataset(config["data"])
    run_cfg = T.TrainRunConfig.from_dict(config["run"])
    text_cfg, meas_cfg = _encoder_cfgs(config, prepared.schema.num_features)
    result = T.pretrain(prepared.by_split["train"], prepared.by_split["validation"],
                        run_cfg, text_cfg, meas_cfg, out_dir=out_dir,
                        resume=args.resume)
    last = result.history[-1]
    print(f"pretraining done: {len(result.history)} epochs, "
          f"final loss {last['loss_total']:.4f}, "
          f"val R@1 m2n/n2m = {last['val_r1_m2n']:.1f}/{last['val_r1_n2m']:.1f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# grid search

GRIDSEARCH_DEFAULTS = {
    **PRETRAIN_DEFAULTS,
    "budget_epochs": 5,
    "space": {key: list(values) for key, values in T.PRETRAIN_GRID.items()},
}


def cmd_gridsearch(args) -> int:
    config = resolve_config(GRIDSEARCH_DEFAULTS, args.config, args.set)
    if args.data:
        config["data"] = args.data
    if not config["data"]:
        raise ConfigError("gridsearch needs a dataset: pass --data or set data in the config")
    config["run"]["seed"] = int(config.get("seed", config["run"].get("seed", 0)))
    out_dir = Path(args.out) if args.out else default_out_root() / "gridsearch"
    write_manifest(out_dir, "gridsearch", config)

    prepared = D.load_prepared_dataset(config["data"])
    run_cfg = T.TrainRunConfig.from_dict(config["run"])
    text_cfg, meas_cfg = _encoder_cfgs(config, prepared.schema.num_features)
    space = {key: list(values) for key, values in config["space"].items()}
    result = T.pretrain_grid_search(prepared.by_split["train"],
                                    prepared.by_split["validation"],
                                    run_cfg, text_cfg, meas_cfg, space=space,
                                    budget_epochs=int(config["budget_epochs"]))

    with open(out_dir / "trials.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        keys = list(result.trials[0].config)
        writer.writerow(["trial", "score"] + keys)
        for trial in result.table():
            writer.writerow([trial.index, f"{trial.score:.6f}"]
                            + [trial.config[k] for k in keys])

    best_config = copy.deepcopy(config)
    best_config["run"] = _deep_update(config["run"], result.best.config)
    for drop in ("space", "budget_epochs"):
        best_config.pop(drop, None)
    (out_dir / "best_config.json").write_text(json.dumps(best_config, indent=2))
    print(f"{len(result.trials)} trials; best score {result.best.score:.4f} "
          f"with {result.best.config}")
    print(f"wrote {out_dir / 'trials.csv'} and {out_dir / 'best_config.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

EVAL_DEFAULTS = {
    "seed": 0,
    "data": None,
    "split": "test",
    "ks": [1, 5, 10],
    "single_positive": False,
    "anchors": list(V.DEFAULT_ANCHORS),
    "task": "ihm",
    "fractions": ["1", "10", "50", "100"],
    "repeats": 5,
    "finetune": {},
    "random_init_finetune": {},
    "linear_grid": {key: list(values) for key, values in T.LINEAR_EVAL_GRID.items()},
}


def _load_eval_inputs(args, config):
    if args.data:
        config["data"] = args.data
    if not config["data"]:
        raise ConfigError("eval needs a dataset: pass --data or set data in the config")
    prepared = D.load_prepared_dataset(config["data"])
    result = None
    if args.checkpoint:
        result, _, _ = T.load_train_checkpoint(args.checkpoint)
    return prepared, result


def cmd_eval(args) -> int:
    config = resolve_config(EVAL_DEFAULTS, args.config, args.set)
    out_dir = Path(args.out) if args.out else default_out_root() / f"eval-{args.protocol}"
    write_manifest(out_dir, f"eval-{args.protocol}", config)
    prepared, result = _load_eval_inputs(args, config)
    needs_checkpoint = args.protocol in ("retrieval", "zeroshot", "linear")
    if result is None and needs_checkpoint:
        raise ConfigError(f"eval {args.protocol} requires --checkpoint <path>")
    split_records = prepared.by_split[config["split"]]

    if args.protocol == "retrieval":
        report = V.retrieval_report(split_records, result, ks=tuple(config["ks"]),
                                    single_positive=bool(config["single_positive"]))
        report.save(out_dir / "retrieval.json")
        _print_metrics(f"retrieval on {config['split']} ({report.n_samples} stays):",
                       report.metrics)
    elif args.protocol == "zeroshot":
        report = V.zero_shot_ihm(result, split_records,
                                 anchors=tuple(config["anchors"]))
        report.save(out_dir / "zeroshot.json")
        _print_metrics(f"zero-shot mortality on {config['split']} "
                       f"(anchors: {config['anchors']}):", report.metrics)
    elif args.protocol == "linear":
        grid = {key: list(v) for key, v in config["linear_grid"].items()}
        report = V.linear_eval(result, config["task"], prepared.by_split,
                               grid=grid, seed=int(config["seed"]))
        report.save(out_dir / "linear.json")
        _print_metrics(f"linear probe on {config['task']} "
                       f"(selected {report.extras['selected_config']}):", report.metrics)
    elif args.protocol == "semisup":
        base = T.FinetuneConfig(task=config["task"], **config["finetune"])
        random_cfg = (T.FinetuneConfig(task=config["task"], **config["random_init_finetune"])
                      if config["random_init_finetune"] else None)
        semi = V.semi_supervised_eval(
            config["task"], prepared.by_split, prepared.manifest,
            (result.meas_cfg if result else E.EncoderConfig(
                num_features=prepared.schema.num_features)),
            pretrained_params=(result.meas_params if result else None),
            fractions=tuple(str(f) for f in config["fractions"]),
            repeats=int(config["repeats"]), base_cfg=base,
            random_init_cfg=random_cfg, seed=int(config["seed"]))
        semi.save_csv(out_dir / "semisup.csv")
        (out_dir / "semisup_summary.json").write_text(
            json.dumps(semi.summary, indent=2))
        print(f"semi-supervised {config['task']} over fractions {config['fractions']}:")
        for row in semi.summary:
            stats = {k: v for k, v in row.items()
                     if k.endswith("_mean") or k.endswith("_std")}
            rendered = ", ".join(f"{k}={v:.3f}" for k, v in stats.items())
            print(f"  {row['init']:>10} @ {row['fraction']:>3}%: {rendered}")
    else:
        raise ConfigError(f"unknown eval protocol {args.protocol!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect-checkpoint

def cmd_inspect_checkpoint(args) -> int:
    result, extra, arrays = T.load_train_checkpoint(args.checkpoint)
    n_params = sum(p.data.size for p in result.text_params.values())
    n_params += sum(p.data.size for p in result.meas_params.values())
    print(f"checkpoint: {args.checkpoint}")
    print(f"  text encoder: {result.text_cfg}")
    print(f"  measurement encoder: {result.meas_cfg}")
    print(f"  parameters: {n_params}")
    print(f"  vocab size: {result.tokenizer.vocab_size}")
    print(f"  epochs completed: {extra.get('epochs_done', len(result.history))}")
    if result.history:
        last = result.history[-1]
        print(f"  last epoch: loss {last['loss_total']:.4f}, "
              f"val R@1 mean {last['val_r1_mean']:.2f}")
    print(f"  resumable: {'optimizer' in extra}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icualign",
        description="Measurement/note alignment pretraining and its evaluation suite")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted path, JSON value)")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        else:
            p.add_argument("--out", help="output directory "
                                         "(default: $ICUALIGN_OUT or ./runs)")

    p = sub.add_parser("generate", help="write a synthetic paired dataset")
    add_common(p, needs_out=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="validate a dataset and report statistics")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", help="run alignment + masked pretraining")
    add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--resume", help="resume from a checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gridsearch", help="hyperparameter grid search")
    add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("protocol", choices=["retrieval", "zeroshot", "linear", "semisup"])
    add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="pretraining checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect_checkpoint)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except IcuAlignError as err:
        print(f"aborted: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
