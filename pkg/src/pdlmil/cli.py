"""Command-line entry point.

Configuration is a flat ``key = value`` file with dotted keys (``pdl.p_max = 0.45``);
every key can also be given as a flag of the same name (``--pdl.p_max 0.3``),
which wins over the file.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, experiments
from .data import BagDataset, SynthConfig, load_bags_csv, standardize, synth_bags
from .model import forward, load_params, save_params
from .pdl import Interpolation, apba
from .trainer import ModelConfig, TrainConfig, evaluate, fit, localization_score, run_cv_experiment


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(s).split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(s).split(",") if x.strip())


# key -> (parser, default, help)
OPTIONS: dict[str, tuple] = {
    "data.csv": (str, "", "bag CSV file; empty means generate a synthetic dataset"),
    "synth.n_bags": (int, 500, "number of synthetic bags"),
    "synth.feature_dim": (int, 20, "synthetic feature dimension"),
    "synth.mean_bag_size": (float, 20.0, "mean bag size"),
    "synth.bag_size_std": (float, 2.0, "bag size standard deviation"),
    "synth.witness_rate": (float, 0.1, "fraction of positive instances in positive bags"),
    "synth.pos_mean": (float, 2.0, "offset of positive instances along the class direction"),
    "synth.neg_mean": (float, 0.0, "offset of negative instances along the class direction"),
    "synth.cov_scale": (float, 1.0, "instance noise standard deviation"),
    "synth.seed": (int, 0, "synthetic data seed"),
    "model.aggregator": (str, "abmil", "abmil or gated"),
    "model.dims": (_ints, (256, 128, 64), "middle-layer widths, comma separated"),
    "model.attn_dim": (int, 128, "attention hidden dimension D"),
    "reg.kind": (str, "pdl", "none, pdl, vanilla, spatial, dropinstance or attentiondrop"),
    "reg.rate": (float, 0.0, "baseline drop rate"),
    "reg.threshold": (float, 0.65, "AttentionDrop threshold"),
    "pdl.p_max": (float, 0.45, "maximum global drop rate"),
    "pdl.rate_kind": (str, "log", "per-instance rate interpolation: log, cos or exp"),
    "pdl.schedule_kind": (str, "log", "scheduler interpolation: log, cos or exp"),
    "pdl.G": (float, 10.0, "interpolation base G"),
    "pdl.E": (float, 0.5, "LOG spacing E"),
    "pdl.B": (float, 0.5, "EXP spacing B"),
    "pdl.progressive": (_bool, True, "false fixes the global rate at p_max"),
    "pdl.rescale": (_bool, True, "scale kept instances by 1/(1-p'); false leaves them as is"),
    "train.epochs": (int, 40, "epochs T"),
    "train.lr": (float, 1e-4, "learning rate"),
    "train.weight_decay": (float, 1e-4, "weight decay"),
    "train.optimizer": (str, "adamw", "adam or adamw"),
    "train.standardize": (_bool, True, "standardize features on the training split"),
    "train.seed": (int, 0, "experiment seed"),
    "cv.k": (int, 10, "folds (below 2 disables cross-validation in train)"),
    "cv.repeats": (int, 5, "cross-validation repeats"),
    "cv.workers": (int, 0, "worker processes; 0 means one per logical core"),
    "sweep.rates": (_floats, experiments.RATE_GRID, "baseline rate grid for compare-dropouts"),
    "model.path": (str, "", "parameter file for eval and export-attention"),
    "out.dir": (str, "runs", "output directory"),
}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in OPTIONS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def resolve(raw: dict[str, str]) -> dict:
    cfg = {}
    for key, (conv, default, _) in OPTIONS.items():
        if key in raw:
            try:
                cfg[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        else:
            cfg[key] = default
    return cfg


def canonical(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)

    return "\n".join(f"{k} = {fmt(cfg[k])}" for k in sorted(cfg)) + "\n"


def train_config(cfg: dict) -> TrainConfig:
    interp = Interpolation("log", cfg["pdl.G"], cfg["pdl.E"], cfg["pdl.B"])
    tc = TrainConfig(
        epochs=cfg["train.epochs"], lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"],
        optimizer=cfg["train.optimizer"], regularizer=cfg["reg.kind"], rate=cfg["reg.rate"],
        threshold=cfg["reg.threshold"], p_max=cfg["pdl.p_max"],
        rate_interp=replace(interp, kind=cfg["pdl.rate_kind"]),
        schedule_interp=replace(interp, kind=cfg["pdl.schedule_kind"]),
        progressive=cfg["pdl.progressive"], pdl_rescale=cfg["pdl.rescale"],
        standardize=cfg["train.standardize"], seed=cfg["train.seed"],
    )
    tc.validate()
    return tc


def model_config(cfg: dict) -> ModelConfig:
    agg = cfg["model.aggregator"]
    if agg not in ("abmil", "gated"):
        raise ConfigError(f"model.aggregator must be abmil or gated, got {agg!r}")
    if not cfg["model.dims"] or min(cfg["model.dims"]) < 1 or cfg["model.attn_dim"] < 1:
        raise ConfigError("model dims must be positive")
    return ModelConfig(cfg["model.dims"], cfg["model.attn_dim"], agg == "gated")


def load_dataset(cfg: dict) -> BagDataset:
    if cfg["data.csv"]:
        path = Path(cfg["data.csv"])
        if not path.is_file():
            raise ConfigError(f"dataset file not found: {path}")
        return load_bags_csv(path)
    sc = SynthConfig(
        n_bags=cfg["synth.n_bags"], feature_dim=cfg["synth.feature_dim"],
        mean_bag_size=cfg["synth.mean_bag_size"], bag_size_std=cfg["synth.bag_size_std"],
        witness_rate=cfg["synth.witness_rate"], pos_mean=cfg["synth.pos_mean"], neg_mean=cfg["synth.neg_mean"],
        cov_scale=cfg["synth.cov_scale"], seed=cfg["synth.seed"],
    )
    return synth_bags(sc)


def _workers(cfg: dict) -> int:
    return cfg["cv.workers"] or os.cpu_count() or 1


def _num(v):
    if isinstance(v, float):
        return None if math.isnan(v) else v
    if isinstance(v, (list, tuple)):
        return [_num(x) for x in v]
    if isinstance(v, np.generic):
        return _num(v.item())
    return v


def write_records(path: Path, records: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({k: _num(v) for k, v in r.items()}, sort_keys=True) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return "NA" if math.isnan(v) else repr(v)
    return str(v)


def write_table(path: Path, rows: list[dict]) -> None:
    cols = list(rows[0])
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r[c]) for c in cols])


def write_manifest(out: Path, command: str, cfg: dict) -> None:
    # The output location is not part of the experiment.
    text = canonical({k: v for k, v in cfg.items() if k != "out.dir"})
    manifest = {
        "command": command,
        "config": text,
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "seed": cfg["train.seed"],
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_model(cfg: dict):
    if not cfg["model.path"]:
        raise ConfigError("model.path is required")
    path = Path(cfg["model.path"])
    if not path.is_file():
        raise ConfigError(f"model file not found: {path}")
    model, extra = load_params(path, with_extra=True)
    norm = (extra["norm.mean"], extra["norm.std"]) if "norm.mean" in extra else None
    return model, norm


def cmd_train(cfg: dict, out: Path) -> None:
    ds = load_dataset(cfg)
    tc, mc = train_config(cfg), model_config(cfg)
    k = cfg["cv.k"]
    records, summary = [], None
    if k >= 2:
        res = run_cv_experiment(ds, tc, mc, k, cfg["cv.repeats"], _workers(cfg))
        records, summary = res.records, res.summary
    model, hist, norm = fit(ds, tc, mc, tc.seed)
    final = evaluate(model, standardize(ds, norm))
    records.append({"run_id": "final", "repeat": -1, "fold": -1, "seed": tc.seed, "accuracy": final.accuracy,
                    "auc": final.auc, "localization": localization_score(model, standardize(ds, norm)),
                    "epoch_loss": hist.loss, "epoch_global_rate": hist.global_rate, "n_train": len(ds), "n_test": 0})
    if summary is None:
        summary = {"runs": 0, "accuracy_mean": final.accuracy, "auc_mean": final.auc}
    extra = {"norm.mean": norm[0], "norm.std": norm[1]} if norm is not None else None
    save_params(model, out / "model.npz", extra)
    write_records(out / "records.jsonl", records)
    write_table(out / "summary.csv", [{"dataset": ds.name, "regularizer": tc.regularizer, **summary}])


def cmd_eval(cfg: dict, out: Path) -> None:
    model, norm = _load_model(cfg)
    ds = load_dataset(cfg)
    ds = standardize(ds, norm)
    m = evaluate(model, ds)
    row = {"dataset": ds.name, "n_bags": m.n, "accuracy": m.accuracy, "auc": m.auc,
           "localization": localization_score(model, ds)}
    write_table(out / "eval.csv", [row])


def cmd_compare(cfg: dict, out: Path) -> None:
    ds = load_dataset(cfg)
    rows, records = experiments.compare_dropouts(ds, train_config(cfg), model_config(cfg), cfg["cv.k"],
                                                 cfg["cv.repeats"], cfg["sweep.rates"], _workers(cfg))
    write_records(out / "records.jsonl", records)
    write_table(out / "comparison.csv", rows)


def cmd_ablation(cfg: dict, out: Path) -> None:
    ds = load_dataset(cfg)
    rows, records = experiments.scheduler_ablation(ds, train_config(cfg), model_config(cfg), cfg["cv.k"],
                                                   cfg["cv.repeats"], _workers(cfg))
    write_records(out / "records.jsonl", records)
    write_table(out / "ablation.csv", rows)


def cmd_sweep(cfg: dict, out: Path) -> None:
    ds = load_dataset(cfg)
    rows, records = experiments.sweep_interpolation(ds, train_config(cfg), model_config(cfg), cfg["cv.k"],
                                                    cfg["cv.repeats"], _workers(cfg))
    write_records(out / "records.jsonl", records)
    write_table(out / "sweep.csv", rows)


def attention_rows(model, dataset: BagDataset) -> list[dict]:
    """Per instance: aggregator attention, APBA weight at every middle layer, label if known."""
    rows = []
    n_layers = len(model.projector.weights)
    for b in dataset.bags:
        tr = forward(b, model, mode="eval")
        layer_att = [apba(layer["post"]) for layer in tr.layers]
        for i in range(b.size):
            row = {"bag_id": b.id, "bag_label": b.label, "instance_index": i, "attention": float(tr.alpha[i])}
            for j in range(n_layers):
                row[f"apba_layer{j}"] = float(layer_att[j][i])
            row["instance_label"] = "?" if b.instance_labels is None else int(b.instance_labels[i])
            rows.append(row)
    return rows


def cmd_export(cfg: dict, out: Path) -> None:
    model, norm = _load_model(cfg)
    ds = standardize(load_dataset(cfg), norm)
    write_table(out / "attention.csv", attention_rows(model, ds))


COMMANDS = {
    "train": (cmd_train, "cross-validate, then fit and save a model on the full dataset"),
    "eval": (cmd_eval, "score a saved model on a dataset"),
    "compare-dropouts": (cmd_compare, "PDL versus baseline dropout methods"),
    "scheduler-ablation": (cmd_ablation, "progressive versus fixed global drop rate"),
    "sweep-interpolation": (cmd_sweep, "scheduler x rate interpolation grid"),
    "export-attention": (cmd_export, "per-instance attention table for a saved model"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdlmil", description="Attention MIL with progressive dropout.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value configuration file")
        for key, (_, default, h) in OPTIONS.items():
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            p.add_argument(f"--{key}", dest=key, default=None, metavar="V", help=f"{h} (default: {shown})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = {}
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            raw.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
        raw.update({k: v for k, v in vars(args).items() if k in OPTIONS and v is not None})
        cfg = resolve(raw)
        # Validate everything before any file is written.
        train_config(cfg)
        model_config(cfg)
        if cfg["data.csv"] and not Path(cfg["data.csv"]).is_file():
            raise ConfigError(f"dataset file not found: {cfg['data.csv']}")
        if args.command in ("eval", "export-attention"):
            _load_model(cfg)
        out = Path(cfg["out.dir"])
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](cfg, out)
        write_manifest(out, args.command, cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"pdlmil {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
