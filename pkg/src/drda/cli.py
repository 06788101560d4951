"""Command line entry point: train, eval, dump-features, sweep, report, presets.

Exit codes: 0 success, 2 invalid config or unusable dataset, 3 numeric abort,
4 I/O failure (unreadable or unwritable files, locked output directory).
"""
from __future__ import annotations

import argparse
import io
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import checkpoint as ckpt
from . import model as M
from .config import PRESETS, SENSITIVITY_GRIDS, DataConfig, RunConfig, grid_configs, load_run_config, \
    run_config_from_dict
from .data import DomainDataset, ShiftSpec, from_csv, gen_gaussian_blobs, gen_two_moons_pair, load_idx
from .errors import ConfigError, ContractError, DegenerateError, NumericError, ParseError
from .files import atomic_write_text, metrics_csv
from .radial import RadialStructure
from .trainer import MetricsRow, TrainState, fit, init_state, pseudo_labels, _safe_phi

log = logging.getLogger("drda")

OUTPUT_ROOT_ENV = "DRDA_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.json"
CONFIG_ECHO_FILE = "resolved_config.json"
LOCK_FILE = ".lock"


class UsageError(Exception):
    """Raised for dataset specs that cannot be used (exit code 2)."""


def resolve_output_dir(output_dir: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    p = Path(output_dir)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def make_domains(data: DataConfig) -> tuple[DomainDataset, DomainDataset]:
    if data.dataset == "idx":
        src = load_idx(data.source_images, data.source_labels, data.num_classes, "source")
        tgt = load_idx(data.target_images, data.target_labels, data.num_classes, "target")
        return src, tgt
    shift = ShiftSpec(np.deg2rad(data.rotation_deg), tuple(data.translation),
                      tuple(data.target_priors) if data.target_priors is not None else None,
                      data.target_noise)
    if data.dataset == "moons":
        return gen_two_moons_pair(data.n, data.moons_noise, shift, data.data_seed)
    return gen_gaussian_blobs(data.num_classes, data.n, data.dim, data.spread, shift, data.data_seed,
                              data.center_radius, data.min_separation)


# ------------------------------------------------------------------ train


def run_training(run: RunConfig, out_dir: Path) -> tuple[TrainState, list[MetricsRow]]:
    """Train and write metrics.csv, checkpoint.json and resolved_config.json into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    source, target = make_domains(run.data)
    resolved = run.to_dict()
    atomic_write_text(out_dir / CONFIG_ECHO_FILE, json.dumps(resolved, indent=1, sort_keys=True) + "\n")
    header = MetricsRow.header()
    rows: list[MetricsRow] = []

    def flush(row=None):
        if row is not None:
            rows.append(row)
            log.info("it=%d p=%.3f L_ce=%.4f phi=%.4f target_acc=%.4f", row.iteration, row.p, row.L_ce,
                     row.phi, row.target_accuracy)
        atomic_write_text(out_dir / METRICS_FILE, metrics_csv(header, [r.values() for r in rows]))

    flush()
    if run.eval_only:
        state = init_state(run.train, source, target)
    else:
        state, _ = fit(run.train, source, target, run.log_interval, callback=flush)
    ckpt.save(out_dir / CHECKPOINT_FILE, ckpt.from_state(state, resolved))
    return state, rows


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    if args.output_dir:
        run = replace(run, output_dir=args.output_dir)
    out_dir = resolve_output_dir(run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(out_dir / LOCK_FILE), timeout=0):
        state, rows = run_training(run, out_dir)
    last = rows[-1] if rows else None
    print(f"output_dir\t{out_dir}")
    print(f"iterations\t{state.iteration}")
    if last is not None:
        print(f"source_accuracy\t{last.source_accuracy!r}")
        print(f"target_accuracy\t{last.target_accuracy!r}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = load_run_config(args.config)
    if args.output_dir:
        base = replace(base, output_dir=args.output_dir)
    print("tag\ttarget_accuracy")
    for tag, run in grid_configs(args.grid, base):
        out_dir = resolve_output_dir(run.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with FileLock(str(out_dir / LOCK_FILE), timeout=0):
            _, rows = run_training(run, out_dir)
        acc = rows[-1].target_accuracy if rows else float("nan")
        print(f"{tag}\t{acc!r}", flush=True)
    return EXIT_OK


# ------------------------------------------------------------------ eval / dump


def _data_config_of(ck: ckpt.Checkpoint) -> DataConfig:
    run = run_config_from_dict(ck.config)
    return run.data


def resolve_data_spec(spec: str, ck: ckpt.Checkpoint, num_classes: int) -> dict[str, DomainDataset]:
    """Turn a ``--data`` spec into named domains.

    ``checkpoint``        regenerate the training pair from the checkpoint's config
    ``<file>.json``       a JSON object of data keys (dataset, n, rotation_deg, ...)
    ``idx:<images>,<labels>[@source|@target]``
    ``csv:<path>[@source|@target]``   header label, x_0..x_{m-1}
    """
    if spec == "checkpoint":
        src, tgt = make_domains(_data_config_of(ck))
        return {"source": src, "target": tgt}
    domain = "target"
    body = spec
    if "@" in spec and spec.rsplit("@", 1)[1] in ("source", "target"):
        body, domain = spec.rsplit("@", 1)
    if body.startswith("idx:"):
        parts = body[4:].split(",")
        if len(parts) != 2:
            raise UsageError("idx spec is idx:<images>,<labels>")
        return {domain: load_idx(parts[0], parts[1], num_classes, domain)}
    if body.startswith("csv:"):
        with open(body[4:]) as fh:
            return {domain: from_csv(fh.read(), num_classes, domain)}
    if body.endswith(".json"):
        with open(body) as fh:
            raw = json.load(fh)
        base = _data_config_of(ck).to_dict()
        merged = {**base, **raw}
        run = run_config_from_dict(merged)
        src, tgt = make_domains(run.data)
        return {"source": src, "target": tgt}
    raise UsageError(f"unrecognized data spec {spec!r}")


def _features(ck: ckpt.Checkpoint, ds: DomainDataset, domain: str) -> tuple[np.ndarray, np.ndarray]:
    if domain == "target":
        return M.forward_target(ck.params, ck.stiefel, ds.features)
    return M.forward_source(ck.params, ds.features)


def evaluate_checkpoint(ck: ckpt.Checkpoint, domains: dict[str, DomainDataset]) -> dict:
    lambda_dist = float(ck.config.get("lambda_dist", 1.0))
    k = ck.params.num_classes
    out: dict = {"config_hash": ck.config_hash, "iteration": ck.iteration}
    gt = {}
    for name in ("source", "target"):
        if name not in domains:
            continue
        ds = domains[name]
        if ds.labels is None:
            raise UsageError(f"{name} dataset is unlabeled; eval needs labels")
        z, P = _features(ck, ds, name)
        pred = pseudo_labels(P)
        per_class = [float(np.mean(pred[ds.labels == c] == c)) if np.any(ds.labels == c) else None
                     for c in range(k)]
        out[name] = {"n": len(ds), "accuracy": float(np.mean(pred == ds.labels)),
                     "per_class_accuracy": per_class}
        gt[name] = RadialStructure.from_features(z, ds.labels, k, name)
    primary = "target" if "target" in out else "source"
    out["domain"] = primary
    out["accuracy"] = out[primary]["accuracy"]
    out["per_class_accuracy"] = out[primary]["per_class_accuracy"]

    def phi(a, b):
        v = _safe_phi(a, b, lambda_dist)
        return None if not np.isfinite(v) else v

    out["phi_s_sgt"] = phi(ck.source, gt["source"]) if "source" in gt else None
    out["phi_t_tgt"] = phi(ck.target, gt["target"]) if "target" in gt else None
    out["phi_sgt_tgt"] = phi(gt["source"], gt["target"]) if len(gt) == 2 else None
    return out


EVAL_KEYS = ("domain", "accuracy", "per_class_accuracy", "phi_s_sgt", "phi_t_tgt", "phi_sgt_tgt",
             "config_hash", "iteration")


def cmd_eval(args) -> int:
    ck = ckpt.load(args.checkpoint)
    domains = resolve_data_spec(args.data, ck, ck.params.num_classes)
    result = evaluate_checkpoint(ck, domains)
    text = json.dumps(result, indent=1, sort_keys=True) + "\n"
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.json")
    atomic_write_text(out, text)
    sys.stdout.write(text)
    return EXIT_OK


DUMP_DOMAINS = ("source", "target")


def dump_rows(ck: ckpt.Checkpoint, domains: dict[str, DomainDataset]) -> tuple[list[str], list[list]]:
    """Feature rows (target after the Stiefel layer) followed by anchor rows.

    Source rows carry true labels; target rows carry the model's pseudo-labels.
    Anchor rows hold the checkpoint's EMA anchors: local anchors labeled by
    class, global anchors labeled -1.
    """
    d = ck.params.bottleneck_dim
    header = ["domain", "label_or_pseudo", "anchor"] + [f"z_{j}" for j in range(d)]
    rows = []
    for name in DUMP_DOMAINS:
        if name not in domains:
            continue
        ds = domains[name]
        z, P = _features(ck, ds, name)
        labels = ds.labels if (name == "source" and ds.labels is not None) else pseudo_labels(P)
        for y, zi in zip(labels, z):
            rows.append([name, int(y), 0] + [float(v) for v in zi])
    for name, s in (("source", ck.source), ("target", ck.target)):
        if name not in domains:
            continue
        rows.append([name, -1, 1] + [float(v) for v in s.global_anchor])
        for c in np.flatnonzero(s.present):
            rows.append([name, int(c), 1] + [float(v) for v in s.local_anchors[c]])
    return header, rows


def cmd_dump(args) -> int:
    ck = ckpt.load(args.checkpoint)
    domains = resolve_data_spec(args.data, ck, ck.params.num_classes)
    header, rows = dump_rows(ck, domains)
    out = Path(args.out)
    if not out.is_absolute() and os.environ.get(OUTPUT_ROOT_ENV):
        out = resolve_output_dir(str(out))
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, metrics_csv(header, rows))
    print(f"rows\t{len(rows)}")
    print(f"out\t{out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_run

    out_dir = Path(args.run)
    written, summary = render_run(out_dir, dump=args.dump, fig_dir=args.figures)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["key", "value"])
    for key, value in summary.items():
        w.writerow([key, value])
    for path in written:
        w.writerow(["figure", path])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in sorted(PRESETS):
        print(f"{name}\t{json.dumps(PRESETS[name], sort_keys=True)}")
    for name in sorted(SENSITIVITY_GRIDS):
        key, values = SENSITIVITY_GRIDS[name]
        print(f"{name}\t{key}={','.join(f'{v:g}' for v in values)}")
    return EXIT_OK


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drda", description="radial-structure domain adaptation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run one sensitivity grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, choices=sorted(SENSITIVITY_GRIDS))
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="accuracy and structure diagnostics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-features", help="write bottleneck features and anchors as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--dump")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("presets", help="list named presets and grids")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, ContractError, DegenerateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Timeout as exc:
        print(f"output directory is locked by another run: {exc.lock_file}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ParseError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
