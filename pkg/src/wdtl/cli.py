"""Command-line driver: synth, pretrain, adapt, eval, export-features, report.

Exit codes: 0 ok, 1 usage/config error, 2 data or format error, 3 divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import FormatError, SynthConfig, load_dataset, save_dataset, synth_generate
from .evaluation import RunReport, aggregate, evaluate, export_features
from .tensor import DimensionError
from .training import (AdaptConfig, DivergenceError, adapt, load_checkpoint, pretrain,
                       save_checkpoint)

log = logging.getLogger("wdtl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

DEFAULT_LAMBDA = 0.1

# key -> (type, default); config "lambda" maps onto AdaptConfig.lam
_TRAIN_KEYS = {
    "batch_size": (int, 32), "critic_steps": (int, 10), "lr_critic": (float, 1e-3),
    "lr_main": (float, 2e-4), "rho": (float, 10.0), "lambda": (float, DEFAULT_LAMBDA),
    "max_iterations": (int, 5000), "optimizer": (str, "adam"), "seed": (int, 0),
    "normalize": (str, "max"), "eval_every": (int, 100), "runs": (int, 5),
    "pretrain_iterations": (int, 1500), "lr_pretrain": (float, 1e-3), "dtype": (str, "float32"),
}
_SYNTH_FIELDS = {"n_per_class": int, "shaft_hz": float, "noise_sigma": float, "harmonics": int,
                 "sensor_attenuation": float, "fault_amplitude": float,
                 "modulation_depth": float, "speed_jitter": float, "seed": int}
SCHEMA = dict(_TRAIN_KEYS)
for _dom in ("source", "target"):
    SCHEMA.update({f"{_dom}.{k}": (t, None) for k, t in _SYNTH_FIELDS.items()})


class UsageError(Exception):
    pass


def parse_config(text: str, origin="<config>") -> dict:
    """Flat ``key = value`` lines, ``#`` comments; every key checked against SCHEMA."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise UsageError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in SCHEMA:
            raise UsageError(f"{origin}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise UsageError(f"{origin}:{lineno}: duplicate config key {key!r}")
        typ = SCHEMA[key][0]
        try:
            out[key] = typ(value)
        except ValueError:
            raise UsageError(f"{origin}:{lineno}: key {key!r}: cannot parse {value!r} as "
                             f"{typ.__name__}") from None
    if out.get("normalize", "max") not in ("max", "none"):
        raise UsageError(f"{origin}: key 'normalize' must be max or none")
    if out.get("runs", 1) < 1:
        raise UsageError(f"{origin}: key 'runs' must be >= 1")
    return out


def read_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def adapt_config(cfg: dict, origin="<config>") -> AdaptConfig:
    if "lambda" not in cfg:
        log.info("%s: 'lambda' not set, using default %g", origin, DEFAULT_LAMBDA)
    kw = {k: cfg.get(k, d) for k, (_, d) in _TRAIN_KEYS.items()
          if k not in ("lambda", "normalize", "runs")}
    try:
        return AdaptConfig(lam=cfg.get("lambda", DEFAULT_LAMBDA), **kw)
    except ValueError as exc:
        raise UsageError(f"{origin}: {exc}") from None


def run_seeds(cfg: dict):
    base = cfg.get("seed", 0)
    return [base + r for r in range(cfg.get("runs", _TRAIN_KEYS["runs"][1]))]


# ---------------------------------------------------------------- manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: Path) -> Path:
    """``sha256  relative/path`` for every file under ``out_dir`` except the manifest."""
    manifest = out_dir / "MANIFEST.sha256"
    files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p != manifest)
    lines = [f"{sha256_file(p)}  {p.relative_to(out_dir).as_posix()}\n" for p in files]
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    cfg = read_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.get("seed", 0)
    for i, dom in enumerate(("source", "target")):
        kw = {k: cfg[f"{dom}.{k}"] for k in _SYNTH_FIELDS if f"{dom}.{k}" in cfg}
        kw.setdefault("seed", 2 * seed + i)
        try:
            scfg = SynthConfig(domain_tag=dom, **kw)
        except ValueError as exc:
            raise UsageError(f"{args.config}: {dom}: {exc}") from None
        ds = synth_generate(scfg, cfg.get("normalize", "max"))
        save_dataset(ds, out / f"{dom}.bin")
        log.info("wrote %s (%d samples)", out / f"{dom}.bin", len(ds))
    write_manifest(out)
    return EXIT_OK


def cmd_pretrain(args):
    cfg = read_config(args.config)
    acfg = adapt_config(cfg, args.config)
    source = load_dataset(args.source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r, seed in enumerate(run_seeds(cfg)):
        run_cfg = acfg.replace(seed=seed)
        res = pretrain(source, run_cfg)
        run_dir = out / f"run{r}"
        run_dir.mkdir(exist_ok=True)
        save_checkpoint(res.checkpoint, run_dir / "model.ckpt")
        _write_json(run_dir / "report.json", res.report.to_dict())
        log.info("run %d (seed %d): best source validation accuracy %.4f", r, seed,
                 res.report.best_accuracy)
    (out / "config.txt").write_text(acfg.as_text(), encoding="utf-8")
    _write_json(out / "summary.json", {"kind": "pretrain", "runs": len(run_seeds(cfg))})
    write_manifest(out)
    return EXIT_OK


def _init_for_run(init: Path, r: int) -> Path:
    """A pretrain output directory supplies run{r}/model.ckpt; a file is shared by all runs."""
    if init.is_dir():
        cand = init / f"run{r}" / "model.ckpt"
        if not cand.exists():
            raise FileNotFoundError(f"{init}: no checkpoint for run {r} ({cand})")
        return cand
    return init


def cmd_adapt(args):
    cfg = read_config(args.config)
    acfg = adapt_config(cfg, args.config)
    source, target = load_dataset(args.source), load_dataset(args.target)
    labeled = load_dataset(args.labeled_target) if args.labeled_target else None
    if labeled is not None and not labeled.labeled:
        raise FormatError(f"{args.labeled_target}: --labeled-target must carry labels")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best, base = [], []
    for r, seed in enumerate(run_seeds(cfg)):
        init = load_checkpoint(_init_for_run(Path(args.init), r))
        res = adapt(source, target, acfg.replace(seed=seed), init, target_labeled=labeled)
        run_dir = out / f"run{r}"
        run_dir.mkdir(exist_ok=True)
        save_checkpoint(res.checkpoint, run_dir / "model.ckpt")
        _write_json(run_dir / "report.json", res.report.to_dict())
        if res.report.best_accuracy is not None:
            best.append(res.report.best_accuracy)
            base.append(res.report.initial_accuracy)
            log.info("run %d (seed %d): target accuracy %.4f -> best %.4f", r, seed,
                     res.report.initial_accuracy, res.report.best_accuracy)
    (out / "config.txt").write_text(acfg.as_text(), encoding="utf-8")
    kind = "adapt-supervised" if labeled is not None else "adapt"
    _write_json(out / "summary.json", {"kind": kind, "runs": len(run_seeds(cfg)),
                                       "best_accuracy": best, "initial_accuracy": base})
    write_manifest(out)
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if not ds.labeled:
        raise FormatError(f"{args.data}: evaluation needs a labeled dataset")
    acc, cm = evaluate(ckpt.to_model(), ds)
    print(f"accuracy {acc:.4f} ({int(np.trace(cm))}/{int(cm.sum())})")
    for row in cm:
        print(" ".join(f"{v:6d}" for v in row))
    return EXIT_OK


def cmd_export(args):
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    export_features(ckpt.to_model(), ds, args.out)
    log.info("wrote %d feature rows to %s", len(ds), args.out)
    return EXIT_OK


def _report_rows(d: Path, name: str):
    reports = sorted(d.glob("run*/report.json"), key=lambda p: int(p.parent.name[3:] or 0))
    if not reports:
        return []
    runs = [RunReport.from_dict(json.loads(p.read_text(encoding="utf-8"))) for p in reports]
    summary = d / "summary.json"
    kind = json.loads(summary.read_text())["kind"] if summary.exists() else "runs"
    rows = []
    if kind.startswith("adapt"):
        init = [r.initial_accuracy for r in runs if r.initial_accuracy is not None]
        if init:
            rows.append(aggregate(init, f"{name} [initial]").row())
    best = [r.best_accuracy for r in runs if r.best_accuracy is not None]
    if best:
        rows.append(aggregate(best, f"{name} [{kind}]").row())
    return rows


def cmd_report(args):
    root = Path(args.dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: not a directory")
    dirs = [root] + sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("run"))
    rows = []
    for d in dirs:
        rows += _report_rows(d, d.name if d != root else root.name)
    if not rows:
        raise FileNotFoundError(f"{root}: no run*/report.json found")
    print(f"{'experiment':<24} {'acc %':>6} (+/- 95% CI)")
    for row in rows:
        print(row)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="wdtl", description="Wasserstein-distance transfer learning on spectra.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    s = sub.add_parser("synth", help="generate synthetic source/target spectra")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    s = sub.add_parser("pretrain", help="train the CNN on labeled source data")
    s.add_argument("--config", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)
    s = sub.add_parser("adapt", help="adversarial Wasserstein adaptation")
    s.add_argument("--config", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--init", required=True, help="checkpoint file or pretrain output dir")
    s.add_argument("--out", required=True)
    s.add_argument("--labeled-target", help="a few labeled target samples (supervised variant)")
    s.set_defaults(func=cmd_adapt)
    s = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)
    s = sub.add_parser("export-features", help="write extractor outputs as CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)
    s = sub.add_parser("report", help="mean and 95%% CI over runs in a directory")
    s.add_argument("--dir", required=True)
    s.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, DimensionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
