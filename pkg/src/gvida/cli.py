"""Command-line entry point: gen-data, train, eval, sweep, report, plot.

Exit codes: 0 success, 2 configuration or input error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import __version__
from .baselines import parse_variant
from .config import ExperimentConfig, apply_overrides, load_config
from .data import DomainDataset, ShiftSpec, generate_pair, load_dataset, save_dataset
from .errors import ConfigurationError, FormatError, GvidaError

log = logging.getLogger("gvida")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
REPORT_HEADER = ["variant", "task", "seed", "accuracy", "mean", "std"]
DEFAULT_RUNS_DIR = "runs"


def version_hash(version: str = __version__) -> str:
    """Git-style blob hash (sha1 of "blob <len>\\0<bytes>") of the version string."""
    data = version.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set {item!r}: expected KEY=VALUE")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    if getattr(args, "variant", None):
        out["variant.name"] = args.variant
    if getattr(args, "epochs", None) is not None:
        out["train.epochs"] = args.epochs
    if getattr(args, "seeds", None):
        out["seeds"] = _int_list(args.seeds, "--seeds")
    if getattr(args, "run_name", None):
        out["output.run_name"] = args.run_name
    return out


def _int_list(text: str, flag: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"{flag}: expected comma-separated integers, got {text!r}") from None


def resolve_config(args) -> ExperimentConfig:
    """Built-in defaults, then the config file, then CLI flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return apply_overrides(cfg, _overrides(args), "<command line>")


def runs_root(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "runs_dir", None):
        return Path(args.runs_dir)
    if cfg.output.runs_dir:
        return Path(cfg.output.runs_dir)
    return Path(os.environ.get("GVIDA_RUNS_DIR", DEFAULT_RUNS_DIR))


def datasets_for(cfg: ExperimentConfig, seed: int) -> Tuple[DomainDataset, DomainDataset]:
    """Load the configured CSVs, or generate a pair seeded by shift.seed + run seed."""
    dc = cfg.data
    if dc.source_path or dc.target_path:
        if not (dc.source_path and dc.target_path):
            raise ConfigurationError("data.source_path and data.target_path must be given together")
        return load_dataset(dc.source_path, dc.classes), load_dataset(dc.target_path, dc.classes)
    spec = ShiftSpec(dc.shift.kind, dc.shift.magnitude, dc.shift.noise_std, dc.shift.seed + seed)
    return generate_pair(spec, dc.n_per_class, dc.classes, dc.dim, dc.geometry, dc.cluster_std)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_one(cfg: ExperimentConfig, seed: int, run_dir: Path) -> dict:
    """Train one (variant, seed) into `run_dir` and describe it there."""
    from .trainer import fit

    cfg = apply_overrides(cfg, {"train.seed": seed, "seeds": [seed]})
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", cfg.model_dump(mode="json"))
    _write_json(run_dir / "run.json", {"variant": cfg.variant.name, "task": cfg.task, "seed": seed,
                                       "seeds": [seed], "version": __version__,
                                       "version_hash": version_hash()})
    source, target = datasets_for(cfg, seed)
    result = fit(cfg, source, target, out_dir=run_dir)
    acc = result.metrics[-1]["acc_target"]
    return {"variant": cfg.variant.name, "task": cfg.task, "seed": seed, "dir": str(run_dir),
            "accuracy": acc}


def _run_dir(root: Path, cfg: ExperimentConfig, variant: str, seed: int) -> Path:
    name = cfg.output.run_name or cfg.task
    return root / name / variant / f"seed{seed}"


# report


def find_metric_logs(root) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(root.rglob("metrics.csv"))


def _describe(metrics_path: Path) -> dict:
    meta_path = metrics_path.parent / "run.json"
    if meta_path.is_file():
        try:
            return json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{meta_path}: invalid JSON: {exc}") from None
    return {"variant": metrics_path.parent.name, "task": "unknown", "seed": 0}


def build_report(root) -> List[dict]:
    """Rows of (variant, task, seed, accuracy, mean, std); accuracy is the final-epoch target accuracy.

    mean and std (population) are taken over the seeds of the same (variant, task) only.
    """
    from .trainer import read_metrics

    logs = find_metric_logs(root)
    if not logs:
        raise ConfigurationError(f"{root}: no metric logs found")
    entries = []
    for path in logs:
        rows = read_metrics(path)
        if not rows:
            raise FormatError(f"{path}: metric log has no rows")
        meta = _describe(path)
        entries.append((str(meta["variant"]), str(meta["task"]), int(meta["seed"]), float(rows[-1]["acc_target"])))
    groups: Dict[Tuple[str, str], List[float]] = {}
    for v, t, _, acc in entries:
        groups.setdefault((v, t), []).append(acc)
    out = []
    for v, t, s, acc in sorted(entries):
        accs = np.asarray(groups[(v, t)])
        out.append({"variant": v, "task": t, "seed": s, "accuracy": acc,
                    "mean": float(accs.mean()), "std": float(accs.std())})
    return out


def write_report(rows: Sequence[dict], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r["variant"], r["task"], r["seed"], repr(r["accuracy"]), repr(r["mean"]), repr(r["std"])])


def render_report(rows: Sequence[dict]) -> str:
    cells = [REPORT_HEADER] + [[r["variant"], r["task"], str(r["seed"]), f"{100 * r['accuracy']:.2f}",
                                f"{100 * r['mean']:.2f}", f"{100 * r['std']:.2f}"] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_HEADER))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _emit_report(root: Path, out: Optional[Path] = None) -> List[dict]:
    rows = build_report(root)
    out = out or root
    out.mkdir(parents=True, exist_ok=True)
    write_report(rows, out / "report.csv")
    text = render_report(rows)
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return rows


# subcommands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    source, target = datasets_for(cfg, seed)
    save_dataset(source, out / "source.csv")
    save_dataset(target, out / "target.csv")
    print(f"wrote {out / 'source.csv'} and {out / 'target.csv'} ({source.n} rows each)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    root = runs_root(args, cfg)
    for seed in cfg.seeds:
        info = run_one(cfg, seed, _run_dir(root, cfg, cfg.variant.name, seed))
        print(f"{info['variant']} seed={seed} acc_target={info['accuracy']:.4f} -> {info['dir']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_model

    if not Path(args.checkpoint).is_file():
        raise ConfigurationError(f"{args.checkpoint}: checkpoint not found")
    model = load_model(args.checkpoint)
    if args.data:
        ds = load_dataset(args.data, model.C)
    else:
        cfg = resolve_config(args)
        seed = args.seed if args.seed is not None else cfg.seeds[0]
        ds = datasets_for(cfg, seed)[1]
    print(f"accuracy={evaluate(model, ds):.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    variants = [v.strip() for v in (args.variants or cfg.variant.name).split(",") if v.strip()]
    for v in variants:
        parse_variant(v)
    root = runs_root(args, cfg)
    sweep_dir = root / (cfg.output.run_name or cfg.task)
    runs = []
    for v in variants:
        vcfg = apply_overrides(cfg, {"variant.name": v})
        for seed in cfg.seeds:
            info = run_one(vcfg, seed, _run_dir(root, vcfg, v, seed))
            print(f"{v} seed={seed} acc_target={info['accuracy']:.4f}")
            runs.append(info)
    _write_json(sweep_dir / "manifest.json", {"variants": variants, "seeds": list(cfg.seeds), "task": cfg.task,
                                              "version": __version__, "version_hash": version_hash(),
                                              "config": cfg.model_dump(mode="json"), "runs": runs})
    _emit_report(sweep_dir)
    return EXIT_OK


def cmd_report(args) -> int:
    _emit_report(Path(args.runs_dir), Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .trainer import read_metrics

    root = Path(args.runs_dir)
    logs = find_metric_logs(root)
    if not logs:
        raise ConfigurationError(f"{root}: no metric logs found")
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in logs:
        rows = read_metrics(path)
        tag = "_".join(path.parent.relative_to(root).parts) or "run"
        epochs = [int(r["epoch"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ("l1", "l2", "l3", "l4", "l5", "total"):
            ax.plot(epochs, [float(r[key]) for r in rows], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"{tag}_loss.png")
        plt.close(fig)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, [float(r["acc_target"]) for r in rows])
        ax.set_xlabel("epoch")
        ax.set_ylabel("target accuracy")
        fig.tight_layout()
        fig.savefig(out / f"{tag}_accuracy.png")
        plt.close(fig)
        written += [out / f"{tag}_loss.png", out / f"{tag}_accuracy.png"]
    print(f"wrote {len(written)} image files to {out}")
    return EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser, variant=True) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field by dotted path, e.g. train.epochs=5 (repeatable)")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--epochs", type=int)
    p.add_argument("--run-name")
    p.add_argument("--runs-dir", help="output root (default: $GVIDA_RUNS_DIR or ./runs)")
    if variant:
        p.add_argument("--variant", help="source_only, cdan, npa+X, vida(VAR) or gvida")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gvida", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write source.csv and target.csv")
    _add_config_flags(p, variant=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant for every configured seed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print the accuracy of a checkpoint")
    _add_config_flags(p, variant=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="labelled dataset CSV (default: the configured target domain)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train variants x seeds and write a manifest and report")
    _add_config_flags(p, variant=False)
    p.add_argument("--variants", help="comma-separated variant names")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate metric logs into a report table")
    p.add_argument("--runs-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="write loss and accuracy curves as PNG files")
    p.add_argument("--runs-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GvidaError, ArithmeticError, AssertionError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
