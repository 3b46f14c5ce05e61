"""Command-line front end: dataset generation, pipeline training,
checkpoint evaluation, the gradient-check suite, and ablation grids.

Exit codes: 0 success, 1 usage error, 2 validation failure (bad config,
missing or mismatched files), 3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .adapter import DependencyVector
from .config import (
    config_hash,
    data_noise_spec,
    load_config,
    pipeline_config,
    serialize_config,
    task_spec,
)
from .experiments import STUDIES, RunRecord, evaluate_conditions, mask_study
from .model import accuracy
from .noise import load_dataset, save_dataset, save_manifest
from .tasks import label_consistent_fraction, make_noisy_split
from .training import grad_check_suite, load_checkpoint, run_pipeline, save_checkpoint

CSV_HEADER = "condition,seed,stage,epoch,loss,train_acc,eval_acc,wall_ms"


def _atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def metrics_rows(records: list[RunRecord], zero_wall: bool = False) -> list[str]:
    rows = []
    for record in records:
        for report in record.reports:
            for e in report.epochs:
                wall = 0.0 if zero_wall else e.wall_ms
                rows.append(",".join([
                    record.condition, str(record.seed), report.stage, str(e.epoch),
                    _fmt(e.loss), _fmt(e.train_acc), _fmt(e.eval_acc), _fmt(wall),
                ]))
    return rows


def _stats(values: dict[int, float]) -> dict:
    data = [values[s] for s in sorted(values)]
    return {
        "mean": float(np.mean(data)),
        "stddev": float(np.std(data)),
        "per_seed": {str(s): values[s] for s in sorted(values)},
    }


def summarize(records: list[RunRecord]) -> dict:
    """Per-condition means/stddevs of the final-epoch CSV columns plus the
    named evaluation accuracies."""
    final: dict[str, dict[str, dict[int, float]]] = {}
    evals: dict[str, dict[str, dict[int, float]]] = {}
    for record in records:
        cond = final.setdefault(record.condition, {})
        if record.reports and record.reports[-1].epochs:
            last = record.reports[-1].epochs[-1]
            for key, value in (("loss", last.loss), ("train_acc", last.train_acc),
                               ("eval_acc", last.eval_acc)):
                if value is not None:
                    cond.setdefault(key, {})[record.seed] = float(value)
        econd = evals.setdefault(record.condition, {})
        for key, value in record.evals.items():
            econd.setdefault(key, {})[record.seed] = float(value)
    return {
        "conditions": {
            c: {k: _stats(v) for k, v in metrics.items()} for c, metrics in final.items()
        },
        "evals": {
            c: {k: _stats(v) for k, v in metrics.items()} for c, metrics in evals.items()
        },
    }


def export_metrics(records: list[RunRecord], csv_path, summary_path=None,
                   zero_wall: bool = False, extra: dict | None = None) -> dict:
    """Write the per-epoch CSV and a JSON summary (mean/stddev per
    condition).  Output bytes are stable for fixed inputs; ``zero_wall``
    zeroes the timing column for byte-for-byte run comparisons."""
    if not records:
        raise ValueError("export_metrics needs at least one report")
    rows = metrics_rows(records, zero_wall=zero_wall)
    _atomic_write(csv_path, "\n".join([CSV_HEADER] + rows) + "\n")
    summary = summarize(records)
    if extra:
        summary.update(extra)
    if summary_path is not None:
        _atomic_write(summary_path, json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="lope", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate the noisy train / clean eval splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run the two-stage pipeline and save a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="directory with train.tsv/eval.tsv (default: generate)")
    p.add_argument("--baseline", action="store_true",
                   help="train the single-stage, no-masking ablation baseline")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the clean eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="eval dataset file (default: regenerate from config)")
    p.add_argument("--out", help="metrics record path (default: alongside checkpoint)")
    p.add_argument("--unmasked", action="store_true")
    p.add_argument("--no-compensation", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=614)
    p.add_argument("--configs", type=int, default=20)

    p = sub.add_parser("ablate", help="run a seeded ablation grid")
    p.add_argument("--grid", required=True, choices=sorted(STUDIES))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated (default: seed..seed+4)")
    p.add_argument("--baseline", action="store_true",
                   help="include the ablation baseline (mask grid only)")
    return parser


def _parse_seeds(text, default_seed) -> list[int]:
    if not text:
        return [default_seed + i for i in range(5)]
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ValueError(f"bad --seeds value {text!r}") from exc


def _load_split(cfg, data_dir):
    if data_dir is None:
        return make_noisy_split(task_spec(cfg), cfg.train_size, data_noise_spec(cfg),
                                m_eval=cfg.eval_size)
    train = load_dataset(Path(data_dir) / "train.tsv", cfg.vocab_size, cfg.num_classes)
    eval_data = load_dataset(Path(data_dir) / "eval.tsv", cfg.vocab_size, cfg.num_classes)
    return type("Split", (), {"train": train, "eval": eval_data})()


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    split = make_noisy_split(task_spec(cfg), cfg.train_size, data_noise_spec(cfg),
                             m_eval=cfg.eval_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(split.train, out / "train.tsv")
    save_dataset(split.eval, out / "eval.tsv")
    save_manifest(split.manifests, out / "train_manifest.tsv")
    consistent = label_consistent_fraction(task_spec(cfg), split.train)
    print(f"wrote {len(split.train)} train / {len(split.eval)} eval examples to {out}")
    print(f"train label consistency after corruption: {consistent:.4f}")
    print(f"config_hash {config_hash(cfg)} seed {cfg.seed}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    split = _load_split(cfg, args.data)
    condition = "baseline" if args.baseline else "lope"
    result = run_pipeline(split.train, pipeline_config(cfg, baseline=args.baseline),
                          eval_data=split.eval, condition=condition)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "checkpoint.lope")
    if args.baseline:
        evals = {"unmasked": accuracy(result.backbone, split.eval, masked=False)}
    else:
        evals = evaluate_conditions(result, split.eval)
    record = RunRecord(condition=condition, seed=cfg.seed, reports=result.reports, evals=evals)
    export_metrics([record], out / "metrics.csv", out / "summary.json",
                   extra={"config_hash": config_hash(cfg), "seed": cfg.seed})
    print(f"checkpoint written to {out / 'checkpoint.lope'}")
    for key in sorted(evals):
        print(f"eval {key}: {evals[key]:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    expected = config_hash(cfg)
    if ckpt.config_hash and ckpt.config_hash != expected:
        raise ValueError(
            f"checkpoint was trained under config hash {ckpt.config_hash[:12]}..., "
            f"but {args.config} hashes to {expected[:12]}...; pass the matching config"
        )
    if args.data:
        eval_data = load_dataset(args.data, cfg.vocab_size, cfg.num_classes)
    else:
        eval_data = _load_split(cfg, None).eval
    masked = not args.unmasked
    compensated = not args.no_compensation
    n = ckpt.backbone.layer1.num_experts
    thetas = ckpt.thetas if compensated else (DependencyVector.zeros(n), DependencyVector.zeros(n))
    acc = accuracy(ckpt.backbone, eval_data, thetas=thetas if masked else None, masked=masked)
    print(f"accuracy {acc:.6f}")
    record = {
        "accuracy": acc,
        "masked": masked,
        "compensated": compensated,
        "config_hash": expected,
        "seed": cfg.seed,
        "checkpoint": str(args.checkpoint),
        "examples": len(eval_data),
    }
    out = Path(args.out) if args.out else Path(str(args.checkpoint) + ".eval.json")
    _atomic_write(out, json.dumps(record, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    report = grad_check_suite(seed=args.seed, configs_per_regime=args.configs)
    print(f"gradient checks: {len(report.entries)} comparisons, tolerance {report.tolerance:g}")
    for block, worst in sorted(report.worst_by_block().items()):
        print(f"  worst {block:<22s} {worst:.3e}")
    if report.passed:
        print("PASS")
        return 0
    failing = [e for e in report.entries if e.rel_err > report.tolerance]
    for e in failing[:10]:
        print(f"FAIL {e.regime} config {e.config} block {e.block}: {e.rel_err:.3e}")
    print("FAIL")
    return 3


def _print_table(header: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = "  ".join(str(h).ljust(w) for h, w in zip(header, widths))
    print(line)
    print("-" * len(line))
    for row in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)))


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = _parse_seeds(args.seeds, cfg.seed)
    if args.grid == "mask":
        study = mask_study(cfg, seeds, include_baseline=args.baseline)
    else:
        study = STUDIES[args.grid](cfg, seeds)
    out = Path(args.out)
    summary = export_metrics(study.records, out / "metrics.csv", out / "summary.json",
                             extra={"config_hash": config_hash(cfg), "study": study.name,
                                    "seeds": seeds})
    if args.grid == "mask":
        keys = ["masked_comp", "masked_nocomp", "unmasked"]
        rows = []
        for seed in seeds:
            by_seed = {r.condition: r for r in study.records if r.seed == seed}
            lope = by_seed.get("lope")
            row = [str(seed)] + [f"{lope.evals[k]:.4f}" for k in keys]
            if "baseline" in by_seed:
                row.append(f"{by_seed['baseline'].evals['unmasked']:.4f}")
            rows.append(row)
        header = ["seed"] + keys + (["baseline"] if args.baseline else [])
        _print_table(header, rows)
    else:
        header = ["condition", "eval", "mean", "stddev", "n"]
        rows = []
        for cond in study.conditions():
            for key, stats in sorted(summary["evals"][cond].items()):
                rows.append([cond, key, f"{stats['mean']:.4f}",
                             f"{stats['stddev']:.4f}", str(len(stats["per_seed"]))])
        _print_table(header, rows)
    print(f"metrics written to {out / 'metrics.csv'}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen": cmd_gen,
        "train": cmd_train,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "ablate": cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
