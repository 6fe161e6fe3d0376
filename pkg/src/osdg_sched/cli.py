"""Command-line harness: generate, train, evaluate, compare, export-embeddings.

Exit codes: 0 success, 1 runtime/I-O failure, 2 usage error. `compare` may run
its (scheduler, seed) jobs in parallel processes, capped by the
OSDG_SCHED_THREADS environment variable; rows are sorted before writing so
output is identical regardless of worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets, evaluation
from .config import RunConfig
from .datasets import DatasetError
from .evaluation import HEADS, UNKNOWN, PredictionRecord
from .networks import load_checkpoint
from .training import TrainingError, train

SCHEDULER_NAMES = ("hardest", "sequential", "random", "easiest", "selfgen")


def _eprint(*args) -> None:
    print(*args, file=sys.stderr)


# -- argument plumbing ---------------------------------------------------------


def _int_pair(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float, dest="lr_decay")
    p.add_argument("--lr-decay-step", type=int, dest="lr_decay_step")
    p.add_argument("--w-cls", type=float, dest="w_cls")
    p.add_argument("--w-reg", type=float, dest="w_reg")
    p.add_argument("--w-rbe", type=float, dest="w_rbe")
    p.add_argument("--sigma", type=float)
    p.add_argument("--probe-size", type=int, dest="probe_size")
    p.add_argument("--scheduler", choices=SCHEDULER_NAMES)
    p.add_argument("--eval-interval", type=int, dest="eval_interval")
    p.add_argument("--hidden-widths", type=_int_pair, dest="hidden_widths",
                   help="comma-separated layer widths, e.g. 64,64")
    p.add_argument("--rebias-depths", type=_int_pair, dest="rebias_depths",
                   help="branch depths pair, e.g. 2,1")
    p.add_argument("--omega-min", type=float, dest="omega_min")
    p.add_argument("--conf-mode", choices=("softmax", "evidential"), dest="conf_mode")
    p.add_argument("--no-rbe", action="store_const", const=True, dest="disable_rbe",
                   default=None, help="drop the evidential loss term entirely")
    p.add_argument("--no-rb", action="store_const", const=True, dest="disable_rb",
                   default=None, help="keep the evidential loss but drop its discrepancy term")
    p.add_argument("--single-update", action="store_const", const=True,
                   dest="single_update", default=None,
                   help="one cumulative update per iteration instead of two")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda-quantile", type=float, dest="lambda_quantile")
    p.add_argument("--oscr-integration", choices=("trapezoid", "step"),
                   dest="oscr_integration")
    p.add_argument("--hscore-accepted-only", action="store_const", const=True,
                   dest="hscore_accepted_only", default=None)


_CONFIG_KEYS = (
    "seed", "max_steps", "batch_size", "lr", "lr_decay", "lr_decay_step",
    "w_cls", "w_reg", "w_rbe", "sigma", "probe_size", "scheduler",
    "eval_interval", "hidden_widths", "rebias_depths", "omega_min", "conf_mode",
    "disable_rbe", "disable_rb", "single_update",
    "data_dir", "out_dir", "lambda_quantile", "oscr_integration", "hscore_accepted_only",
)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    cfg = cfg.with_overrides(**overrides)
    cfg.validate()
    return cfg


# -- commands -------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    ds = datasets.generate(
        seed=args.seed,
        num_domains=args.domains,
        num_classes=args.classes,
        num_unseen_classes=args.unseen,
        feature_dim=args.dim,
        samples_per_cell=args.per_cell,
        difficulty=args.difficulty,
        val_fraction=args.val_fraction,
        held_out_domain_id=args.held_out,
        class_noise=args.class_noise,
    )
    datasets.save(ds, args.out)
    m = ds.manifest
    print(f"wrote {args.out}: {m.num_domains} domains, {m.num_classes} classes "
          f"({len(m.seen_class_ids)} seen / {len(m.unseen_class_ids)} unseen), "
          f"dim {m.feature_dim}, held-out domain {m.held_out_domain_id}, "
          f"{len(ds.split('train'))}/{len(ds.split('val'))}/{len(ds.split('test'))} "
          f"train/val/test rows")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(cfg.out_dir)
    ds = datasets.load(cfg.data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    result = train(ds, cfg.train, out_dir)
    print(f"finished {cfg.train.max_steps} steps (scheduler={cfg.train.scheduler}, "
          f"seed={cfg.train.seed})")
    if result.val_acc is not None:
        print(f"val_acc={result.val_acc:.4f} test_acc={result.test_acc:.4f}")
    return 0


def _evaluate_checkpoint(
    ds, main, cfg: RunConfig,
) -> tuple[list[evaluation.EvalReport], list[PredictionRecord]]:
    seen = sorted(ds.manifest.seen_class_ids)
    index_to_class = np.asarray(seen)
    unseen = set(ds.manifest.unseen_class_ids)

    val = ds.split("val")
    val_preds = evaluation.predict(main, val.features)
    test = ds.split("test")
    test_preds = evaluation.predict(main, test.features)

    reports = []
    all_records: list[PredictionRecord] = []
    for head in HEADS:
        lam = evaluation.derive_lambda(val_preds[head][1], cfg.lambda_quantile)
        pred_idx, confs = test_preds[head]
        records = []
        for i in range(len(test)):
            true = int(test.class_ids[i])
            records.append(PredictionRecord(
                sample_id=i,
                true_class=UNKNOWN if true in unseen else true,
                predicted=int(index_to_class[pred_idx[i]]),
                confidence=float(confs[i]),
                head=head,
            ))
        reports.append(evaluation.evaluate_head(
            records, lam, integration=cfg.oscr_integration,
            hscore_accepted_only=cfg.hscore_accepted_only))
        all_records.extend(records)
    return reports, all_records


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    ds = datasets.load(cfg.data_dir)
    main, _, _ = load_checkpoint(args.checkpoint)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, records = _evaluate_checkpoint(ds, main, cfg)
    evaluation.write_report(reports, out_dir / "eval_report.json")
    evaluation.write_predictions(records, out_dir / "predictions.csv")
    for r in reports:
        print(f"head={r.head} acc={r.acc:.4f} h_score={r.h_score:.4f} "
              f"oscr={r.oscr:.4f} lambda={r.lam:.4f}")
    return 0


def _compare_one(payload: tuple) -> list[dict]:
    """Worker: train one (scheduler, seed) run and evaluate both heads."""
    flat_cfg, scheduler, seed = payload
    cfg = RunConfig.from_flat_dict(flat_cfg)
    cfg = replace(cfg, train=replace(cfg.train, scheduler=scheduler, seed=seed))
    ds = datasets.load(cfg.data_dir)
    rows = []
    try:
        result = train(ds, cfg.train)
        reports, _ = _evaluate_checkpoint(ds, result.main, cfg)
        for r in reports:
            rows.append({"scheduler": scheduler, "head": r.head, "seed": seed,
                         "acc": r.acc, "h_score": r.h_score, "oscr": r.oscr,
                         "status": "ok"})
    except Exception as e:  # recorded per row; compare exits 1 if any failed
        for head in HEADS:
            rows.append({"scheduler": scheduler, "head": head, "seed": seed,
                         "acc": None, "h_score": None, "oscr": None,
                         "status": f"failed: {type(e).__name__}"})
    return rows


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    schedulers = [s.strip() for s in args.schedulers.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not schedulers or not seeds:
        raise ValueError("compare: need at least one scheduler and one seed")
    for s in schedulers:
        if s not in SCHEDULER_NAMES:
            raise ValueError(f"compare: unknown scheduler {s!r}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")

    jobs = [(cfg.to_flat_dict(), s, seed) for s in schedulers for seed in seeds]
    workers = int(os.environ.get("OSDG_SCHED_THREADS", "1"))
    rows: list[dict] = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_compare_one, jobs):
                rows.extend(chunk)
    else:
        for job in jobs:
            rows.extend(_compare_one(job))

    rows.sort(key=lambda r: (r["scheduler"], r["head"], r["seed"]))
    summary = []
    for scheduler in sorted(set(schedulers)):
        for head in HEADS:
            ok = [r for r in rows if r["scheduler"] == scheduler and r["head"] == head
                  and r["status"] == "ok"]
            if not ok:
                continue
            for stat, fn in (("mean", np.mean), ("std", np.std)):
                summary.append({
                    "scheduler": scheduler, "head": head, "seed": stat,
                    "acc": float(fn([r["acc"] for r in ok])),
                    "h_score": float(fn([r["h_score"] for r in ok])),
                    "oscr": float(fn([r["oscr"] for r in ok])),
                    "status": f"n={len(ok)}",
                })
    columns = ("scheduler", "head", "seed", "acc", "h_score", "oscr", "status")
    with open(out_dir / "comparison.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(columns) + "\n")
        for row in rows + summary:
            f.write(",".join(_fmt_cell(row[c]) for c in columns) + "\n")
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {out_dir / 'comparison.csv'}: {len(rows)} result rows, "
          f"{len(summary)} summary rows, {failed} failures")
    return 1 if failed else 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    ds = datasets.load(args.data)
    main, _, _ = load_checkpoint(args.checkpoint)
    data = ds.split(args.split)
    evaluation.export_embeddings(
        main, data.features, data.class_ids, data.domain_ids,
        set(ds.manifest.unseen_class_ids), args.out)
    print(f"wrote {args.out}: {len(data)} rows")
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osdg-sched",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-domain dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--domains", type=int, default=4)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--unseen", type=int, default=4)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--per-cell", type=int, default=200, dest="per_cell")
    g.add_argument("--difficulty", choices=sorted(datasets.DIFFICULTY_PRESETS), default="easy")
    g.add_argument("--val-fraction", type=float, default=0.1, dest="val_fraction")
    g.add_argument("--held-out", type=int, default=None, dest="held_out")
    g.add_argument("--class-noise", type=float, default=None, dest="class_noise")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="run the meta-training loop")
    _add_train_flags(t)
    _add_eval_flags(t)
    t.add_argument("--data", dest="data_dir")
    t.add_argument("--out", dest="out_dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="open-set evaluation of a checkpoint")
    e.add_argument("--config")
    _add_eval_flags(e)
    e.add_argument("--data", dest="data_dir")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", dest="out_dir")
    e.set_defaults(fn=cmd_evaluate)

    c = sub.add_parser("compare", help="train and evaluate several schedulers x seeds")
    _add_train_flags(c)
    _add_eval_flags(c)
    c.add_argument("--data", dest="data_dir")
    c.add_argument("--out", dest="out_dir")
    c.add_argument("--schedulers", default=",".join(SCHEDULER_NAMES))
    c.add_argument("--seeds", default="0")
    c.set_defaults(fn=cmd_compare)

    x = sub.add_parser("export-embeddings", help="dump branch embeddings to CSV")
    x.add_argument("--data", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--split", choices=datasets.SPLITS, default="test")
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_embeddings)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DatasetError, ValueError) as e:
        _eprint(f"error: {e}")
        return 2
    except FileNotFoundError as e:
        _eprint(f"error: {e}")
        return 1
    except (TrainingError, OSError) as e:
        _eprint(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
