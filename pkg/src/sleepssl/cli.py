"""Command-line entry point: ``sleepssl <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .dataio import (EPOCH_SECONDS, SubjectRecord, build_manifest, make_fold_plan, map_to_aasm, store_subject,
                     trim_wake, DatasetManifest, SCHEMES)
from .backbone import build_model
from .pretext import ALGORITHMS, pretrain

log = logging.getLogger("sleepssl")


def cmd_ingest(args) -> int:
    """Convert per-subject ``.npz`` exports (``signal``, ``labels``, ``sampling_rate_hz``) to subject files."""
    src, out = Path(args.in_dir), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(src.glob("*.npz"))
    if not files:
        log.error("no .npz files in %s", src)
        return 1
    for f in files:
        with np.load(f, allow_pickle=False) as z:
            fs = int(z["sampling_rate_hz"])
            signal = np.asarray(z["signal"], dtype=np.float32)
            raw = np.asarray(z["labels"])
            channel = str(z["channel"]) if "channel" in z.files else args.channel
        epochs = signal.reshape(-1, EPOCH_SECONDS * fs)
        if len(epochs) != len(raw):
            log.error("%s: %d epochs but %d labels", f.name, len(epochs), len(raw))
            return 1
        stages, dropped = map_to_aasm(raw, args.scheme)
        rec = SubjectRecord(f.stem, fs, epochs[~dropped], stages, channel=channel)
        if args.trim_wake:
            rec = trim_wake(rec, args.max_wake_minutes)
        store_subject(rec, out / f"{rec.subject_id}.ssb")
        log.info("%s: kept %d of %d epochs", rec.subject_id, rec.n_epochs, len(raw))
    manifest = build_manifest(args.name, out, channel=args.channel)
    manifest.save(out / "manifest.json")
    print(json.dumps(manifest.class_counts))
    return 0


def cmd_synth(args) -> int:
    from .harness.synthetic import generate_synthetic
    shift = args.shift if args.shift else None
    manifest, _ = generate_synthetic(args.subjects, args.epochs_per_subject, args.epoch_len, shift=shift,
                                     seed=args.seed, out_dir=args.out, name=args.name)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "class_counts": manifest.class_counts}))
    return 0


def cmd_pretrain(args) -> int:
    from .harness.config import load_config
    from .harness.experiment import SubjectStore, set_deterministic, unit_seed
    cfg, _ = load_config(args.config)
    if cfg.deterministic:
        set_deterministic(True)
    store = SubjectStore(DatasetManifest.load(cfg.dataset))
    plan = make_fold_plan(store.subject_ids, cfg.k, cfg.seed)
    train = store.pooled(plan.train_subjects(args.fold), "pretrain")
    spec = cfg.model_spec(store.manifest.sampling_rate_hz)
    model = build_model(spec, unit_seed(cfg.seed, args.fold, args.algo, "init"))
    result = pretrain(model, args.algo, train.x, epochs=cfg.pretrain.epochs, batch=cfg.pretrain.batch,
                      lr=cfg.pretrain.lr, wd=cfg.pretrain.wd, seed=unit_seed(cfg.seed, args.fold, args.algo),
                      cfg=cfg.pretext, out_dir=args.out)
    print(json.dumps({"checkpoint": str(result.checkpoint), "final_loss": result.trace[-1]["loss"]
                      if result.trace else None}))
    return 0


def cmd_run(args) -> int:
    from .harness.config import expand_grid, load_config
    from .harness.experiment import ResultStore, run_grid
    base, grid = load_config(args.config)
    configs = expand_grid(base, grid) if args.grid else [base]
    store = ResultStore(args.results)
    runs = run_grid(configs, store, workers=args.workers, ckpt_root=args.ckpt_dir)
    for r in runs:
        s = r.summary()
        mf1 = s.get("macro_f1", {})
        print(f"{r.config_hash} {r.config['backbone']} {r.config['algorithm']} "
              f"frac={r.config['label_fraction']} MF1={mf1.get('mean', float('nan')):.4f}"
              f"+-{mf1.get('std', float('nan')):.4f} folds={s.get('n_folds', 0)}/{len(r.folds)}")
    return 0 if all(f.error is None for r in runs for f in r.folds) else 2


def cmd_transfer(args) -> int:
    from .harness.config import load_config
    from .harness.experiment import ResultStore, SubjectStore, set_deterministic, transfer_experiment, \
        transfer_result
    cfg, _ = load_config(args.config)
    if cfg.deterministic:
        set_deterministic(True)
    manifest = DatasetManifest.load(cfg.dataset)
    spec = cfg.model_spec(manifest.sampling_rate_hz)
    results = ResultStore(args.results)
    for algo in args.algo.split(","):
        store = SubjectStore(manifest)
        start = time.perf_counter()
        m = transfer_experiment(args.source, args.target, algo, spec, cfg.seed, store, cfg.pretrain,
                                cfg.finetune, cfg.pretext)
        results.append(transfer_result(args.source, args.target, algo, m, cfg.to_json(), manifest.name,
                                       time.perf_counter() - start))
        print(f"{args.source}->{args.target} {algo} MF1={m.macro_f1:.4f} ACC={m.accuracy:.4f}")
    return 0


def cmd_report(args) -> int:
    from .harness.experiment import ResultStore
    from .harness.report import aggregate_report
    results = ResultStore(args.in_path).load()
    for p in aggregate_report(results, args.layout, args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sleepssl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert raw per-subject exports into subject files")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--scheme", required=True, choices=sorted(SCHEMES))
    p.add_argument("--trim-wake", action="store_true")
    p.add_argument("--max-wake-minutes", type=int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="dataset")
    p.add_argument("--channel", default="")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--epochs-per-subject", type=int, default=500)
    p.add_argument("--epoch-len", type=int, default=300)
    p.add_argument("--shift", type=float, default=0.0, help="max per-subject frequency scale offset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain an encoder on one fold's training subjects")
    p.add_argument("--config", required=True)
    p.add_argument("--algo", required=True, choices=ALGORITHMS)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="cross-validated run(s) from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", action="store_true", help="expand the [grid] table")
    p.add_argument("--results", default="results.jsonl")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--ckpt-dir", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("transfer", help="cross-subject transfer scenario")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--algo", required=True, help="algorithm or comma-separated list")
    p.add_argument("--config", required=True)
    p.add_argument("--results", default="results.jsonl")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("report", help="render tables and figures from a results file")
    p.add_argument("--layout", required=True, choices=["table2", "fig2", "fig3", "table3"])
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
