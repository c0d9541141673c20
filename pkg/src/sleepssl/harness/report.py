"""Tables and figures rendered from stored RunResults.

CSV output depends only on the stored results, so re-emitting a report gives
byte-identical files.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..dataio import STAGE_NAMES
from . import plotting
from .experiment import RunResult

LAYOUTS = ("table2", "fig2", "fig3", "table3")
TABLE2_METRICS = STAGE_NAMES + ["ACC", "MF1"]
ALGO_ORDER = ("supervised", "clstran", "simclr", "cpc", "tstcc")


class ReportError(ValueError):
    pass


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def _algo_rank(a: str) -> int:
    return ALGO_ORDER.index(a) if a in ALGO_ORDER else len(ALGO_ORDER)


def _check_dataset(results: list[RunResult]) -> str:
    names = sorted({r.dataset for r in results})
    if len(names) > 1:
        raise ReportError(f"cannot aggregate results from different datasets: {names}")
    if not names:
        raise ReportError("no results to report")
    return names[0]


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def rank_flags(values: list[float]) -> list[str]:
    """``best`` / ``second`` markers for the two largest distinct values."""
    distinct = sorted(set(values), reverse=True)
    out = []
    for v in values:
        if distinct and v == distinct[0]:
            out.append("best")
        elif len(distinct) > 1 and v == distinct[1]:
            out.append("second")
        else:
            out.append("")
    return out


def _metric_means(run: RunResult) -> dict[str, float]:
    done = run.completed()
    if not done:
        return {}
    out = {c: float(np.mean([m.per_class_f1[c] for m in done])) for c in STAGE_NAMES}
    out["ACC"] = float(np.mean([m.accuracy for m in done]))
    out["MF1"] = float(np.mean([m.macro_f1 for m in done]))
    return out


def _run_key(run: RunResult) -> tuple:
    c = run.config
    return (c.get("backbone", ""), float(c.get("label_fraction", 1.0)), c.get("imbalance", "none"),
            c.get("te_mode", "native"), _algo_rank(c.get("algorithm", "")), c.get("algorithm", ""), run.config_hash)


def table2(results: list[RunResult], out_dir: Path) -> list[Path]:
    runs = sorted((r for r in results if r.kind == "cv" and r.completed()), key=_run_key)
    id_cols = ["dataset", "backbone", "label_fraction", "imbalance", "te_mode", "algorithm"]
    groups = defaultdict(list)
    for i, r in enumerate(runs):
        groups[_run_key(r)[:4]].append(i)
    means = [_metric_means(r) for r in runs]
    flags = [[] for _ in runs]
    for members in groups.values():
        for metric in TABLE2_METRICS:
            marks = rank_flags([round(means[i][metric], 6) for i in members])
            for i, mark in zip(members, marks):
                if mark:
                    flags[i].append(f"{metric}:{mark}")
    rows = []
    for r, m, fl in zip(runs, means, flags):
        c = r.config
        rows.append([r.dataset, c.get("backbone"), c.get("label_fraction"), c.get("imbalance"), c.get("te_mode"),
                     c.get("algorithm")] + [_pct(m[k]) for k in TABLE2_METRICS] + [";".join(fl)])
    csv_path = out_dir / "table2.csv"
    _write_csv(csv_path, id_cols + TABLE2_METRICS + ["flags"], rows)

    fig, ax = plotting.new(6.0, 0.4 * max(len(rows), 2) + 1.2)
    grid = np.array([[means[i][k] for k in TABLE2_METRICS] for i in range(len(runs))]) * 100
    im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=100, aspect="auto")
    ax.set_xticks(range(len(TABLE2_METRICS)), TABLE2_METRICS)
    ax.set_yticks(range(len(runs)), [f"{r.config.get('backbone')}/{r.config.get('algorithm')}"
                                     f" @{100 * float(r.config.get('label_fraction', 1)):g}%" for r in runs])
    ax.grid(False)
    for (i, j), v in np.ndenumerate(grid):
        ax.text(j, i, f"{v:.1f}", ha="center", va="center", fontsize=7,
                color="white" if v < 60 else "black")
    fig.colorbar(im, ax=ax, label="score (%)")
    png = out_dir / "table2.png"
    plotting.save(fig, png)
    return [csv_path, png]


def fig2(results: list[RunResult], out_dir: Path) -> list[Path]:
    curves = defaultdict(list)
    for r in results:
        if r.kind != "cv" or not r.completed():
            continue
        c = r.config
        s = r.summary()["macro_f1"]
        curves[(c.get("backbone"), c.get("algorithm"))].append((float(c["label_fraction"]), s["mean"], s["std"]))
    rows = []
    keys = sorted(curves, key=lambda k: (k[0], _algo_rank(k[1]), k[1]))
    for key in keys:
        for frac, mean, std in sorted(curves[key]):
            rows.append([key[0], key[1], f"{100 * frac:g}", _pct(mean), _pct(std)])
    csv_path = out_dir / "fig2.csv"
    _write_csv(csv_path, ["backbone", "algorithm", "label_pct", "MF1_mean", "MF1_std"], rows)

    fig, ax = plotting.new()
    for key in keys:
        pts = sorted(curves[key])
        x = [100 * p[0] for p in pts]
        y = [100 * p[1] for p in pts]
        err = [100 * p[2] for p in pts]
        ax.errorbar(x, y, yerr=err, marker="o", capsize=2, label=f"{key[1]} ({key[0]})",
                    color=plotting.ALGO_COLORS.get(key[1]))
    ax.set_xscale("log")
    ax.set_xlabel("labelled fraction (%)")
    ax.set_ylabel("macro F1 (%)")
    ax.legend()
    png = out_dir / "fig2.png"
    plotting.save(fig, png)
    return [csv_path, png]


def imbalance_deltas(results: list[RunResult]) -> list[dict]:
    """Pairs of runs that differ only in balanced vs imbalanced pretraining."""
    by_key = {}
    for r in results:
        if r.kind != "cv" or not r.completed():
            continue
        c = dict(r.config)
        mode = c.pop("imbalance", "none")
        if mode not in ("none", "oversample_pretext"):
            continue
        key = repr(sorted((k, repr(v)) for k, v in c.items()))
        by_key.setdefault(key, {})[mode] = r
    out = []
    for pair in by_key.values():
        if len(pair) != 2:
            continue
        imb, bal = pair["none"], pair["oversample_pretext"]
        m_imb = float(np.mean([m.macro_f1 for m in imb.completed()]))
        m_bal = float(np.mean([m.macro_f1 for m in bal.completed()]))
        out.append({"backbone": imb.config.get("backbone"), "algorithm": imb.config.get("algorithm"),
                    "label_fraction": imb.config.get("label_fraction"),
                    "mf1_imbalanced": m_imb, "mf1_balanced": m_bal, "delta": abs(m_bal - m_imb)})
    return sorted(out, key=lambda d: (d["backbone"], _algo_rank(d["algorithm"]), d["label_fraction"]))


def fig3(results: list[RunResult], out_dir: Path) -> list[Path]:
    deltas = imbalance_deltas(results)
    rows = [[d["backbone"], d["algorithm"], d["label_fraction"], _pct(d["mf1_imbalanced"]),
             _pct(d["mf1_balanced"]), _pct(d["delta"])] for d in deltas]
    csv_path = out_dir / "fig3.csv"
    _write_csv(csv_path, ["backbone", "algorithm", "label_fraction", "MF1_imbalanced", "MF1_balanced", "delta"],
               rows)

    fig, ax = plotting.new()
    labels = [f"{d['algorithm']}\n{d['backbone']}" for d in deltas]
    x = np.arange(len(deltas))
    ax.bar(x - 0.2, [100 * d["mf1_imbalanced"] for d in deltas], 0.4, label="imbalanced", color="#999999")
    ax.bar(x + 0.2, [100 * d["mf1_balanced"] for d in deltas], 0.4, label="oversampled", color="#2166ac")
    ax.set_xticks(x, labels)
    ax.set_ylabel("macro F1 (%)")
    ax.legend()
    png = out_dir / "fig3.png"
    plotting.save(fig, png)
    return [csv_path, png]


def table3(results: list[RunResult], out_dir: Path) -> list[Path]:
    runs = [r for r in results if r.kind == "transfer" and r.completed()]
    scenarios = sorted({r.scenario for r in runs})
    rows = []
    cells = {}
    for sc in scenarios:
        members = sorted((r for r in runs if r.scenario == sc),
                         key=lambda r: (_algo_rank(r.config.get("algorithm", "")), r.config.get("algorithm", "")))
        mf1 = [round(r.completed()[0].macro_f1, 6) for r in members]
        for r, mark in zip(members, rank_flags(mf1)):
            m = r.completed()[0]
            cells[(sc, r.config.get("algorithm"))] = m.macro_f1
            rows.append([sc, r.config.get("algorithm"), _pct(m.macro_f1), _pct(m.accuracy), mark])
    csv_path = out_dir / "table3.csv"
    _write_csv(csv_path, ["scenario", "algorithm", "MF1", "ACC", "flag"], rows)

    algos = sorted({a for _, a in cells}, key=_algo_rank)
    fig, ax = plotting.new(max(4.5, 1.2 * len(scenarios)), 3.0)
    width = 0.8 / max(len(algos), 1)
    for j, a in enumerate(algos):
        ax.bar(np.arange(len(scenarios)) + j * width, [100 * cells.get((sc, a), np.nan) for sc in scenarios],
               width, label=a, color=plotting.ALGO_COLORS.get(a))
    ax.set_xticks(np.arange(len(scenarios)) + 0.4 - width / 2, scenarios)
    ax.set_ylabel("target macro F1 (%)")
    ax.legend()
    png = out_dir / "table3.png"
    plotting.save(fig, png)
    return [csv_path, png]


def aggregate_report(results: list[RunResult], layout: str, out_dir: Path | str) -> list[Path]:
    if layout not in LAYOUTS:
        raise ReportError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    _check_dataset(results)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {"table2": table2, "fig2": fig2, "fig3": fig3, "table3": table3}[layout](results, out_dir)
