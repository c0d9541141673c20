"""Acceptance criteria, one test per criterion.

Each test appends a ``PASS``/``FAIL`` line to the terminal summary and then
asserts.  The heavy runs (criteria 7, 8, 9, 11) use the desk-scale cnn1d
configuration on seeded synthetic data; see README for the settings.
"""

import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import ACCEPTANCE_LINES
from sleepssl.augment import add_noise, negate, permute_segments, time_shift_rotate, make_view_pair, transform_by_labels
from sleepssl.backbone import BACKBONES, ModelSpec, build_model, count_parameters, desk_spec
from sleepssl.dataio import LabeledSet, SubjectRecord, make_fold_plan, select_label_fraction, trim_wake
from sleepssl.harness import Budget, ExperimentConfig, SubjectStore, evaluate, finetune, generate_synthetic
from sleepssl.harness.experiment import run_experiment, run_fold, transfer_experiment
from sleepssl.harness.metrics import score
from sleepssl.harness.training import mean_ce
from sleepssl.pretext import (Aggregator, CpcConfig, PretextConfig, build_heads, cpc_loss, cross_entropy,
                              make_predictors, nt_xent, pretext_step, pretrainable_parameters)

SSL = ("simclr", "cpc", "tstcc")
CONTRASTIVE = ("simclr", "cpc", "tstcc")


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- oracles shared with the unit suites -------------------------------------------------------

def brute_nt_xent(za, zb, tau):
    z = za.tolist() + zb.tolist()
    n = len(za)
    total = 0.0
    for i in range(2 * n):
        j = i + n if i < n else i - n
        sims = [sum(p * q for p, q in zip(z[i], z[a])) / tau for a in range(2 * n)]
        den = sum(math.exp(s) for a, s in enumerate(sims) if a != i)
        total += -math.log(math.exp(sims[j]) / den)
    return total / (2 * n)


def brute_metrics(y, p):
    f1s, present = [], []
    for c in range(5):
        tp = sum(1 for t, q in zip(y, p) if t == c and q == c)
        fp = sum(1 for t, q in zip(y, p) if t != c and q == c)
        fn = sum(1 for t, q in zip(y, p) if t == c and q != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        present.append(tp + fn > 0)
    acc = sum(1 for t, q in zip(y, p) if t == q) / len(y)
    return acc, sum(f for f, ok in zip(f1s, present) if ok) / sum(present), f1s


def fd_relative_error(fn, x, step=1e-4):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach()
    numeric = torch.zeros_like(analytic)
    flat = x.detach().clone()
    view = flat.view(-1)
    with torch.no_grad():
        for i in range(view.numel()):
            orig = view[i].item()
            view[i] = orig + step
            up = fn(flat).item()
            view[i] = orig - step
            down = fn(flat).item()
            view[i] = orig
            numeric.view(-1)[i] = (up - down) / (2 * step)
    return ((analytic - numeric).norm() / max(analytic.norm().item(), numeric.norm().item(), 1e-12)).item()


# --- 1 ---------------------------------------------------------------------------------------

def test_criterion_1_nt_xent_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        n, p = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        tau = float(rng.choice([0.1, 0.2, 1.0]))
        za = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(n, p))), dim=1)
        zb = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(n, p))), dim=1)
        got, want = nt_xent(za, zb, tau).item(), brute_nt_xent(za, zb, tau)
        worst = max(worst, abs(got - want) / max(abs(want), 1e-300) if want else abs(got))
    single = nt_xent(torch.eye(1, 3, dtype=torch.float64), torch.eye(1, 3, dtype=torch.float64).roll(1, 1), 0.2)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and single.item() == 0.0 and elapsed < 10
    verdict(1, ok, f"max rel err {worst:.2e} over 200 batches, N=1 loss {single.item()}, {elapsed:.1f}s")


# --- 2 ---------------------------------------------------------------------------------------

def test_criterion_2_gradient_checks():
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(7)
    errs = {"nt_xent": [], "cpc": [], "clstran": []}
    for i in range(50):
        n, p = 2 + i % 3, 3 + i % 4
        raw = torch.randn(2, n, p, generator=gen, dtype=torch.float64)
        errs["nt_xent"].append(fd_relative_error(
            lambda u: nt_xent(torch.nn.functional.normalize(u[0], dim=1),
                              torch.nn.functional.normalize(u[1], dim=1), 0.2 + 0.1 * (i % 3)), raw))

        torch.manual_seed(i)
        agg = Aggregator(3, 4).double()
        preds = make_predictors(4, 3, 2).double()
        z = torch.randn(n, 6, 3, generator=gen, dtype=torch.float64)
        errs["cpc"].append(fd_relative_error(lambda t: cpc_loss(t, agg, preds, CpcConfig(0.5, 2, 4)).loss, z))

        logits = 2 * torch.randn(n + 3, 4, generator=gen, dtype=torch.float64)
        target = torch.randint(0, 4, (n + 3,), generator=gen)
        errs["clstran"].append(fd_relative_error(lambda t: cross_entropy(t, target), logits))
    elapsed = time.perf_counter() - start
    worst = {k: max(v) for k, v in errs.items()}
    ok = all(v <= 1e-3 for v in worst.values()) and elapsed < 60
    verdict(2, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")


# --- 3 ---------------------------------------------------------------------------------------

signals = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(10, 80)),
                 elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=100, deadline=None, database=None)
@given(x=signals, seed=st.integers(0, 2**31 - 1), n_seg=st.integers(2, 10))
def _augmentation_properties(x, seed, n_seg):
    assert np.array_equal(negate(negate(x)), x)
    L = x.shape[1]
    # rotate by f*L then by the complement: identity when both shifts are whole numbers
    f = 0.2 if L % 5 == 0 else 0.5 if L % 2 == 0 else None
    y = time_shift_rotate(x, 0.2)
    assert np.array_equal(np.sort(y, 1), np.sort(x, 1))
    if f is not None:
        assert np.array_equal(time_shift_rotate(time_shift_rotate(x, f), 1 - f), x)
    z = permute_segments(x, n_seg, seed=seed)
    assert np.array_equal(np.sort(z, 1), np.sort(x, 1))
    assert np.array_equal(z, permute_segments(x, n_seg, seed=seed))
    assert np.array_equal(add_noise(x, 0.8, seed=seed), add_noise(x, 0.8, seed=seed))
    labels = np.arange(len(x)) % 4
    assert np.array_equal(transform_by_labels(x, labels, seed), transform_by_labels(x, labels, seed))
    for mode in ("simclr", "tstcc"):
        a, b = make_view_pair(x, mode, seed), make_view_pair(x, mode, seed)
        assert np.array_equal(a.view_a, b.view_a) and np.array_equal(a.view_b, b.view_b)


def test_criterion_3_augmentation_algebra():
    start = time.perf_counter()
    _augmentation_properties()
    noise = add_noise(np.zeros(100_000), 0.8, seed=0)
    elapsed = time.perf_counter() - start
    ok = abs(noise.std() - 0.8) <= 0.02 and elapsed < 10
    verdict(3, ok, f"property suite green, noise std {noise.std():.4f}, {elapsed:.1f}s")


# --- 4 ---------------------------------------------------------------------------------------

def test_criterion_4_preprocessing():
    start = time.perf_counter()
    folds_ok = True
    for n in (10, 20):
        ids = [f"s{i:02d}" for i in range(n)]
        plan = make_fold_plan(ids, k=5, seed=0)
        folds_ok &= sorted(s for f in plan.folds for s in f) == ids
        folds_ok &= all(not set(plan.train_subjects(i)) & set(plan.test_subjects(i)) for i in range(5))

    rng = np.random.default_rng(0)
    trim_ok = True
    for _ in range(50):
        lead, tail, core = (int(v) for v in rng.integers(0, 200, 3))
        core_labels = rng.integers(1, 5, core + 1)
        labels = np.concatenate([np.zeros(lead, int), core_labels, np.zeros(tail, int)]).astype(np.uint8)
        rec = trim_wake(SubjectRecord("s", 1, np.zeros((len(labels), 30), np.float32), labels))
        sleep = np.flatnonzero(rec.labels != 0)
        trim_ok &= sleep[0] == min(lead, 60) and len(rec.labels) - 1 - sleep[-1] == min(tail, 60)

    counts = [8285, 2804, 17799, 5703, 7717]
    y = np.repeat(np.arange(5), counts)
    data = LabeledSet(np.zeros((len(y), 1), np.float32), y, np.full(len(y), "s", dtype=object), np.arange(len(y)))
    per_class = np.bincount(y[select_label_fraction(data, 0.01, 0).rows], minlength=5).tolist()
    elapsed = time.perf_counter() - start
    ok = folds_ok and trim_ok and per_class == [83, 28, 178, 57, 77] and elapsed < 5
    verdict(4, ok, f"folds disjoint+exhaustive {folds_ok}, trim <=60 W {trim_ok}, 1% budget {per_class}, "
                   f"{elapsed:.1f}s")


# --- 5 ---------------------------------------------------------------------------------------

class _Fixed(torch.nn.Module):
    def __init__(self, preds):
        super().__init__()
        self.preds = torch.as_tensor(preds)

    def forward(self, x):
        return torch.nn.functional.one_hot(self.preds[: len(x)], 5).float()


def test_criterion_5_metrics_oracle():
    rng = np.random.default_rng(5)
    exact = True
    for _ in range(100):
        n = int(rng.integers(1, 200))
        y, p = rng.integers(0, 5, n), rng.integers(0, 5, n)
        m = evaluate(_Fixed(p), np.zeros((n, 2), np.float32), y)
        acc, mf1, f1s = brute_metrics(y.tolist(), p.tolist())
        exact &= m.accuracy == acc and math.isclose(m.macro_f1, mf1, rel_tol=1e-12, abs_tol=1e-15)
        exact &= all(math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-15) for a, b in zip(m.per_class_f1.values(), f1s))
    y = np.repeat(np.arange(5), 20)
    perfect = score(y, y)
    majority = score(y, np.zeros_like(y))
    analytic = (perfect.accuracy == 1.0 and perfect.macro_f1 == 1.0 and majority.accuracy == 0.2
                and math.isclose(majority.macro_f1, 0.2 * (2 * 0.2 / 1.2), rel_tol=1e-12))
    verdict(5, exact and analytic, f"100 random vectors exact {exact}, perfect 1.0/1.0, "
                                   f"all-majority {majority.accuracy}/{majority.macro_f1:.4f}")


# --- 6 ---------------------------------------------------------------------------------------

def dropout_free(kind):
    # the overfit check probes capacity and gradient flow; dropout noise would floor the train loss
    spec = desk_spec(kind)
    for part in (kind, "bilstm_residual", "causal_attention"):
        spec.params.setdefault(part, {})["dropout"] = 0.0
    return spec


def test_criterion_6_tiny_overfit():
    start = time.perf_counter()
    _, recs = generate_synthetic(1, 8, 300, seed=0)
    x = recs[0].epochs
    cfg = PretextConfig()
    ratios, ces = {}, {}
    for kind in BACKBONES:
        for algo in ("clstran",) + SSL:
            torch.manual_seed(0)
            model = build_model(dropout_free(kind), 0)
            heads = build_heads(algo, model, cfg)
            opt = torch.optim.Adam(pretrainable_parameters(algo, model, heads), lr=1e-3)
            first = best = None
            for _ in range(300):
                loss = pretext_step(algo, model, heads, x, cfg, seed=0).loss
                opt.zero_grad()
                loss.backward()
                opt.step()
                first = loss.item() if first is None else first
                best = loss.item() if best is None else min(best, loss.item())
            ratios[(kind, algo)] = best / first
        labeled = LabeledSet.from_records(recs)
        model, _ = finetune(None, dropout_free(kind), labeled, Budget(epochs=300, batch=8, wd=0.0), seed=0)
        ces[kind] = mean_ce(model, labeled)
    elapsed = time.perf_counter() - start
    worst = max(ratios, key=ratios.get)
    ok = all(r <= 0.1 for r in ratios.values()) and all(c < 0.05 for c in ces.values()) and elapsed < 300
    verdict(6, ok, f"worst pretext ratio {ratios[worst]:.4f} ({worst[0]}/{worst[1]}), fine-tune CE "
                   + ", ".join(f"{k} {v:.4f}" for k, v in ces.items()) + f", {elapsed:.0f}s")


# --- 7 / 8 / 11: five-fold runs on the synthetic cohort --------------------------------------------

DESK_BUDGETS = dict(pretrain=Budget(epochs=10, batch=128), finetune=Budget(epochs=40, batch=128))


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    generate_synthetic(10, 500, 300, seed=0, out_dir=root)
    return root / "manifest.json", tmp_path_factory.mktemp("ckpt")


def cohort_config(manifest, algorithm, imbalance="none"):
    return ExperimentConfig(dataset=str(manifest), backbone="cnn1d", preset="desk", algorithm=algorithm,
                            label_fraction=0.01, k=5, seed=0, imbalance=imbalance, **DESK_BUDGETS)


@pytest.fixture(scope="module")
def imbalanced_runs(cohort):
    manifest, ckpt = cohort
    out = {}
    for algo in ("supervised",) + SSL:
        start = time.perf_counter()
        out[algo] = (run_experiment(cohort_config(manifest, algo), ckpt_root=ckpt), time.perf_counter() - start)
    return out


def mean_mf1(run):
    assert all(f.error is None for f in run.folds), [f.error for f in run.folds]
    return float(np.mean([m.macro_f1 for m in run.completed()]))


def test_criterion_7_label_efficiency(imbalanced_runs):
    elapsed = sum(t for _, t in imbalanced_runs.values())
    mf1 = {a: mean_mf1(r) for a, (r, _) in imbalanced_runs.items()}
    gains = {a: 100 * (mf1[a] - mf1["supervised"]) for a in SSL}
    winners = [a for a, g in gains.items() if g >= 5]
    ok = len(winners) >= 2 and elapsed < 15 * 60
    verdict(7, ok, f"MF1 supervised {100 * mf1['supervised']:.1f}, "
                   + ", ".join(f"{a} {100 * mf1[a]:.1f} ({gains[a]:+.1f})" for a in SSL)
                   + f"; {len(winners)} of 3 >= +5 points, {elapsed:.0f}s")


def test_criterion_8_imbalance_robustness(cohort, imbalanced_runs):
    manifest, ckpt = cohort
    deltas, elapsed = {}, 0.0
    for algo in CONTRASTIVE:
        start = time.perf_counter()
        balanced = run_experiment(cohort_config(manifest, algo, "oversample_pretext"), ckpt_root=ckpt)
        imb_run, imb_time = imbalanced_runs[algo]
        elapsed += time.perf_counter() - start + imb_time
        deltas[algo] = 100 * abs(mean_mf1(balanced) - mean_mf1(imb_run))
    ok = all(d <= 2.0 for d in deltas.values()) and elapsed < 20 * 60
    verdict(8, ok, "|dMF1| " + ", ".join(f"{a} {d:.2f}" for a, d in deltas.items()) + f" points, {elapsed:.0f}s")


# --- 9 ---------------------------------------------------------------------------------------

def test_criterion_9_transfer():
    start = time.perf_counter()
    _, records = generate_synthetic(10, 500, 300, shift=0.15, seed=1)
    order = np.random.default_rng(9).permutation(len(records))
    pairs = [(records[order[2 * i]].subject_id, records[order[2 * i + 1]].subject_id) for i in range(5)]
    spec = desk_spec("cnn1d")
    wins, lines = 0, []
    for source, target in pairs:
        scores = {}
        for algo in ("supervised", "clstran") + SSL:
            store = SubjectStore.from_records(records)
            m = transfer_experiment(source, target, algo, spec, seed=0, store=store,
                                    pretrain_budget=DESK_BUDGETS["pretrain"], finetune_budget=DESK_BUDGETS["finetune"])
            scores[algo] = m.macro_f1
        best_ssl = max(v for a, v in scores.items() if a != "supervised")
        wins += best_ssl >= scores["supervised"]
        lines.append(f"{source}->{target} sup {100 * scores['supervised']:.1f} best-ssl {100 * best_ssl:.1f}")
    elapsed = time.perf_counter() - start
    ok = wins >= 4 and elapsed < 15 * 60
    verdict(9, ok, f"SSL >= supervised in {wins}/5 scenarios ({'; '.join(lines)}), {elapsed:.0f}s")


# --- 10 --------------------------------------------------------------------------------------

def test_criterion_10_parameter_accounting():
    totals = {k: count_parameters(build_model(ModelSpec(k), 0))["total"] for k in BACKBONES}
    ordered = totals["deepsleepnet"] > totals["attnsleep"] > totals["cnn1d"]
    same_order = abs(math.log10(totals["cnn1d"] / 124_773)) < 1
    verdict(10, ordered and same_order, "totals " + ", ".join(f"{k} {v:,}" for k, v in totals.items())
            + f"; cnn1d vs 124,773 ratio {totals['cnn1d'] / 124_773:.2f}")


# --- 11 --------------------------------------------------------------------------------------

def test_criterion_11_determinism(cohort, imbalanced_runs):
    manifest, _ = cohort
    worst = 0.0
    for algo in ("supervised", "tstcc"):
        # fresh pretraining (no checkpoint cache) must reproduce the stored fold
        again = run_fold(cohort_config(manifest, algo), 0)
        first = imbalanced_runs[algo][0].folds[0].metrics
        worst = max(worst, abs(again.metrics.macro_f1 - first.macro_f1), abs(again.metrics.accuracy - first.accuracy),
                    max(abs(again.metrics.per_class_f1[c] - first.per_class_f1[c]) for c in first.per_class_f1))
    verdict(11, worst <= 1e-6, f"max metric difference on rerun {worst:.1e}")
