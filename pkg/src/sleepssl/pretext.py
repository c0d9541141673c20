"""Self-supervised pretext tasks and their loss kernels.

Four algorithms are available: ``clstran`` (classify which transformation was
applied), ``simclr`` (NT-Xent between two augmented views), ``cpc`` (predict
future latents from a recurrent context) and ``tstcc`` (cross-view temporal
prediction plus contextual NT-Xent).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import augment
from .backbone import SleepModel, encoder_forward, save_checkpoint

log = logging.getLogger(__name__)

ALGORITHMS = ("clstran", "simclr", "cpc", "tstcc")
N_TRANSFORMS = len(augment.KINDS)


# --- loss kernels ---------------------------------------------------------------

def log_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def cross_entropy(logits: torch.Tensor, target: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of ``target`` under ``softmax(logits)``.

    With ``weight`` each sample's term is scaled by the weight of its class and the
    result divided by the summed weights.
    """
    nll = -log_softmax(logits).gather(1, target.view(-1, 1)).squeeze(1)
    if weight is None:
        return nll.mean()
    w = weight[target]
    return (w * nll).sum() / w.sum()


def _check_unit_rows(z: torch.Tensor, name: str) -> None:
    tol = 1e-6 if z.dtype == torch.float64 else 1e-5
    norms = z.detach().norm(dim=1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=tol, rtol=0):
        worst = (norms - 1).abs().max().item()
        raise ValueError(f"{name} rows must be L2-normalised (max deviation {worst:.2e})")


def nt_xent(z_a: torch.Tensor, z_b: torch.Tensor, tau: float = 0.2) -> torch.Tensor:
    """Normalised-temperature cross entropy over the 2N views.

    Row ``i`` of ``z_a`` and row ``i`` of ``z_b`` are positives; every other row of
    the stacked batch is a negative.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if z_a.shape != z_b.shape or z_a.dim() != 2:
        raise ValueError(f"projection shapes differ or are not 2-D: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    _check_unit_rows(z_a, "z_a")
    _check_unit_rows(z_b, "z_b")
    n = z_a.shape[0]
    z = torch.cat([z_a, z_b], dim=0)
    sim = z @ z.T / tau
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    positive = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return cross_entropy(sim, positive)


def info_nce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """InfoNCE where row ``i`` of ``target`` is the positive for row ``i`` of ``pred``."""
    logits = pred @ target.T
    return cross_entropy(logits, torch.arange(pred.shape[0], device=pred.device))


# --- heads -------------------------------------------------------------------------

class ProjectionHead(nn.Module):
    def __init__(self, dim: int, out_dim: int = 128, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, h):
        return F.normalize(self.net(h), dim=1)


class Aggregator(nn.Module):
    """Single-layer GRU summarising a prefix of latents into a context vector."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.gru = nn.GRU(dim, hidden, batch_first=True)
        self.out_dim = hidden

    def forward(self, z):
        _, h = self.gru(z)
        return h[-1]


def make_predictors(context_dim: int, latent_dim: int, k_future: int) -> nn.ModuleList:
    return nn.ModuleList([nn.Linear(context_dim, latent_dim) for _ in range(k_future)])


@dataclass
class CpcConfig:
    context_len_fraction: float = 0.5
    k_future: int = 4
    aggregator_hidden: int = 64

    def split(self, timesteps: int) -> int:
        ctx = int(math.floor(self.context_len_fraction * timesteps))
        if ctx < 1 or ctx + self.k_future > timesteps:
            raise ValueError(
                f"{timesteps} timesteps cannot hold a context of {ctx} plus {self.k_future} future steps"
            )
        return ctx


@dataclass
class PretextConfig:
    tau: float = 0.2
    projection_dim: int = 128
    cpc: CpcConfig = field(default_factory=CpcConfig)
    temporal_weight: float = 1.0
    contextual_weight: float = 1.0
    augment: dict = field(default_factory=dict)


@dataclass
class PretextBatchResult:
    loss: torch.Tensor
    aux: dict = field(default_factory=dict)


def build_heads(algorithm: str, model: SleepModel, cfg: PretextConfig | None = None) -> nn.ModuleDict:
    """Algorithm-specific modules trained alongside the encoder and discarded afterwards."""
    cfg = cfg or PretextConfig()
    m1 = model.feature_dim
    if algorithm == "clstran":
        return nn.ModuleDict({"classifier": nn.Linear(model.context_dim, N_TRANSFORMS)})
    if algorithm == "simclr":
        return nn.ModuleDict({"projection": ProjectionHead(m1, cfg.projection_dim)})
    if algorithm in ("cpc", "tstcc"):
        h = cfg.cpc.aggregator_hidden
        heads = {"aggregator": Aggregator(m1, h), "predictors": make_predictors(h, m1, cfg.cpc.k_future)}
        if algorithm == "tstcc":
            heads["projection"] = ProjectionHead(h, cfg.projection_dim)
        return nn.ModuleDict(heads)
    raise ValueError(f"unknown pretext algorithm {algorithm!r}; expected one of {ALGORITHMS}")


def _tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


# --- algorithms ------------------------------------------------------------------------

def clstran_step(model: SleepModel, head: nn.Module, x, seed=None, params: dict | None = None) -> PretextBatchResult:
    x = np.asarray(x, dtype=np.float32)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, N_TRANSFORMS, size=x.shape[0])
    xt = augment.transform_by_labels(x, labels, seed=rng.integers(2**32), params=params)
    target = torch.as_tensor(labels)
    logits = head(model.temporal(encoder_forward(model, xt)))
    loss = cross_entropy(logits, target)
    acc = (logits.argmax(1) == target).float().mean().item()
    return PretextBatchResult(loss, {"pseudo_label_acc": acc})


def simclr_step(model: SleepModel, projection_head: nn.Module, x, tau: float = 0.2, seed=None,
                params: dict | None = None) -> PretextBatchResult:
    x = np.asarray(x, dtype=np.float32)
    if x.shape[0] < 2:
        log.warning("SimCLR batch of %d has no negatives; loss is 0", x.shape[0])
    views = augment.make_view_pair(x, "simclr", seed=seed, params=params)
    z_a = projection_head(encoder_forward(model, _tensor(views.view_a)).mean(dim=1))
    z_b = projection_head(encoder_forward(model, _tensor(views.view_b)).mean(dim=1))
    loss = nt_xent(z_a, z_b, tau)
    return PretextBatchResult(loss, {"positive_sim": (z_a * z_b).sum(1).mean().item()})


def _future_losses(context: torch.Tensor, predictors: nn.ModuleList, z: torch.Tensor, ctx: int) -> list[torch.Tensor]:
    return [info_nce(pred(context), z[:, ctx - 1 + k]) for k, pred in enumerate(predictors, start=1)]


def cpc_loss(z: torch.Tensor, aggregator: nn.Module, predictors: nn.ModuleList, cfg: CpcConfig) -> PretextBatchResult:
    """CPC objective on precomputed latents ``z`` of shape ``[N, T, C]``."""
    if z.shape[0] < 2:
        raise ValueError("CPC needs at least two samples per batch")
    ctx = cfg.split(z.shape[1])
    context = aggregator(z[:, :ctx])
    per_step = _future_losses(context, predictors, z, ctx)
    loss = torch.stack(per_step).mean()
    return PretextBatchResult(loss, {f"nce_k{k}": v.item() for k, v in enumerate(per_step, start=1)})


def cpc_step(model: SleepModel, aggregator: nn.Module, predictors: nn.ModuleList, x,
             cfg: CpcConfig | None = None) -> PretextBatchResult:
    cfg = cfg or CpcConfig()
    return cpc_loss(encoder_forward(model, x), aggregator, predictors, cfg)


def tstcc_loss(z_weak: torch.Tensor, z_strong: torch.Tensor, aggregator: nn.Module, predictors: nn.ModuleList,
               projection_head: nn.Module, tau: float = 0.2, cfg: CpcConfig | None = None,
               temporal_weight: float = 1.0, contextual_weight: float = 1.0) -> PretextBatchResult:
    cfg = cfg or CpcConfig()
    if z_weak.shape[0] < 2:
        raise ValueError("TS-TCC needs at least two samples per batch")
    ctx = cfg.split(z_weak.shape[1])
    c_weak = aggregator(z_weak[:, :ctx])
    c_strong = aggregator(z_strong[:, :ctx])
    strong_to_weak = torch.stack(_future_losses(c_strong, predictors, z_weak, ctx)).mean()
    weak_to_strong = torch.stack(_future_losses(c_weak, predictors, z_strong, ctx)).mean()
    temporal = 0.5 * (strong_to_weak + weak_to_strong)
    contextual = nt_xent(projection_head(c_weak), projection_head(c_strong), tau)
    loss = temporal_weight * temporal + contextual_weight * contextual
    return PretextBatchResult(loss, {"temporal": temporal.item(), "contextual": contextual.item()})


def tstcc_step(model: SleepModel, aggregator: nn.Module, predictors: nn.ModuleList, projection_head: nn.Module,
               x, tau: float = 0.2, cfg: CpcConfig | None = None, seed=None,
               temporal_weight: float = 1.0, contextual_weight: float = 1.0,
               params: dict | None = None) -> PretextBatchResult:
    views = augment.make_view_pair(np.asarray(x, dtype=np.float32), "tstcc", seed=seed, params=params)
    z_weak = encoder_forward(model, _tensor(views.view_a))
    z_strong = encoder_forward(model, _tensor(views.view_b))
    return tstcc_loss(z_weak, z_strong, aggregator, predictors, projection_head, tau, cfg,
                      temporal_weight, contextual_weight)


def pretext_step(algorithm: str, model: SleepModel, heads: nn.ModuleDict, x, cfg: PretextConfig,
                 seed=None) -> PretextBatchResult:
    if algorithm == "clstran":
        return clstran_step(model, heads["classifier"], x, seed=seed, params=cfg.augment)
    if algorithm == "simclr":
        return simclr_step(model, heads["projection"], x, cfg.tau, seed=seed, params=cfg.augment)
    if algorithm == "cpc":
        return cpc_step(model, heads["aggregator"], heads["predictors"], x, cfg.cpc)
    if algorithm == "tstcc":
        return tstcc_step(model, heads["aggregator"], heads["predictors"], heads["projection"], x,
                          cfg.tau, cfg.cpc, seed=seed, temporal_weight=cfg.temporal_weight,
                          contextual_weight=cfg.contextual_weight, params=cfg.augment)
    raise ValueError(f"unknown pretext algorithm {algorithm!r}")


# --- training loop -------------------------------------------------------------------------

class PretrainDiverged(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class PretrainResult:
    encoder_state: dict
    trace: list[dict]
    checkpoint: Path | None = None


def pretrainable_parameters(algorithm: str, model: SleepModel, heads: nn.Module) -> list[nn.Parameter]:
    params = list(model.features.parameters()) + list(heads.parameters())
    if algorithm == "clstran":
        # pseudo labels are predicted through the temporal encoder, which is re-initialised afterwards
        params += list(model.temporal.parameters())
    return params


def write_trace(trace: list[dict], path: Path | str) -> None:
    keys = sorted({k for row in trace for k in row} - {"epoch", "loss"})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss"] + keys)
        w.writeheader()
        for row in trace:
            w.writerow(row)


def pretrain(model: SleepModel, algorithm: str, data, epochs: int = 40, batch: int = 128, lr: float = 1e-3,
             wd: float = 1e-4, seed: int = 0, cfg: PretextConfig | None = None,
             out_dir: Path | str | None = None) -> PretrainResult:
    """Pretrain ``model.features`` in place with ``algorithm`` on unlabeled epochs ``data``."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown pretext algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    data = np.asarray(data, dtype=np.float32)
    if data.shape[0] == 0:
        raise ValueError("no pretraining data")
    cfg = cfg or PretextConfig()
    torch.manual_seed(seed)
    heads = build_heads(algorithm, model, cfg)
    opt = torch.optim.Adam(pretrainable_parameters(algorithm, model, heads), lr=lr, betas=(0.9, 0.99),
                           weight_decay=wd)
    rng = np.random.default_rng(seed)
    trace: list[dict] = []
    model.train()
    heads.train()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(data))
        total, count, aux_sum = 0.0, 0, {}
        for start in range(0, len(order), batch):
            rows = order[start:start + batch]
            if len(rows) < 2:
                continue
            result = pretext_step(algorithm, model, heads, data[rows], cfg, seed=rng.integers(2**32))
            if not torch.isfinite(result.loss):
                trace.append({"epoch": epoch, "loss": float("nan")})
                raise PretrainDiverged(f"{algorithm} loss became non-finite in epoch {epoch}", trace)
            opt.zero_grad()
            result.loss.backward()
            opt.step()
            total += result.loss.item() * len(rows)
            count += len(rows)
            for k, v in result.aux.items():
                aux_sum[k] = aux_sum.get(k, 0.0) + v * len(rows)
        row = {"epoch": epoch, "loss": total / max(count, 1)}
        row.update({k: v / max(count, 1) for k, v in aux_sum.items()})
        trace.append(row)
        log.info("pretrain %s epoch %d loss %.4f", algorithm, epoch, row["loss"])
    state = {k: v.detach().clone() for k, v in model.features.state_dict().items()}
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / f"encoder_{algorithm}.npz"
        save_checkpoint(model, ckpt, encoder_only=True)
        write_trace(trace, out_dir / f"pretrain_{algorithm}_trace.csv")
    return PretrainResult(state, trace, ckpt)
