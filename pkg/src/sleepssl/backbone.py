"""Sleep-staging models as (feature extractor, temporal encoder, classifier) triples.

Feature maps are laid out ``[batch, timesteps, channels]``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONES = ("deepsleepnet", "attnsleep", "cnn1d")
TEMPORAL_ENCODERS = ("bilstm_residual", "causal_attention", "identity")
NATIVE_TE = {"deepsleepnet": "bilstm_residual", "attnsleep": "causal_attention", "cnn1d": "identity"}
SWAPPED_TE = {"deepsleepnet": "causal_attention", "attnsleep": "bilstm_residual", "cnn1d": "causal_attention"}

# Layer sizes follow the published configurations of each architecture.
DEFAULT_PARAMS = {
    "deepsleepnet": {"filters": (64, 128), "dropout": 0.5},
    "attnsleep": {"filters": (64, 128), "afr_channels": 30, "dropout": 0.5},
    "cnn1d": {"channels": (32, 64, 128), "kernel_size": 25, "stride": 3, "dropout": 0.35},
    "bilstm_residual": {"hidden": 512, "layers": 2, "dropout": 0.5},
    "causal_attention": {"heads": None, "ff_dim": 120, "conv_kernel": 7, "dropout": 0.1},
    "identity": {},
}


@dataclass
class ModelSpec:
    backbone_kind: str
    input_len: int = 3000
    sampling_rate_hz: int = 100
    te_kind: str | None = None
    n_classes: int = 5
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backbone_kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone_kind!r}; expected one of {BACKBONES}")
        if self.te_kind is None:
            self.te_kind = NATIVE_TE[self.backbone_kind]
        if self.te_kind not in TEMPORAL_ENCODERS:
            raise ValueError(f"unknown temporal encoder {self.te_kind!r}")
        if self.n_classes != 5:
            raise ValueError("this benchmark stages exactly five classes")

    def part_params(self, part: str) -> dict:
        merged = dict(DEFAULT_PARAMS[part])
        merged.update(self.params.get(part, {}))
        return merged

    def with_te(self, te_kind: str) -> "ModelSpec":
        return dataclasses.replace(self, te_kind=te_kind)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["params"] = json.loads(json.dumps(self.params))
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def desk_spec(backbone_kind: str, sampling_rate_hz: int = 10, te_kind: str | None = None) -> ModelSpec:
    """Reduced-width configuration for CPU-scale experiments."""
    params = {
        "deepsleepnet": {"filters": [16, 32]},
        "attnsleep": {"filters": [16, 32], "afr_channels": 30},
        "cnn1d": {"channels": [16, 32, 64]},
        "bilstm_residual": {"hidden": 32, "layers": 1},
        "causal_attention": {"ff_dim": 64},
    }
    return ModelSpec(backbone_kind, input_len=30 * sampling_rate_hz,
                     sampling_rate_hz=sampling_rate_hz, te_kind=te_kind, params=params)


def _same(k: int) -> int:
    return k // 2


# --- feature extractors --------------------------------------------------------

class CNN1D(nn.Module):
    """Three conv / batch-norm / ReLU / max-pool blocks."""

    def __init__(self, channels=(32, 64, 128), kernel_size=25, stride=3, dropout=0.35):
        super().__init__()
        c1, c2, c3 = channels
        self.block1 = nn.Sequential(
            nn.Conv1d(1, c1, kernel_size, stride=stride, padding=_same(kernel_size), bias=False),
            nn.BatchNorm1d(c1), nn.ReLU(), nn.MaxPool1d(2, 2, padding=1), nn.Dropout(dropout),
        )
        self.block2 = nn.Sequential(
            nn.Conv1d(c1, c2, 8, padding=4, bias=False),
            nn.BatchNorm1d(c2), nn.ReLU(), nn.MaxPool1d(2, 2, padding=1),
        )
        self.block3 = nn.Sequential(
            nn.Conv1d(c2, c3, 8, padding=4, bias=False),
            nn.BatchNorm1d(c3), nn.ReLU(), nn.MaxPool1d(2, 2, padding=1),
        )
        self.out_channels = c3

    def forward(self, x):
        return self.block3(self.block2(self.block1(x)))


def _conv_bn(cin, cout, k, stride=1, act=nn.ReLU):
    return [nn.Conv1d(cin, cout, k, stride=stride, padding=_same(k), bias=False), nn.BatchNorm1d(cout), act()]


def _align_and_concat(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    length = max(a.shape[-1], b.shape[-1])
    if a.shape[-1] != length:
        a = F.adaptive_avg_pool1d(a, length)
    if b.shape[-1] != length:
        b = F.adaptive_avg_pool1d(b, length)
    return torch.cat([a, b], dim=1)


class DeepSleepFeatures(nn.Module):
    """Small- and large-kernel convolutional branches, concatenated channel-wise."""

    def __init__(self, fs: int, filters=(64, 128), dropout=0.5):
        super().__init__()
        f1, f2 = filters
        k_small, s_small = max(2, fs // 2), max(1, fs // 16)
        k_large, s_large = max(4, fs * 4), max(1, fs // 2)
        self.small = nn.Sequential(
            *_conv_bn(1, f1, k_small, s_small), nn.MaxPool1d(8, 8), nn.Dropout(dropout),
            *_conv_bn(f1, f2, 8), *_conv_bn(f2, f2, 8), *_conv_bn(f2, f2, 8), nn.MaxPool1d(4, 4),
        )
        self.large = nn.Sequential(
            *_conv_bn(1, f1, k_large, s_large), nn.MaxPool1d(4, 4), nn.Dropout(dropout),
            *_conv_bn(f1, f2, 6), *_conv_bn(f2, f2, 6), *_conv_bn(f2, f2, 6), nn.MaxPool1d(2, 2),
        )
        self.dropout = nn.Dropout(dropout)
        self.out_channels = 2 * f2

    def forward(self, x):
        return self.dropout(_align_and_concat(self.small(x), self.large(x)))


class SERecalibration(nn.Module):
    """Residual block with squeeze-and-excitation channel reweighting."""

    def __init__(self, cin, cout, reduction=16):
        super().__init__()
        self.conv1 = nn.Conv1d(cin, cout, 1, bias=False)
        self.bn1 = nn.BatchNorm1d(cout)
        self.conv2 = nn.Conv1d(cout, cout, 1, bias=False)
        self.bn2 = nn.BatchNorm1d(cout)
        hidden = max(1, cout // reduction)
        self.squeeze = nn.Sequential(nn.Linear(cout, hidden, bias=False), nn.ReLU(),
                                     nn.Linear(hidden, cout, bias=False), nn.Sigmoid())
        self.shortcut = nn.Sequential(nn.Conv1d(cin, cout, 1, bias=False), nn.BatchNorm1d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        weights = self.squeeze(out.mean(dim=-1)).unsqueeze(-1)
        return F.relu(out * weights + self.shortcut(x))


class AttnSleepFeatures(nn.Module):
    """Multi-resolution CNN followed by adaptive feature recalibration."""

    def __init__(self, fs: int, filters=(64, 128), afr_channels=30, dropout=0.5):
        super().__init__()
        f1, f2 = filters
        k_fine, s_fine = max(2, fs // 2), max(1, fs // 16)
        k_coarse, s_coarse = max(4, fs * 4), max(1, fs // 2)
        self.fine = nn.Sequential(
            *_conv_bn(1, f1, k_fine, s_fine, nn.GELU), nn.MaxPool1d(8, 2, padding=4), nn.Dropout(dropout),
            *_conv_bn(f1, f2, 8, act=nn.GELU), *_conv_bn(f2, f2, 8, act=nn.GELU),
            nn.MaxPool1d(4, 4, padding=2),
        )
        self.coarse = nn.Sequential(
            *_conv_bn(1, f1, k_coarse, s_coarse, nn.GELU), nn.MaxPool1d(4, 2, padding=2), nn.Dropout(dropout),
            *_conv_bn(f1, f2, 7, act=nn.GELU), *_conv_bn(f2, f2, 7, act=nn.GELU),
            nn.MaxPool1d(2, 2, padding=1),
        )
        self.dropout = nn.Dropout(dropout)
        self.afr = SERecalibration(2 * f2, afr_channels)
        self.out_channels = afr_channels

    def forward(self, x):
        return self.afr(self.dropout(_align_and_concat(self.fine(x), self.coarse(x))))


class FeatureExtractor(nn.Module):
    """Wraps a conv stack so it maps ``[B, L]`` signals to ``[B, T, C]`` feature maps."""

    def __init__(self, net: nn.Module):
        super().__init__()
        self.net = net
        self.out_channels = net.out_channels

    def forward(self, x):
        if x.dim() == 2:
            x = x.unsqueeze(1)
        return self.net(x).transpose(1, 2)


# --- temporal encoders -----------------------------------------------------------

class MeanPool(nn.Module):
    """Parameter-free temporal encoder: average over timesteps."""

    def __init__(self, dim: int):
        super().__init__()
        self.out_dim = dim

    def sequence(self, f):
        return f

    def forward(self, f):
        return f.mean(dim=1)


class BiLSTMResidual(nn.Module):
    def __init__(self, dim: int, hidden=512, layers=2, dropout=0.5):
        super().__init__()
        self.lstm = nn.LSTM(dim, hidden, num_layers=layers, batch_first=True, bidirectional=True,
                            dropout=dropout if layers > 1 else 0.0)
        self.skip = nn.Linear(dim, 2 * hidden)
        self.dropout = nn.Dropout(dropout)
        self.out_dim = 2 * hidden

    def sequence(self, f):
        out, _ = self.lstm(f)
        return self.dropout(out + self.skip(f))

    def forward(self, f):
        return self.sequence(f).mean(dim=1)


class CausalConv(nn.Module):
    def __init__(self, dim, kernel):
        super().__init__()
        self.pad = kernel - 1
        self.conv = nn.Conv1d(dim, dim, kernel)

    def forward(self, f):
        # [B, T, C] -> left-padded conv -> [B, T, C]
        x = F.pad(f.transpose(1, 2), (self.pad, 0))
        return self.conv(x).transpose(1, 2)


class CausalAttention(nn.Module):
    """Masked multi-head self-attention block; position t only sees positions <= t."""

    def __init__(self, dim: int, heads=None, ff_dim=120, conv_kernel=7, dropout=0.1):
        super().__init__()
        heads = heads or _pick_heads(dim)
        if dim % heads:
            raise ValueError(f"feature width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.query = CausalConv(dim, conv_kernel)
        self.key = CausalConv(dim, conv_kernel)
        self.value = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ff_dim, dim))
        self.dropout = nn.Dropout(dropout)
        self.out_dim = dim

    def sequence(self, f):
        B, T, C = f.shape
        h = self.heads

        def split(t):
            return t.reshape(B, T, h, C // h).transpose(1, 2)

        q, k, v = split(self.query(f)), split(self.key(f)), split(self.value(f))
        scores = q @ k.transpose(-2, -1) / (C // h) ** 0.5
        future = torch.triu(torch.ones(T, T, dtype=torch.bool, device=f.device), diagonal=1)
        scores = scores.masked_fill(future, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        mixed = (attn @ v).transpose(1, 2).reshape(B, T, C)
        x = self.norm1(f + self.dropout(self.proj(mixed)))
        return self.norm2(x + self.dropout(self.ff(x)))

    def forward(self, f):
        return self.sequence(f).mean(dim=1)


def _pick_heads(dim: int) -> int:
    for h in (5, 8, 4, 2):
        if dim % h == 0:
            return h
    return 1


# --- assembled model ---------------------------------------------------------------

class SleepModel(nn.Module):
    def __init__(self, spec: ModelSpec, features: nn.Module, temporal: nn.Module, classifier: nn.Module):
        super().__init__()
        self.spec = spec
        self.features = features
        self.temporal = temporal
        self.classifier = classifier

    @property
    def feature_dim(self) -> int:
        return self.features.out_channels

    @property
    def context_dim(self) -> int:
        return self.temporal.out_dim

    def forward(self, x):
        return self.classifier(self.temporal(self.features(x)))


def _build_features(spec: ModelSpec) -> nn.Module:
    p = spec.part_params(spec.backbone_kind)
    fs = spec.sampling_rate_hz
    if spec.backbone_kind == "cnn1d":
        net = CNN1D(tuple(p["channels"]), p["kernel_size"], p["stride"], p["dropout"])
    elif spec.backbone_kind == "deepsleepnet":
        net = DeepSleepFeatures(fs, tuple(p["filters"]), p["dropout"])
    else:
        net = AttnSleepFeatures(fs, tuple(p["filters"]), p["afr_channels"], p["dropout"])
    return FeatureExtractor(net)


def _build_temporal(spec: ModelSpec, dim: int) -> nn.Module:
    p = spec.part_params(spec.te_kind)
    if spec.te_kind == "identity":
        return MeanPool(dim)
    if spec.te_kind == "bilstm_residual":
        return BiLSTMResidual(dim, p["hidden"], p["layers"], p["dropout"])
    return CausalAttention(dim, p["heads"], p["ff_dim"], p["conv_kernel"], p["dropout"])


def build_model(spec: ModelSpec, seed: int = 0) -> SleepModel:
    """Deterministically initialised model for ``spec``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        features = _build_features(spec)
        temporal = _build_temporal(spec, features.out_channels)
        classifier = nn.Linear(temporal.out_dim, spec.n_classes)
        model = SleepModel(spec, features, temporal, classifier)
    model.eval()
    try:
        with torch.no_grad():
            fmap = model.features(torch.zeros(2, spec.input_len))
    except RuntimeError as exc:
        raise ValueError(f"input_len {spec.input_len} is too short for {spec.backbone_kind}: {exc}") from None
    if fmap.shape[1] < 2:
        raise ValueError(f"input_len {spec.input_len} leaves {fmap.shape[1]} timesteps; need at least 2")
    model.train()
    return model


def _check_input(model: SleepModel, x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.dim() != 2 or x.shape[1] != model.spec.input_len:
        raise ValueError(f"expected [batch, {model.spec.input_len}] input, got {tuple(x.shape)}")
    return x


def encoder_forward(model: SleepModel, x) -> torch.Tensor:
    return model.features(_check_input(model, x))


def temporal_forward(model: SleepModel, f: torch.Tensor) -> torch.Tensor:
    if f.dim() != 3 or f.shape[2] != model.feature_dim:
        raise ValueError(f"expected [batch, T, {model.feature_dim}] feature map, got {tuple(f.shape)}")
    return model.temporal(f)


def classifier_forward(model: SleepModel, c: torch.Tensor) -> torch.Tensor:
    if c.dim() != 2 or c.shape[1] != model.context_dim:
        raise ValueError(f"expected [batch, {model.context_dim}] context, got {tuple(c.shape)}")
    return model.classifier(c)


def _trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def count_parameters(model: SleepModel) -> dict[str, int]:
    counts = {
        "feature_extractor": _trainable(model.features),
        "temporal_encoder": _trainable(model.temporal),
        "classifier": _trainable(model.classifier),
    }
    counts["total"] = sum(counts.values())
    return counts


# --- checkpoints ---------------------------------------------------------------------

def save_checkpoint(model: SleepModel, path: Path | str, encoder_only: bool = False) -> None:
    """Write named tensors and the model spec to a zip archive (``.npz`` layout)."""
    state = model.state_dict()
    if encoder_only:
        state = {k: v for k, v in state.items() if k.startswith("features.")}
    arrays = {k: v.detach().cpu().numpy() for k, v in state.items()}
    meta = {"spec": model.spec.to_json(), "encoder_only": encoder_only}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        with zipfile.ZipFile(io.BytesIO(buf.getvalue())) as src:
            for item in sorted(src.namelist()):
                info = zipfile.ZipInfo(item, date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, src.read(item))
        zf.writestr(zipfile.ZipInfo("spec.json", date_time=(1980, 1, 1, 0, 0, 0)),
                    json.dumps(meta, sort_keys=True))


def read_checkpoint(path: Path | str) -> tuple[ModelSpec, dict[str, torch.Tensor], bool]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("spec.json"))
    with np.load(path, allow_pickle=False) as arrays:
        state = {k: torch.from_numpy(arrays[k].copy()) for k in arrays.files if k != "spec.json"}
    return ModelSpec.from_json(meta["spec"]), state, bool(meta["encoder_only"])


def load_encoder(model: SleepModel, path: Path | str) -> None:
    """Copy feature-extractor weights from a checkpoint into ``model``."""
    spec, state, _ = read_checkpoint(path)
    if spec.backbone_kind != model.spec.backbone_kind or spec.input_len != model.spec.input_len \
            or spec.sampling_rate_hz != model.spec.sampling_rate_hz:
        raise ValueError(
            f"checkpoint encoder ({spec.backbone_kind}, {spec.input_len}) does not match "
            f"model ({model.spec.backbone_kind}, {model.spec.input_len})"
        )
    enc = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
    try:
        model.features.load_state_dict(enc)
    except RuntimeError as exc:
        raise ValueError(f"checkpoint encoder is incompatible: {exc}") from None


def load_model(path: Path | str) -> SleepModel:
    spec, state, encoder_only = read_checkpoint(path)
    model = build_model(spec)
    if encoder_only:
        load_encoder(model, path)
    else:
        model.load_state_dict(state)
    return model
