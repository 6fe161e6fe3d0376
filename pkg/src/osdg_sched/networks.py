"""Parameter containers and forward passes for the main and follower networks.

The main network is a relu MLP backbone feeding two parallel "rebias"
branches; each branch carries three heads: a softplus evidence head, a
conventional classification head (logits), and a one-vs-all binary head.
The follower shares the backbone architecture (independent parameters) and
ends in a single sigmoid regression unit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ArchConfig",
    "Dense",
    "MainOutputs",
    "MainNetwork",
    "FollowerNetwork",
    "init_networks",
    "save_checkpoint",
    "load_checkpoint",
]

SUPPORTED_BRANCH_DEPTHS = (1, 2)


@dataclass(frozen=True)
class ArchConfig:
    feature_dim: int
    num_classes: int
    hidden_widths: tuple[int, ...] = (64, 64)
    rebias_depths: tuple[int, int] = (2, 1)

    @property
    def embedding_dim(self) -> int:
        return self.hidden_widths[-1]

    def validate(self) -> None:
        if self.feature_dim < 1 or self.num_classes < 2:
            raise ValueError(f"invalid dimensions: p={self.feature_dim}, C={self.num_classes}")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must all be >= 1, got {self.hidden_widths}")
        if len(self.rebias_depths) != 2 or any(
                d not in SUPPORTED_BRANCH_DEPTHS for d in self.rebias_depths):
            raise ValueError(
                f"rebias depths must be a pair from {SUPPORTED_BRANCH_DEPTHS}, "
                f"got {self.rebias_depths}")


class Dense:
    """Affine layer x @ w + b with fan-in scaled-uniform init and zero bias."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, name: str):
        bound = 1.0 / np.sqrt(fan_in)
        self.w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


def _mlp(rng: np.random.Generator, widths: list[int], name: str) -> list[Dense]:
    return [Dense(rng, widths[i], widths[i + 1], f"{name}.{i}")
            for i in range(len(widths) - 1)]


def _run_mlp(layers: list[Dense], x: Tensor) -> Tensor:
    for layer in layers:
        x = layer(x).relu()
    return x


@dataclass
class MainOutputs:
    f1: Tensor
    f2: Tensor
    evidence1: Tensor
    evidence2: Tensor
    cls_logits1: Tensor
    cls_logits2: Tensor
    bcls_logits1: Tensor
    bcls_logits2: Tensor


class MainNetwork:
    def __init__(self, rng: np.random.Generator, arch: ArchConfig):
        self.arch = arch
        h = arch.embedding_dim
        widths = [arch.feature_dim, *arch.hidden_widths]
        self.backbone = _mlp(rng, widths, "backbone")
        self.branches = tuple(
            _mlp(rng, [h] * (depth + 1), f"branch{i + 1}")
            for i, depth in enumerate(arch.rebias_depths)
        )
        self.evidence_heads = tuple(Dense(rng, h, arch.num_classes, f"evidence{i + 1}")
                                    for i in range(2))
        self.cls_heads = tuple(Dense(rng, h, arch.num_classes, f"cls{i + 1}")
                               for i in range(2))
        self.bcls_heads = tuple(Dense(rng, h, arch.num_classes, f"bcls{i + 1}")
                                for i in range(2))

    def forward(self, x) -> MainOutputs:
        x = x if isinstance(x, Tensor) else Tensor(x)
        emb = _run_mlp(self.backbone, x)
        f = [_run_mlp(branch, emb) for branch in self.branches]
        ev = [self.evidence_heads[i](f[i]).softplus() for i in range(2)]
        cls = [self.cls_heads[i](f[i]) for i in range(2)]
        bcls = [self.bcls_heads[i](f[i]) for i in range(2)]
        return MainOutputs(f[0], f[1], ev[0], ev[1], cls[0], cls[1], bcls[0], bcls[1])

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.backbone:
            out.extend(layer.params())
        for branch in self.branches:
            for layer in branch:
                out.extend(layer.params())
        for heads in (self.evidence_heads, self.cls_heads, self.bcls_heads):
            for head in heads:
                out.extend(head.params())
        return out


class FollowerNetwork:
    """Backbone clone with one sigmoid regression head; output strictly in (0, 1)."""

    def __init__(self, rng: np.random.Generator, arch: ArchConfig):
        self.arch = arch
        widths = [arch.feature_dim, *arch.hidden_widths]
        self.backbone = _mlp(rng, widths, "follower.backbone")
        self.head = Dense(rng, arch.embedding_dim, 1, "follower.head")

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.head(_run_mlp(self.backbone, x)).sigmoid()

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.backbone:
            out.extend(layer.params())
        out.extend(self.head.params())
        return out


def init_networks(seed: int, arch: ArchConfig) -> tuple[MainNetwork, FollowerNetwork]:
    """Deterministically initialize both networks from one seed."""
    arch.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    return MainNetwork(rng, arch), FollowerNetwork(rng, arch)


# -- checkpointing --------------------------------------------------------------


def _param_dict(net) -> dict[str, list[float]]:
    return {p.name: p.data.reshape(-1).tolist() for p in net.params()}


def save_checkpoint(path: str | Path, main: MainNetwork, follower: FollowerNetwork) -> None:
    """JSON checkpoint with the architecture and flat parameter arrays; exact round trip."""
    arch = main.arch
    doc = {
        "arch": {
            "feature_dim": arch.feature_dim,
            "num_classes": arch.num_classes,
            "hidden_widths": list(arch.hidden_widths),
            "rebias_depths": list(arch.rebias_depths),
        },
        "main": _param_dict(main),
        "follower": _param_dict(follower),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def _restore(net, stored: dict[str, list[float]], path) -> None:
    for p in net.params():
        if p.name not in stored:
            raise ValueError(f"{path}: checkpoint missing parameter {p.name!r}")
        flat = np.asarray(stored[p.name], dtype=np.float64)
        if flat.size != p.data.size:
            raise ValueError(
                f"{path}: parameter {p.name!r} has {flat.size} values, expected {p.data.size}")
        p.data = flat.reshape(p.data.shape)


def load_checkpoint(path: str | Path) -> tuple[MainNetwork, FollowerNetwork, ArchConfig]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    a = doc["arch"]
    arch = ArchConfig(
        feature_dim=int(a["feature_dim"]),
        num_classes=int(a["num_classes"]),
        hidden_widths=tuple(a["hidden_widths"]),
        rebias_depths=tuple(a["rebias_depths"]),
    )
    main, follower = init_networks(0, arch)
    _restore(main, doc["main"], path)
    _restore(follower, doc["follower"], path)
    return main, follower, arch
