"""Domain reliability scoring, hardest-domain selection, and baseline schedulers.

Reliability of domain d is `omega_d = min_c exp(1 + mean_c) * (0.1 + sigma * gamma_d)`,
where `mean_c` is the mean probe confidence for reserved class c and `gamma_d`
counts past selections of d (the balancing factor discourages repeats). The
hardest scheduler picks argmin omega; four baselines share the same probe and
bookkeeping so their histories are directly comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .datasets import DomainDataset, sample_batch, stack_features

__all__ = [
    "SchedulerKind",
    "ScheduleState",
    "HistoryEntry",
    "domain_reliability",
    "select_hardest",
    "probe",
    "next_partition_domains",
    "write_history",
]

BALANCE_FLOOR = 0.1

ScoreFn = Callable[[np.ndarray], np.ndarray]


class SchedulerKind(str, Enum):
    HARDEST = "hardest"
    SEQUENTIAL = "sequential"
    RANDOM = "random"
    EASIEST = "easiest"
    SELF_GENERATED = "selfgen"


@dataclass
class HistoryEntry:
    step: int
    selected_domain: int
    omega: dict[int, float]


@dataclass
class ScheduleState:
    """Per-domain selection counts, the balance scale sigma, and the history."""

    sigma: float = 2e-5
    gamma: dict[int, int] = field(default_factory=dict)
    history: list[HistoryEntry] = field(default_factory=list)

    def selections(self) -> int:
        return sum(self.gamma.values())


def domain_reliability(
    probe_conf: dict[tuple[int, int], list[float]],
    state: ScheduleState,
) -> dict[int, float]:
    """omega_d per domain from per-(domain, class) probe confidence lists."""
    by_domain: dict[int, list[float]] = {}
    for (d, c), confs in probe_conf.items():
        if not confs:
            raise ValueError(f"domain_reliability: empty probe list for cell ({d}, {c})")
        vals = np.asarray(confs, dtype=np.float64)
        if np.any(vals <= 0.0) or np.any(vals >= 1.0):
            raise ValueError(f"domain_reliability: probe confidence outside (0,1) in cell ({d}, {c})")
        by_domain.setdefault(d, []).append(float(vals.mean()))
    omega = {}
    for d in sorted(by_domain):
        balance = BALANCE_FLOOR + state.sigma * state.gamma.get(d, 0)
        omega[d] = min(math.exp(1.0 + m) * balance for m in by_domain[d])
    return omega


def select_hardest(omega: dict[int, float]) -> int:
    """Argmin over domains; ties broken by the lowest domain id."""
    if not omega:
        raise ValueError("select_hardest: empty score map")
    for d, v in omega.items():
        if math.isnan(v):
            raise ValueError(f"select_hardest: NaN score for domain {d}")
    return min(sorted(omega), key=lambda d: (omega[d], d))


def probe(
    ds: DomainDataset,
    score_fn: ScoreFn,
    source_domains: list[int],
    reserved_classes: tuple[int, int],
    probe_size: int,
    rng: np.random.Generator,
) -> dict[tuple[int, int], list[float]]:
    """Draw probe_size training samples per (source domain, reserved class)
    cell and record scalar confidences from `score_fn` (no-gradient)."""
    if probe_size < 1:
        raise ValueError(f"probe: probe_size must be >= 1, got {probe_size}")
    cells = [(d, c) for d in sorted(source_domains) for c in sorted(reserved_classes)]
    batches = [sample_batch(ds, rng, {d}, {c}, probe_size, split="train") for d, c in cells]
    x = np.concatenate([stack_features(b)[0] for b in batches], axis=0)
    scores = np.asarray(score_fn(x)).reshape(-1)
    out: dict[tuple[int, int], list[float]] = {}
    for i, cell in enumerate(cells):
        out[cell] = [float(v) for v in scores[i * probe_size:(i + 1) * probe_size]]
    return out


def next_partition_domains(
    kind: SchedulerKind,
    ds: DomainDataset,
    follower_fn: ScoreFn,
    main_fn: ScoreFn,
    state: ScheduleState,
    rng: np.random.Generator,
    reserved_classes: tuple[int, int],
    probe_size: int,
    step: int,
) -> tuple[int, int, int]:
    """Select (d_star, d_i, d_j) among the source domains.

    Probes run under every kind so the history bookkeeping is uniform;
    sequential and random selection simply ignore the scores.
    """
    source = sorted(ds.manifest.source_domain_ids)
    if len(source) < 3:
        raise ValueError(f"need at least 3 source domains, got {len(source)}")
    score_fn = main_fn if kind is SchedulerKind.SELF_GENERATED else follower_fn
    probe_conf = probe(ds, score_fn, source, reserved_classes, probe_size, rng)
    omega = domain_reliability(probe_conf, state)
    if kind in (SchedulerKind.HARDEST, SchedulerKind.SELF_GENERATED):
        d_star = select_hardest(omega)
    elif kind is SchedulerKind.EASIEST:
        d_star = max(sorted(omega), key=lambda d: (omega[d], -d))
    elif kind is SchedulerKind.SEQUENTIAL:
        d_star = source[state.selections() % len(source)]
    elif kind is SchedulerKind.RANDOM:
        d_star = source[int(rng.integers(0, len(source)))]
    else:
        raise ValueError(f"unknown scheduler kind {kind!r}")
    rest = [d for d in source if d != d_star]
    if len(rest) == 2:
        d_i, d_j = rest
    else:
        picks = rng.choice(len(rest), size=2, replace=False)
        d_i, d_j = rest[int(picks[0])], rest[int(picks[1])]
    state.gamma[d_star] = state.gamma.get(d_star, 0) + 1
    state.history.append(HistoryEntry(step, d_star, omega))
    return d_star, d_i, d_j


def write_history(state: ScheduleState, source_domains: list[int], path: str | Path) -> None:
    """`schedule_history.csv`: step, selected_domain, omega_<d> per source domain."""
    domains = sorted(source_domains)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,selected_domain," + ",".join(f"omega_{d}" for d in domains) + "\n")
        for entry in state.history:
            scores = ",".join(repr(entry.omega[d]) for d in domains)
            f.write(f"{entry.step},{entry.selected_domain},{scores}\n")
