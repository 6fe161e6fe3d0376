"""Meta-training loop: reserved-class sampling, meta-train/meta-test
partitioning, and the two-phase update.

Each iteration reserves two seen classes, asks the scheduler for the hardest
domain d* plus two others (d_i, d_j), and builds four disjoint cell sets:

    omega_a      reserved classes   x {d_i, d_j}
    omega_b      remaining classes  x {d*}          -> meta-train = a + b
    omega_a_star reserved classes   x {d*}
    omega_b_star remaining classes  x {d_i, d_j}    -> meta-test  = a* + b*

Phase 1 minimizes the combined loss on the meta-train set and steps all
parameters; phase 2 recomputes both set losses at the updated parameters
(first order) and steps again. The follower is trained only through its
regression loss: its targets are detached confidences, and the per-sample
weights fed to the classification loss are detached follower outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import Tensor
from .datasets import DomainDataset, Sample, sample_batch, stack_features
from .losses import (
    classification_loss,
    conf,
    conf_evidential,
    evidential_nll,
    follower_loss,
    median_bandwidth,
    rebias_discrepancy,
)
from .networks import ArchConfig, FollowerNetwork, MainNetwork, MainOutputs, init_networks, save_checkpoint
from .scheduling import ScheduleState, SchedulerKind, next_partition_domains, write_history

__all__ = [
    "TrainConfig",
    "TrainingError",
    "LossBreakdown",
    "MetaBatch",
    "DomainScheduler",
    "TrainResult",
    "build_meta_batch",
    "meta_step",
    "train",
]


class TrainingError(RuntimeError):
    """Non-finite loss or another unrecoverable training failure."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    max_steps: int = 10_000
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_step: int = 8_000
    w_cls: float = 1.0
    w_reg: float = 1e-4
    w_rbe: float = 5e-4
    sigma: float = 2e-5
    probe_size: int = 16
    scheduler: str = "hardest"
    eval_interval: int = 100
    hidden_widths: tuple[int, ...] = (64, 64)
    rebias_depths: tuple[int, int] = (2, 1)
    omega_min: float = 0.1
    conf_mode: str = "softmax"
    disable_rbe: bool = False
    disable_rb: bool = False
    single_update: bool = False

    def validate(self) -> None:
        if self.max_steps < 0 or self.batch_size < 1 or self.probe_size < 1:
            raise ValueError("max_steps must be >= 0; batch_size and probe_size >= 1")
        if self.lr < 0 or self.lr_decay <= 0 or self.lr_decay_step < 1:
            raise ValueError("lr must be >= 0, lr_decay > 0, lr_decay_step >= 1")
        if min(self.w_cls, self.w_reg, self.w_rbe) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.omega_min <= 1:
            raise ValueError(f"omega_min must be in (0, 1], got {self.omega_min}")
        if self.conf_mode not in ("softmax", "evidential"):
            raise ValueError(f"unknown conf_mode {self.conf_mode!r}")
        SchedulerKind(self.scheduler)
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")

    def effective_lr(self, step: int) -> float:
        return self.lr * self.lr_decay if step >= self.lr_decay_step else self.lr


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_rbe: float
    r_rb: float
    total: float

    def check_finite(self) -> None:
        for name, value in (("l_cls", self.l_cls), ("l_reg", self.l_reg),
                            ("l_rbe", self.l_rbe), ("r_rb", self.r_rb),
                            ("total", self.total)):
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss term {name}={value}")

    @staticmethod
    def combined(a: "LossBreakdown", b: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(a.l_cls + b.l_cls, a.l_reg + b.l_reg, a.l_rbe + b.l_rbe,
                             a.r_rb + b.r_rb, a.total + b.total)


@dataclass
class MetaBatch:
    omega_a: list[Sample]
    omega_b: list[Sample]
    omega_a_star: list[Sample]
    omega_b_star: list[Sample]
    reserved_classes: tuple[int, int]
    d_star: int
    d_i: int
    d_j: int


class DomainScheduler:
    """Binds a scheduler kind to its state, probe configuration, and networks."""

    def __init__(
        self,
        kind: SchedulerKind,
        state: ScheduleState,
        main: MainNetwork,
        follower: FollowerNetwork,
        probe_size: int,
        rng: np.random.Generator,
        conf_mode: str = "softmax",
    ):
        self.kind = kind
        self.state = state
        self.main = main
        self.follower = follower
        self.probe_size = probe_size
        self.rng = rng
        self.conf_mode = conf_mode

    def _follower_scores(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.follower.forward(x).data.reshape(-1)

    def _main_scores(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            out = self.main.forward(x)
        return _confidence_target(out, self.conf_mode).reshape(-1)

    def next_partition(self, ds: DomainDataset, reserved: tuple[int, int],
                       step: int) -> tuple[int, int, int]:
        return next_partition_domains(
            self.kind, ds, self._follower_scores, self._main_scores, self.state,
            self.rng, reserved, self.probe_size, step)


def _confidence_target(out: MainOutputs, mode: str) -> np.ndarray:
    """Detached (n, 1) supervision target: mean of the two branch confidences."""
    if mode == "evidential":
        return 0.5 * (conf_evidential(out.evidence1) + conf_evidential(out.evidence2))
    return 0.5 * (conf(out.cls_logits1) + conf(out.cls_logits2))


def _one_hot(class_ids: np.ndarray, class_to_index: dict[int, int]) -> np.ndarray:
    idx = np.asarray([class_to_index[int(c)] for c in class_ids])
    y = np.zeros((idx.shape[0], len(class_to_index)))
    y[np.arange(idx.shape[0]), idx] = 1.0
    return y


def build_meta_batch(
    ds: DomainDataset,
    scheduler: DomainScheduler,
    rng: np.random.Generator,
    batch_size: int,
    step: int = 0,
) -> MetaBatch:
    """Reserve two seen classes, partition domains, and draw the four cell sets."""
    seen = sorted(ds.manifest.seen_class_ids)
    if len(seen) < 3:
        raise ValueError(f"need at least 3 seen classes, got {len(seen)}")
    picks = rng.choice(len(seen), size=2, replace=False)
    c_i, c_j = seen[int(picks[0])], seen[int(picks[1])]
    d_star, d_i, d_j = scheduler.next_partition(ds, (c_i, c_j), step)
    reserved = {c_i, c_j}
    others = set(seen) - reserved
    batch = MetaBatch(
        omega_a=sample_batch(ds, rng, {d_i, d_j}, reserved, batch_size),
        omega_b=sample_batch(ds, rng, {d_star}, others, batch_size),
        omega_a_star=sample_batch(ds, rng, {d_star}, reserved, batch_size),
        omega_b_star=sample_batch(ds, rng, {d_i, d_j}, others, batch_size),
        reserved_classes=(c_i, c_j),
        d_star=d_star,
        d_i=d_i,
        d_j=d_j,
    )
    _check_cells(batch, set(seen))
    return batch


def _check_cells(batch: MetaBatch, seen: set[int]) -> None:
    reserved = set(batch.reserved_classes)
    others = seen - reserved
    pair = {batch.d_i, batch.d_j}
    star = {batch.d_star}
    for name, samples, classes, domains in (
        ("omega_a", batch.omega_a, reserved, pair),
        ("omega_b", batch.omega_b, others, star),
        ("omega_a_star", batch.omega_a_star, reserved, star),
        ("omega_b_star", batch.omega_b_star, others, pair),
    ):
        for s in samples:
            if s.class_id not in classes or s.domain_id not in domains:
                raise TrainingError(
                    f"{name}: sample from cell ({s.domain_id}, {s.class_id}) violates "
                    f"classes={sorted(classes)}, domains={sorted(domains)}")
    if star & pair:
        raise TrainingError(f"d_star {batch.d_star} overlaps pair {sorted(pair)}")


def _phase_losses(
    main: MainNetwork,
    follower: FollowerNetwork,
    x: np.ndarray,
    y_onehot: np.ndarray,
    cfg: TrainConfig,
) -> tuple[Tensor, LossBreakdown]:
    out = main.forward(x)
    r_rb_value = 0.0
    if cfg.disable_rbe:
        l_rbe = None
        l_rbe_value = 0.0
    else:
        nll = evidential_nll(out.evidence1, out.evidence2, y_onehot)
        if cfg.disable_rb:
            l_rbe = nll
        else:
            bw = median_bandwidth(out.f1.data, out.f2.data)
            r_rb = rebias_discrepancy(out.f1, out.f2, bw)
            r_rb_value = r_rb.item()
            l_rbe = nll - r_rb
        l_rbe_value = l_rbe.item()

    follower_out = follower.forward(x)
    target = _confidence_target(out, cfg.conf_mode)
    l_reg = follower_loss(follower_out, target)
    weights = np.clip(follower_out.data.reshape(-1), cfg.omega_min, 1.0)
    l_cls = classification_loss(out.cls_logits1, out.cls_logits2,
                                out.bcls_logits1, out.bcls_logits2, y_onehot, weights)
    total = l_cls * cfg.w_cls + l_reg * cfg.w_reg
    if l_rbe is not None:
        total = total + l_rbe * cfg.w_rbe
    breakdown = LossBreakdown(l_cls.item(), l_reg.item(), l_rbe_value, r_rb_value, total.item())
    breakdown.check_finite()
    return total, breakdown


def meta_step(
    main: MainNetwork,
    follower: FollowerNetwork,
    batch: MetaBatch,
    cfg: TrainConfig,
    class_to_index: dict[int, int],
    lr: float,
) -> tuple[LossBreakdown, LossBreakdown]:
    """One meta-iteration; returns the meta-train and combined breakdowns."""
    params = main.params() + follower.params()
    if cfg.disable_rbe:
        # the evidence heads feed no loss term in this ablation
        frozen = {id(p) for head in main.evidence_heads for p in head.params()}
        params = [p for p in params if id(p) not in frozen]
    x_train, y_train = stack_features(batch.omega_a + batch.omega_b)
    x_test, y_test = stack_features(batch.omega_a_star + batch.omega_b_star)
    y_train_oh = _one_hot(y_train, class_to_index)
    y_test_oh = _one_hot(y_test, class_to_index)

    if cfg.single_update:
        ad.new_graph()
        total_train, bd_train = _phase_losses(main, follower, x_train, y_train_oh, cfg)
        total_test, bd_test = _phase_losses(main, follower, x_test, y_test_oh, cfg)
        ad.backward(total_train + total_test)
        ad.sgd_step(params, lr)
        ad.new_graph()
        return bd_train, LossBreakdown.combined(bd_train, bd_test)

    ad.new_graph()
    total_train, bd_train = _phase_losses(main, follower, x_train, y_train_oh, cfg)
    ad.backward(total_train)
    ad.sgd_step(params, lr)

    ad.new_graph()
    total_test2, bd_test2 = _phase_losses(main, follower, x_test, y_test_oh, cfg)
    total_train2, bd_train2 = _phase_losses(main, follower, x_train, y_train_oh, cfg)
    ad.backward(total_test2 + total_train2)
    ad.sgd_step(params, lr)
    ad.new_graph()
    return bd_train, LossBreakdown.combined(bd_test2, bd_train2)


@dataclass
class TrainResult:
    main: MainNetwork
    follower: FollowerNetwork
    arch: ArchConfig
    state: ScheduleState
    log: list[dict] = field(default_factory=list)
    val_acc: float | None = None
    test_acc: float | None = None


def _close_set_acc(main: MainNetwork, x: np.ndarray, y: np.ndarray,
                   index_to_class: np.ndarray) -> float:
    pred_idx, _ = evaluation.predict(main, x)["cls"]
    return float((index_to_class[pred_idx] == y).mean())


LOG_COLUMNS = ("step", "l_cls", "l_reg", "l_rbe", "r_rb", "total",
               "selected_domain", "val_acc", "test_acc")


def _log_row(row: dict) -> str:
    cells = []
    for col in LOG_COLUMNS:
        v = row.get(col)
        if v is None:
            cells.append("")
        elif isinstance(v, float):
            cells.append(repr(v))
        else:
            cells.append(str(v))
    return ",".join(cells)


def train(ds: DomainDataset, cfg: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Run the full loop for cfg.max_steps and optionally persist artifacts.

    Writes `train_log.csv` (streamed), `schedule_history.csv`, and
    `checkpoint.json` under `out_dir` when given.
    """
    cfg.validate()
    seen = sorted(ds.manifest.seen_class_ids)
    class_to_index = {c: i for i, c in enumerate(seen)}
    index_to_class = np.asarray(seen)
    arch = ArchConfig(
        feature_dim=ds.manifest.feature_dim,
        num_classes=len(seen),
        hidden_widths=tuple(cfg.hidden_widths),
        rebias_depths=tuple(cfg.rebias_depths),
    )
    init_ss, batch_ss, sched_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    main, follower = init_networks(init_ss, arch)
    batch_rng = np.random.Generator(np.random.PCG64(batch_ss))
    sched_rng = np.random.Generator(np.random.PCG64(sched_ss))
    state = ScheduleState(sigma=cfg.sigma)
    scheduler = DomainScheduler(SchedulerKind(cfg.scheduler), state, main, follower,
                                cfg.probe_size, sched_rng, cfg.conf_mode)

    val = ds.split("val")
    test = ds.split("test")
    test_seen_mask = np.isin(test.class_ids, index_to_class)
    result = TrainResult(main, follower, arch, state)

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = open(out_path / "train_log.csv", "w", encoding="utf-8", newline="\n")
        log_file.write(",".join(LOG_COLUMNS) + "\n")
    try:
        for step in range(cfg.max_steps):
            batch = build_meta_batch(ds, scheduler, batch_rng, cfg.batch_size, step)
            bd_train, _ = meta_step(main, follower, batch, cfg, class_to_index,
                                    cfg.effective_lr(step))
            row = {
                "step": step,
                "l_cls": bd_train.l_cls,
                "l_reg": bd_train.l_reg,
                "l_rbe": bd_train.l_rbe,
                "r_rb": bd_train.r_rb,
                "total": bd_train.total,
                "selected_domain": batch.d_star,
            }
            if (step + 1) % cfg.eval_interval == 0:
                result.val_acc = _close_set_acc(main, val.features, val.class_ids,
                                                index_to_class)
                result.test_acc = _close_set_acc(
                    main, test.features[test_seen_mask],
                    test.class_ids[test_seen_mask], index_to_class)
                row["val_acc"] = result.val_acc
                row["test_acc"] = result.test_acc
            result.log.append(row)
            if log_file is not None:
                log_file.write(_log_row(row) + "\n")
    finally:
        if log_file is not None:
            log_file.close()

    if out_path is not None:
        write_history(state, ds.manifest.source_domain_ids, out_path / "schedule_history.csv")
        save_checkpoint(out_path / "checkpoint.json", main, follower)
    return result
