"""Seeded synthetic multi-domain open-set datasets and their on-disk format.

Each domain applies an affine transform (orthogonal rotation, scale, bias) to
shared class prototypes, realizing "same categories, different appearance"
without images. A dataset directory holds `manifest.json` plus `train.csv`,
`val.csv`, `test.csv` with rows `class_id,domain_id,f_0,...,f_{p-1}`; floats
are serialized as shortest round-trip decimals, so save/load is bit-exact.

All randomness comes from numpy's PCG64 generator seeded explicitly, making
generation deterministic for fixed arguments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetError",
    "Sample",
    "DomainSpec",
    "Manifest",
    "SplitData",
    "DomainDataset",
    "DIFFICULTY_PRESETS",
    "generate",
    "save",
    "load",
    "sample_batch",
]

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Invalid dataset content, constraints, or on-disk format."""


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    class_id: int
    domain_id: int


@dataclass(frozen=True)
class DomainSpec:
    """Affine domain shift: x -> scale * Q @ x + bias, with per-domain noise.

    Q is the product of Given rotations by `angles[i]` in the disjoint planes
    (2i, 2i+1), hence orthogonal by construction.
    """

    angles: tuple[float, ...]
    scale: float
    bias: tuple[float, ...]
    noise: float

    def rotation(self, dim: int) -> np.ndarray:
        q = np.eye(dim)
        for i, theta in enumerate(self.angles):
            a, b = 2 * i, 2 * i + 1
            c, s = np.cos(theta), np.sin(theta)
            g = np.eye(dim)
            g[a, a] = c
            g[a, b] = -s
            g[b, a] = s
            g[b, b] = c
            q = g @ q
        return q


@dataclass
class Manifest:
    feature_dim: int
    domain_names: list[str]
    class_names: list[str]
    seen_class_ids: list[int]
    unseen_class_ids: list[int]
    held_out_domain_id: int
    seed: int
    difficulty: str
    samples_per_cell: int
    val_fraction: float
    class_noise: float
    prototype_radius: float
    domain_specs: list[DomainSpec]

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def source_domain_ids(self) -> list[int]:
        return [d for d in range(self.num_domains) if d != self.held_out_domain_id]

    def validate(self) -> None:
        seen, unseen = set(self.seen_class_ids), set(self.unseen_class_ids)
        if seen & unseen:
            raise DatasetError(f"seen/unseen class ids overlap: {sorted(seen & unseen)}")
        if seen | unseen != set(range(self.num_classes)):
            raise DatasetError("seen+unseen class ids must cover all classes exactly")
        if not 0 <= self.held_out_domain_id < self.num_domains:
            raise DatasetError(f"held_out_domain_id {self.held_out_domain_id} out of range")

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "domain_names": self.domain_names,
            "class_names": self.class_names,
            "seen_class_ids": self.seen_class_ids,
            "unseen_class_ids": self.unseen_class_ids,
            "held_out_domain_id": self.held_out_domain_id,
            "seed": self.seed,
            "difficulty": self.difficulty,
            "samples_per_cell": self.samples_per_cell,
            "val_fraction": self.val_fraction,
            "class_noise": self.class_noise,
            "prototype_radius": self.prototype_radius,
            "domain_specs": [
                {"angles": list(s.angles), "scale": s.scale, "bias": list(s.bias), "noise": s.noise}
                for s in self.domain_specs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        try:
            specs = [
                DomainSpec(tuple(s["angles"]), float(s["scale"]), tuple(s["bias"]), float(s["noise"]))
                for s in d["domain_specs"]
            ]
            m = cls(
                feature_dim=int(d["feature_dim"]),
                domain_names=list(d["domain_names"]),
                class_names=list(d["class_names"]),
                seen_class_ids=[int(c) for c in d["seen_class_ids"]],
                unseen_class_ids=[int(c) for c in d["unseen_class_ids"]],
                held_out_domain_id=int(d["held_out_domain_id"]),
                seed=int(d["seed"]),
                difficulty=str(d["difficulty"]),
                samples_per_cell=int(d["samples_per_cell"]),
                val_fraction=float(d["val_fraction"]),
                class_noise=float(d["class_noise"]),
                prototype_radius=float(d["prototype_radius"]),
                domain_specs=specs,
            )
        except (KeyError, TypeError) as e:
            raise DatasetError(f"malformed manifest: {e}") from None
        m.validate()
        return m


@dataclass
class SplitData:
    """Column-oriented sample storage for one split."""

    features: np.ndarray  # (n, p) float64
    class_ids: np.ndarray  # (n,) int64
    domain_ids: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return self.features.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.class_ids[i]), int(self.domain_ids[i]))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SplitData)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.class_ids, other.class_ids)
            and np.array_equal(self.domain_ids, other.domain_ids)
        )


@dataclass
class DomainDataset:
    manifest: Manifest
    splits: dict[str, SplitData]
    _cells: dict[str, dict[tuple[int, int], np.ndarray]] = field(default_factory=dict, repr=False)

    def split(self, name: str) -> SplitData:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}; expected one of {SPLITS}")
        return self.splits[name]

    def cell_indices(self, split: str, domain_id: int, class_id: int) -> np.ndarray:
        """Row indices of one (domain, class) cell, cached per split."""
        if split not in self._cells:
            data = self.split(split)
            cells: dict[tuple[int, int], np.ndarray] = {}
            order = np.arange(len(data))
            for d in range(self.manifest.num_domains):
                dmask = data.domain_ids == d
                for c in range(self.manifest.num_classes):
                    idx = order[dmask & (data.class_ids == c)]
                    if idx.size:
                        cells[(d, c)] = idx
            self._cells[split] = cells
        return self._cells[split].get((domain_id, class_id), np.empty(0, dtype=np.int64))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DomainDataset)
            and self.manifest == other.manifest
            and all(self.splits[s] == other.splits[s] for s in SPLITS)
        )

    def validate(self) -> None:
        m = self.manifest
        m.validate()
        seen = set(m.seen_class_ids)
        train = self.split("train")
        if np.any(train.domain_ids == m.held_out_domain_id):
            raise DatasetError("train split contains held-out-domain samples")
        if any(int(c) not in seen for c in np.unique(train.class_ids)):
            raise DatasetError("train split contains unseen-class samples")
        val = self.split("val")
        if np.any(val.domain_ids == m.held_out_domain_id):
            raise DatasetError("val split contains held-out-domain samples")
        for d in m.source_domain_ids:
            for c in sorted(seen):
                if self.cell_indices("train", d, c).size == 0:
                    raise DatasetError(f"empty train cell (domain={d}, class={c})")
        test = self.split("test")
        test_classes = set(int(c) for c in np.unique(test.class_ids))
        if not (test_classes & seen) or not (test_classes & set(m.unseen_class_ids)):
            raise DatasetError("test split must contain both seen and unseen classes")


# Per-difficulty knobs: prototype sphere radius, class noise, and the
# aggressiveness of the per-domain affine shift.
DIFFICULTY_PRESETS = {
    "easy": {"radius": 4.0, "class_noise": 0.25, "max_angle": 0.10, "scale_lo": 0.95,
             "scale_hi": 1.05, "bias_range": 0.2},
    "medium": {"radius": 3.0, "class_noise": 0.50, "max_angle": 0.35, "scale_lo": 0.85,
               "scale_hi": 1.20, "bias_range": 0.6},
    "hard": {"radius": 2.0, "class_noise": 0.80, "max_angle": 0.70, "scale_lo": 0.70,
             "scale_hi": 1.40, "bias_range": 1.2},
}


def generate(
    seed: int,
    num_domains: int = 4,
    num_classes: int = 10,
    num_unseen_classes: int = 4,
    feature_dim: int = 16,
    samples_per_cell: int = 200,
    difficulty: str = "easy",
    val_fraction: float = 0.1,
    held_out_domain_id: int | None = None,
    class_noise: float | None = None,
) -> DomainDataset:
    """Generate a seeded synthetic open-set multi-domain dataset.

    Class prototypes are drawn on a sphere whose radius depends on
    `difficulty`; each sample is `scale_d * Q_d @ (mu_c + eps) + bias_d`
    with `eps ~ N(0, noise_d^2 I)`. Identical arguments give bit-identical
    datasets.
    """
    if difficulty not in DIFFICULTY_PRESETS:
        raise DatasetError(f"unknown difficulty {difficulty!r}")
    if num_domains < 4:
        raise DatasetError(f"num_domains must be >= 4, got {num_domains}")
    if num_classes < 3:
        raise DatasetError(f"num_classes must be >= 3, got {num_classes}")
    if not 1 <= num_unseen_classes < num_classes:
        raise DatasetError(
            f"num_unseen_classes must be in [1, num_classes), got {num_unseen_classes}")
    if feature_dim < 2:
        raise DatasetError(f"feature_dim must be >= 2, got {feature_dim}")
    if samples_per_cell < 1:
        raise DatasetError(f"samples_per_cell must be >= 1, got {samples_per_cell}")
    if not 0.0 <= val_fraction < 1.0:
        raise DatasetError(f"val_fraction must be in [0, 1), got {val_fraction}")
    preset = DIFFICULTY_PRESETS[difficulty]
    noise = preset["class_noise"] if class_noise is None else float(class_noise)
    if noise < 0:
        raise DatasetError(f"class_noise must be >= 0, got {noise}")
    held_out = num_domains - 1 if held_out_domain_id is None else int(held_out_domain_id)
    if not 0 <= held_out < num_domains:
        raise DatasetError(f"held_out_domain_id {held_out} out of range")

    rng = np.random.Generator(np.random.PCG64(seed))

    protos = rng.standard_normal((num_classes, feature_dim))
    protos *= preset["radius"] / np.linalg.norm(protos, axis=1, keepdims=True)

    specs = []
    n_planes = feature_dim // 2
    for _ in range(num_domains):
        angles = rng.uniform(-preset["max_angle"], preset["max_angle"], size=n_planes)
        s = rng.uniform(preset["scale_lo"], preset["scale_hi"])
        bias = rng.uniform(-preset["bias_range"], preset["bias_range"], size=feature_dim)
        specs.append(DomainSpec(tuple(angles.tolist()), float(s), tuple(bias.tolist()), noise))

    seen_ids = list(range(num_classes - num_unseen_classes))
    unseen_ids = list(range(num_classes - num_unseen_classes, num_classes))
    manifest = Manifest(
        feature_dim=feature_dim,
        domain_names=[f"domain{d}" for d in range(num_domains)],
        class_names=[f"class{c}" for c in range(num_classes)],
        seen_class_ids=seen_ids,
        unseen_class_ids=unseen_ids,
        held_out_domain_id=held_out,
        seed=seed,
        difficulty=difficulty,
        samples_per_cell=samples_per_cell,
        val_fraction=val_fraction,
        class_noise=noise,
        prototype_radius=preset["radius"],
        domain_specs=specs,
    )

    n_val = int(round(val_fraction * samples_per_cell))
    rows: dict[str, list[np.ndarray]] = {s: [] for s in SPLITS}
    labels: dict[str, list[tuple[int, int]]] = {s: [] for s in SPLITS}

    def emit(split: str, x: np.ndarray, c: int, d: int) -> None:
        rows[split].append(x)
        labels[split].extend((c, d) for _ in range(x.shape[0]))

    for d in range(num_domains):
        spec = specs[d]
        q = spec.rotation(feature_dim)
        classes = range(num_classes) if d == held_out else seen_ids
        for c in classes:
            eps = rng.standard_normal((samples_per_cell, feature_dim)) * spec.noise
            x = spec.scale * (protos[c] + eps) @ q.T + np.asarray(spec.bias)
            if d == held_out:
                emit("test", x, c, d)
            else:
                emit("train", x[: samples_per_cell - n_val], c, d)
                if n_val:
                    emit("val", x[samples_per_cell - n_val:], c, d)

    splits = {}
    for s in SPLITS:
        if rows[s]:
            feats = np.concatenate(rows[s], axis=0)
            lab = np.asarray(labels[s], dtype=np.int64)
            splits[s] = SplitData(np.ascontiguousarray(feats), lab[:, 0], lab[:, 1])
        else:
            splits[s] = SplitData(np.empty((0, feature_dim)), np.empty(0, dtype=np.int64),
                                  np.empty(0, dtype=np.int64))
    ds = DomainDataset(manifest, splits)
    ds.validate()
    return ds


# -- on-disk format -----------------------------------------------------------


def _format_row(class_id: int, domain_id: int, features: np.ndarray) -> str:
    return ",".join([str(class_id), str(domain_id)] + [repr(float(v)) for v in features])


def save(ds: DomainDataset, directory: str | Path) -> None:
    """Write `manifest.json` and per-split CSVs; UTF-8, LF line endings."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(ds.manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    for s in SPLITS:
        data = ds.split(s)
        with open(directory / f"{s}.csv", "w", encoding="utf-8", newline="\n") as f:
            for i in range(len(data)):
                f.write(_format_row(int(data.class_ids[i]), int(data.domain_ids[i]),
                                    data.features[i]))
                f.write("\n")


def load(directory: str | Path) -> DomainDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path}: manifest not found")
    try:
        with open(manifest_path, encoding="utf-8") as f:
            manifest = Manifest.from_dict(json.load(f))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}:{e.lineno}: invalid JSON: {e.msg}") from None

    p = manifest.feature_dim
    splits = {}
    for s in SPLITS:
        path = directory / f"{s}.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path}: split file not found")
        feats, cids, dids = [], [], []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 2 + p:
                    raise DatasetError(
                        f"{path}:{lineno}: expected {2 + p} fields, got {len(parts)}")
                try:
                    c, d = int(parts[0]), int(parts[1])
                    vals = [float(v) for v in parts[2:]]
                except ValueError as e:
                    raise DatasetError(f"{path}:{lineno}: {e}") from None
                if not 0 <= c < manifest.num_classes:
                    raise DatasetError(f"{path}:{lineno}: unknown class id {c}")
                if not 0 <= d < manifest.num_domains:
                    raise DatasetError(f"{path}:{lineno}: unknown domain id {d}")
                feats.append(vals)
                cids.append(c)
                dids.append(d)
        splits[s] = SplitData(
            np.asarray(feats, dtype=np.float64).reshape(len(feats), p),
            np.asarray(cids, dtype=np.int64),
            np.asarray(dids, dtype=np.int64),
        )
    ds = DomainDataset(manifest, splits)
    ds.validate()
    return ds


# -- batch sampling -----------------------------------------------------------


def sample_batch(
    ds: DomainDataset,
    rng: np.random.Generator,
    domains: set[int] | frozenset[int],
    classes: set[int] | frozenset[int],
    size: int,
    split: str = "train",
) -> list[Sample]:
    """Uniform with-replacement draw from the pooled (domain, class) cells.

    Every cell in the cross product must be non-empty; the draw is
    deterministic for a fixed generator state.
    """
    if size < 0:
        raise DatasetError(f"sample_batch: size must be >= 0, got {size}")
    data = ds.split(split)
    pools = []
    for d in sorted(domains):
        for c in sorted(classes):
            idx = ds.cell_indices(split, d, c)
            if idx.size == 0:
                raise DatasetError(f"sample_batch: empty cell (domain={d}, class={c}) in {split!r}")
            pools.append(idx)
    if size == 0:
        return []
    pool = np.concatenate(pools)
    draw = rng.integers(0, pool.size, size=size)
    return [data.sample(int(pool[j])) for j in draw]


def stack_features(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """(features matrix, class-id vector) for a list of samples."""
    x = np.stack([s.features for s in samples], axis=0)
    y = np.asarray([s.class_id for s in samples], dtype=np.int64)
    return x, y
