"""Seeded synthetic class-incremental tasks.

Each class is an isotropic Gaussian blob; every stage owns a disjoint set of
classes. Regression targets come from one global affine map of the input
(class-agnostic) or from per-class maps.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import container


@dataclass(frozen=True)
class TaskSpec:
    input_dim: int = 16
    classes_per_stage: tuple[int, ...] = (5, 5, 5, 5)
    train_per_class: int = 200
    test_per_class: int = 100
    cluster_spread: float = 1.0
    center_distance: float = 7.0    # expected distance between two class centers
    reg_dim: int = 4
    noise_scale: float = 0.5
    class_agnostic_regression: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes_per_stage", tuple(int(c) for c in self.classes_per_stage))
        if self.input_dim < 1 or self.reg_dim < 1:
            raise ValueError("input_dim and reg_dim must be >= 1")
        if not self.classes_per_stage or min(self.classes_per_stage) < 1:
            raise ValueError("every stage needs at least one class")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("sample counts must be >= 1")
        if self.cluster_spread <= 0:
            raise ValueError("cluster_spread must be > 0")
        if self.center_distance < 6.0 * self.cluster_spread:
            raise ValueError("center_distance must be at least 6 cluster spreads")

    @property
    def n_stages(self) -> int:
        return len(self.classes_per_stage)

    @property
    def n_classes(self) -> int:
        return sum(self.classes_per_stage)

    def stage_classes(self, t: int) -> list[int]:
        start = sum(self.classes_per_stage[:t])
        return list(range(start, start + self.classes_per_stage[t]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes_per_stage"] = list(self.classes_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass
class Split:
    x: np.ndarray
    labels: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def __eq__(self, other):
        return (isinstance(other, Split) and np.array_equal(self.x, other.x)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.targets, other.targets))


@dataclass
class StageDataset:
    stage: int
    classes: list[int]
    train: Split
    test: Split

    def __eq__(self, other):
        return (isinstance(other, StageDataset) and self.stage == other.stage
                and self.classes == other.classes and self.train == other.train
                and self.test == other.test)


def _center_half_width(spec: TaskSpec) -> float:
    # uniform on [-L, L]^p: E||c_i - c_j||^2 = 2 p L^2 / 3
    return spec.center_distance / np.sqrt(2.0 * spec.input_dim / 3.0)


def generate(spec: TaskSpec) -> list[StageDataset]:
    root = np.random.SeedSequence(spec.seed)
    task_seq, *stage_seqs = root.spawn(1 + spec.n_stages)
    task_rng = np.random.default_rng(task_seq)
    p, m = spec.input_dim, spec.reg_dim
    half = _center_half_width(spec)
    centers = task_rng.uniform(-half, half, size=(spec.n_classes, p))
    # scale so targets have roughly unit variance over the input cloud
    input_scale = np.sqrt(p * (half ** 2 / 3.0 + spec.cluster_spread ** 2))
    if spec.class_agnostic_regression:
        A = task_rng.normal(0.0, 1.0 / input_scale, size=(p, m))
        b = task_rng.normal(0.0, 1.0, size=m)
        maps = [(A, b)] * spec.n_classes
    else:
        maps = [(task_rng.normal(0.0, 1.0 / input_scale, size=(p, m)), task_rng.normal(0.0, 1.0, size=m))
                for _ in range(spec.n_classes)]

    def sample(rng, classes, per_class):
        xs, ys, rs = [], [], []
        for c in classes:
            x = centers[c] + spec.cluster_spread * rng.standard_normal((per_class, p))
            A_c, b_c = maps[c]
            xs.append(x)
            ys.append(np.full(per_class, c, dtype=np.int64))
            rs.append(x @ A_c + b_c + spec.noise_scale * rng.standard_normal((per_class, m)))
        return Split(np.concatenate(xs), np.concatenate(ys), np.concatenate(rs))

    stages = []
    for t, seq in enumerate(stage_seqs):
        rng = np.random.default_rng(seq)
        classes = spec.stage_classes(t)
        train = sample(rng, classes, spec.train_per_class)
        test = sample(rng, classes, spec.test_per_class)
        stages.append(StageDataset(t, classes, train, test))
    return stages


def pooled(stages: list[StageDataset]) -> StageDataset:
    """All stages merged into one (joint-training upper bound)."""
    def cat(attr, split):
        return np.concatenate([getattr(getattr(s, split), attr) for s in stages])
    train = Split(cat("x", "train"), cat("labels", "train"), cat("targets", "train"))
    test = Split(cat("x", "test"), cat("labels", "test"), cat("targets", "test"))
    return StageDataset(0, [c for s in stages for c in s.classes], train, test)


# ---------------------------------------------------------------------- io

def to_bytes(stages: list[StageDataset]) -> bytes:
    arrays = {}
    for s in stages:
        for split in ("train", "test"):
            sp = getattr(s, split)
            arrays[f"{s.stage}/{split}/x"] = sp.x
            arrays[f"{s.stage}/{split}/labels"] = sp.labels
            arrays[f"{s.stage}/{split}/targets"] = sp.targets
    meta = {"stages": [{"stage": s.stage, "classes": s.classes} for s in stages]}
    return container.encode("datasets", meta, arrays)


def from_bytes(blob: bytes) -> list[StageDataset]:
    _, meta, arrays = container.decode(blob, expect_kind="datasets")
    stages = []
    try:
        for entry in meta["stages"]:
            t = entry["stage"]
            splits = [Split(arrays[f"{t}/{sp}/x"], arrays[f"{t}/{sp}/labels"], arrays[f"{t}/{sp}/targets"])
                      for sp in ("train", "test")]
            stages.append(StageDataset(t, list(entry["classes"]), *splits))
    except KeyError as exc:
        raise container.ContainerError(f"missing dataset entry {exc}") from None
    return stages


def checksum(stages: list[StageDataset]) -> str:
    return hashlib.sha256(to_bytes(stages)).hexdigest()


def csv_header(p: int, m: int) -> list[str]:
    return ["stage", "split", "label", *[f"x_{i}" for i in range(p)], *[f"y_{j}" for j in range(m)]]


def to_csv(stages: list[StageDataset]) -> str:
    p = stages[0].train.x.shape[1]
    m = stages[0].train.targets.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(p, m))
    for s in stages:
        for split in ("train", "test"):
            sp = getattr(s, split)
            for x, y, r in zip(sp.x, sp.labels, sp.targets):
                w.writerow([s.stage, split, int(y), *map(repr, x.tolist()), *map(repr, r.tolist())])
    return buf.getvalue()


def from_csv(text: str) -> list[StageDataset]:
    """Parse :func:`to_csv` output; errors carry the byte offset of the bad line."""
    lines = text.splitlines(keepends=True)
    if not lines:
        raise container.ContainerError("empty CSV", offset=0)
    header = lines[0].rstrip("\n").split(",")
    try:
        p = sum(1 for h in header if h.startswith("x_"))
        m = sum(1 for h in header if h.startswith("y_"))
        if header != csv_header(p, m):
            raise ValueError
    except ValueError:
        raise container.ContainerError("unexpected CSV header", offset=0) from None
    rows: dict[tuple[int, str], list] = {}
    offset = len(lines[0].encode())
    for line in lines[1:]:
        fields = line.rstrip("\n").split(",")
        try:
            if len(fields) != 3 + p + m or fields[1] not in ("train", "test"):
                raise ValueError
            t, split, label = int(fields[0]), fields[1], int(fields[2])
            vals = [float(v) for v in fields[3:]]
        except ValueError:
            raise container.ContainerError("malformed CSV row", offset=offset) from None
        rows.setdefault((t, split), []).append((label, vals[:p], vals[p:]))
        offset += len(line.encode())
    stages = []
    for t in sorted({k[0] for k in rows}):
        splits = []
        for split in ("train", "test"):
            data = rows.get((t, split), [])
            splits.append(Split(np.array([d[1] for d in data], dtype=np.float64).reshape(-1, p),
                                np.array([d[0] for d in data], dtype=np.int64),
                                np.array([d[2] for d in data], dtype=np.float64).reshape(-1, m)))
        classes = sorted(set(splits[0].labels.tolist()) | set(splits[1].labels.tolist()))
        stages.append(StageDataset(t, classes, *splits))
    return stages


def save(stages: list[StageDataset], path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        container.atomic_write_text(path, to_csv(stages))
    else:
        container.atomic_write_bytes(path, to_bytes(stages))


def load(path) -> list[StageDataset]:
    path = Path(path)
    if path.suffix == ".csv":
        return from_csv(path.read_text())
    return from_bytes(path.read_bytes())
