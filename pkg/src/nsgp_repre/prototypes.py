"""Coarse and fine-grained regional prototypes and their replay loss."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import container

COARSE = "coarse"
FINE = "fine"
STORE_VERSION = 1

DEFAULT_K = 10
DEFAULT_RADIUS = 0.6


class DegenerateFeatureError(ValueError):
    """A feature row has zero norm, so its cosine similarity is undefined."""

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"feature row {row} has zero norm")


def as_features(features) -> np.ndarray:
    """Validate and return an ``(n, d)`` float64 feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"expected a non-empty (n, d) feature matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature matrix contains non-finite values")
    return x


@dataclass(frozen=True)
class Prototype:
    class_id: int
    kind: str
    vector: np.ndarray
    member_count: int

    def __post_init__(self):
        if self.kind not in (COARSE, FINE):
            raise ValueError(f"unknown prototype kind {self.kind!r}")
        if self.member_count < 1:
            raise ValueError("member_count must be >= 1")
        vec = np.array(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise ValueError("prototype vector must be finite")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "member_count", int(self.member_count))

    def __eq__(self, other):
        if not isinstance(other, Prototype):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and self.kind == other.kind
            and self.member_count == other.member_count
            and np.array_equal(self.vector, other.vector)
        )

    __hash__ = None


def compute_coarse_prototype(features, class_id: int = 0) -> Prototype:
    x = as_features(features)
    return Prototype(class_id, COARSE, x.mean(axis=0), x.shape[0])


def cosine_similarity_matrix(features) -> np.ndarray:
    x = as_features(features)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateFeatureError(int(zero[0]))
    unit = x / norms[:, None]
    sim = unit @ unit.T
    # symmetrize away rounding asymmetry and pin the diagonal
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, -1.0, 1.0)


def select_fine_prototypes(features, r: float = DEFAULT_RADIUS, K: int = DEFAULT_K,
                           class_id: int = 0) -> list[Prototype]:
    """Greedy density-aware selection of up to ``K`` hypersphere prototypes.

    Every row is the center of a hypersphere holding the rows whose cosine
    similarity to it exceeds ``r``. Spheres are visited by decreasing
    cardinality (ties: lowest row index); a sphere is skipped when its center
    lies inside an already selected sphere. Each prototype is the mean of its
    sphere's members.
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"radius must lie in (0, 1), got {r}")
    if K < 1:
        raise ValueError(f"budget K must be >= 1, got {K}")
    x = as_features(features)
    sim = cosine_similarity_matrix(x)
    members = sim > r
    cardinality = members.sum(axis=0)
    order = np.argsort(-cardinality, kind="stable")

    chosen: list[int] = []
    for j in order:
        if len(chosen) == K:
            break
        if chosen and np.any(sim[j, chosen] > r):
            continue
        chosen.append(int(j))

    return [
        Prototype(class_id, FINE, x[members[:, j]].mean(axis=0), int(cardinality[j]))
        for j in chosen
    ]


def kmeans_prototypes(features, K: int, seed: int = 0, max_iter: int = 300,
                      class_id: int = 0) -> list[Prototype]:
    """Lloyd's k-means baseline; initial centroids are ``K`` distinct rows
    drawn by ``numpy.random.default_rng(seed).choice(n, K, replace=False)``.

    Clusters that end up empty are dropped.
    """
    x = as_features(features)
    n = x.shape[0]
    if K < 1 or K > n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=K, replace=False)].copy()
    assign = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(K):
            mask = assign == k
            if mask.any():
                centroids[k] = x[mask].mean(axis=0)
    counts = np.bincount(assign, minlength=K)
    return [Prototype(class_id, FINE, centroids[k], int(counts[k])) for k in range(K) if counts[k] > 0]


@dataclass
class PrototypeStore:
    K: int = DEFAULT_K
    r: float = DEFAULT_RADIUS
    coarse: dict[int, Prototype] = field(default_factory=dict)
    fine: dict[int, list[Prototype]] = field(default_factory=dict)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.coarse)

    @property
    def dim(self) -> int | None:
        for p in self:
            return p.vector.shape[0]
        return None

    def __len__(self) -> int:
        return len(self.coarse) + sum(len(v) for v in self.fine.values())

    def __iter__(self) -> Iterator[Prototype]:
        for c in sorted(self.coarse):
            yield self.coarse[c]
        for c in sorted(self.fine):
            yield from self.fine[c]

    def __eq__(self, other):
        if not isinstance(other, PrototypeStore):
            return NotImplemented
        return (self.K, self.r) == (other.K, other.r) and list(self) == list(other)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked prototype vectors and their labels, coarse first."""
        protos = list(self)
        if not protos:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return (np.stack([p.vector for p in protos]),
                np.array([p.class_id for p in protos], dtype=np.int64))

    # ------------------------------------------------------------------ io
    def _records(self):
        return [
            {"class_id": p.class_id, "kind": p.kind, "member_count": p.member_count}
            for p in self
        ]

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            self.save_json(path)
            return
        vectors, _ = self.as_arrays()
        meta = {"version": STORE_VERSION, "d": self.dim, "K": self.K, "r": self.r, "records": self._records()}
        container.write(path, "prototype_store", meta, {"vectors": vectors})

    def save_json(self, path) -> None:
        doc = {
            "version": STORE_VERSION, "d": self.dim, "K": self.K, "r": self.r,
            "records": [dict(rec, vector=p.vector.tolist()) for rec, p in zip(self._records(), self)],
        }
        container.atomic_write_text(path, json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "PrototypeStore":
        path = Path(path)
        if path.suffix == ".json":
            doc = json.loads(path.read_text())
            records = doc["records"]
            vectors = [np.array(rec["vector"], dtype=np.float64) for rec in records]
            meta = doc
        else:
            _, meta, arrays = container.read(path, expect_kind="prototype_store")
            records = meta["records"]
            vectors = list(arrays["vectors"]) if records else []
        if meta["version"] != STORE_VERSION:
            raise container.ContainerError(f"unsupported store version {meta['version']}")
        store = cls(K=int(meta["K"]), r=float(meta["r"]))
        for rec, vec in zip(records, vectors):
            p = Prototype(rec["class_id"], rec["kind"], vec, rec["member_count"])
            if p.kind == COARSE:
                store.coarse[p.class_id] = p
            else:
                store.fine.setdefault(p.class_id, []).append(p)
        return store


def build_store_for_stage(per_class_features: Mapping[int, np.ndarray], r: float = DEFAULT_RADIUS,
                          K: int = DEFAULT_K, prior: PrototypeStore | None = None,
                          fine_strategy: str = "density", seed: int = 0) -> PrototypeStore:
    """Extend ``prior`` with one coarse and up to ``K - 1`` fine prototypes per new class.

    ``fine_strategy`` is ``"density"`` (hypersphere selection), ``"kmeans"``
    or ``"none"`` (coarse only). The prior store is not modified.
    """
    if K < 1:
        raise ValueError(f"budget K must be >= 1, got {K}")
    if prior is None:
        prior = PrototypeStore(K=K, r=r)
    overlap = sorted(set(per_class_features) & set(prior.coarse))
    if overlap:
        raise ValueError(f"class ids already stored: {overlap}")
    store = PrototypeStore(K=prior.K, r=prior.r, coarse=dict(prior.coarse),
                           fine={c: list(v) for c, v in prior.fine.items()})
    n_fine = K - 1
    for c in sorted(per_class_features):
        x = as_features(per_class_features[c])
        store.coarse[c] = compute_coarse_prototype(x, class_id=c)
        if n_fine == 0 or fine_strategy == "none":
            continue
        if fine_strategy == "density":
            fine = select_fine_prototypes(x, r=r, K=n_fine, class_id=c)
        elif fine_strategy == "kmeans":
            fine = kmeans_prototypes(x, K=min(n_fine, x.shape[0]), seed=seed + c, class_id=c)
        else:
            raise ValueError(f"unknown fine_strategy {fine_strategy!r}")
        store.fine[c] = fine
    return store


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def replay_loss(store: PrototypeStore | Sequence[Prototype], weight: np.ndarray,
                bias: np.ndarray) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Summed cross-entropy of every stored prototype through ``features @ weight + bias``.

    Returns the loss and its exact gradient with respect to ``(weight, bias)``.
    """
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    protos = list(store)
    if not protos:
        return 0.0, (np.zeros_like(weight), np.zeros_like(bias))
    feats = np.stack([p.vector for p in protos])
    labels = np.array([p.class_id for p in protos])
    n_classes = weight.shape[1]
    if feats.shape[1] != weight.shape[0]:
        raise ValueError(f"prototype dim {feats.shape[1]} does not match classifier input {weight.shape[0]}")
    if labels.max() >= n_classes or labels.min() < 0:
        raise ValueError(f"stored class id {int(labels.max())} outside classifier range {n_classes}")
    logp = _log_softmax(feats @ weight + bias)
    rows = np.arange(len(labels))
    loss = float(-logp[rows, labels].sum())
    dz = np.exp(logp)
    dz[rows, labels] -= 1.0
    return loss, (feats.T @ dz, dz.sum(axis=0))
