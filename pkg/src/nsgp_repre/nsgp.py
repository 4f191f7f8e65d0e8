"""Null-space gradient projection.

Per layer, an uncentered second moment of the layer inputs is accumulated
stage by stage and merged across stages with sample-count weights. Its
smallest singular directions span the approximate null space of everything
seen so far; gradients projected onto that span leave old outputs unchanged.

Weights use the ``x @ W`` layout, so the layer-input axis is axis 0 of both
``W`` and its gradient and the projection is ``B @ G``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container

log = logging.getLogger(__name__)

EXACT_ZERO = "exact-zero"
ENERGY = "energy"
SVD_CLAMP = 1e-14


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class NullityPolicy:
    mode: str = ENERGY
    zero_tol: float = 1e-10
    energy_keep: float = 0.99
    min_nullity: int = 0

    def __post_init__(self):
        if self.mode not in (EXACT_ZERO, ENERGY):
            raise ValueError(f"unknown nullity mode {self.mode!r}")
        if not 0.0 < self.energy_keep < 1.0:
            raise ValueError("energy_keep must lie in (0, 1)")
        if self.zero_tol <= 0.0:
            raise ValueError("zero_tol must be positive")
        if self.min_nullity < 0:
            raise ValueError("min_nullity must be >= 0")


class CovarianceAccumulator:
    """Running uncentered second moment ``(1/N) sum x^T x`` for one layer.

    Stage inputs go to a scratch sum; :meth:`commit_stage` folds the scratch
    into the committed moment with weights ``M_prev/M_total`` and
    ``M_stage/M_total``.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.second_moment = np.zeros((self.dim, self.dim))
        self.count = 0
        self._stage_sum = np.zeros((self.dim, self.dim))
        self.stage_count = 0

    @property
    def stage_moment(self) -> np.ndarray:
        if self.stage_count == 0:
            return np.zeros((self.dim, self.dim))
        return self._stage_sum / self.stage_count

    def accumulate(self, inputs) -> "CovarianceAccumulator":
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"input width {x.shape[-1]} does not match accumulator dim {self.dim}")
        self._stage_sum += x.T @ x
        self.stage_count += x.shape[0]
        return self

    def commit_stage(self) -> "CovarianceAccumulator":
        if self.stage_count == 0:
            log.warning("commit_stage called on an empty stage; nothing merged")
            return self
        total = self.count + self.stage_count
        self.second_moment = (self.count / total) * self.second_moment + (
            self.stage_count / total
        ) * self.stage_moment
        self.count = total
        self._stage_sum = np.zeros((self.dim, self.dim))
        self.stage_count = 0
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        """Fold another committed accumulator (e.g. a data shard) into this one."""
        if other.dim != self.dim:
            raise ValueError("accumulator dims differ")
        if other.count == 0:
            return self
        total = self.count + other.count
        self.second_moment = (self.count / total) * self.second_moment + (
            other.count / total
        ) * other.second_moment
        self.count = total
        return self

    def copy(self) -> "CovarianceAccumulator":
        out = CovarianceAccumulator(self.dim)
        out.second_moment = self.second_moment.copy()
        out.count = self.count
        out._stage_sum = self._stage_sum.copy()
        out.stage_count = self.stage_count
        return out

    def save(self, path) -> None:
        container.write(path, "covariance", {"dim": self.dim, "count": self.count,
                                             "stage_count": self.stage_count},
                        {"second_moment": self.second_moment, "stage_sum": self._stage_sum})

    @classmethod
    def load(cls, path) -> "CovarianceAccumulator":
        _, meta, arrays = container.read(path, expect_kind="covariance")
        acc = cls(meta["dim"])
        acc.count = int(meta["count"])
        acc.stage_count = int(meta["stage_count"])
        acc.second_moment = arrays["second_moment"]
        acc._stage_sum = arrays["stage_sum"]
        return acc


def accumulate_covariance(acc: CovarianceAccumulator, inputs) -> CovarianceAccumulator:
    return acc.accumulate(inputs)


def commit_stage(acc: CovarianceAccumulator) -> CovarianceAccumulator:
    return acc.commit_stage()


def nullity_select(singular_values, policy: NullityPolicy = NullityPolicy()) -> int:
    lam = np.asarray(singular_values, dtype=np.float64)
    dim = lam.shape[0]
    lam_max = lam.max(initial=0.0)
    if lam_max <= 0.0:
        nullity = dim
    elif policy.mode == EXACT_ZERO:
        nullity = int(np.count_nonzero(lam <= policy.zero_tol * lam_max))
    else:
        budget = (1.0 - policy.energy_keep) * lam.sum()
        tail = np.cumsum(np.sort(lam))
        nullity = int(np.count_nonzero(tail <= budget))
    return min(dim, max(nullity, policy.min_nullity))


@dataclass
class LayerProjection:
    B: np.ndarray
    nullity: int
    singular_values: np.ndarray
    normalized: bool = False
    frobenius_norm: float = field(default=0.0)

    @property
    def dim(self) -> int:
        return self.B.shape[0]

    @property
    def operator(self) -> np.ndarray:
        """``B`` or ``B / ||B||_F`` depending on ``normalized``."""
        if self.normalized and self.frobenius_norm > 0.0:
            return self.B / self.frobenius_norm
        return self.B

    @classmethod
    def identity(cls, dim: int, normalized: bool = False) -> "LayerProjection":
        return cls(np.eye(dim), dim, np.zeros(dim), normalized, float(np.sqrt(dim)))

    def save(self, path) -> None:
        container.write(path, "projection",
                        {"dim": self.dim, "nullity": self.nullity, "normalized": self.normalized,
                         "frobenius_norm": self.frobenius_norm},
                        {"B": self.B, "singular_values": self.singular_values})

    @classmethod
    def load(cls, path) -> "LayerProjection":
        _, meta, arrays = container.read(path, expect_kind="projection")
        return cls(arrays["B"], int(meta["nullity"]), arrays["singular_values"],
                   bool(meta["normalized"]), float(meta["frobenius_norm"]))


def compute_projection(acc: CovarianceAccumulator, policy: NullityPolicy = NullityPolicy(),
                       normalized: bool = False, layer=None) -> LayerProjection:
    if acc.stage_count:
        raise ValueError("accumulator has uncommitted stage data; call commit_stage first")
    if acc.count == 0:
        return LayerProjection.identity(acc.dim, normalized)
    try:
        U, lam, _ = np.linalg.svd(acc.second_moment)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for layer {layer}: {exc}") from exc
    lam = np.where(lam < SVD_CLAMP * lam[0], 0.0, lam)
    nullity = nullity_select(lam, policy)
    if nullity == 0:
        log.warning("layer %s: nullity 0, layer is frozen for this stage", layer)
    basis = U[:, acc.dim - nullity:]
    B = basis @ basis.T
    return LayerProjection(B, nullity, lam, normalized, float(np.linalg.norm(B)))


def project_gradient(G, proj: LayerProjection | np.ndarray) -> np.ndarray:
    """Apply the projector on the layer-input axis (axis 0) of ``G``."""
    op = proj.operator if isinstance(proj, LayerProjection) else np.asarray(proj)
    G = np.asarray(G, dtype=np.float64)
    if G.ndim not in (1, 2) or G.shape[0] != op.shape[1]:
        raise ValueError(f"gradient shape {G.shape} incompatible with projector {op.shape}")
    return op @ G


def apply_update(W, dW, lr: float) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    dW = np.asarray(dW, dtype=np.float64)
    if W.shape != dW.shape:
        raise ValueError(f"update shape {dW.shape} does not match weight shape {W.shape}")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    with np.errstate(over="ignore", invalid="ignore"):
        out = W - lr * dW
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite weights after update")
    return out
