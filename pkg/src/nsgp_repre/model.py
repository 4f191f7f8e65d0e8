"""Two-headed toy network with hand-written backpropagation.

A ReLU trunk (the feature extractor) feeds a growable linear classifier and
a fixed linear regressor. Weights use the ``x @ W + b`` layout.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import container
from .nsgp import CovarianceAccumulator, LayerProjection, NumericalError, apply_update, project_gradient
from .prototypes import PrototypeStore, replay_loss

log = logging.getLogger(__name__)

BACKBONE = "backbone"
NECK = "neck"
HEAD = "head"

_versions = itertools.count(1)


class StaleTraceError(RuntimeError):
    """A trace is reused after the parameters it was computed with changed."""


@dataclass
class Linear:
    W: np.ndarray
    b: np.ndarray
    group: str = HEAD

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def copy(self) -> "Linear":
        return Linear(self.W.copy(), self.b.copy(), self.group)


@dataclass
class ToyModel:
    trunk: list[Linear]
    cls_head: Linear
    reg_head: Linear
    version: int = field(default_factory=lambda: next(_versions))

    @property
    def input_dim(self) -> int:
        return self.trunk[0].W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.trunk[-1].W.shape[1]

    @property
    def n_classes(self) -> int:
        return self.cls_head.W.shape[1]

    @property
    def layers(self) -> list[Linear]:
        return [*self.trunk, self.cls_head, self.reg_head]

    def touch(self) -> None:
        self.version = next(_versions)

    def copy(self) -> "ToyModel":
        return ToyModel([l.copy() for l in self.trunk], self.cls_head.copy(), self.reg_head.copy())

    def save(self, path) -> None:
        meta = {"groups": [l.group for l in self.layers], "n_trunk": len(self.trunk)}
        arrays = {}
        for i, layer in enumerate(self.layers):
            arrays[f"W{i}"] = layer.W
            arrays[f"b{i}"] = layer.b
        container.write(path, "toy_model", meta, arrays)

    @classmethod
    def load(cls, path) -> "ToyModel":
        _, meta, arrays = container.read(path, expect_kind="toy_model")
        layers = [Linear(arrays[f"W{i}"], arrays[f"b{i}"], g) for i, g in enumerate(meta["groups"])]
        n = meta["n_trunk"]
        return cls(layers[:n], layers[n], layers[n + 1])


def trunk_groups(depth: int) -> list[str]:
    """First half of the trunk is tagged backbone, the rest neck."""
    n_backbone = max(1, depth // 2)
    return [BACKBONE if i < n_backbone else NECK for i in range(depth)]


def init_model(input_dim: int, hidden: Sequence[int], n_classes: int, reg_dim: int,
               seed: int = 0) -> ToyModel:
    """He-initialised trunk; both heads start at zero."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden]
    groups = trunk_groups(len(hidden))
    trunk = [
        Linear(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), np.zeros(fan_out), g)
        for fan_in, fan_out, g in zip(dims[:-1], dims[1:], groups)
    ]
    d = dims[-1]
    cls_head = Linear(np.zeros((d, n_classes)), np.zeros(n_classes), HEAD)
    reg_head = Linear(np.zeros((d, reg_dim)), np.zeros(reg_dim), HEAD)
    return ToyModel(trunk, cls_head, reg_head)


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]        # trunk layer inputs, then the feature twice (cls, reg)
    preacts: list[np.ndarray]       # trunk pre-activations
    feature: np.ndarray
    logits: np.ndarray
    regression: np.ndarray
    version: int


def forward(model: ToyModel, x) -> ForwardTrace:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[1] != model.input_dim:
        raise ValueError(f"input width {h.shape[1]} does not match model input {model.input_dim}")
    inputs, preacts = [], []
    for layer in model.trunk:
        inputs.append(h)
        z = h @ layer.W + layer.b
        preacts.append(z)
        h = np.maximum(z, 0.0)
    logits = h @ model.cls_head.W + model.cls_head.b
    reg = h @ model.reg_head.W + model.reg_head.b
    return ForwardTrace(inputs + [h, h], preacts, h, logits, reg, model.version)


@dataclass
class Gradients:
    trunk: list[tuple[np.ndarray, np.ndarray]]
    cls_head: tuple[np.ndarray, np.ndarray]
    reg_head: tuple[np.ndarray, np.ndarray]

    def as_list(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [*self.trunk, self.cls_head, self.reg_head]


def backward(model: ToyModel, trace: ForwardTrace, dlogits, dreg) -> Gradients:
    """Gradients of a loss given its derivatives w.r.t. logits and regression output."""
    if trace.version != model.version:
        raise StaleTraceError("trace was computed with different parameters")
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(trace.logits.shape)
    dreg = np.asarray(dreg, dtype=np.float64).reshape(trace.regression.shape)
    h = trace.feature
    g_cls = (h.T @ dlogits, dlogits.sum(axis=0))
    g_reg = (h.T @ dreg, dreg.sum(axis=0))
    dh = dlogits @ model.cls_head.W.T + dreg @ model.reg_head.W.T
    trunk_grads = []
    for layer, x, z in zip(reversed(model.trunk), reversed(trace.inputs[:len(model.trunk)]),
                           reversed(trace.preacts)):
        dz = dh * (z > 0.0)
        trunk_grads.append((x.T @ dz, dz.sum(axis=0)))
        dh = dz @ layer.W.T
    trunk_grads.reverse()
    return Gradients(trunk_grads, g_cls, g_reg)


def grow_classifier(model: ToyModel, new_class_count: int) -> ToyModel:
    if new_class_count < 0:
        raise ValueError("new_class_count must be >= 0")
    out = model.copy()
    if new_class_count == 0:
        return out
    d = model.feature_dim
    out.cls_head = Linear(
        np.concatenate([model.cls_head.W, np.zeros((d, new_class_count))], axis=1),
        np.concatenate([model.cls_head.b, np.zeros(new_class_count)]),
        model.cls_head.group,
    )
    return out


@dataclass
class LossBundle:
    L_cls: float
    L_bbox: float
    L_re: float

    @property
    def total(self) -> float:
        return self.L_cls + self.L_bbox + self.L_re


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def head_losses(trace: ForwardTrace, labels, targets, first_class: int = 0
                ) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Mean cross-entropy and mean squared error with their output gradients.

    The softmax runs over logits ``first_class:`` only; earlier columns get
    zero gradient.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    logp = _log_softmax(trace.logits[:, first_class:])
    rows = np.arange(n)
    local = labels - first_class
    if np.any(local < 0):
        raise ValueError("label below first_class in the current-stage loss")
    l_cls = float(-logp[rows, local].mean())
    dlogits = np.zeros_like(trace.logits)
    d = np.exp(logp)
    d[rows, local] -= 1.0
    dlogits[:, first_class:] = d / n
    diff = trace.regression - targets
    l_bbox = float((diff ** 2).mean())
    dreg = 2.0 * diff / diff.size
    return l_cls, l_bbox, dlogits, dreg


def total_loss(model: ToyModel, x, labels, targets, store: PrototypeStore | None = None,
               first_class: int = 0) -> tuple[LossBundle, Gradients]:
    trace = forward(model, x)
    l_cls, l_bbox, dlogits, dreg = head_losses(trace, labels, targets, first_class)
    grads = backward(model, trace, dlogits, dreg)
    l_re = 0.0
    if store is not None and len(store):
        l_re, (gW, gb) = replay_loss(store, model.cls_head.W, model.cls_head.b)
        grads.cls_head = (grads.cls_head[0] + gW, grads.cls_head[1] + gb)
    return LossBundle(l_cls, l_bbox, l_re), grads


@dataclass
class TrainHyper:
    lr: float = 0.02
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    first_class: int = 0      # current-stage cross-entropy covers logits first_class: onward


@dataclass
class StageLog:
    epoch_losses: list[LossBundle] = field(default_factory=list)
    steps: int = 0


def augment(x: np.ndarray) -> np.ndarray:
    """Append the constant bias input so weight and bias are projected together."""
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def train_stage(model: ToyModel, stage, store: PrototypeStore | None = None,
                projections: Sequence[LayerProjection | None] | None = None,
                hyper: TrainHyper = TrainHyper(),
                accumulators: Sequence[CovarianceAccumulator] | None = None
                ) -> tuple[ToyModel, StageLog]:
    """Train on ``stage.train`` (a :class:`~nsgp_repre.data.StageDataset`); see :func:`fit`."""
    split = stage.train
    return fit(model, split.x, split.labels, split.targets, store, projections, hyper, accumulators)


def fit(model: ToyModel, x, labels, targets, store: PrototypeStore | None = None,
                projections: Sequence[LayerProjection | None] | None = None,
                hyper: TrainHyper = TrainHyper(),
                accumulators: Sequence[CovarianceAccumulator] | None = None
                ) -> tuple[ToyModel, StageLog]:
    """Minibatch SGD on one stage.

    Trunk gradients, stacked as ``[dW; db]``, pass through the layer's
    projector before the update; head gradients are used as is. Replayed
    prototypes contribute to every step. When ``accumulators`` are given, the
    trained model's trunk-layer inputs (bias-augmented) on this stage's data
    are added to their scratch moments.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    targets = np.asarray(targets, dtype=np.float64)
    if projections is None:
        projections = [None] * len(model.trunk)
    if len(projections) != len(model.trunk):
        raise ValueError("one projection (or None) is required per trunk layer")
    model = model.copy()
    rng = np.random.default_rng(hyper.seed)
    n = x.shape[0]
    stage_log = StageLog()
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            bundle, grads = total_loss(model, x[idx], labels[idx], targets[idx], store, hyper.first_class)
            if not np.isfinite(bundle.total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {stage_log.steps}: {bundle}")
            sums += np.array([bundle.L_cls, bundle.L_bbox, bundle.L_re]) * len(idx)
            if hyper.lr > 0.0:
                _sgd_step(model, grads, projections, hyper.lr)
            stage_log.steps += 1
        stage_log.epoch_losses.append(LossBundle(*(sums / n)))
    if accumulators is not None:
        tap_trunk_inputs(model, x, accumulators)
    return model, stage_log


def _sgd_step(model: ToyModel, grads: Gradients, projections, lr: float) -> None:
    for layer, (gW, gb), proj in zip(model.trunk, grads.trunk, projections):
        if proj is None:
            layer.W = apply_update(layer.W, gW, lr)
            layer.b = apply_update(layer.b, gb, lr)
            continue
        stacked = project_gradient(np.vstack([gW, gb[None, :]]), proj)
        layer.W = apply_update(layer.W, stacked[:-1], lr)
        layer.b = apply_update(layer.b, stacked[-1], lr)
    for layer, (gW, gb) in ((model.cls_head, grads.cls_head), (model.reg_head, grads.reg_head)):
        layer.W = apply_update(layer.W, gW, lr)
        layer.b = apply_update(layer.b, gb, lr)
    model.touch()


def tap_trunk_inputs(model: ToyModel, x, accumulators: Sequence[CovarianceAccumulator],
                     batch_size: int = 1024) -> None:
    if len(accumulators) != len(model.trunk):
        raise ValueError("one accumulator is required per trunk layer")
    x = np.asarray(x, dtype=np.float64)
    for start in range(0, x.shape[0], batch_size):
        trace = forward(model, x[start:start + batch_size])
        for acc, inp in zip(accumulators, trace.inputs):
            acc.accumulate(augment(inp))


def features(model: ToyModel, x) -> np.ndarray:
    return forward(model, x).feature


def predict(model: ToyModel, x) -> tuple[np.ndarray, np.ndarray]:
    trace = forward(model, x)
    return trace.logits.argmax(axis=1), trace.regression
