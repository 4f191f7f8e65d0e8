"""Incremental-learning experiments, forgetting metrics and anatomy diagnostics."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .data import Split, StageDataset, TaskSpec, generate, pooled
from .model import (ToyModel, TrainHyper, features, forward, grow_classifier, init_model,
                    train_stage)
from .nsgp import CovarianceAccumulator, LayerProjection, NullityPolicy, compute_projection
from .prototypes import PrototypeStore, build_store_for_stage, select_fine_prototypes

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRIC_COLUMNS = ["method", "seed", "model_stage", "eval_stage", "accuracy", "mse"]
ANATOMY_COLUMNS = ["model_stage", "eval_stage", "plain_accuracy", "plain_mse",
                   "designated_accuracy", "designated_mse", "fresh_accuracy", "fresh_mse"]

# method -> (use null-space projection, fine-prototype strategy or None for no replay)
METHODS = {
    "finetune": (False, None),
    "nsgp": (True, None),
    "repre_coarse": (False, "none"),
    "repre_fine": (False, "fine"),
    "nsgp_repre_coarse": (True, "none"),
    "nsgp_repre": (True, "fine"),
    "joint": (False, None),
}

ENV_OUTPUT_DIR = "NSGP_REPRE_OUTPUT_DIR"
ENV_SEED = "NSGP_REPRE_SEED"


class ProtocolError(RuntimeError):
    """Training data of a finished stage was requested again."""


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    method: str = "nsgp_repre"
    lr: float = 0.02
    epochs: int = 20
    batch_size: int = 32
    hidden: tuple[int, ...] = (256, 256)
    K: int = 10
    r: float = 0.6
    fine_strategy: str = "density"
    masked_ce: bool = False
    nullity: NullityPolicy = field(default_factory=NullityPolicy)
    normalized_groups: tuple[str, ...] = ("backbone",)
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 < self.r < 1.0:
            raise ValueError("r must lie in (0, 1)")
        if self.fine_strategy not in ("density", "kmeans"):
            raise ValueError(f"unknown fine_strategy {self.fine_strategy!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.normalized_groups = tuple(self.normalized_groups)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same config with both the data seed and the training seed set to ``seed``."""
        return dataclasses.replace(self, seed=seed, task=dataclasses.replace(self.task, seed=seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task"] = self.task.to_dict()
        d["hidden"] = list(self.hidden)
        d["normalized_groups"] = list(self.normalized_groups)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "task" in d:
            d["task"] = TaskSpec.from_dict(d["task"])
        if "nullity" in d:
            d["nullity"] = NullityPolicy(**d["nullity"])
        return cls(**d)

    @classmethod
    def from_json(cls, path, env: dict | None = None) -> "ExperimentConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        return cfg.apply_env(env)

    def apply_env(self, env: dict | None = None) -> "ExperimentConfig":
        env = os.environ if env is None else env
        cfg = self
        if env.get(ENV_SEED):
            cfg = cfg.with_seed(int(env[ENV_SEED]))
        if env.get(ENV_OUTPUT_DIR):
            cfg = dataclasses.replace(cfg, output_dir=env[ENV_OUTPUT_DIR])
        return cfg


@dataclass
class MetricsRecord:
    """Accuracy and regression MSE of the model after stage ``t`` (rows) on
    the test split of stage ``i`` (columns). Entries with ``i > t`` are NaN,
    except for joint training, which has a single row covering every stage."""

    method: str
    seed: int
    accuracy: np.ndarray
    mse: np.ndarray

    @property
    def n_stages(self) -> int:
        return self.accuracy.shape[1]

    @property
    def final_accuracy(self) -> np.ndarray:
        return self.accuracy[-1]

    @property
    def learning_accuracy(self) -> np.ndarray:
        """Accuracy on each stage right after it was learned."""
        if self.accuracy.shape[0] == 1:
            return self.accuracy[0]
        return np.diag(self.accuracy)

    def forgetting(self) -> np.ndarray:
        return self.learning_accuracy - self.final_accuracy

    def avg_old_accuracy(self) -> float:
        return float(self.final_accuracy[:-1].mean())

    def summary(self) -> dict:
        final = self.final_accuracy
        forgetting = self.forgetting()
        return {
            "avg_old_accuracy": self.avg_old_accuracy(),
            "avg_accuracy": float(final.mean()),
            "base_new_accuracy": float(0.5 * (final[0] + final[1:].mean())),
            "avg_forgetting": float(forgetting[:-1].mean()),
            "forgetting": forgetting.tolist(),
            "plasticity": float(self.learning_accuracy.mean()),
            "stability": self.avg_old_accuracy(),
            "final_mse": self.mse[-1].tolist(),
        }

    def rows(self) -> list[dict]:
        out = []
        for t in range(self.accuracy.shape[0]):
            for i in range(self.n_stages):
                if np.isnan(self.accuracy[t, i]):
                    continue
                out.append({"method": self.method, "seed": self.seed, "model_stage": t, "eval_stage": i,
                            "accuracy": float(self.accuracy[t, i]), "mse": float(self.mse[t, i])})
        return out

    def evaluated(self) -> np.ndarray:
        """Mask of the (t, i) cells that must hold a score."""
        if self.accuracy.shape[0] == 1:
            return np.ones(self.accuracy.shape, dtype=bool)
        return np.tri(*self.accuracy.shape, dtype=bool)

    def validate(self) -> None:
        mask = self.evaluated()
        acc, mse = self.accuracy, self.mse
        if acc.shape != mse.shape or acc.shape[0] not in (1, acc.shape[1]):
            raise ValueError(f"inconsistent metric shapes {acc.shape} and {mse.shape}")
        if not (np.all(np.isfinite(acc[mask])) and np.all(np.isfinite(mse[mask]))):
            raise ValueError("missing or non-finite score for an evaluated stage")
        if not (np.all(np.isnan(acc[~mask])) and np.all(np.isnan(mse[~mask]))):
            raise ValueError("score present for a stage not yet learned")
        if np.any(acc[mask] < 0) or np.any(acc[mask] > 1):
            raise ValueError("accuracies must lie in [0, 1]")
        if np.any(mse[mask] < 0):
            raise ValueError("negative MSE")

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, "method": self.method, "seed": self.seed,
               "n_stages": self.n_stages, "rows": self.rows(), "summary": self.summary()}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    @classmethod
    def from_rows(cls, rows: Sequence[dict]) -> "MetricsRecord":
        n_rows = 1 + max(int(r["model_stage"]) for r in rows)
        n_stages = 1 + max(int(r["eval_stage"]) for r in rows)
        acc = np.full((n_rows, n_stages), np.nan)
        mse = np.full((n_rows, n_stages), np.nan)
        for r in rows:
            t, i = int(r["model_stage"]), int(r["eval_stage"])
            acc[t, i] = float(r["accuracy"])
            mse[t, i] = float(r["mse"])
        return cls(rows[0]["method"], int(rows[0]["seed"]), acc, mse)

    @classmethod
    def from_json(cls, text: str) -> "MetricsRecord":
        return cls.from_rows(json.loads(text)["rows"])


def emit(record: MetricsRecord, fmt: str, path) -> None:
    if fmt == "csv":
        text = record.to_csv()
    elif fmt == "json":
        text = record.to_json()
    else:
        raise ValueError(f"unknown format {fmt!r}")
    container.atomic_write_text(path, text)


def evaluate(model: ToyModel, split: Split) -> tuple[float, float]:
    trace = forward(model, split.x)
    acc = float(np.mean(trace.logits.argmax(axis=1) == split.labels))
    mse = float(np.mean((trace.regression - split.targets) ** 2))
    return acc, mse


class StageStream:
    """Hands out each stage's training split exactly once, in order.

    Once stage ``t`` has been taken, the splits of all earlier stages are
    gone; only test splits remain available for evaluation.
    """

    def __init__(self, stages: Sequence[StageDataset]):
        self._train: list[StageDataset | None] = list(stages)
        self.tests = [s.test for s in stages]
        self.classes = [list(s.classes) for s in stages]
        self._next = 0

    def __len__(self) -> int:
        return len(self.tests)

    def take(self, t: int) -> StageDataset:
        if t != self._next or self._train[t] is None:
            raise ProtocolError(f"stage {t} training data requested out of order (next is {self._next})")
        stage = self._train[t]
        for k in range(t):
            self._train[k] = None
        self._train[t] = None
        self._next += 1
        return stage


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    record: MetricsRecord
    checkpoints: list[ToyModel]
    projections: list[list[LayerProjection]] = field(default_factory=list)
    accumulators: list[CovarianceAccumulator] = field(default_factory=list)
    store: PrototypeStore | None = None


def _stage_hyper(config: ExperimentConfig, t: int, first_class: int = 0) -> TrainHyper:
    seed = int(np.random.SeedSequence([config.seed, 1, t]).generate_state(1)[0])
    return TrainHyper(lr=config.lr, epochs=config.epochs, batch_size=config.batch_size, seed=seed,
                      first_class=first_class if config.masked_ce else 0)


def _prototype_features(model: ToyModel, stage: StageDataset) -> dict[int, np.ndarray]:
    feats = features(model, stage.train.x)
    return {c: feats[stage.train.labels == c] for c in stage.classes}


def _extend_store(config: ExperimentConfig, store: PrototypeStore, per_class: dict[int, np.ndarray],
                  fine: str) -> PrototypeStore:
    strategy = "none" if fine == "none" else config.fine_strategy
    if strategy == "density":
        # zero rows (all ReLUs off) have no direction; they still count toward the coarse mean
        new = build_store_for_stage(per_class, r=config.r, K=1, prior=store)
        for c, x in per_class.items():
            nonzero = x[np.linalg.norm(x, axis=1) > 0]
            if len(nonzero) < len(x):
                log.warning("class %d: %d zero-norm feature rows skipped for fine selection", c,
                            len(x) - len(nonzero))
            if len(nonzero) and config.K > 1:
                new.fine[c] = select_fine_prototypes(nonzero, r=config.r, K=config.K - 1, class_id=c)
        new.K = config.K
        return new
    return build_store_for_stage(per_class, r=config.r, K=config.K, prior=store,
                                 fine_strategy=strategy, seed=config.seed)


def run_experiment(config: ExperimentConfig, stages: Sequence[StageDataset] | None = None) -> ExperimentResult:
    if stages is None:
        stages = generate(config.task)
    if config.method == "joint":
        return _run_joint(config, stages)
    use_nsgp, fine = METHODS[config.method]
    stream = StageStream(stages)
    del stages
    n = len(stream)
    p = stream.tests[0].x.shape[1]
    m = stream.tests[0].targets.shape[1]
    init_seed = int(np.random.SeedSequence([config.seed, 0]).generate_state(1)[0])
    model = init_model(p, config.hidden, 0, m, seed=init_seed)
    dims = [p, *config.hidden[:-1]]
    accumulators = [CovarianceAccumulator(d + 1) for d in dims]
    projections = [None] * len(config.hidden)
    store = PrototypeStore(K=config.K, r=config.r) if fine is not None else None
    acc = np.full((n, n), np.nan)
    mse = np.full((n, n), np.nan)
    checkpoints, history = [], []

    for t in range(n):
        stage = stream.take(t)
        model = grow_classifier(model, len(stage.classes))
        model, _ = train_stage(model, stage, store=store, projections=projections,
                               hyper=_stage_hyper(config, t, min(stage.classes)),
                               accumulators=accumulators if use_nsgp else None)
        checkpoints.append(model.copy())
        for i in range(t + 1):
            acc[t, i], mse[t, i] = evaluate(model, stream.tests[i])
        if store is not None:
            store = _extend_store(config, store, _prototype_features(model, stage), fine)
        if use_nsgp:
            projections = []
            for k, (a, layer) in enumerate(zip(accumulators, model.trunk)):
                a.commit_stage()
                projections.append(compute_projection(a, config.nullity,
                                                      normalized=layer.group in config.normalized_groups,
                                                      layer=k))
            history.append(projections)
        del stage
        log.info("%s seed=%d stage %d: acc=%s", config.method, config.seed, t,
                 np.array2string(acc[t, :t + 1], precision=3))

    record = MetricsRecord(config.method, config.seed, acc, mse)
    record.validate()
    return ExperimentResult(config, record, checkpoints, history, accumulators if use_nsgp else [], store)


def _run_joint(config: ExperimentConfig, stages: Sequence[StageDataset]) -> ExperimentResult:
    joint = pooled(list(stages))
    p = joint.train.x.shape[1]
    m = joint.train.targets.shape[1]
    init_seed = int(np.random.SeedSequence([config.seed, 0]).generate_state(1)[0])
    model = init_model(p, config.hidden, len(joint.classes), m, seed=init_seed)
    model, _ = train_stage(model, joint, hyper=_stage_hyper(config, 0))
    n = len(stages)
    acc = np.empty((1, n))
    mse = np.empty((1, n))
    for i, s in enumerate(stages):
        acc[0, i], mse[0, i] = evaluate(model, s.test)
    record = MetricsRecord("joint", config.seed, acc, mse)
    record.validate()
    return ExperimentResult(config, record, [model])


def anatomy_report(checkpoints: Sequence[ToyModel | None], tests: Sequence[Split]) -> list[dict]:
    """Plain vs designated scores of every model ``t`` on every earlier stage ``i``.

    The designated row takes class decisions from the fresh model of stage
    ``i`` and the regression output from model ``t``; the gap between plain
    and designated accuracy is classifier forgetting, the gap between
    designated and fresh MSE is regressor forgetting.
    """
    for t, ckpt in enumerate(checkpoints):
        if ckpt is None:
            raise ValueError(f"missing checkpoint for stage {t}")
    if len(checkpoints) != len(tests):
        raise ValueError(f"{len(checkpoints)} checkpoints for {len(tests)} stages")
    fresh = []
    for i, split in enumerate(tests):
        trace = forward(checkpoints[i], split.x)
        fresh.append((trace.logits.argmax(axis=1), trace.regression))
    rows = []
    for t, model in enumerate(checkpoints):
        for i in range(t + 1):
            split = tests[i]
            trace = forward(model, split.x)
            fresh_cls, fresh_reg = fresh[i]
            rows.append({
                "model_stage": t,
                "eval_stage": i,
                "plain_accuracy": float(np.mean(trace.logits.argmax(axis=1) == split.labels)),
                "plain_mse": float(np.mean((trace.regression - split.targets) ** 2)),
                "designated_accuracy": float(np.mean(fresh_cls == split.labels)),
                "designated_mse": float(np.mean((trace.regression - split.targets) ** 2)),
                "fresh_accuracy": float(np.mean(fresh_cls == split.labels)),
                "fresh_mse": float(np.mean((fresh_reg - split.targets) ** 2)),
            })
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in columns})
    return buf.getvalue()


# ---------------------------------------------------------------- run dirs

def write_run(result: ExperimentResult, out_dir) -> Path:
    """Persist config, metrics, checkpoints, projections and store under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    container.atomic_write_text(out / "config.json", json.dumps(result.config.to_dict(), indent=1,
                                                                sort_keys=True) + "\n")
    emit(result.record, "csv", out / "metrics.csv")
    emit(result.record, "json", out / "metrics.json")
    for t, model in enumerate(result.checkpoints):
        model.save(out / "checkpoints" / f"stage{t}.bin")
    for t, projs in enumerate(result.projections):
        for k, proj in enumerate(projs):
            proj.save(out / "projections" / f"stage{t}_layer{k}.bin")
    for k, acc in enumerate(result.accumulators):
        acc.save(out / "covariance" / f"layer{k}.bin")
    if result.store is not None:
        result.store.save(out / "prototypes.bin")
        result.store.save_json(out / "prototypes.json")
    return out


def load_run(run_dir) -> tuple[ExperimentConfig, MetricsRecord, list[ToyModel]]:
    run = Path(run_dir)
    config = ExperimentConfig.from_dict(json.loads((run / "config.json").read_text()))
    record = MetricsRecord.from_json((run / "metrics.json").read_text())
    n = 1 if config.method == "joint" else config.task.n_stages
    checkpoints = []
    for t in range(n):
        path = run / "checkpoints" / f"stage{t}.bin"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        checkpoints.append(ToyModel.load(path))
    return config, record, checkpoints


def spectra_rows(run_dir) -> list[dict]:
    """Singular values of the final projection of every trunk layer."""
    run = Path(run_dir)
    files = sorted((run / "projections").glob("stage*_layer*.bin"))
    if not files:
        return []
    last_stage = max(int(f.name.split("_")[0][5:]) for f in files)
    rows = []
    for f in files:
        stage, layer = f.stem.split("_")
        if int(stage[5:]) != last_stage:
            continue
        proj = LayerProjection.load(f)
        rows.extend({"layer": int(layer[5:]), "index": j, "lambda": float(v)}
                    for j, v in enumerate(proj.singular_values))
    rows.sort(key=lambda r: (r["layer"], r["index"]))
    return rows


def ablation(config: ExperimentConfig, methods: Sequence[str], seeds: Sequence[int]) -> dict[str, list[MetricsRecord]]:
    out: dict[str, list[MetricsRecord]] = {}
    for method in methods:
        for seed in seeds:
            cfg = dataclasses.replace(config, method=method).with_seed(seed)
            out.setdefault(method, []).append(run_experiment(cfg).record)
    return out


def ablation_table(results: dict[str, list[MetricsRecord]]) -> list[dict]:
    rows = []
    for method, records in results.items():
        vals = [r.avg_old_accuracy() for r in records]
        rows.append({"method": method, "n_seeds": len(vals), "median_avg_old_accuracy": float(np.median(vals)),
                     "mean_avg_old_accuracy": float(np.mean(vals)),
                     "median_avg_accuracy": float(np.median([r.summary()["avg_accuracy"] for r in records]))})
    return rows
