"""Training loop, baselines, metrics, early stopping and ablation sweeps."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.model_selection import train_test_split

from . import autodiff as ad
from .accountant import AccountantState, compose_epsilon
from .autodiff import Tensor
from .errors import BudgetExhausted, ConfigError, ContractError, NumericError
from .linkage import (KEY_SCALINGS, PRIMARY, Linker, PartyDataset, scale_keys, derive_keys_pca,
                      split_features, standardize)
from .model import FederatedTransformer, ModelConfig, StepContext
from .nn import MLP, Linear, Module
from .splitavg import PrivacySpec

logger = logging.getLogger(__name__)

TASKS = ("classification", "regression")
PRIMARY_FEATURES = ("keys", "columns")
EVAL_EPOCH_OFFSET = 1 << 20


# -- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8192
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    task: str = "classification"
    early_stop_patience: int = 10
    eval_noise: bool = True
    optimizer: str = "adam"
    eval_batch_size: int = 1024
    model: str = "fet"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ContractError("epochs and batch sizes must be >= 1")
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ContractError("need lr > 0 and weight_decay >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError("optimizer must be 'adam' or 'sgd'")
        if self.model not in MODELS:
            raise ContractError(f"model must be one of {MODELS}")
        return self


@dataclass
class DataConfig:
    """Where the table comes from and how it is split into fuzzy-keyed parties."""

    source: str = "mnist"
    rows: int = 0
    key_noise: float = 0.05
    key_dims: int = 4
    subsample_rate: float = 1.0
    synthetic_features: int = 20
    label_column: str = "label"
    primary_features: str = "keys"
    key_scaling: str = "standard"

    def validate(self) -> "DataConfig":
        if self.key_scaling not in KEY_SCALINGS:
            raise ContractError(f"key_scaling must be one of {KEY_SCALINGS}")
        if self.key_noise < 0:
            raise ContractError("key_noise must be >= 0")
        if self.key_dims < 1:
            raise ContractError("key_dims must be >= 1")
        if not 0 < self.subsample_rate <= 1:
            raise ContractError("subsample_rate must be in (0, 1]")
        if self.rows < 0:
            raise ContractError("rows must be >= 0 (0 = all)")
        return self


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    privacy: PrivacySpec = field(default_factory=PrivacySpec)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "privacy": asdict(self.privacy),
                "linkage": asdict(self.data), "train": asdict(self.train)}


def desk_config(**train_overrides) -> ExperimentConfig:
    """Small settings that train on one CPU core in about a minute per run."""
    model = ModelConfig(hidden_size=32, num_heads=2, num_blocks=1, num_neighbors=10,
                        num_parties=5, party_dropout=0.0, pe_avg_frequency=1,
                        pe_max_frequency=10.0, mask_input="neighborhood")
    train = TrainConfig(epochs=20, batch_size=128, early_stop_patience=5)
    return ExperimentConfig(model=model, privacy=PrivacySpec(num_parties=5),
                            data=DataConfig(), train=replace(train, **train_overrides))


# -- data ----------------------------------------------------------------------------


@dataclass
class VFLData:
    """Primary party (all rows, labels), secondary parties, and row splits."""

    primary: PartyDataset
    secondaries: list[PartyDataset]
    splits: dict[str, np.ndarray]
    task: str = "classification"
    num_classes: int = 0
    label_mean: float = 0.0
    label_std: float = 1.0

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    def targets(self, rows) -> np.ndarray:
        """Training targets: class ids, or standardized regression labels."""
        y = self.primary.labels[rows]
        if self.task == "classification":
            return y.astype(np.int64)
        return (y.astype(np.float64) - self.label_mean) / self.label_std


def load_mnist(rows: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """The 5,000-row MNIST sample bundled with mlxtend (500 images per digit)."""
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.astype(np.float64) / 255.0
    if rows and rows < X.shape[0]:
        keep, _ = train_test_split(np.arange(X.shape[0]), train_size=rows, stratify=y,
                                   random_state=0)
        keep = np.sort(keep)
        X, y = X[keep], y[keep]
    return X, y.astype(np.int64)


def load_table(config: DataConfig, task: str, seed: int = 0) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if config.source == "mnist":
        X, y = load_mnist(config.rows)
        return X, y, [f"px{i}" for i in range(X.shape[1])]
    if config.source == "synthetic":
        from sklearn.datasets import make_classification, make_regression

        n = config.rows or 1000
        d = config.synthetic_features
        if task == "classification":
            X, y = make_classification(n_samples=n, n_features=d, n_informative=max(2, d // 2),
                                       n_classes=3, n_clusters_per_class=1, random_state=seed)
        else:
            X, y = make_regression(n_samples=n, n_features=d, n_informative=max(2, d // 2),
                                   noise=5.0, random_state=seed)
        return X, y, [f"x{i}" for i in range(d)]
    import pandas as pd

    path = Path(config.source)
    if not path.exists():
        raise ConfigError(f"data source {config.source!r} is not mnist, synthetic or a CSV path",
                          ["linkage.source"])
    frame = pd.read_csv(path)
    if config.label_column not in frame.columns:
        raise ConfigError(f"input table has no {config.label_column!r} column", [config.label_column])
    y = frame.pop(config.label_column).to_numpy()
    frame = frame[[c for c in frame.columns if not str(c).startswith("key_")]]
    if config.rows:
        frame, y = frame.iloc[:config.rows], y[:config.rows]
    if task == "classification":
        _, y = np.unique(y, return_inverse=True)
    return frame.to_numpy(dtype=np.float64), y, [str(c) for c in frame.columns]


def split_rows(labels: np.ndarray, task: str, seed: int,
               fractions=(0.70, 0.15, 0.15)) -> dict[str, np.ndarray]:
    """Train/val/test indices; stratified by label for classification."""
    idx = np.arange(labels.shape[0])
    strat = labels if task == "classification" else None
    train, rest = train_test_split(idx, train_size=fractions[0], stratify=strat, random_state=seed)
    rest_strat = labels[rest] if task == "classification" else None
    val_share = fractions[1] / (fractions[1] + fractions[2])
    val, test = train_test_split(rest, train_size=val_share, stratify=rest_strat, random_state=seed)
    return {"train": np.sort(train), "val": np.sort(val), "test": np.sort(test)}


def build_vfl_data(features: np.ndarray, labels: np.ndarray, num_secondary: int, task: str,
                   seed: int, key_noise: float = 0.05, key_dims: int = 4,
                   feature_names: list[str] | None = None,
                   primary_features: str = "keys", key_scaling: str = "standard") -> VFLData:
    """Split a table among one primary and ``num_secondary`` secondary parties.

    Feature columns are standardized; secondaries keep every row so that
    validation and test records can still find their partners. With
    ``primary_features="keys"`` the primary's columns are reduced to the
    ``key_dims`` PCA components that also serve as identifiers; ``"columns"``
    keeps its raw column group instead.
    """
    if primary_features not in PRIMARY_FEATURES:
        raise ContractError(f"primary_features must be one of {PRIMARY_FEATURES}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xDA7A,)))
    features = standardize(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    parties = split_features(features, labels, num_secondary + 1, rng, key_dims=key_dims,
                             key_noise=key_noise, feature_names=feature_names,
                             key_scaling=key_scaling)
    if primary_features == "keys":
        # The primary's column group is replaced by its own PCA reduction,
        # i.e. the noise-free identifiers.
        prim = parties[0]
        clean = scale_keys(derive_keys_pca(prim.features, key_dims), key_scaling)
        parties[0] = PartyDataset(prim.keys, clean, prim.labels, PRIMARY,
                                  feature_names=[f"pc{i}" for i in range(key_dims)])
    splits = split_rows(labels, task, seed)
    data = VFLData(parties[0], parties[1:], splits, task)
    if task == "classification":
        data.num_classes = int(labels.max()) + 1
    else:
        tr = labels[splits["train"]].astype(np.float64)
        data.label_mean = float(tr.mean())
        data.label_std = float(tr.std()) or 1.0
    return data


def make_data(config: ExperimentConfig, seed: int) -> VFLData:
    config.data.validate()
    X, y, names = load_table(config.data, config.train.task, seed)
    return build_vfl_data(X, y, config.model.num_parties, config.train.task, seed,
                          key_noise=config.data.key_noise, key_dims=config.data.key_dims,
                          feature_names=names, primary_features=config.data.primary_features,
                          key_scaling=config.data.key_scaling)


# -- metrics -----------------------------------------------------------------------


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def rmse(pred: np.ndarray, labels: np.ndarray) -> float:
    diff = np.asarray(pred, dtype=np.float64).reshape(-1) - np.asarray(labels, dtype=np.float64).reshape(-1)
    return float(np.sqrt(np.mean(diff**2)))


def task_metric(task: str, outputs: np.ndarray, labels: np.ndarray, label_mean: float = 0.0,
                label_std: float = 1.0) -> float:
    """Accuracy from logits, or RMSE in label units from standardized outputs."""
    if task == "classification":
        if outputs.ndim != 2 or outputs.shape[1] < 2:
            raise ContractError("classification metric needs per-class scores")
        return accuracy(outputs.argmax(axis=1), labels)
    if task == "regression":
        if outputs.ndim == 2 and outputs.shape[1] != 1:
            raise ContractError("regression metric needs a single output column")
        return rmse(outputs.reshape(-1) * label_std + label_mean, labels)
    raise ContractError(f"unknown task {task!r}")


def higher_is_better(task: str) -> bool:
    return task == "classification"


def task_loss(task: str, outputs: Tensor, targets: np.ndarray) -> Tensor:
    if task == "classification":
        return ad.cross_entropy(outputs, targets)
    return ad.mse_loss(outputs, targets.reshape(-1, 1))


# -- learners: one per model family ----------------------------------------------------


class Learner:
    """Uniform interface the training loop drives."""

    name = "learner"
    module: Module

    def forward(self, primary: PartyDataset, rows: np.ndarray, ctx: StepContext) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return self.module.parameters()

    def state(self) -> dict:
        return self.module.state_dict()

    def load(self, state: dict) -> None:
        self.module.load_state_dict(state)

    def end_epoch(self, epoch: int) -> None:
        pass

    @property
    def comm_bytes(self) -> int:
        return 0


class _NeighborCache:
    """Exact full-candidate kNN indices for a fixed primary table, computed once."""

    def __init__(self, linker: Linker, primary: PartyDataset):
        self.linker = linker
        self.primary = primary
        self.index = linker.neighbor_indices(primary.keys)

    def link(self, rows):
        return self.linker.link(self.primary, rows,
                                neighbor_index=[idx[rows] for idx in self.index])


class FeTLearner(Learner):
    name = "fet"

    def __init__(self, data: VFLData, model_config: ModelConfig, privacy: PrivacySpec,
                 subsample_rate: float = 1.0, seed: int = 0):
        self.model = self.module = FederatedTransformer(
            model_config, data.primary.num_features,
            [s.num_features for s in data.secondaries], data.out_dim, seed=seed)
        self.privacy = privacy
        self.seed = seed
        k = model_config.num_neighbors
        self.full_linker = Linker(data.secondaries, k, 1.0, seed)
        self.train_linker = Linker(data.secondaries, k, subsample_rate, seed)
        self._caches: dict[int, _NeighborCache] = {}

    def _cache(self, primary: PartyDataset) -> _NeighborCache:
        key = id(primary)
        if key not in self._caches:
            self._caches = {key: _NeighborCache(self.full_linker, primary)}
        return self._caches[key]

    def link(self, primary, rows, ctx):
        if ctx.training and self.train_linker.subsample_rate < 1.0:
            return self.train_linker.link(primary, rows, ctx.epoch, ctx.batch)
        return self._cache(primary).link(rows)

    def forward(self, primary, rows, ctx):
        batch = self.link(primary, rows, ctx)
        return self.model(batch, self.privacy, replace(ctx, seed=self.seed))

    def end_epoch(self, epoch):
        freq = self.model.config.pe_avg_frequency
        if freq and (epoch + 1) % freq == 0:
            self.model.average_positional_encodings()

    @property
    def comm_bytes(self):
        return self.model.comm.bytes_uploaded


class SoloLearner(Learner):
    """Two-hidden-layer MLP on the primary party's own features."""

    name = "solo"

    def __init__(self, data: VFLData, hidden: int = 400, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5010,)))
        self.module = MLP([data.primary.num_features, hidden, hidden, data.out_dim], rng)

    def forward(self, primary, rows, ctx):
        self.module.train(ctx.training)
        return self.module(Tensor(primary.features[rows]))


class Top1Net(Module):
    def __init__(self, dims: list[int], hidden: int, out_dim: int, rng):
        self.locals = [Linear(d, hidden, rng) for d in dims]
        self.mix = Linear(hidden * len(dims), hidden, rng)
        self.head = Linear(hidden, out_dim, rng)

    def forward(self, parts: list[np.ndarray]) -> Tensor:
        hs = [ad.relu(layer(Tensor(x))) for layer, x in zip(self.locals, parts)]
        joined = hs[0] if len(hs) == 1 else ad.concat(hs, axis=-1)
        return self.head(ad.relu(self.mix(joined)))


class Top1SimLearner(Learner):
    """Joins each primary row with its single nearest record in every secondary party."""

    name = "top1sim"

    def __init__(self, data: VFLData, hidden: int = 200, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x7091,)))
        dims = [data.primary.num_features] + [s.num_features for s in data.secondaries]
        self.module = Top1Net(dims, hidden, data.out_dim, rng)
        self.linker = Linker(data.secondaries, 1, 1.0, seed)
        self._caches: dict[int, _NeighborCache] = {}

    def forward(self, primary, rows, ctx):
        key = id(primary)
        if key not in self._caches:
            self._caches = {key: _NeighborCache(self.linker, primary)}
        batch = self._caches[key].link(rows)
        parts = [batch.primary_features] + [f[:, 0, :] for f in batch.neighbor_features]
        return self.module(parts)


MODELS = ("fet", "solo", "top1sim")


# -- run bookkeeping ------------------------------------------------------------------


@dataclass
class RunMetrics:
    model: str = ""
    seed: int = 0
    task: str = "classification"
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    initial_loss: float = math.nan
    best_epoch: int = -1
    best_val: float = math.nan
    test_metric: float = math.nan
    wall_time: float = 0.0
    epsilon: float = 0.0
    steps: int = 0
    comm_bytes: int = 0
    halted: bool = False

    def trace(self) -> tuple:
        """Everything that must replay identically under a fixed seed."""
        return (tuple(self.train_loss), tuple(self.val_metric), self.initial_loss,
                self.best_epoch, self.test_metric, self.epsilon, self.steps, self.comm_bytes)

    def to_dict(self) -> dict:
        return asdict(self)


def predict_outputs(learner: Learner, primary: PartyDataset, rows: np.ndarray, batch_size: int,
                    epoch: int = 0) -> np.ndarray:
    """Raw model outputs for ``rows`` in evaluation mode, without building a tape."""
    learner.module.eval()
    outs = []
    with ad.no_grad():
        for b, start in enumerate(range(0, len(rows), batch_size)):
            chunk = rows[start:start + batch_size]
            ctx = StepContext(epoch=EVAL_EPOCH_OFFSET + epoch, batch=b, training=False)
            outs.append(learner.forward(primary, chunk, ctx).data)
    learner.module.train()
    return np.concatenate(outs, axis=0)


def evaluate(learner: Learner, data: VFLData, split: str = "test", task: str | None = None,
             batch_size: int = 1024, epoch: int = 0) -> float:
    """Accuracy or RMSE of ``learner`` on one split."""
    task = task or data.task
    if task != data.task:
        raise ContractError(f"dataset task is {data.task!r}, asked for {task!r}")
    rows = data.splits[split]
    outputs = predict_outputs(learner, data.primary, rows, batch_size, epoch)
    return task_metric(task, outputs, data.primary.labels[rows], data.label_mean, data.label_std)


def _is_better(task, new, best) -> bool:
    if math.isnan(best):
        return True
    return new > best if higher_is_better(task) else new < best


def fit_learner(learner: Learner, data: VFLData, config: TrainConfig,
                privacy: PrivacySpec | None = None,
                on_epoch: Callable[[dict], None] | None = None) -> RunMetrics:
    """Mini-batch training with early stopping on the validation split.

    The best-validation parameters are restored before the test metric is
    computed, so the reported test metric belongs to the early-stopping epoch.
    """
    config.validate()
    if data.task != config.task:
        raise ContractError(f"dataset task is {data.task!r}, config says {config.task!r}")
    metrics = RunMetrics(model=learner.name, seed=config.seed, task=config.task)
    started = time.perf_counter()
    opt = ad.make_optimizer(config.optimizer, learner.parameters(), config.lr, config.weight_decay)
    accountant = None
    if privacy is not None and privacy.enabled and learner.name == "fet":
        accountant = AccountantState(privacy.noise_multiplier, privacy.subsample_rate,
                                     privacy.delta, method=privacy.accountant)
    train_rows = data.splits["train"]
    has_val = "val" in data.splits and len(data.splits["val"]) > 0
    shuffle = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0x5B0F,)))
    best_state, stale = None, 0
    try:
        for epoch in range(config.epochs):
            order = shuffle.permutation(train_rows)
            losses = []
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                rows = order[start:start + config.batch_size]
                if accountant is not None and privacy.epsilon is not None:
                    projected = accountant.epsilon(accountant.steps_taken + 1)
                    if projected > privacy.epsilon:
                        raise BudgetExhausted(projected, privacy.epsilon, accountant.steps_taken)
                ctx = StepContext(seed=config.seed, epoch=epoch, batch=b, training=True)
                loss = task_loss(config.task, learner.forward(data.primary, rows, ctx),
                                 data.targets(rows))
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
                if epoch == 0 and b == 0:
                    metrics.initial_loss = loss.item()
                loss.backward()
                opt.step()
                losses.append(loss.item())
                metrics.steps += 1
                if accountant is not None:
                    accountant.step()
            learner.end_epoch(epoch)
            metrics.train_loss.append(float(np.mean(losses)))
            if has_val:
                val = evaluate(learner, data, "val", batch_size=config.eval_batch_size, epoch=epoch)
            else:
                val = -metrics.train_loss[-1] if higher_is_better(config.task) else metrics.train_loss[-1]
            metrics.val_metric.append(val)
            if _is_better(config.task, val, metrics.best_val):
                metrics.best_val, metrics.best_epoch = val, epoch
                best_state, stale = copy.deepcopy(learner.state()), 0
            else:
                stale += 1
            if accountant is not None:
                metrics.epsilon = compose_epsilon(accountant)
            record = {"epoch": epoch, "train_loss": metrics.train_loss[-1], "val_metric": val,
                      "epsilon": metrics.epsilon, "steps": metrics.steps,
                      "comm_bytes": learner.comm_bytes}
            if on_epoch is not None:
                on_epoch(record)
            if config.early_stop_patience and stale >= config.early_stop_patience:
                break
    except BudgetExhausted as exc:
        metrics.halted = True
        metrics.epsilon = compose_epsilon(accountant)
        metrics.wall_time = time.perf_counter() - started
        exc.metrics = metrics
        raise
    if best_state is not None:
        learner.load(best_state)
    if "test" in data.splits and len(data.splits["test"]):
        metrics.test_metric = evaluate(learner, data, "test", batch_size=config.eval_batch_size)
    metrics.comm_bytes = learner.comm_bytes
    metrics.wall_time = time.perf_counter() - started
    return metrics


def train_fet(config: TrainConfig, data: VFLData, model_config: ModelConfig,
              privacy: PrivacySpec | None = None, subsample_rate: float | None = None,
              on_epoch=None, return_learner: bool = False):
    privacy = privacy or PrivacySpec(num_parties=model_config.num_parties)
    privacy = replace(privacy, num_parties=model_config.num_parties, eval_noise=config.eval_noise)
    q = privacy.subsample_rate if subsample_rate is None else subsample_rate
    privacy.validate(min(len(s) for s in data.secondaries), model_config.num_neighbors)
    learner = FeTLearner(data, model_config, privacy, subsample_rate=q, seed=config.seed)
    metrics = fit_learner(learner, data, config, privacy, on_epoch)
    return (metrics, learner) if return_learner else metrics


def train_solo(config: TrainConfig, data: VFLData, on_epoch=None, return_learner: bool = False):
    if data.primary.labels is None:
        raise ContractError("the primary party has no labels")
    learner = SoloLearner(data, seed=config.seed)
    metrics = fit_learner(learner, data, config, on_epoch=on_epoch)
    return (metrics, learner) if return_learner else metrics


def train_top1sim(config: TrainConfig, data: VFLData, on_epoch=None, return_learner: bool = False):
    learner = Top1SimLearner(data, seed=config.seed)
    metrics = fit_learner(learner, data, config, on_epoch=on_epoch)
    return (metrics, learner) if return_learner else metrics


def run_experiment(config: ExperimentConfig, seed: int | None = None, data: VFLData | None = None,
                   on_epoch=None, return_learner: bool = False):
    """Build data for ``seed`` and train the model named in ``config.train.model``."""
    seed = config.train.seed if seed is None else seed
    train = replace(config.train, seed=seed)
    data = data or make_data(config, seed)
    if train.model == "fet":
        return train_fet(train, data, config.model, config.privacy, config.data.subsample_rate,
                         on_epoch=on_epoch, return_learner=return_learner)
    if train.model == "solo":
        return train_solo(train, data, on_epoch=on_epoch, return_learner=return_learner)
    return train_top1sim(train, data, on_epoch=on_epoch, return_learner=return_learner)


# -- ablations -------------------------------------------------------------------------


SUITES = {
    "dynamic_mask": ("model", "dynamic_mask"),
    "party_dropout": ("model", "party_dropout"),
    "pe_frequency": ("model", "pe_avg_frequency"),
    "key_noise": ("data", "key_noise"),
    "neighbors_K": ("model", "num_neighbors"),
    "num_parties": ("model", "num_parties"),
    "splitavg_noise": ("privacy", "noise_multiplier"),
    "aggregator": ("model", "aggregator_mode"),
}


def apply_grid_value(config: ExperimentConfig, suite: str, value) -> ExperimentConfig:
    if suite not in SUITES:
        raise ContractError(f"unknown ablation suite {suite!r}; choose from {sorted(SUITES)}")
    section, key = SUITES[suite]
    cfg = copy.deepcopy(config)
    setattr(getattr(cfg, section), key, value)
    if suite == "num_parties":
        cfg.privacy.num_parties = value
    if suite == "splitavg_noise":
        cfg.privacy.enabled = value > 0
    return cfg


def _ablation_job(args) -> tuple:
    config, suite, value, seed = args
    metrics = run_experiment(apply_grid_value(config, suite, value), seed)
    return value, seed, metrics


def run_ablation(suite: str, grid: list, base: ExperimentConfig, n_seeds: int = 5,
                 seeds: list[int] | None = None, jobs: int = 1,
                 out_csv=None) -> list[dict]:
    """One row per grid value: mean and std of the test metric over seeds."""
    if not grid:
        raise ContractError("ablation grid is empty")
    seeds = list(seeds) if seeds is not None else [base.train.seed + i for i in range(n_seeds)]
    tasks = [(base, suite, v, s) for v in grid for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablation_job, tasks))
    else:
        results = [_ablation_job(t) for t in tasks]
    rows = []
    for i, value in enumerate(grid):
        runs = [m for j, (_, _, m) in enumerate(results) if j // len(seeds) == i]
        scores = np.array([m.test_metric for m in runs])
        rows.append({
            "suite": suite,
            "value": value,
            "model": base.train.model,
            "metric": "accuracy" if base.train.task == "classification" else "rmse",
            "mean": float(scores.mean()),
            "std": float(scores.std()),
            "n_seeds": len(runs),
            "seeds": " ".join(str(m.seed) for m in runs),
            "epsilon": float(np.mean([m.epsilon for m in runs])),
            "comm_bytes": float(np.mean([m.comm_bytes for m in runs])),
            "wall_time": float(np.sum([m.wall_time for m in runs])),
        })
    if out_csv is not None:
        write_csv(out_csv, rows)
    return rows


# -- output ----------------------------------------------------------------------------------


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


class JsonLinesWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def summary_row(metrics: RunMetrics) -> dict:
    d = metrics.to_dict()
    for key in ("train_loss", "val_metric"):
        d.pop(key)
    d["epochs_run"] = len(metrics.train_loss)
    return d
