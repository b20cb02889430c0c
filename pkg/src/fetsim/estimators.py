"""scikit-learn style wrappers around the training loop.

Every estimator takes the primary party's table as ``X = [keys | features]``
(``key_dims`` leading columns). The secondary parties are passed to ``fit``
and kept on the estimator, so ``predict`` links new primary rows against them.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ContractError, DimensionError
from .experiments import (FeTLearner, SoloLearner, Top1SimLearner, TrainConfig, VFLData,
                          fit_learner, predict_outputs)
from .linkage import PRIMARY, SECONDARY, PartyDataset
from .model import ModelConfig
from .splitavg import PrivacySpec


def as_party(obj, key_dims: int, role: str = SECONDARY) -> PartyDataset:
    """Accept a :class:`PartyDataset` or a ``[keys | features]`` array."""
    if isinstance(obj, PartyDataset):
        if obj.key_dims != key_dims:
            raise DimensionError(f"party has {obj.key_dims} key dims, expected {key_dims}")
        return obj
    arr = check_array(obj, dtype=np.float64)
    if arr.shape[1] <= key_dims:
        raise DimensionError(f"need more than {key_dims} columns ([keys | features])")
    return PartyDataset(arr[:, :key_dims], arr[:, key_dims:], role=role)


class _VFLEstimator(BaseEstimator):
    _task = "classification"

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, seed=self.random_state,
                           task=self._task, early_stop_patience=self.early_stop_patience,
                           optimizer=self.optimizer)

    def _prepare(self, X, y, secondaries, eval_set):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=self._task == "regression")
        if X.shape[1] <= self.key_dims:
            raise DimensionError(f"X needs {self.key_dims} key columns plus features")
        rows_X, rows_y = [X], [y]
        if eval_set is not None:
            Xv, yv = check_X_y(*eval_set, dtype=np.float64, y_numeric=self._task == "regression")
            if Xv.shape[1] != X.shape[1]:
                raise DimensionError("eval_set has a different column count from X")
            rows_X.append(Xv)
            rows_y.append(yv)
        allX = np.vstack(rows_X)
        ally = np.concatenate(rows_y)
        if self._task == "classification":
            self.classes_, encoded = np.unique(ally, return_inverse=True)
            if len(self.classes_) < 2:
                raise ContractError("classification needs at least two classes")
            labels = encoded
        else:
            labels = ally.astype(np.float64)
        primary = PartyDataset(allX[:, :self.key_dims], allX[:, self.key_dims:], labels, PRIMARY)
        n = X.shape[0]
        splits = {"train": np.arange(n), "val": np.arange(n, allX.shape[0])}
        data = VFLData(primary, list(secondaries), splits, self._task)
        if self._task == "classification":
            data.num_classes = len(self.classes_)
        else:
            data.label_mean = float(labels[:n].mean())
            data.label_std = float(labels[:n].std()) or 1.0
        self.n_features_in_ = X.shape[1]
        return data

    def _secondaries(self, secondaries):
        if secondaries is None:
            secondaries = []
        return [as_party(s, self.key_dims) for s in secondaries]

    def _make_learner(self, data: VFLData):
        raise NotImplementedError

    def fit(self, X, y, secondaries=None, eval_set=None):
        """Train on primary rows ``X`` (``[keys | features]``) with labels ``y``.

        ``eval_set=(X_val, y_val)`` enables early stopping on held-out rows.
        """
        parties = self._secondaries(secondaries)
        data = self._prepare(X, y, parties, eval_set)
        learner = self._make_learner(data)
        config = self._train_config()
        privacy = self._privacy() if isinstance(learner, FeTLearner) else None
        self.history_ = fit_learner(learner, data, config, privacy)
        self.learner_ = learner
        self.secondaries_ = parties
        self._label_stats = (data.label_mean, data.label_std)
        return self

    def _outputs(self, X) -> np.ndarray:
        check_is_fitted(self, "learner_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        primary = PartyDataset(X[:, :self.key_dims], X[:, self.key_dims:], role=PRIMARY)
        return predict_outputs(self.learner_, primary, np.arange(X.shape[0]), 1024)


class _ClassifierOutputs(ClassifierMixin):
    _task = "classification"

    def predict_proba(self, X) -> np.ndarray:
        logits = self._outputs(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self._outputs(X).argmax(axis=1)]


class _RegressorOutputs(RegressorMixin):
    _task = "regression"

    def predict(self, X) -> np.ndarray:
        mean, std = self._label_stats
        return self._outputs(X).reshape(-1) * std + mean


class _FeTBase(_VFLEstimator):
    def __init__(self, hidden_size=32, num_heads=2, num_blocks=1, num_neighbors=10, key_dims=4,
                 party_dropout=0.0, pe_avg_frequency=1, dynamic_mask=True,
                 mask_input="neighborhood", pe_max_frequency=10.0, aggregator_mode="sum_avg",
                 dropout=0.0,
                 noise_multiplier=0.0, clip_norm=1.0, delta=1e-5, subsample_rate=1.0,
                 epsilon_cap=None, use_mpc=False, epochs=20, batch_size=128, lr=1e-3,
                 weight_decay=1e-5, early_stop_patience=5, optimizer="adam", random_state=0):
        self.hidden_size = hidden_size
        self.num_heads = num_heads
        self.num_blocks = num_blocks
        self.num_neighbors = num_neighbors
        self.key_dims = key_dims
        self.party_dropout = party_dropout
        self.pe_avg_frequency = pe_avg_frequency
        self.dynamic_mask = dynamic_mask
        self.mask_input = mask_input
        self.pe_max_frequency = pe_max_frequency
        self.aggregator_mode = aggregator_mode
        self.dropout = dropout
        self.noise_multiplier = noise_multiplier
        self.clip_norm = clip_norm
        self.delta = delta
        self.subsample_rate = subsample_rate
        self.epsilon_cap = epsilon_cap
        self.use_mpc = use_mpc
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.early_stop_patience = early_stop_patience
        self.optimizer = optimizer
        self.random_state = random_state

    def _privacy(self) -> PrivacySpec:
        return PrivacySpec(epsilon=self.epsilon_cap, delta=self.delta,
                           noise_multiplier=self.noise_multiplier, clip_norm=self.clip_norm,
                           subsample_rate=self.subsample_rate, num_parties=self._k,
                           enabled=self.noise_multiplier > 0, use_mpc=self.use_mpc)

    def _make_learner(self, data):
        if not data.secondaries:
            raise ContractError("FeT needs at least one secondary party")
        self._k = len(data.secondaries)
        config = ModelConfig(hidden_size=self.hidden_size, num_heads=self.num_heads,
                             num_blocks=self.num_blocks, num_neighbors=self.num_neighbors,
                             num_parties=self._k, key_dims=self.key_dims,
                             party_dropout=self.party_dropout,
                             pe_avg_frequency=self.pe_avg_frequency,
                             aggregator_mode=self.aggregator_mode,
                             dynamic_mask=self.dynamic_mask, mask_input=self.mask_input,
                             pe_max_frequency=self.pe_max_frequency, dropout=self.dropout)
        privacy = self._privacy().validate(min(len(s) for s in data.secondaries),
                                           self.num_neighbors)
        return FeTLearner(data, config, privacy, self.subsample_rate, self.random_state)


class FeTClassifier(_ClassifierOutputs, _FeTBase):
    """Federated Transformer for classification."""


class FeTRegressor(_RegressorOutputs, _FeTBase):
    """Federated Transformer for regression."""


class _SoloBase(_VFLEstimator):
    def __init__(self, hidden=400, key_dims=4, epochs=20, batch_size=128, lr=1e-3,
                 weight_decay=1e-5, early_stop_patience=5, optimizer="adam", random_state=0):
        self.hidden = hidden
        self.key_dims = key_dims
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.early_stop_patience = early_stop_patience
        self.optimizer = optimizer
        self.random_state = random_state

    def _make_learner(self, data):
        return SoloLearner(data, hidden=self.hidden, seed=self.random_state)


class SoloClassifier(_ClassifierOutputs, _SoloBase):
    """MLP on the primary party's own features."""


class SoloRegressor(_RegressorOutputs, _SoloBase):
    """MLP regressor on the primary party's own features."""


class _Top1Base(_SoloBase):
    def __init__(self, hidden=200, key_dims=4, epochs=20, batch_size=128, lr=1e-3,
                 weight_decay=1e-5, early_stop_patience=5, optimizer="adam", random_state=0):
        super().__init__(hidden, key_dims, epochs, batch_size, lr, weight_decay,
                         early_stop_patience, optimizer, random_state)

    def _make_learner(self, data):
        if not data.secondaries:
            raise ContractError("Top1Sim needs at least one secondary party")
        return Top1SimLearner(data, hidden=self.hidden, seed=self.random_state)


class Top1SimClassifier(_ClassifierOutputs, _Top1Base):
    """Joins each primary row with its nearest record per secondary party."""


class Top1SimRegressor(_RegressorOutputs, _Top1Base):
    """Top-1 linkage baseline for regression."""


__all__ = ["FeTClassifier", "FeTRegressor", "SoloClassifier", "SoloRegressor",
           "Top1SimClassifier", "Top1SimRegressor", "as_party"]
