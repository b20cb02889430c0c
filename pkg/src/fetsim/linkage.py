"""Fuzzy record linkage and multi-party data synthesis.

Keys are low-dimensional real identifiers shared (with noise) by every party.
The primary party links each of its records to the ``K`` secondary records
with the nearest keys, after optionally subsampling each secondary party.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

logger = logging.getLogger(__name__)

PRIMARY = "primary"
SECONDARY = "secondary"


@dataclass
class PartyDataset:
    """One party's records: identifier keys, feature columns, optional labels."""

    keys: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    role: str = SECONDARY
    row_ids: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.keys = np.atleast_2d(np.asarray(self.keys, dtype=np.float64))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.keys.shape[0] != self.features.shape[0]:
            raise DimensionError(
                f"keys have {self.keys.shape[0]} rows but features have {self.features.shape[0]}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape[0] != self.keys.shape[0]:
                raise DimensionError("labels are not row-aligned with keys")
        if self.row_ids is None:
            self.row_ids = np.arange(self.keys.shape[0])
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(self.features.shape[1])]

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def key_dims(self) -> int:
        return self.keys.shape[1]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def take(self, rows) -> "PartyDataset":
        rows = np.asarray(rows)
        return PartyDataset(
            keys=self.keys[rows],
            features=self.features[rows],
            labels=None if self.labels is None else self.labels[rows],
            role=self.role,
            row_ids=self.row_ids[rows],
            feature_names=list(self.feature_names),
        )

    def as_matrix(self) -> np.ndarray:
        """``[keys | features]``, the layout the estimators accept."""
        return np.hstack([self.keys, self.features])


@dataclass
class LinkedBatch:
    """``B`` primary records, each aligned with ``K`` records per secondary party."""

    primary_rows: np.ndarray
    primary_keys: np.ndarray
    primary_features: np.ndarray
    labels: np.ndarray | None
    neighbor_index: list[np.ndarray]
    neighbor_keys: list[np.ndarray]
    neighbor_features: list[np.ndarray]
    sample_ids: list[np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.primary_rows.shape[0]

    @property
    def num_parties(self) -> int:
        return len(self.neighbor_index)


# -- key derivation and noise ---------------------------------------------


def derive_keys_pca(features: np.ndarray, out_dims: int = 4) -> np.ndarray:
    """Project centred rows onto the top ``out_dims`` principal axes.

    Axes come from the covariance eigendecomposition in descending eigenvalue
    order; each axis is signed so its largest-magnitude loading is positive.
    Missing rank is padded with zero columns.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n <= out_dims:
        raise ContractError(f"need more than {out_dims} rows for PCA keys, got {n}")
    if not np.all(np.isfinite(x)):
        raise ContractError("features contain non-finite values")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * max(n, d) * np.finfo(float).eps if evals.size else 0.0
    rank = int(np.sum(evals > tol))
    take = min(out_dims, rank)
    if take < out_dims:
        logger.warning("feature rank %d < %d key dims; padding with zeros", rank, out_dims)
    axes = evecs[:, :take]
    pivot = np.abs(axes).argmax(axis=0)
    signs = np.sign(axes[pivot, np.arange(take)])
    axes = axes * np.where(signs == 0, 1.0, signs)
    keys = np.zeros((n, out_dims))
    keys[:, :take] = centered @ axes
    return keys


KEY_SCALINGS = ("standard", "minmax", "none")


def scale_keys(keys: np.ndarray, method: str = "standard") -> np.ndarray:
    """Put key dimensions on a common scale before fuzzing.

    ``standard`` gives each dimension unit variance, ``minmax`` maps it to
    ``[-1, 1]``; constant columns become 0 either way.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if method not in KEY_SCALINGS:
        raise ContractError(f"key scaling must be one of {KEY_SCALINGS}, got {method!r}")
    if method == "none":
        return keys.copy()
    if method == "standard":
        sd = keys.std(axis=0)
        out = (keys - keys.mean(axis=0)) / np.where(sd > 1e-12, sd, 1.0)
        out[:, sd <= 1e-12] = 0.0
        return out
    lo, hi = keys.min(axis=0), keys.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = 2.0 * (keys - lo) / span - 1.0
    out[:, hi <= lo] = 0.0
    return out


def fuzz_keys(keys: np.ndarray, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. ``N(0, noise_scale^2)`` to every key entry; 0 is exact linkage."""
    if noise_scale < 0:
        raise ContractError(f"key noise scale must be >= 0, got {noise_scale}")
    keys = np.asarray(keys, dtype=np.float64)
    if noise_scale == 0:
        return keys.copy()
    return keys + rng.normal(0.0, noise_scale, size=keys.shape)


# -- sampling and neighbour search ------------------------------------------


def subsample_size(n: int, q: float) -> int:
    return int(np.floor(q * n + 1e-9))


def subsample_rows(n: int, q: float, k_neighbors: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted row indices of a uniform ``floor(q n)`` sample without replacement."""
    if not 0 < q <= 1:
        raise ContractError(f"subsample rate must be in (0, 1], got {q}")
    m = subsample_size(n, q)
    if m < k_neighbors:
        raise ContractError(f"floor(q*N) = {m} is smaller than K = {k_neighbors}")
    if m == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=m, replace=False))


def subsample_secondary(dataset: PartyDataset, q: float, rng: np.random.Generator,
                        k_neighbors: int = 1) -> PartyDataset:
    return dataset.take(subsample_rows(len(dataset), q, k_neighbors, rng))


def knn_link(primary_keys: np.ndarray, candidate_keys: np.ndarray, k: int,
             chunk: int = 512) -> np.ndarray:
    """Exact K nearest candidates per primary key (ascending distance, ties by index)."""
    primary_keys = np.atleast_2d(np.asarray(primary_keys, dtype=np.float64))
    candidate_keys = np.atleast_2d(np.asarray(candidate_keys, dtype=np.float64))
    m = candidate_keys.shape[0]
    if k < 1 or m < k:
        raise ContractError(f"need 1 <= K <= M, got K={k}, M={m}")
    if primary_keys.shape[1] != candidate_keys.shape[1]:
        raise DimensionError("primary and candidate keys differ in dimension")
    out = np.empty((primary_keys.shape[0], k), dtype=np.int64)
    for start in range(0, primary_keys.shape[0], chunk):
        block = primary_keys[start:start + chunk]
        diff = block[:, None, :] - candidate_keys[None, :, :]
        dist = np.sqrt(np.einsum("bmd,bmd->bm", diff, diff))
        if k < m:
            kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
            for r in range(len(block)):
                # flatnonzero is index-ordered, so the stable sort breaks ties by index
                cand = np.flatnonzero(dist[r] <= kth[r])
                out[start + r] = cand[np.argsort(dist[r, cand], kind="stable")[:k]]
        else:
            out[start:start + len(block)] = np.argsort(dist, axis=1, kind="stable")
    return out


class Linker:
    """Links primary rows to ``K`` neighbours in every secondary party.

    With ``q == 1`` neighbours are fixed, so they are computed once per
    primary row and cached. Otherwise each call redraws a ``floor(qN)``
    sample per secondary party from a stream keyed by ``(seed, epoch, batch, party)``.
    """

    def __init__(self, secondaries: list[PartyDataset], k_neighbors: int,
                 subsample_rate: float = 1.0, seed: int = 0):
        if not secondaries:
            raise ContractError("at least one secondary party is required")
        self.secondaries = secondaries
        self.k_neighbors = k_neighbors
        self.subsample_rate = subsample_rate
        self.seed = seed
        for s in secondaries:
            if subsample_size(len(s), subsample_rate) < k_neighbors:
                raise ContractError(
                    f"party with {len(s)} rows cannot supply K={k_neighbors} "
                    f"neighbours at q={subsample_rate}"
                )
        self._cache: dict[int, np.ndarray] = {}

    def _stream(self, epoch: int, batch: int, party: int) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(0x11AB, epoch, batch, party))
        return np.random.default_rng(seq)

    def neighbor_indices(self, primary_keys: np.ndarray, epoch: int = 0, batch: int = 0,
                         cache_key: int | None = None) -> list[np.ndarray]:
        if self.subsample_rate >= 1.0:
            if cache_key is not None and cache_key in self._cache:
                return self._cache[cache_key]
            result = [knn_link(primary_keys, s.keys, self.k_neighbors) for s in self.secondaries]
            if cache_key is not None:
                self._cache[cache_key] = result
            return result
        result = []
        for h, s in enumerate(self.secondaries):
            rows = subsample_rows(len(s), self.subsample_rate, self.k_neighbors,
                                  self._stream(epoch, batch, h))
            result.append(rows[knn_link(primary_keys, s.keys[rows], self.k_neighbors)])
        return result

    def link(self, primary: PartyDataset, rows: np.ndarray, epoch: int = 0, batch: int = 0,
             neighbor_index: list[np.ndarray] | None = None) -> LinkedBatch:
        rows = np.asarray(rows)
        if neighbor_index is None:
            neighbor_index = self.neighbor_indices(primary.keys[rows], epoch, batch)
        return LinkedBatch(
            primary_rows=rows,
            primary_keys=primary.keys[rows],
            primary_features=primary.features[rows],
            labels=None if primary.labels is None else primary.labels[rows],
            neighbor_index=neighbor_index,
            neighbor_keys=[s.keys[idx] for s, idx in zip(self.secondaries, neighbor_index)],
            neighbor_features=[s.features[idx] for s, idx in zip(self.secondaries, neighbor_index)],
            sample_ids=[s.row_ids[idx] for s, idx in zip(self.secondaries, neighbor_index)],
        )


# -- synthesis -------------------------------------------------------------


def split_columns(num_features: int, num_parties: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Randomly permute column indices and cut them into balanced groups."""
    if num_parties < 1 or num_features < num_parties:
        raise ContractError(
            f"cannot split {num_features} features among {num_parties} parties"
        )
    perm = rng.permutation(num_features)
    return [np.sort(g) for g in np.array_split(perm, num_parties)]


def split_features(features: np.ndarray, labels: np.ndarray | None, num_parties: int,
                   rng: np.random.Generator, key_dims: int = 4, key_noise: float = 0.05,
                   keys: np.ndarray | None = None,
                   feature_names: list[str] | None = None,
                   key_scaling: str = "standard") -> list[PartyDataset]:
    """Vertically partition a table into ``num_parties`` fuzzy-keyed parties.

    Party 0 is the primary and keeps the labels. Unless ``keys`` are given,
    they are the PCA projection of the primary's columns, rescaled with
    :func:`scale_keys`. Every party receives its own independently fuzzed copy.
    """
    features = np.asarray(features, dtype=np.float64)
    names = feature_names or [f"f{i}" for i in range(features.shape[1])]
    groups = split_columns(features.shape[1], num_parties, rng)
    if keys is None:
        keys = scale_keys(derive_keys_pca(features[:, groups[0]], key_dims), key_scaling)
    parties = []
    for h, cols in enumerate(groups):
        parties.append(PartyDataset(
            keys=fuzz_keys(keys, key_noise, rng),
            features=features[:, cols],
            labels=labels if h == 0 else None,
            role=PRIMARY if h == 0 else SECONDARY,
            feature_names=[names[c] for c in cols],
        ))
    return parties


def standardize(features: np.ndarray) -> np.ndarray:
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    return (features - mu) / np.where(sd > 1e-12, sd, 1.0)


# -- CSV and cache I/O -------------------------------------------------------


def write_party_csv(path, party: PartyDataset) -> None:
    import csv

    path = Path(path)
    header = [f"key_{i}" for i in range(party.key_dims)] + list(party.feature_names)
    if party.labels is not None:
        header.append("label")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(party)):
            row = [repr(float(v)) for v in party.keys[i]]
            row += [repr(float(v)) for v in party.features[i]]
            if party.labels is not None:
                label = party.labels[i]
                row.append(str(int(label)) if float(label).is_integer() else repr(float(label)))
            writer.writerow(row)


def read_party_csv(path, role: str = SECONDARY) -> PartyDataset:
    """Read ``key_0..key_{d-1}`` + feature columns (+ ``label`` for the primary)."""
    import pandas as pd

    frame = pd.read_csv(path, float_precision="round_trip")
    key_cols = sorted((c for c in frame.columns if c.startswith("key_")),
                      key=lambda c: int(c.split("_", 1)[1]))
    if not key_cols:
        raise ConfigError(f"{path}: no key_<i> columns found", ["key_0"])
    labels = None
    if role == PRIMARY:
        if "label" not in frame.columns:
            raise ConfigError(f"{path}: primary table is missing the 'label' column", ["label"])
        labels = frame["label"].to_numpy()
    feat_cols = [c for c in frame.columns if c not in key_cols and c != "label"]
    if not feat_cols:
        raise ConfigError(f"{path}: no feature columns")
    return PartyDataset(
        keys=frame[key_cols].to_numpy(dtype=np.float64),
        features=frame[feat_cols].to_numpy(dtype=np.float64),
        labels=labels,
        role=role,
        feature_names=feat_cols,
    )


_LINK_MAGIC = b"FLNK"
_LINK_HEADER = struct.Struct("<4sIqdIIqq")


def save_link_index(path, indices: list[np.ndarray], seed: int, q: float, k: int, epoch: int) -> None:
    """Binary cache: header (magic, version, seed, q, K, epoch, parties, rows) + int64 LE."""
    rows = indices[0].shape[0] if indices else 0
    with open(path, "wb") as fh:
        fh.write(_LINK_HEADER.pack(_LINK_MAGIC, 1, seed, q, k, epoch, len(indices), rows))
        for idx in indices:
            fh.write(np.ascontiguousarray(idx, dtype="<i8").tobytes())


def load_link_index(path) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    magic, version, seed, q, k, epoch, parties, rows = _LINK_HEADER.unpack_from(data)
    if magic != _LINK_MAGIC or version != 1:
        raise ContractError(f"{path}: not a version-1 link index file")
    body = np.frombuffer(data, dtype="<i8", offset=_LINK_HEADER.size)
    arrays = [a.reshape(rows, k).astype(np.int64) for a in np.split(body, parties)] if parties else []
    meta = {"seed": seed, "q": q, "k": k, "epoch": epoch}
    return meta, arrays


def link_cache_name(seed: int, q: float, k: int, epoch: int) -> str:
    digest = hashlib.sha1(f"{seed}:{q!r}:{k}:{epoch}".encode()).hexdigest()[:10]
    return f"link_s{seed}_q{q:g}_K{k}_e{epoch}_{digest}.bin"
