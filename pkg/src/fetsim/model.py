"""The Federated Transformer: per-party encoders, a primary decoder, and the
cross-party machinery (positional-encoding averaging, dynamic masks, party
dropout, secure aggregation of representations).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .linkage import LinkedBatch
from .mpc import SecureAggregator
from .nn import MLP, DecoderBlock, EncoderBlock, LayerNorm, Linear, Module
from .splitavg import (PrivacySpec, clip_representation, draw_party_noise, noise_stream,
                       secure_aggregate)

CHECKPOINT_VERSION = 1
MASK_INPUTS = ("pe", "raw", "pe_context", "raw_context", "neighborhood")


@dataclass
class ModelConfig:
    hidden_size: int = 64
    num_heads: int = 4
    num_blocks: int = 6
    num_neighbors: int = 10
    num_parties: int = 1
    key_dims: int = 4
    party_dropout: float = 0.0
    pe_avg_frequency: int = 1
    aggregator_mode: str = "sum_avg"
    dynamic_mask: bool = True
    mask_input: str = "neighborhood"
    mask_hidden: int = 64
    pe_max_frequency: float = 1e4
    pe_init: str = "uniform"
    ffn_mult: int = 2
    dropout: float = 0.0

    def validate(self) -> "ModelConfig":
        for name in ("hidden_size", "num_heads", "num_blocks", "num_neighbors",
                     "num_parties", "key_dims"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer")
        if self.hidden_size % self.num_heads:
            raise ContractError("hidden_size must be divisible by num_heads")
        if self.hidden_size % 2:
            raise ContractError("hidden_size must be even for sinusoidal encodings")
        if not 0 <= self.party_dropout <= 1:
            raise ContractError("party_dropout must lie in [0, 1]")
        if self.pe_avg_frequency < 0:
            raise ContractError("pe_avg_frequency must be >= 0")
        if self.aggregator_mode not in ("sum_avg", "concat"):
            raise ContractError("aggregator_mode must be 'sum_avg' or 'concat'")
        if self.mask_input not in MASK_INPUTS:
            raise ContractError(f"mask_input must be one of {MASK_INPUTS}")
        if self.pe_init not in ("uniform", "zero"):
            raise ContractError("pe_init must be 'uniform' or 'zero'")
        return self


# -- positional encoding -----------------------------------------------------


def sinusoid_table(key_dims: int, hidden: int, max_frequency: float):
    """Key dimension and angular frequency for each of the ``hidden/2`` slots.

    Slots cycle through key dimensions; each dimension gets log-spaced
    frequencies from 1 up to ``max_frequency``.
    """
    slots = hidden // 2
    per_dim = math.ceil(slots / key_dims)
    freqs = np.geomspace(1.0, max_frequency, per_dim) if per_dim > 1 else np.ones(1)
    dims = np.arange(slots) % key_dims
    levels = np.arange(slots) // key_dims
    return dims, freqs[levels]


def sinusoid_base(keys: np.ndarray, dims: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    angles = keys[..., dims] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class PositionalEncoding(Module):
    """``base(k) + W base(k) + b``: fixed sinusoids plus a learnable linear map."""

    def __init__(self, key_dims: int, hidden: int, rng, max_frequency: float = 1e4,
                 zero_init: bool = False):
        self.key_dims = key_dims
        self.hidden = hidden
        self.dims, self.freqs = sinusoid_table(key_dims, hidden, max_frequency)
        self.proj = Linear(hidden, hidden, rng, zero_init=zero_init)

    def base(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.float64)
        if keys.shape[-1] != self.key_dims:
            raise DimensionError(f"expected {self.key_dims} key dims, got {keys.shape[-1]}")
        return sinusoid_base(keys, self.dims, self.freqs)

    def forward(self, keys) -> Tensor:
        base = Tensor(self.base(keys.data if isinstance(keys, Tensor) else keys))
        return base + self.proj(base)


def positional_encode(keys, pe_layer: PositionalEncoding) -> Tensor:
    return pe_layer(keys)


def pe_average(pe_layers: list[PositionalEncoding]) -> dict[str, np.ndarray]:
    """Average PE parameters elementwise and install the mean in every layer."""
    if not pe_layers:
        raise ContractError("no positional-encoding layers to average")
    states = [layer.state_dict() for layer in pe_layers]
    names = set(states[0])
    for layer, st in zip(pe_layers, states):
        if set(st) != names or any(st[n].shape != states[0][n].shape for n in names):
            raise ContractError("positional-encoding layers differ in structure")
        if not (np.array_equal(layer.freqs, pe_layers[0].freqs)
                and np.array_equal(layer.dims, pe_layers[0].dims)):
            raise ContractError("positional-encoding layers use different sinusoid tables")
    mean = {n: sum(st[n] for st in states) / len(states) for n in names}
    for layer in pe_layers:
        layer.load_state_dict(mean)
    return mean


# -- dynamic mask -------------------------------------------------------------


class DynamicMask(Module):
    """Two-hidden-layer MLP producing one additive attention logit per linked record.

    With ``joint=True`` the input is the whole ``B x K x d`` neighbourhood,
    flattened in linkage order, and the MLP emits all K logits at once.
    Otherwise every record is scored from its own features.
    """

    def __init__(self, in_features: int, hidden: int, rng, num_neighbors: int = 1,
                 joint: bool = False):
        self.joint = joint
        out = num_neighbors if joint else 1
        width = in_features * num_neighbors if joint else in_features
        self.mlp = MLP([width, hidden, hidden, out], rng)

    def forward(self, inputs: Tensor) -> Tensor:
        if self.joint:
            b = inputs.shape[0]
            return self.mlp(inputs.reshape(b, -1))
        return self.mlp(inputs).reshape(inputs.shape[:-1])


def mask_features(keys: np.ndarray, pe_layer: PositionalEncoding, mode: str) -> Tensor:
    """Inputs to the mask MLP, computed from the party's own keys only.

    The ``*_context`` modes append each record's offset from the centroid of
    the K linked records, which locates it within its neighbourhood.
    """
    if mode in ("raw", "neighborhood"):
        return Tensor(keys)
    if mode == "raw_context":
        return Tensor(np.concatenate([keys, keys - keys.mean(axis=1, keepdims=True)], axis=-1))
    pe = pe_layer(keys)
    if mode == "pe":
        return pe
    centred = pe - pe.mean(axis=1, keepdims=True)
    return ad.concat([pe, centred], axis=-1)


def dynamic_mask(keys, mask_mlp: DynamicMask, pe_layer: PositionalEncoding | None = None,
                 mode: str = "pe") -> Tensor:
    keys = keys.data if isinstance(keys, Tensor) else np.asarray(keys, dtype=np.float64)
    return mask_mlp(mask_features(keys, pe_layer, mode))


# -- party dropout and aggregation -----------------------------------------------


def dropped_count(rate: float, k: int) -> int:
    """``round(rate * k)``, capped so one party survives unless ``rate == 1``.

    ``rate == 1`` drops every secondary: the decoder then sees an all-zero
    memory and nothing is uploaded.
    """
    if not 0 <= rate <= 1:
        raise ContractError(f"party dropout rate must be in [0, 1], got {rate}")
    if k < 1:
        raise ContractError("no parties to drop from")
    if rate == 1:
        return k
    return min(int(math.floor(rate * k + 0.5)), k - 1)


def party_dropout(reps: list, rate: float, training: bool, rng: np.random.Generator):
    """Return ``(surviving indices, active_count)`` for one training step."""
    k = len(reps)
    drop = dropped_count(rate, k) if training else 0
    if drop == 0:
        return list(range(k)), k
    dropped = set(rng.choice(k, size=drop, replace=False).tolist())
    survivors = [h for h in range(k) if h not in dropped]
    return survivors, len(survivors)


def aggregate_concat(reps: list[Tensor], privacy: PrivacySpec | None = None) -> Tensor:
    """SplitNN-style aggregation: concatenate party representations on the hidden axis."""
    if privacy is not None and privacy.enabled and privacy.noise_multiplier > 0:
        raise ContractError("concat aggregation has no DP analysis; disable noise")
    return reps[0] if len(reps) == 1 else ad.concat(reps, axis=-1)


@dataclass
class CommunicationLog:
    """Counts representation payload bytes uploaded by secondary parties."""

    bytes_uploaded: int = 0
    uploads: int = 0
    per_party: dict = field(default_factory=dict)

    def add(self, party: int, nbytes: int) -> None:
        self.bytes_uploaded += nbytes
        self.uploads += 1
        self.per_party[party] = self.per_party.get(party, 0) + nbytes


# -- party models -----------------------------------------------------------------


class PartyModel(Module):
    """One party's encoder; the primary additionally owns the decoder and head."""

    def __init__(self, config: ModelConfig, num_features: int, rng, primary: bool = False,
                 out_dim: int = 1, num_secondary: int = 1):
        h = config.hidden_size
        self.primary = primary
        self.embed = Linear(num_features, h, rng)
        self.pe = PositionalEncoding(config.key_dims, h, rng, config.pe_max_frequency,
                                     zero_init=config.pe_init == "zero")
        self.blocks = [EncoderBlock(h, config.num_heads, rng, config.ffn_mult, config.dropout)
                       for _ in range(config.num_blocks)]
        self.norm = LayerNorm(h)
        self.mask_mlp = None
        if not primary and config.dynamic_mask:
            in_dim = {"raw": config.key_dims, "pe": h, "pe_context": 2 * h,
                      "raw_context": 2 * config.key_dims,
                      "neighborhood": config.key_dims}[config.mask_input]
            self.mask_mlp = DynamicMask(in_dim, config.mask_hidden, rng, config.num_neighbors,
                                        joint=config.mask_input == "neighborhood")
        if primary:
            mem_in = h * num_secondary if config.aggregator_mode == "concat" else h
            self.memory_proj = Linear(mem_in, h, rng) if mem_in != h else None
            self.memory_norm = LayerNorm(h)
            self.decoder = [DecoderBlock(h, config.num_heads, rng, config.ffn_mult, config.dropout)
                            for _ in range(config.num_blocks)]
            self.out_norm = LayerNorm(h)
            self.head = Linear(h, out_dim, rng)

    def encode(self, features: np.ndarray, keys: np.ndarray, key_mask=None) -> Tensor:
        x = self.embed(Tensor(features)) + self.pe(keys)
        for block in self.blocks:
            x = block(x, key_mask)
        return self.norm(x)

    def mask(self, keys: np.ndarray, mode: str) -> Tensor | None:
        if self.mask_mlp is None:
            return None
        return dynamic_mask(keys, self.mask_mlp, self.pe, mode)

    def decode(self, query: Tensor, memory: Tensor, memory_mask=None) -> Tensor:
        if self.memory_proj is not None:
            memory = self.memory_proj(memory)
        memory = self.memory_norm(memory)
        x = query
        for block in self.decoder:
            x = block(x, memory, memory_mask)
        out = self.head(self.out_norm(x))
        return out.reshape(out.shape[0], out.shape[-1])


@dataclass
class StepContext:
    """Identifies one forward pass for reproducible randomness."""

    seed: int = 0
    epoch: int = 0
    batch: int = 0
    training: bool = False


class FederatedTransformer(Module):
    """All party models plus the aggregation protocol between them."""

    def __init__(self, config: ModelConfig, primary_features: int, secondary_features: list[int],
                 out_dim: int, seed: int = 0):
        config.validate()
        if len(secondary_features) != config.num_parties:
            raise DimensionError(
                f"config declares {config.num_parties} secondary parties, got {len(secondary_features)}"
            )
        self.config = config
        self.out_dim = out_dim
        self.feature_dims = [primary_features] + list(secondary_features)
        seeds = np.random.SeedSequence(seed).spawn(len(secondary_features) + 1)
        self.primary = PartyModel(config, primary_features, np.random.default_rng(seeds[0]),
                                  primary=True, out_dim=out_dim,
                                  num_secondary=len(secondary_features))
        self.secondaries = [PartyModel(config, d, np.random.default_rng(s))
                            for d, s in zip(secondary_features, seeds[1:])]
        self.comm = CommunicationLog()
        self.comm_eval = CommunicationLog()
        self.aggregator: SecureAggregator | None = None

    @property
    def parties(self) -> list[PartyModel]:
        return [self.primary] + self.secondaries

    def average_positional_encodings(self) -> None:
        pe_average([p.pe for p in self.parties])

    def forward(self, batch: LinkedBatch, privacy: PrivacySpec | None = None,
                ctx: StepContext | None = None) -> Tensor:
        cfg = self.config
        ctx = ctx or StepContext()
        privacy = privacy or PrivacySpec(num_parties=cfg.num_parties)
        k = cfg.num_parties
        if batch.num_parties != k:
            raise DimensionError(f"batch links {batch.num_parties} parties, model has {k}")
        b = batch.batch_size
        prim_feat = batch.primary_features.reshape(b, 1, -1)
        prim_keys = batch.primary_keys.reshape(b, 1, -1)
        if prim_feat.shape[-1] != self.feature_dims[0]:
            raise DimensionError("primary feature width does not match the model")
        query = self.primary.encode(prim_feat, prim_keys)

        reps, masks = [], []
        for h, party in enumerate(self.secondaries):
            feats, keys = batch.neighbor_features[h], batch.neighbor_keys[h]
            if feats.shape[:2] != (b, cfg.num_neighbors) or feats.shape[-1] != self.feature_dims[h + 1]:
                raise DimensionError(f"party {h + 1} batch shape {feats.shape} does not match the model")
            mask = party.mask(keys, cfg.mask_input)
            reps.append(party.encode(feats, keys, mask))
            masks.append(mask)

        noisy = privacy.enabled and privacy.noise_multiplier > 0 and (ctx.training or privacy.eval_noise)
        if privacy.enabled:
            reps = [clip_representation(r, privacy.clip_norm, k) for r in reps]

        drop_rng = np.random.default_rng(
            np.random.SeedSequence(ctx.seed, spawn_key=(0xD809, ctx.epoch, ctx.batch)))
        survivors, active = party_dropout(reps, cfg.party_dropout, ctx.training, drop_rng)
        log = self.comm if ctx.training else self.comm_eval
        for h in survivors:
            log.add(h + 1, reps[h].data.nbytes)

        if not survivors:
            width = k * cfg.hidden_size if cfg.aggregator_mode == "concat" else cfg.hidden_size
            memory = Tensor(np.zeros((b, cfg.num_neighbors, width)))
        elif cfg.aggregator_mode == "concat":
            kept = [reps[h] if h in survivors else reps[h] * 0.0 for h in range(k)]
            memory = aggregate_concat(kept, privacy)
        else:
            noises = None
            if noisy:
                noises = [draw_party_noise(reps[h].shape, privacy.noise_multiplier,
                                           privacy.clip_norm, active,
                                           noise_stream(ctx.seed, h + 1, ctx.epoch, ctx.batch))
                          for h in survivors]
            aggregator = self.aggregator if privacy.use_mpc else None
            if privacy.use_mpc and aggregator is None:
                aggregator = self.aggregator = SecureAggregator()
            share_rngs = [noise_stream(ctx.seed ^ 0x3C3C, h + 1, ctx.epoch, ctx.batch)
                          for h in survivors]
            memory = secure_aggregate([reps[h] for h in survivors], noises, active,
                                      aggregator, share_rngs)

        memory_mask = None
        if cfg.dynamic_mask and survivors and masks[0] is not None:
            memory_mask = secure_aggregate([masks[h] for h in survivors], None, active)
        return self.primary.decode(query, memory, memory_mask)


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, model: FederatedTransformer, extra: dict | None = None) -> None:
    """Write an ``.npz`` archive; see ``docs/FORMATS.md`` for the layout."""
    arrays = {}
    for i, party in enumerate(model.parties):
        for name, value in party.state_dict().items():
            arrays[f"party{i}/{name}"] = value
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "feature_dims": model.feature_dims,
        "out_dim": model.out_dim,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[FederatedTransformer, dict]:
    with np.load(Path(path)) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {meta.get('format_version')}")
        config = ModelConfig(**meta["config"])
        dims = meta["feature_dims"]
        model = FederatedTransformer(config, dims[0], dims[1:], meta["out_dim"])
        for i, party in enumerate(model.parties):
            prefix = f"party{i}/"
            party.load_state_dict({k[len(prefix):]: archive[k] for k in archive.files
                                   if k.startswith(prefix)})
    return model, meta.get("extra", {})
