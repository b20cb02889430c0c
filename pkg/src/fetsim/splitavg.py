"""Norm clipping, distributed Gaussian noise and (secure) averaging of representations.

Each secondary party clips its per-sample representation to norm ``C/k``,
so the sum over ``k`` parties has norm at most ``C``. Every active party adds
its own Gaussian share of the noise before the sum is formed; the shares are
calibrated so the summed noise has per-coordinate variance ``(C * sigma)^2``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .mpc import SecureAggregator


@dataclass
class PrivacySpec:
    """SplitAvg settings. ``epsilon`` is the budget cap checked during training."""

    epsilon: float | None = None
    delta: float = 1e-5
    noise_multiplier: float = 0.0
    clip_norm: float = 1.0
    subsample_rate: float = 1.0
    num_parties: int = 1
    enabled: bool = False
    use_mpc: bool = False
    eval_noise: bool = True
    accountant: str = "rdp"

    def validate(self, num_records: int | None = None, k_neighbors: int | None = None) -> "PrivacySpec":
        if not 0 < self.subsample_rate <= 1:
            raise ContractError(f"subsample_rate must be in (0, 1], got {self.subsample_rate}")
        if not 0 < self.delta < 1:
            raise ContractError(f"delta must be in (0, 1), got {self.delta}")
        if self.noise_multiplier < 0:
            raise ContractError("noise_multiplier must be >= 0")
        if self.num_parties < 1:
            raise ContractError("num_parties must be >= 1")
        if self.epsilon is not None and self.epsilon < 0:
            raise ContractError("epsilon must be >= 0")
        if self.enabled and not (self.noise_multiplier > 0 and self.clip_norm > 0):
            raise ContractError("an enabled PrivacySpec needs noise_multiplier > 0 and clip_norm > 0")
        if num_records is not None and k_neighbors is not None:
            if np.floor(self.subsample_rate * num_records + 1e-9) < k_neighbors:
                raise ContractError(
                    f"q*N = {self.subsample_rate * num_records:g} cannot supply K = {k_neighbors}"
                )
        return self

    def to_dict(self) -> dict:
        return asdict(self)


CLIP_MARGIN = 1e-12


def clip_representation(rep, clip_norm: float, num_parties: int) -> Tensor:
    """Rescale each sample (axis 0) so its flattened L2 norm is at most ``C / k``.

    The target sits ``CLIP_MARGIN`` below ``C / k`` so that the sum of ``k``
    clipped vectors stays within ``C`` after floating-point rounding, even
    when all of them point the same way.
    """
    if clip_norm <= 0 or num_parties < 1:
        raise ContractError("clipping needs C > 0 and k >= 1")
    rep = ad._lift(rep)
    axes = tuple(range(1, rep.ndim))
    norms = ad.sqrt(ad.square(rep).sum(axis=axes) + 1e-300)
    bound = clip_norm / num_parties * (1.0 - CLIP_MARGIN)
    factor = ad.maximum(norms * (1.0 / bound), 1.0)
    factor = factor.reshape((rep.shape[0],) + (1,) * (rep.ndim - 1))
    return rep * ad.reciprocal(factor)


def per_sample_norms(rep) -> np.ndarray:
    data = rep.data if isinstance(rep, Tensor) else np.asarray(rep)
    return np.sqrt((data.reshape(data.shape[0], -1) ** 2).sum(axis=1))


def party_noise_std(noise_multiplier: float, clip_norm: float, active_count: int) -> float:
    """Per-party std so that ``active_count`` independent draws sum to std ``C * sigma``."""
    if active_count < 1:
        raise ContractError("no active parties to carry the noise")
    return clip_norm * noise_multiplier / np.sqrt(active_count)


def draw_party_noise(shape, noise_multiplier: float, clip_norm: float, active_count: int,
                     rng: np.random.Generator) -> np.ndarray:
    std = party_noise_std(noise_multiplier, clip_norm, active_count)
    if std == 0:
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


def noise_stream(seed: int, party: int, epoch: int, batch: int) -> np.random.Generator:
    """Independent, reproducible noise stream owned by one party for one step."""
    seq = np.random.SeedSequence(seed, spawn_key=(0x5A17, party, epoch, batch))
    return np.random.default_rng(seq)


def secure_aggregate(clipped: list, noises: list | None = None, active_count: int | None = None,
                     aggregator: SecureAggregator | None = None,
                     share_rngs: list[np.random.Generator] | None = None) -> Tensor:
    """Dropout-corrected mean ``(sum(clipped) + sum(noise)) / active_count``.

    With an ``aggregator`` the noisy inputs are summed through secret sharing;
    the gradient with respect to each input is ``1 / active_count`` either way.
    """
    if not clipped:
        raise ContractError("secure_aggregate needs at least one active party")
    active_count = len(clipped) if active_count is None else active_count
    if active_count < 1:
        raise ContractError("active_count must be >= 1")
    inputs = [ad._lift(c) for c in clipped]
    plain = [t.data for t in inputs]
    if noises is not None:
        if len(noises) != len(plain):
            raise ContractError("one noise draw is needed per active party")
        plain = [p + n for p, n in zip(plain, noises)]
    if aggregator is not None and len(plain) >= 2:
        if share_rngs is None:
            share_rngs = [np.random.default_rng(i) for i in range(len(plain))]
        total = aggregator.sum(plain, share_rngs)
    else:
        total = np.stack(plain).sum(axis=0)
    out = total / active_count

    def backward(g):
        return tuple(g / active_count for _ in inputs)

    return ad._make(out, inputs, backward)


def amplify_by_subsampling(epsilon: float, delta: float, q: float) -> tuple[float, float]:
    """Subsampling at rate ``q`` turns an ``(eps, delta)`` guarantee into ``(q eps, q delta)``."""
    if not 0 < q <= 1:
        raise ContractError(f"sampling rate must be in (0, 1], got {q}")
    return q * epsilon, q * delta
