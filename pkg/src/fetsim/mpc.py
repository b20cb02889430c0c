"""Additive secret sharing over the ring Z_{2^64} with fixed-point encoding.

The network is simulated in-process. Every message a party would send is
recorded in a :class:`Transcript` using the wire layout below, so tests can
inspect exactly what each participant (and the aggregator) observes.

Wire format of one message (all little-endian)::

    offset  size  field
    0       4     round id      (uint32)
    4       4     sender id     (uint32)
    8       4     receiver id   (uint32, 0xFFFFFFFF = aggregator)
    12      8     vector length (uint64, number of ring elements n)
    20      4     scale         (uint32, fractional bits f)
    24      8n    payload       (n x uint64 ring elements)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ContractError

DEFAULT_SCALE = 24
AGGREGATOR = 0xFFFFFFFF
SHARE_ROUND = 0
PARTIAL_ROUND = 1
RESULT_ROUND = 2

_HEADER = struct.Struct("<IIIQI")


@dataclass
class FixedPointVector:
    values: np.ndarray
    scale: int = DEFAULT_SCALE

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class ShareVector:
    """``party_shares[j]`` is the share destined for participant ``j``."""

    party_shares: list[np.ndarray]
    share_of: int
    scale: int = DEFAULT_SCALE


def encode(x, scale: int = DEFAULT_SCALE) -> FixedPointVector:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ContractError("cannot encode non-finite values")
    limit = 2.0 ** (63 - scale)
    if x.size and np.max(np.abs(x)) >= limit:
        raise ContractError(f"value magnitude exceeds fixed-point headroom 2^{63 - scale}")
    ints = np.rint(x * (1 << scale)).astype(np.int64)
    return FixedPointVector(ints.view(np.uint64), scale)


def decode(v: FixedPointVector) -> np.ndarray:
    return v.values.view(np.int64).astype(np.float64) / float(1 << v.scale)


def _uniform_ring(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, np.iinfo(np.uint64).max, size=n, dtype=np.uint64, endpoint=True)


def share(x: FixedPointVector, k: int, rng: np.random.Generator, owner: int = 0) -> ShareVector:
    """Split ``x`` into ``k`` shares; the owner keeps the one that closes the sum."""
    if k < 2:
        raise ContractError(f"secret sharing needs at least 2 parties, got {k}")
    if not 0 <= owner < k:
        raise ContractError(f"owner {owner} is not one of {k} participants")
    shares = [None] * k
    total = np.zeros(len(x), dtype=np.uint64)
    for j in range(k):
        if j == owner:
            continue
        shares[j] = _uniform_ring(rng, len(x))
        total += shares[j]
    shares[owner] = x.values - total
    return ShareVector(shares, owner, x.scale)


def reconstruct(sv: ShareVector) -> FixedPointVector:
    total = np.zeros_like(sv.party_shares[0])
    for s in sv.party_shares:
        total += s
    return FixedPointVector(total, sv.scale)


@dataclass
class Message:
    round_id: int
    sender: int
    receiver: int
    payload: np.ndarray
    scale: int = DEFAULT_SCALE

    def to_bytes(self) -> bytes:
        payload = np.ascontiguousarray(self.payload, dtype="<u8")
        header = _HEADER.pack(self.round_id, self.sender, self.receiver, payload.shape[0], self.scale)
        return header + payload.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Message":
        round_id, sender, receiver, length, scale = _HEADER.unpack_from(data)
        payload = np.frombuffer(data, dtype="<u8", count=length, offset=_HEADER.size)
        return cls(round_id, sender, receiver, payload.astype(np.uint64), scale)

    @property
    def nbytes(self) -> int:
        return _HEADER.size + 8 * self.payload.shape[0]


@dataclass
class Transcript:
    messages: list[Message] = field(default_factory=list)

    def record(self, msg: Message) -> None:
        self.messages.append(msg)

    def sent_by(self, sender: int, round_id: int | None = None) -> list[Message]:
        return [m for m in self.messages
                if m.sender == sender and (round_id is None or m.round_id == round_id)]

    def seen_by_aggregator(self) -> list[Message]:
        return [m for m in self.messages if m.receiver == AGGREGATOR]

    @property
    def nbytes(self) -> int:
        return sum(m.nbytes for m in self.messages)


def secure_sum(share_vectors: list[ShareVector], transcript: Transcript | None = None) -> FixedPointVector:
    """Sum every owner's secret from their share vectors.

    Participant ``j`` adds up the ``j``-th share of every owner and forwards
    only that partial sum to the aggregator, which adds the partials.
    """
    if not share_vectors:
        raise ContractError("secure_sum needs at least one share vector")
    k = len(share_vectors[0].party_shares)
    n = share_vectors[0].party_shares[0].shape[0]
    scale = share_vectors[0].scale
    for sv in share_vectors:
        if len(sv.party_shares) != k or sv.scale != scale:
            raise ContractError("share vectors disagree on party count or scale")
        if any(s.shape != (n,) for s in sv.party_shares):
            raise ContractError("share vectors disagree on length")
    if transcript is not None:
        for sv in share_vectors:
            for j, s in enumerate(sv.party_shares):
                if j != sv.share_of:
                    transcript.record(Message(SHARE_ROUND, sv.share_of, j, s, scale))
    total = np.zeros(n, dtype=np.uint64)
    for j in range(k):
        partial = np.zeros(n, dtype=np.uint64)
        for sv in share_vectors:
            partial += sv.party_shares[j]
        if transcript is not None:
            transcript.record(Message(PARTIAL_ROUND, j, AGGREGATOR, partial, scale))
        total += partial
    if transcript is not None:
        transcript.record(Message(RESULT_ROUND, AGGREGATOR, AGGREGATOR, total, scale))
    return FixedPointVector(total, scale)


class SecureAggregator:
    """Runs the share / partial-sum protocol for one aggregation call."""

    def __init__(self, scale: int = DEFAULT_SCALE, record: bool = False):
        self.scale = scale
        self.record = record
        self.transcript = Transcript() if record else None
        self.rounds = 0

    def sum(self, plaintexts: list[np.ndarray], rngs: list[np.random.Generator]) -> np.ndarray:
        shape = np.shape(plaintexts[0])
        k = len(plaintexts)
        if k < 2:
            raise ContractError("secure aggregation needs at least 2 participants")
        svs = [share(encode(p, self.scale), k, rng, owner=i)
               for i, (p, rng) in enumerate(zip(plaintexts, rngs))]
        total = secure_sum(svs, self.transcript)
        self.rounds += 1
        return decode(total).reshape(shape)


@dataclass
class LeakageReport:
    p_values: dict[int, float]
    alpha: float
    verbatim_hits: int
    passed: bool

    @property
    def min_p_value(self) -> float:
        return min(self.p_values.values()) if self.p_values else 1.0


def byte_uniformity_pvalue(words: np.ndarray) -> float:
    """Chi-square p-value of a uniform byte histogram over uint64 words."""
    data = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    counts = np.bincount(data, minlength=256)
    return float(stats.chisquare(counts).pvalue)


def transcript_leakage_check(transcript: Transcript, plaintexts: dict[int, np.ndarray] | None = None,
                             alpha: float = 0.01) -> LeakageReport:
    """Test each party's outgoing share stream for uniformity and for verbatim plaintext.

    ``plaintexts`` maps a party id to its encoded (uint64) input. The
    uniformity threshold is Bonferroni-corrected over the tested streams.
    """
    streams: dict[int, list[np.ndarray]] = {}
    for m in transcript.messages:
        if m.round_id == SHARE_ROUND:
            streams.setdefault(m.sender, []).append(m.payload)
    p_values = {s: byte_uniformity_pvalue(np.concatenate(ws)) for s, ws in streams.items()}
    hits = 0
    if plaintexts:
        for m in transcript.messages:
            if m.round_id == RESULT_ROUND:
                continue
            for secret in plaintexts.values():
                secret = np.asarray(secret, dtype=np.uint64)
                if secret.shape == m.payload.shape:
                    hits += int(np.count_nonzero(secret == m.payload))
    threshold = alpha / max(len(p_values), 1)
    passed = hits == 0 and all(p > threshold for p in p_values.values())
    return LeakageReport(p_values, alpha, hits, passed)
