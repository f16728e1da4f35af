"""Splittable uniform random streams.

Every replication owns a lane of xoshiro256++ state. A ``UniformStream``
is a bank of lanes stored column-wise in a ``(4, R)`` uint64 array, so a
single draw advances all replications at once while each lane still
produces exactly the sequence it would produce on its own.
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

MAX_UINT64 = 0xFFFFFFFFFFFFFFFF

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
MIX_MUL2 = np.uint64(0x94D049BB133111EB)
REPLICATION_SALT = np.uint64(0xD1B54A32D192ED03)
SUBSTREAM_SALT = np.uint64(0x8CB92BA72F3D8DD7)

DOUBLE_SCALE = 1.0 / 9007199254740992.0  # 2**-53

# Substream convention
CRN = 0
FIRST = 1
SECOND = 2
RETRY = 3

LaneIndex = Optional[Union[np.ndarray, Sequence[int]]]


def _u64(value: int) -> np.uint64:
    return np.uint64(int(value) & MAX_UINT64)


def splitmix_finalize(z: np.ndarray) -> np.ndarray:
    """SplitMix64 avalanche finalizer applied elementwise."""
    with np.errstate(over='ignore'):
        z = (z ^ (z >> np.uint64(30))) * MIX_MUL1
        z = (z ^ (z >> np.uint64(27))) * MIX_MUL2
    return z ^ (z >> np.uint64(31))


def rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@dataclass(frozen=True)
class StreamKey:
    """Identifies one stream: a (master, replication, substream) triple."""

    master_seed: int
    replication_index: int = 0
    substream_index: int = 0

    def __post_init__(self):
        if self.replication_index < 0 or self.substream_index < 0:
            raise ValueError("replication and substream indices must be nonnegative")


def seed_words(master_seed: int, replications: np.ndarray, substreams: np.ndarray) -> np.ndarray:
    """Expand key triples into xoshiro256++ states of shape (4, R)."""
    replications = np.asarray(replications, dtype=np.uint64)
    substreams = np.asarray(substreams, dtype=np.uint64)
    with np.errstate(over='ignore'):
        h = splitmix_finalize(np.full(replications.shape, _u64(master_seed)) + GOLDEN_GAMMA)
        h = splitmix_finalize(h ^ splitmix_finalize(replications * GOLDEN_GAMMA + REPLICATION_SALT))
        h = splitmix_finalize(h ^ splitmix_finalize(substreams * GOLDEN_GAMMA + SUBSTREAM_SALT))
        state = np.empty((4,) + replications.shape, dtype=np.uint64)
        x = h
        for i in range(4):
            x = x + GOLDEN_GAMMA
            state[i] = splitmix_finalize(x)
    return state


class UniformStream:
    """A bank of independent xoshiro256++ lanes producing uniforms on [0, 1)."""

    def __init__(self, state: np.ndarray):
        state = np.array(state, dtype=np.uint64)
        if state.ndim != 2 or state.shape[0] != 4:
            raise ValueError("stream state must have shape (4, lanes)")
        self._s = state
        self.draw_count = np.zeros(state.shape[1], dtype=np.int64)

    @classmethod
    def from_state(cls, state) -> "UniformStream":
        """Build a stream from raw state words, one column per lane."""
        return cls(np.asarray(state, dtype=np.uint64).reshape(4, -1))

    @classmethod
    def from_keys(cls, keys: Iterable[StreamKey]) -> "UniformStream":
        keys = list(keys)
        if not keys:
            raise ValueError("at least one stream key is required")
        masters = {k.master_seed for k in keys}
        if len(masters) == 1:
            return cls(seed_words(
                keys[0].master_seed,
                np.array([k.replication_index for k in keys]),
                np.array([k.substream_index for k in keys]),
            ))
        columns = [seed_words(k.master_seed, np.array([k.replication_index]),
                              np.array([k.substream_index])) for k in keys]
        return cls(np.concatenate(columns, axis=1))

    @classmethod
    def for_replications(cls, master_seed: int, replications, substream: int) -> "UniformStream":
        replications = np.asarray(replications, dtype=np.uint64)
        return cls(seed_words(master_seed, replications, np.full(replications.shape, substream)))

    def __len__(self) -> int:
        return self._s.shape[1]

    @property
    def lanes(self) -> int:
        return self._s.shape[1]

    def clone(self) -> "UniformStream":
        other = UniformStream(self._s.copy())
        other.draw_count = self.draw_count.copy()
        return other

    def next_raw(self, lanes: LaneIndex = None) -> np.ndarray:
        """Advance the selected lanes (all by default) and return their 64-bit words."""
        if lanes is None:
            s0, s1, s2, s3 = self._s
        else:
            lanes = np.asarray(lanes, dtype=np.intp)
            s0, s1, s2, s3 = self._s[:, lanes]
        with np.errstate(over='ignore'):
            result = rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = rotl(s3, 45)
        if lanes is None:
            self._s[0], self._s[1], self._s[2], self._s[3] = s0, s1, s2, s3
            self.draw_count += 1
        else:
            self._s[0, lanes] = s0
            self._s[1, lanes] = s1
            self._s[2, lanes] = s2
            self._s[3, lanes] = s3
            self.draw_count[lanes] += 1
        return result

    def next_uniform(self, lanes: LaneIndex = None) -> np.ndarray:
        """Top 53 bits of the next word scaled by 2**-53; always in [0, 1)."""
        return (self.next_raw(lanes) >> np.uint64(11)).astype(np.float64) * DOUBLE_SCALE

    def uniforms(self, count: int, lanes: LaneIndex = None) -> np.ndarray:
        """Draw ``count`` successive uniforms per lane as a (count, lanes) matrix."""
        width = self.lanes if lanes is None else len(lanes)
        out = np.empty((count, width), dtype=np.float64)
        for i in range(count):
            out[i] = self.next_uniform(lanes)
        return out


def derive_stream(key: StreamKey) -> UniformStream:
    """Single-lane stream for ``key``; the same key always yields the same stream."""
    return UniformStream.from_keys([key])


def next_uniform(stream: UniformStream) -> float:
    """Next uniform of a single-lane stream as a Python float."""
    if stream.lanes != 1:
        raise ValueError("next_uniform() expects a single-lane stream; use stream.next_uniform()")
    return float(stream.next_uniform()[0])


@dataclass
class ReplicationStreams:
    """The four substreams of a block of replications."""

    crn: UniformStream
    first: UniformStream
    second: UniformStream
    retry: UniformStream
    replications: np.ndarray

    @classmethod
    def derive(cls, master_seed: int, replications) -> "ReplicationStreams":
        replications = np.atleast_1d(np.asarray(replications, dtype=np.int64))
        if np.any(replications < 0):
            raise ValueError("replication indices must be nonnegative")
        return cls(
            crn=UniformStream.for_replications(master_seed, replications, CRN),
            first=UniformStream.for_replications(master_seed, replications, FIRST),
            second=UniformStream.for_replications(master_seed, replications, SECOND),
            retry=UniformStream.for_replications(master_seed, replications, RETRY),
            replications=replications,
        )

    @property
    def lanes(self) -> int:
        return self.crn.lanes
