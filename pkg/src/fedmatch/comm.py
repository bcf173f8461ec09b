"""Thresholded sparse-delta coding of parameter vectors plus cost accounting.

A delta holds the coordinates where a vector moved by at least the
threshold since the last synchronized reference; applying it to that
reference reconstructs the sender's vector to within the threshold per
element. Costs are counted in transmitted (index, value) entries against
a dense-transfer baseline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptDeltaError

_HEADER = struct.Struct("<QQ")
_PAIR_DTYPE = np.dtype([("index", "<u8"), ("value", "<f8")])

DEFAULT_THRESHOLD = 2e-5  # mid-range of the 1e-5..5e-5 band that preserves accuracy


@dataclass(frozen=True)
class SparseDelta:
    """The coordinates that moved by at least the threshold, as (index, value) pairs.

    Values hold the sender's new coordinate values rather than the raw
    differences: overwriting reconstructs transmitted coordinates bit-exactly,
    whereas adding a rounded difference to the reference can land one ulp off,
    which would break the lossless zero-threshold case. The wire size is the
    same either way.
    """

    indices: np.ndarray
    values: np.ndarray
    dense_len: int
    threshold: float

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)
        if indices.shape != values.shape or indices.ndim != 1:
            raise CorruptDeltaError("indices and values must be matching 1-D arrays")
        if self.threshold < 0:
            raise CorruptDeltaError("threshold must be non-negative")
        if indices.size:
            if indices[0] < 0 or indices[-1] >= self.dense_len:
                raise CorruptDeltaError("index out of range for dense length")
            if np.any(np.diff(indices) <= 0):
                raise CorruptDeltaError("indices must be strictly increasing")

    @property
    def n_entries(self) -> int:
        return int(self.indices.size)

    def to_bytes(self) -> bytes:
        pairs = np.empty(self.n_entries, dtype=_PAIR_DTYPE)
        pairs["index"] = self.indices
        pairs["value"] = self.values
        return _HEADER.pack(self.dense_len, self.n_entries) + pairs.tobytes()


def delta_from_bytes(buf: bytes) -> SparseDelta:
    """Parse the wire format; the threshold is not on the wire."""
    if len(buf) < _HEADER.size:
        raise CorruptDeltaError("record shorter than its header")
    dense_len, count = _HEADER.unpack_from(buf)
    expected = _HEADER.size + count * _PAIR_DTYPE.itemsize
    if len(buf) != expected:
        raise CorruptDeltaError(f"expected {expected} bytes, got {len(buf)}")
    pairs = np.frombuffer(buf, dtype=_PAIR_DTYPE, offset=_HEADER.size)
    return SparseDelta(
        indices=pairs["index"].astype(np.int64),
        values=pairs["value"].astype(np.float64),
        dense_len=int(dense_len),
        threshold=0.0,
    )


def diff(local: np.ndarray, reference: np.ndarray, threshold: float) -> SparseDelta:
    """Entries where |local - reference| reaches the threshold."""
    local = np.asarray(local, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if local.shape != reference.shape or local.ndim != 1:
        raise ValueError("local and reference must be 1-D vectors of equal length")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    d = local - reference
    mask = (np.abs(d) >= threshold) & (d != 0.0)
    idx = np.nonzero(mask)[0]
    return SparseDelta(
        indices=idx, values=local[idx], dense_len=local.shape[0], threshold=threshold
    )


def apply(reference: np.ndarray, delta: SparseDelta) -> np.ndarray:
    """The reference updated with the delta's values at its listed indices."""
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim != 1 or reference.shape[0] != delta.dense_len:
        raise CorruptDeltaError(
            f"delta encodes length {delta.dense_len}, reference has {reference.shape}"
        )
    out = reference.copy()
    out[delta.indices] = delta.values
    return out


@dataclass
class RoundCosts:
    """Transmitted-entry counts for one round, per direction."""

    round_no: int
    s2c_dense: int = 0
    c2s_dense: int = 0
    s2c_entries: int = 0
    c2s_entries: int = 0
    helper_entries: int = 0

    @property
    def s2c_pct(self) -> float:
        if self.s2c_dense == 0:
            return 0.0
        return 100.0 * (self.s2c_entries + self.helper_entries) / self.s2c_dense

    @property
    def c2s_pct(self) -> float:
        if self.c2s_dense == 0:
            return 0.0
        return 100.0 * self.c2s_entries / self.c2s_dense


@dataclass
class CostLedger:
    """Per-round communication record. Helper payloads count into s2c."""

    rounds: list[RoundCosts] = field(default_factory=list)

    def open_round(self, round_no: int, s2c_dense: int, c2s_dense: int) -> RoundCosts:
        costs = RoundCosts(round_no=round_no, s2c_dense=s2c_dense, c2s_dense=c2s_dense)
        self.rounds.append(costs)
        return costs

    @property
    def current(self) -> RoundCosts:
        if not self.rounds:
            raise RuntimeError("no round opened yet")
        return self.rounds[-1]

    def record_round(self, direction: str, deltas, helper_deltas=()) -> None:
        """Add transmitted entries for the open round."""
        if direction not in ("s2c", "c2s"):
            raise ValueError(f"direction must be s2c or c2s, got {direction!r}")
        entries = sum(d.n_entries for d in deltas)
        if direction == "s2c":
            self.current.s2c_entries += entries
            self.current.helper_entries += sum(d.n_entries for d in helper_deltas)
        else:
            if helper_deltas:
                raise ValueError("helper payloads only travel server-to-client")
            self.current.c2s_entries += entries

    def record_dense(self, direction: str, entries: int) -> None:
        """Account a dense transfer (baseline methods ship full vectors)."""
        if direction == "s2c":
            self.current.s2c_entries += entries
        elif direction == "c2s":
            self.current.c2s_entries += entries
        else:
            raise ValueError(f"direction must be s2c or c2s, got {direction!r}")
