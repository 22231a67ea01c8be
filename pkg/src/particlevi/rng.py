"""Counter-based splittable random number streams.

A stream is a pure function of (seed, stream-id, counter): re-creating a
stream from the same coordinates reproduces the same draws, and distinct
stream-ids give statistically independent sequences.  ``split`` derives a
child stream-id by hashing integer labels into the parent id, so callers can
address noise by meaning, e.g. (time-step, particle-index, purpose), instead
of threading sequential generator state through every call site.

The mixer is the splitmix64 finalizer applied to a Weyl sequence offset by
the stream key.  Keying a fresh stream costs a few integer operations, which
is what makes one stream per (step, particle, purpose) affordable inside
hot filter loops.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_SEED_SALT = 0x5851F42D4C957F2D
_STREAM_SALT = 0x14057B7EF767814F
_LABEL_SALT = 0xD1342543DE82EF95

_U_GOLDEN = np.uint64(_GOLDEN)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_SH30 = np.uint64(30)
_SH27 = np.uint64(27)
_SH31 = np.uint64(31)
_SH11 = np.uint64(11)
_INV53 = 2.0 ** -53
_HALF54 = 2.0 ** -54


def _mix_int(z: int) -> int:
    """splitmix64 finalizer on a Python integer (mod 2^64)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wraps mod 2^64)."""
    z = (z ^ (z >> _SH30)) * _U_MIX1
    z = (z ^ (z >> _SH27)) * _U_MIX2
    return z ^ (z >> _SH31)


def _key(seed: int, stream: int) -> int:
    a = _mix_int(seed ^ _SEED_SALT)
    b = _mix_int(stream ^ _STREAM_SALT)
    return _mix_int(a ^ ((b * _GOLDEN) & _MASK))


class RngStream:
    """One reproducible stream of uniforms/normals.

    Draw methods either advance the internal counter (``uniforms``,
    ``normals``) or read at absolute counter offsets without touching state
    (``uniforms_at``, ``normals_at``).  The offset forms let vectorized and
    per-particle code consume bit-identical noise: element k of a batched
    draw equals a lone draw at counter offset k.
    """

    __slots__ = ("seed", "stream", "counter", "_key")

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = seed & _MASK
        self.stream = stream & _MASK
        self.counter = counter
        self._key = _key(self.seed, self.stream)

    def split(self, *labels: int) -> "RngStream":
        """Child stream addressed by integer labels; counter starts at 0."""
        s = self.stream
        for lab in labels:
            s = _mix_int(s ^ ((int(lab) & _MASK) * _LABEL_SALT + _GOLDEN))
        return RngStream(self.seed, s)

    def _raw(self, offsets: np.ndarray) -> np.ndarray:
        z = (np.uint64(self._key) + (offsets + np.uint64(1)) * _U_GOLDEN)
        return _mix_array(z)

    def uniforms_at(self, offsets) -> np.ndarray:
        """Uniforms in [0,1) at absolute counter offsets (stateless read)."""
        offsets = np.asarray(offsets, dtype=np.uint64)
        return (self._raw(offsets) >> _SH11).astype(np.float64) * _INV53

    def normals_at(self, offsets) -> np.ndarray:
        """Standard normals at absolute counter offsets via inverse CDF."""
        offsets = np.asarray(offsets, dtype=np.uint64)
        u = (self._raw(offsets) >> _SH11).astype(np.float64) * _INV53 + _HALF54
        return ndtri(u)

    def uniforms(self, n: int) -> np.ndarray:
        out = self.uniforms_at(np.arange(self.counter, self.counter + n))
        self.counter += n
        return out

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, n: int) -> np.ndarray:
        out = self.normals_at(np.arange(self.counter, self.counter + n))
        self.counter += n
        return out

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"


def batch_keys(seeds, stream: int = 0, labels: tuple = ()) -> np.ndarray:
    """Stream keys for many seeds sharing one split path.

    Row r equals the key of RngStream(seeds[r], stream).split(*labels), so
    batched runs consume bit-identical noise to per-seed streams.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    s = stream & _MASK
    for lab in labels:
        s = _mix_int(s ^ ((int(lab) & _MASK) * _LABEL_SALT + _GOLDEN))
    a = _mix_array(seeds ^ np.uint64(_SEED_SALT))
    b = _mix_int(s ^ _STREAM_SALT)
    return _mix_array(a ^ np.uint64((b * _GOLDEN) & _MASK))


def _raw_keys(keys: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    z = keys[:, None] + (offsets[None, :] + np.uint64(1)) * _U_GOLDEN
    return _mix_array(z)


def uniforms_at_keys(keys, offsets) -> np.ndarray:
    """(len(keys), len(offsets)) uniforms; row r reads key r at the offsets."""
    keys = np.asarray(keys, dtype=np.uint64)
    offsets = np.asarray(offsets, dtype=np.uint64)
    return (_raw_keys(keys, offsets) >> _SH11).astype(np.float64) * _INV53


def normals_at_keys(keys, offsets) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.uint64)
    offsets = np.asarray(offsets, dtype=np.uint64)
    u = (_raw_keys(keys, offsets) >> _SH11).astype(np.float64) * _INV53 + _HALF54
    return ndtri(u)
