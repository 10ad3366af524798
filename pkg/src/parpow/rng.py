"""Counter-based randomness and run provenance.

Every draw is a pure function of ``(seed, stream_id, counter)``: the stream key
is derived from seed and stream id, and the draw at position ``counter`` is a
SplitMix64 finalizer applied to ``key + (counter + 1) * GOLDEN``.  The same
function is compiled into the simulation kernels, so Python-side draws and
kernel-side draws agree bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numba
import numpy as np

from parpow import __version__

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53

_MASK64 = (1 << 64) - 1


class ParameterError(ValueError):
    """A parameter lies outside its documented domain."""


@numba.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@numba.njit(cache=True, inline="always")
def uniform_at(key, counter):
    """Uniform double in [0, 1) at position ``counter`` of the stream ``key``."""
    z = mix64(key + (counter + _ONE) * GOLDEN)
    return np.float64(z >> _S11) * _INV53


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, stream_id: int) -> int:
    """Derive the 64-bit key of stream ``stream_id`` under ``seed``."""
    if not (0 <= seed <= _MASK64 and 0 <= stream_id <= _MASK64):
        raise ParameterError("seed and stream_id must be unsigned 64-bit integers")
    return _mix64_int(_mix64_int(seed) ^ _mix64_int(stream_id + 0x632BE59BD9B4E019))


def uniforms_at(key: int, start: int, n: int) -> np.ndarray:
    """Vectorised draws at positions ``start .. start+n-1`` of stream ``key``."""
    with np.errstate(over="ignore"):
        ctr = np.arange(n, dtype=np.uint64) + np.uint64(start + 1)
        z = np.uint64(key) + ctr * GOLDEN
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        z = z ^ (z >> _S31)
    return (z >> _S11).astype(np.float64) * _INV53


@dataclass
class RngStream:
    """One logical stream of draws.  Not shared between tasks."""

    seed: int
    stream_id: int = 0
    counter: int = 0
    key: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.key = stream_key(self.seed, self.stream_id)

    def next_uniform(self) -> float:
        u = float(uniform_at(np.uint64(self.key), np.uint64(self.counter)))
        self.counter += 1
        return u

    def uniforms(self, n: int) -> np.ndarray:
        out = uniforms_at(self.key, self.counter, n)
        self.counter += n
        return out

    def next_bernoulli(self, alpha: float) -> bool:
        """True (adversarial) with probability ``alpha``."""
        check_fraction("alpha", alpha)
        return self.next_uniform() < alpha

    def spawn(self, stream_id: int) -> RngStream:
        return RngStream(self.seed, stream_id)


def check_fraction(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ParameterError(f"{name}={value!r} outside [0, 1]")


@dataclass(frozen=True)
class RunStamp:
    seed: int
    config_digest: bytes
    tool_version: str = __version__

    @classmethod
    def for_config(cls, seed: int, config: dict) -> RunStamp:
        return cls(seed, config_digest(config))

    def header_lines(self) -> list[str]:
        return [
            f"tool_version: {self.tool_version}",
            f"seed: {self.seed}",
            f"config_digest: {self.config_digest.hex()}",
        ]


def canonical_json(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(canonical_json(config).encode()).digest()
