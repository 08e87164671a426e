"""Counter-seeded random streams usable from numba kernels.

Every source particle owns an independent stream derived from
``(master_seed, stream_id)``; results therefore do not depend on how the
particles are partitioned across workers.  The generator is xoshiro256**
seeded through splitmix64.
"""
import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_STREAM_MUL = np.uint64(0xD1342543DE82EF95)
_U5 = np.uint64(5)
_U9 = np.uint64(9)
_S7 = np.uint64(7)
_S11 = np.uint64(11)
_S17 = np.uint64(17)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_S45 = np.uint64(45)
_S64 = np.uint64(64)
_TWO_M53 = 2.0 ** -53


@njit(inline="always", error_model="numpy", cache=True)
def _splitmix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(inline="always", error_model="numpy", cache=True)
def _rotl(x, k):
    return (x << k) | (x >> (_S64 - k))


@njit(error_model="numpy", cache=True)
def seed_state(state, seed, stream_id):
    """Fill a uint64[4] ``state`` for stream ``stream_id`` of ``seed``."""
    z = _splitmix(np.uint64(seed))
    z = _splitmix(z ^ (np.uint64(stream_id) * _STREAM_MUL))
    for i in range(4):
        z = _splitmix(z)
        state[i] = z
    if state[0] == 0 and state[1] == 0 and state[2] == 0 and state[3] == 0:
        state[0] = _GOLDEN


@njit(inline="always", error_model="numpy", cache=True)
def next_u64(s):
    result = _rotl(s[1] * _U5, _S7) * _U9
    t = s[1] << _S17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], _S45)
    return result


@njit(inline="always", error_model="numpy", cache=True)
def uniform(s):
    """Uniform double on [0, 1)."""
    return float(next_u64(s) >> _S11) * _TWO_M53


@njit(inline="always", error_model="numpy", cache=True)
def uniform_open(s):
    """Uniform double on (0, 1); safe for ``log``."""
    return (float(next_u64(s) >> _S11) + 0.5) * _TWO_M53


@njit(error_model="numpy", cache=True)
def fill_uniform(s, out):
    for i in range(out.shape[0]):
        out[i] = uniform(s)


class RandomStream:
    """Python handle on one stream; pass ``.state`` into kernels."""

    def __init__(self, seed=0, stream_id=0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.state = np.zeros(4, dtype=np.uint64)
        seed_state(self.state, np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF),
                   np.uint64(self.stream_id & 0xFFFFFFFFFFFFFFFF))

    def random(self, size=None):
        if size is None:
            return float(uniform(self.state))
        out = np.empty(int(size))
        fill_uniform(self.state, out)
        return out

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id})"


def as_stream(rng):
    """Coerce ``None``/int/``RandomStream`` into a ``RandomStream``."""
    if isinstance(rng, RandomStream):
        return rng
    if rng is None:
        return RandomStream(0, 0)
    return RandomStream(int(rng), 0)
