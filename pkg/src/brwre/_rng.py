"""Counter-based random numbers keyed by (seed, t, x).

Environment fields must be storage-free and replayable: the value at a
time-space cell is a pure function of the seed and the cell.  We use the
SplitMix64 finalizer as a keyed hash; a uniform is the top 53 bits of the
hash, shifted off the endpoints so that inverse-CDF transforms stay finite.
"""

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)


def _mix(z):
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _as_u64(v):
    return np.asarray(v, dtype=np.int64).astype(np.uint64)


def keyed_hash(seed, t, coords, stream=0):
    """64-bit hash for each row of ``coords`` at time ``t``.

    ``coords`` has shape (n, d) (or (d,) for a single site).
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
    n = coords.shape[0]
    h = _mix(np.full(n, np.uint64(seed & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64))
    h = _mix(h ^ _as_u64(np.full(n, stream)))
    h = _mix(h ^ _as_u64(np.broadcast_to(t, (n,))))
    for j in range(coords.shape[1]):
        h = _mix(h ^ _as_u64(coords[:, j]))
    return h


def keyed_uniform(seed, t, coords, stream=0):
    """Uniforms in the open interval (0, 1), one per site."""
    h = keyed_hash(seed, t, coords, stream)
    return ((h >> _S11).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def keyed_normal(seed, t, coords, stream=0):
    """Standard normals by exact inverse-CDF transform of keyed uniforms."""
    return ndtri(keyed_uniform(seed, t, coords, stream))


def derive_seed(*keys):
    """Deterministic 64-bit seed from a tuple of nonnegative integers."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def replica_streams(master_seed, replica):
    """(environment seed, branching generator) for one replica."""
    env_seed = derive_seed(master_seed, replica, 0)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, replica, 1])))
    return env_seed, rng
