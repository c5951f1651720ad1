"""Counter-based normal variates (Philox4x32-10 + Box-Muller).

Every draw is a pure function of ``(seed, replication, agent, node,
component)``, so a simulation gives bit-identical noise whatever the
order in which agents or replications are processed, and agent ``i`` sees
the same idiosyncratic stream for every population size.

Known-answer vectors (Random123):

====================================  =====================  ====================================
counter                               key                    output
====================================  =====================  ====================================
0 0 0 0                               0 0                    6627e8d5 e169c58d bc57ac4c 9b00dbd8
ffffffff x4                           ffffffff ffffffff      408f276d 41c83b0e a20bc7c6 6d5451fd
243f6a88 85a308d3 13198a2e 03707344   a4093822 299f31d0      d16cfe09 94fdcceb 5001e420 24126ea1
====================================  =====================  ====================================
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x32-10/box-muller"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

# agent slot reserved for the common noise W0
COMMON = 0xFFFFFFFF


def philox4x32(counter, key, rounds: int = 10) -> np.ndarray:
    """Vectorised Philox4x32.

    ``counter`` has shape ``(..., 4)``, ``key`` shape ``(..., 2)`` (broadcast);
    words are taken modulo 2**32.  Returns uint32 of shape ``(..., 4)``.
    """
    c = np.asarray(counter, dtype=np.uint64) & _MASK
    k = np.asarray(key, dtype=np.uint64) & _MASK
    c0, c1, c2, c3 = (c[..., i] for i in range(4))
    k0, k1 = k[..., 0], k[..., 1]
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = ((p1 >> _S32) ^ c1 ^ k0, p1 & _MASK,
                          (p0 >> _S32) ^ c3 ^ k1, p0 & _MASK)
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return np.stack(np.broadcast_arrays(c0, c1, c2, c3), axis=-1).astype(np.uint32)


def _seed_key(seed: int) -> np.ndarray:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.uint64)


def normals(seed: int, reps, agents, nodes, dim: int) -> np.ndarray:
    """Standard normals indexed by replication x agent x node x component.

    ``reps``, ``agents`` and ``nodes`` are 1-d integer index arrays; the
    result has shape ``(len(reps), len(agents), len(nodes), dim)``.
    """
    reps = np.asarray(reps, dtype=np.uint64)
    agents = np.asarray(agents, dtype=np.uint64)
    nodes = np.asarray(nodes, dtype=np.uint64)
    pairs = (dim + 1) // 2
    R, A, S = np.meshgrid(reps, agents, nodes, indexing="ij")
    ctr = np.empty(R.shape + (pairs, 4), dtype=np.uint64)
    ctr[..., 0] = S[..., None]
    ctr[..., 1] = np.arange(pairs, dtype=np.uint64)
    ctr[..., 2] = A[..., None]
    ctr[..., 3] = R[..., None]
    bits = philox4x32(ctr, _seed_key(seed)).astype(np.uint64)
    # two 53-bit uniforms per block, mapped into (0, 1]
    scale = 1.0 / 9007199254740992.0
    u1 = (((bits[..., 0] << _S32) | bits[..., 1]) >> np.uint64(11)).astype(float) * scale
    u2 = (((bits[..., 2] << _S32) | bits[..., 3]) >> np.uint64(11)).astype(float) * scale
    u1 = 1.0 - u1
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.stack([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=-1)
    z = z.reshape(R.shape + (2 * pairs,))
    return z[..., :dim]


def signs(seed: int, reps, agents, nodes, dim: int) -> np.ndarray:
    """Rademacher (+1/-1) variates on the same counter layout as :func:`normals`."""
    reps = np.asarray(reps, dtype=np.uint64)
    agents = np.asarray(agents, dtype=np.uint64)
    nodes = np.asarray(nodes, dtype=np.uint64)
    blocks = (dim + 3) // 4
    R, A, S = np.meshgrid(reps, agents, nodes, indexing="ij")
    ctr = np.empty(R.shape + (blocks, 4), dtype=np.uint64)
    ctr[..., 0] = S[..., None]
    ctr[..., 1] = np.arange(blocks, dtype=np.uint64) | np.uint64(0x80000000)
    ctr[..., 2] = A[..., None]
    ctr[..., 3] = R[..., None]
    bits = philox4x32(ctr, _seed_key(seed))
    out = np.where(bits & np.uint32(1), 1.0, -1.0).reshape(R.shape + (4 * blocks,))
    return out[..., :dim]
