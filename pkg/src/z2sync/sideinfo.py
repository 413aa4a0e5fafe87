"""Per-block GOE side information split by the parameter ``t``.

For block ``B`` and each direction ``a`` with neighbour ``B' = B + L a`` there
are three families of Gaussian observations ``sqrt(snr) theta_u theta_v + Z``:

* ``bullet``: all pairs of ``B``, ``snr = t eta / |B|``
* ``cap``: pairs of ``B ∩ B'``, ``snr = (1 - t) eta / |B ∩ B'|``
* ``minus``: pairs of ``B \\ B'``, ``snr = (1 - t) eta / |B \\ B'|``

Pairs are unordered with ``u != v``.  Observations are drawn directly from
``theta`` with fresh noise keyed by (block, direction, family), which has the
same law as splitting a single spiked-GOE stream with :func:`split_gaussian`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BlockPartition, directions
from .model import LatticeInstance
from .rng import stream

FAMILIES = ("bullet", "cap", "minus")


def split_gaussian(obs, rng: np.random.Generator):
    """Two independent copies of ``obs = s x + Z``, each ``(s / sqrt 2) x + Z'``.

    Returns ``((obs + W) / sqrt 2, (obs - W) / sqrt 2)`` with fresh ``W``.
    """
    obs = np.asarray(obs, dtype=np.float64)
    w = rng.standard_normal(obs.shape)
    return (obs + w) / math.sqrt(2.0), (obs - w) / math.sqrt(2.0)


@dataclass(frozen=True)
class Family:
    """One observation table: template positions ``(i, j)``, values and SNR."""

    name: str
    direction: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    snr: float

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class BlockSideInfo:
    """Lazy view of the side information of every interior block.

    Observation tables are regenerated on demand from keyed streams, so the
    object is cheap to hold and safe to share across threads.
    """

    inst: LatticeInstance
    part: BlockPartition
    t: float

    @property
    def eta(self) -> float:
        return self.inst.params.eta

    def family_subsets(self) -> list[tuple[str, int, np.ndarray]]:
        """``(family, direction, template positions)`` for all ``3 * 2d`` families."""
        out = []
        everything = np.arange(self.part.block_size)
        for j in range(2 * self.part.d):
            joint = np.flatnonzero(self.part.joint_masks[j])
            rest = np.flatnonzero(~self.part.joint_masks[j])
            out += [("bullet", j, everything), ("cap", j, joint), ("minus", j, rest)]
        return out

    def snr(self, family: str, size: int) -> float:
        w = self.t if family == "bullet" else 1.0 - self.t
        return w * self.eta / size

    def families(self, b: int) -> list[Family]:
        """All observation tables of block index ``b``."""
        a = self.part.grid.coords[b]
        truth = self.inst.theta.ravel()[self.part.vertex_index[b]].astype(np.float64)
        seed = self.inst.params.seed
        out = []
        for name, j, subset in self.family_subsets():
            iu, ju = np.triu_indices(len(subset), k=1)
            rows, cols = subset[iu], subset[ju]
            snr = self.snr(name, len(subset))
            noise = stream(seed, "side", a, j, FAMILIES.index(name)).standard_normal(len(rows))
            vals = math.sqrt(snr) * truth[rows] * truth[cols] + noise
            out.append(Family(name, j, rows, cols, vals, snr))
        return out

    def coupling(self, b: int) -> tuple[np.ndarray, float]:
        """Dense symmetric coupling matrix over block ``b`` (template order) and constant.

        The Hamiltonian contribution is ``sum_{u<v} J_uv theta_u theta_v + const``
        with ``J_uv = sum_f sqrt(snr_f) Y^f_uv`` and ``const = -sum_f snr_f / 2``
        summed over stored pairs.
        """
        N = self.part.block_size
        J = np.zeros((N, N))
        const = 0.0
        if self.eta == 0.0:
            return J, const
        for f in self.families(b):
            if f.snr == 0.0:
                # zero-signal family: no coupling, no constant
                continue
            np.add.at(J, (f.rows, f.cols), math.sqrt(f.snr) * f.values)
            const -= 0.5 * f.snr * len(f)
        return J + J.T, const

    def count(self) -> int:
        """Number of stored observations per block."""
        return sum(len(s) * (len(s) - 1) // 2 for _, _, s in self.family_subsets())


def build_block_side_info(inst: LatticeInstance, part: BlockPartition, t: float = 0.5) -> BlockSideInfo:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t!r}")
    if inst.params.range_L < 2 * part.scale_L:
        raise ValueError(
            f"range_L={inst.params.range_L} is smaller than 2 * scale_L = {2 * part.scale_L}"
        )
    if inst.params.n != part.n or inst.params.d != part.d:
        raise ValueError("partition does not match the instance box")
    return BlockSideInfo(inst, part, float(t))


def direction_label(j: int, d: int) -> str:
    i, s = directions(d)[j]
    return f"{'+' if s > 0 else '-'}e{i + 1}"
