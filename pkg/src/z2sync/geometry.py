"""Interlocking blocks, joints and cores at renormalization scale ``scale_L``.

Block ``a`` (a point of the block lattice) is the half-open tile
``[L a - L/2, L a + L/2)^d`` together with its ``2d`` joints.  The joint
between ``a`` and ``a + e_i`` is the closed box with side ``L/3`` centred at
``L (a + e_i / 2)``.  With ``L`` divisible by 6 every boundary is an integer,
so membership is exact integer arithmetic.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


def directions(d: int) -> list[tuple[int, int]]:
    """Neighbour directions in the fixed order ``+e_1, -e_1, +e_2, -e_2, ...``."""
    return [(i, s) for i in range(d) for s in (1, -1)]


def _box(lo, hi):
    """Integer points of the closed box ``prod [lo_i, hi_i]``, lexicographic."""
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)), dtype=np.int64).reshape(-1, len(lo))


def block_template(d: int, scale_L: int):
    """Offsets of block 0 and the joint membership masks (one per direction)."""
    L = scale_L
    half, sixth = L // 2, L // 6
    tile = _box([-half] * d, [half - 1] * d)
    joints = []
    for i, s in directions(d):
        lo = [-sixth] * d
        hi = [sixth] * d
        lo[i], hi[i] = (L // 3, 2 * L // 3) if s > 0 else (-2 * L // 3, -L // 3)
        joints.append(_box(lo, hi))
    pts = np.unique(np.concatenate([tile] + joints), axis=0)
    lookup = {tuple(p): k for k, p in enumerate(pts)}
    masks = np.zeros((2 * d, len(pts)), dtype=bool)
    for j, jt in enumerate(joints):
        masks[j, [lookup[tuple(p)] for p in jt]] = True
    return pts, masks


@dataclass(frozen=True, eq=False)
class BlockGrid:
    """A box of block coordinates ``lo + [0, shape)`` (the intersection lattice)."""

    lo: tuple
    shape: tuple

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def coords(self) -> np.ndarray:
        """All block coordinates, lexicographic; row ``b`` is block index ``b``."""
        axes = [np.arange(l, l + s) for l, s in zip(self.lo, self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def index(self, a) -> int:
        rel = [int(c) - l for c, l in zip(a, self.lo)]
        if any(not 0 <= r < s for r, s in zip(rel, self.shape)):
            raise KeyError(f"block {tuple(a)} is not in the grid")
        return int(np.ravel_multi_index(rel, self.shape))

    def edges(self, axis: int) -> np.ndarray:
        """Index pairs ``(b, b')`` with ``b' = b + e_axis``, ordered by ``b``."""
        ids = np.arange(self.size).reshape(self.shape)
        lo = [slice(None)] * self.d
        hi = [slice(None)] * self.d
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        return np.stack([ids[tuple(lo)].ravel(), ids[tuple(hi)].ravel()], axis=1)

    def all_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """``(pairs, axis)`` for every adjacent pair of the grid."""
        pairs = [self.edges(i) for i in range(self.d)]
        axis = np.concatenate([np.full(len(p), i) for i, p in enumerate(pairs)])
        return np.concatenate(pairs), axis


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """Blocks of scale ``scale_L`` lying entirely inside ``[-n, n]^d``.

    All interior blocks are translates of one template, so vertex sets are
    stored as ``scale_L * a + template``.  ``joint_masks[j]`` marks the
    template points in the joint towards ``directions(d)[j]``.
    """

    n: int
    d: int
    scale_L: int
    template: np.ndarray
    joint_masks: np.ndarray
    grid: BlockGrid
    joint_align: tuple = field(repr=False)

    @property
    def block_size(self) -> int:
        return len(self.template)

    @property
    def joint_size(self) -> int:
        return int(self.joint_masks[0].sum())

    @cached_property
    def core_mask(self) -> np.ndarray:
        return ~self.joint_masks.any(axis=0)

    @property
    def interior_blocks(self) -> np.ndarray:
        return self.grid.coords

    @property
    def n_blocks(self) -> int:
        return self.grid.size

    def vertices(self, a) -> np.ndarray:
        """Coordinates of block ``a`` (template order)."""
        return self.scale_L * np.asarray(a, dtype=np.int64) + self.template

    def block(self, a) -> set:
        return {tuple(int(c) for c in v) for v in self.vertices(a)}

    def joint(self, a, a2) -> set:
        """``B_a ∩ B_a2`` for adjacent ``a, a2``."""
        diff = np.asarray(a2) - np.asarray(a)
        if np.abs(diff).sum() != 1:
            raise KeyError(f"blocks {tuple(a)} and {tuple(a2)} are not adjacent")
        i = int(np.flatnonzero(diff)[0])
        j = directions(self.d).index((i, int(diff[i])))
        return {tuple(int(c) for c in v) for v in self.vertices(a)[self.joint_masks[j]]}

    def core(self, a) -> set:
        return {tuple(int(c) for c in v) for v in self.vertices(a)[self.core_mask]}

    @cached_property
    def vertex_index(self) -> np.ndarray:
        """Flat box index of every block vertex, shape ``(n_blocks, block_size)``."""
        coords = self.scale_L * self.grid.coords[:, None, :] + self.template[None] + self.n
        side = 2 * self.n + 1
        return np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), (side,) * self.d)

    @cached_property
    def owner(self) -> np.ndarray:
        """For each box vertex: ``(block index, template position)`` of its parent block.

        A vertex shared by two blocks goes to the lexicographically smaller
        block coordinate; uncovered vertices hold ``-1``.
        """
        side = 2 * self.n + 1
        out = np.full((side**self.d, 2), -1, dtype=np.int64)
        pos = np.arange(self.block_size)
        for b in range(self.n_blocks):
            idx = self.vertex_index[b]
            free = out[idx, 0] < 0
            out[idx[free], 0] = b
            out[idx[free], 1] = pos[free]
        return out

    def region_labels(self, b: int) -> list[str]:
        labels = ["core"] * self.block_size
        for j, (i, s) in enumerate(directions(self.d)):
            for k in np.flatnonzero(self.joint_masks[j]):
                labels[k] = f"joint{'+' if s > 0 else '-'}e{i + 1}"
        return labels

    def dump_csv(self, path) -> None:
        """One row per (vertex, block): coordinates, block coordinate, region."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.d)] + [f"a{i + 1}" for i in range(self.d)] + ["region"])
            for b, a in enumerate(self.grid.coords):
                labels = self.region_labels(b)
                for v, lab in zip(self.vertices(a), labels):
                    w.writerow([*map(int, v), *map(int, a), lab])


def build_partition(n: int, d: int, scale_L: int) -> BlockPartition:
    if scale_L < 6 or scale_L % 6:
        raise ValueError(f"scale_L must be a positive multiple of 6, got {scale_L}")
    if 2 * n + 1 < 3 * scale_L:
        raise ValueError(f"box side {2 * n + 1} is smaller than 3 * scale_L = {3 * scale_L}")
    template, masks = block_template(d, scale_L)
    reach = 2 * scale_L // 3
    m = (n - reach) // scale_L
    if m < 0:
        raise ValueError("box too small to contain an interior block")
    grid = BlockGrid(lo=(-m,) * d, shape=(2 * m + 1,) * d)

    # aligned template positions of B ∩ B' seen from B (+e_i joint) and B' (-e_i joint)
    lookup = {tuple(p): k for k, p in enumerate(template)}
    align = []
    for i in range(d):
        plus = np.flatnonzero(masks[2 * i])
        shift = np.zeros(d, dtype=np.int64)
        shift[i] = scale_L
        minus = np.array([lookup[tuple(p)] for p in template[plus] - shift])
        assert masks[2 * i + 1][minus].all()
        align.append((plus, minus))
    return BlockPartition(n, d, scale_L, template, masks, grid, tuple(align))


def alpha_ratio(part: BlockPartition) -> float:
    """Exact ``|B ∩ B'| / |B|`` for a representative interior adjacent pair."""
    if part.grid.shape[0] < 2:
        raise ValueError("partition has no interior adjacent pair")
    a = part.grid.coords[0]
    a2 = a.copy()
    a2[0] += 1
    return len(part.block(a) & part.block(a2)) / len(part.block(a))


def alpha_candidates(d: int) -> dict:
    """Closed-form large-scale limits that the exact ratio can be compared with."""
    return {"1/(3^d+d)": 1.0 / (3**d + d), "1/(3^d+2d)": 1.0 / (3**d + 2 * d)}
