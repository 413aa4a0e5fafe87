"""Observation model: hidden signs, flipped edge products, spiked-GOE pairs."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, replace
from functools import cached_property

import numpy as np

from .rng import stream


def beta_of(p: float) -> float:
    """Nishimori inverse temperature ``0.5 * log((1 - p) / p)`` for ``0 < p < 1/2``."""
    if not 0.0 < p < 0.5:
        raise ValueError(f"p must lie in (0, 1/2), got {p!r}")
    return 0.5 * math.log((1.0 - p) / p)


@dataclass(frozen=True)
class ModelParams:
    """Parameters of one realization.

    ``p`` may also take the two limiting values 0 (noiseless channel, infinite
    ``beta``) and 1/2 (uninformative channel, ``beta = 0``); everything else
    outside ``(0, 1/2)`` is rejected.
    """

    d: int = 2
    n: int = 20
    p: float = 0.1
    eta: float = 0.0
    range_L: int = 1
    seed: int = 0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"d must be an integer >= 2, got {self.d!r}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be an integer >= 1, got {self.n!r}")
        if not (0.0 <= self.p <= 0.5) or math.isnan(self.p):
            raise ValueError(f"p must lie in [0, 1/2], got {self.p!r}")
        if not self.eta >= 0.0:
            raise ValueError(f"eta must be >= 0, got {self.eta!r}")
        if int(self.range_L) != self.range_L or self.range_L < 1:
            raise ValueError(f"range_L must be an integer >= 1, got {self.range_L!r}")

    @property
    def delta(self) -> float:
        return 1.0 - 2.0 * self.p

    @property
    def beta(self) -> float:
        if self.p == 0.0:
            return math.inf
        if self.p == 0.5:
            return 0.0
        return beta_of(self.p)

    @property
    def side(self) -> int:
        return 2 * self.n + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def half_offsets(d: int, L: int) -> np.ndarray:
    """Offsets ``o != 0`` with ``|o|_inf <= L``, one per unordered pair ``{o, -o}``.

    The representative is the lexicographically positive one.
    """
    rng = range(-L, L + 1)
    out = [o for o in itertools.product(rng, repeat=d) if _lex_positive(o)]
    return np.array(out, dtype=np.int64).reshape(-1, d)


def _lex_positive(o) -> bool:
    for c in o:
        if c != 0:
            return c > 0
    return False


def _shift_slices(offset, side):
    """Slices (src, dst) so that ``a[src]`` and ``a[dst]`` pair ``u`` with ``u + offset``."""
    src, dst = [], []
    for c in offset:
        c = int(c)
        if c >= 0:
            src.append(slice(0, side - c))
            dst.append(slice(c, side))
        else:
            src.append(slice(-c, side))
            dst.append(slice(0, side + c))
    return tuple(src), tuple(dst)


@dataclass(frozen=True, eq=False)
class LatticeInstance:
    """One realization on the box ``[-n, n]^d``.

    Arrays are indexed by ``u + n`` (box coordinates shifted to start at 0).

    ``edge_obs[i][x]`` is the observation on the edge ``(x, x + e_i)``; its
    shape is the box shape shortened by one along axis ``i``.  ``goe_obs[k]``
    holds the observation for the pair ``(x, x + goe_offsets[k])`` at ``x``
    and is NaN where the partner falls outside the box.
    """

    params: ModelParams
    theta: np.ndarray
    edge_obs: tuple
    goe_offsets: np.ndarray | None = None
    goe_obs: np.ndarray | None = None

    @cached_property
    def _offset_index(self) -> dict:
        if self.goe_offsets is None:
            return {}
        return {tuple(int(c) for c in o): k for k, o in enumerate(self.goe_offsets)}

    def to_index(self, u) -> tuple:
        n = self.params.n
        idx = tuple(int(c) + n for c in u)
        if len(idx) != self.params.d or any(not 0 <= c < self.params.side for c in idx):
            raise KeyError(f"vertex {tuple(u)} outside the box")
        return idx

    def spin(self, u) -> int:
        return int(self.theta[self.to_index(u)])

    def edge(self, u, v) -> int:
        """``Y^delta`` on the nearest-neighbour edge ``{u, v}``."""
        iu, iv = self.to_index(u), self.to_index(v)
        diff = [b - a for a, b in zip(iu, iv)]
        if sorted(abs(c) for c in diff) != [0] * (len(diff) - 1) + [1]:
            raise KeyError(f"{tuple(u)} and {tuple(v)} are not nearest neighbours")
        axis = next(i for i, c in enumerate(diff) if c != 0)
        base = iu if diff[axis] > 0 else iv
        return int(self.edge_obs[axis][base])

    def goe(self, u, v) -> float:
        """Side observation on the unordered pair ``{u, v}``."""
        if self.goe_obs is None:
            raise LookupError("instance was generated without GOE side information")
        iu, iv = self.to_index(u), self.to_index(v)
        off = tuple(b - a for a, b in zip(iu, iv))
        if not _lex_positive(off):
            iu, off = iv, tuple(-c for c in off)
        k = self._offset_index.get(off)
        if k is None:
            raise KeyError(f"pair {tuple(u)}, {tuple(v)} is not within range {self.params.range_L}")
        return float(self.goe_obs[(k,) + iu])

    @property
    def goe_snr(self) -> float:
        p = self.params
        return p.eta / p.range_L**p.d


def generate_instance(params: ModelParams, goe: bool = True) -> LatticeInstance:
    """Draw signs, edge observations and (optionally) spiked-GOE pairs.

    Deterministic in ``params.seed``; every array comes from its own keyed
    stream so the draw order does not matter.  ``goe=False`` skips the
    ``O(n^d L^d)`` pair field, which the synchronization pipeline does not use.
    """
    shape = params.shape
    seed = params.seed
    theta = np.where(stream(seed, "theta").random(shape) < 0.5, 1, -1).astype(np.int8)

    edge_obs = []
    for axis in range(params.d):
        lo = [slice(None)] * params.d
        hi = [slice(None)] * params.d
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        prod = theta[tuple(lo)] * theta[tuple(hi)]
        flips = stream(seed, "edge", axis).random(prod.shape) < params.p
        edge_obs.append(np.where(flips, -prod, prod).astype(np.int8))

    offsets = goe_obs = None
    if goe:
        offsets = half_offsets(params.d, params.range_L)
        amp = math.sqrt(params.eta / params.range_L**params.d)
        goe_obs = np.full((len(offsets),) + shape, np.nan, dtype=np.float32)
        for k, off in enumerate(offsets):
            src, dst = _shift_slices(off, params.side)
            signal = theta[src].astype(np.float64) * theta[dst]
            noise = stream(seed, "goe", off).standard_normal(signal.shape)
            goe_obs[(k,) + src] = amp * signal + noise

    return LatticeInstance(params, theta, tuple(edge_obs), offsets, goe_obs)


def goe_pairs(inst: LatticeInstance):
    """Flattened view of every stored GOE pair: ``(values, theta_u * theta_v)``."""
    if inst.goe_obs is None:
        raise LookupError("instance was generated without GOE side information")
    vals, prods = [], []
    for k, off in enumerate(inst.goe_offsets):
        src, dst = _shift_slices(off, inst.params.side)
        vals.append(inst.goe_obs[(k,) + src].ravel())
        prods.append((inst.theta[src] * inst.theta[dst]).ravel())
    return np.concatenate(vals).astype(np.float64), np.concatenate(prods)
