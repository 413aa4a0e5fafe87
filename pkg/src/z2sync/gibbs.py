"""Hamiltonians, heat-bath sampling and exact enumeration of posteriors.

Every posterior used here has the form ``exp(H(theta))`` with

    H(theta) = sum_{x<y} J_xy theta_x theta_y + sum_x h_x theta_x + const,

``J`` symmetric with zero diagonal.  The lattice term contributes ``beta Y_uv``
on nearest-neighbour edges, GOE terms contribute ``sqrt(snr) Y_uv`` on pairs
and ``-snr/2`` to the constant, the scalar channel contributes
``h_x = sqrt(lam) y_x`` and ``-lam/2`` per site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import heat_bath_sweeps
from .geometry import BlockPartition
from .model import LatticeInstance
from .rng import stream
from .sideinfo import BlockSideInfo

CHUNK_SWEEPS = 1024
EXACT_MAX_SITES = 22


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """Quadratic energy over a region of lattice sites (rows of ``coords``)."""

    coords: np.ndarray
    J: np.ndarray
    h: np.ndarray
    const: float = 0.0
    label: str = ""

    def __post_init__(self):
        N = len(self.coords)
        if self.J.shape != (N, N) or self.h.shape != (N,):
            raise ValueError("J and h do not match the region size")

    @property
    def size(self) -> int:
        return len(self.coords)

    def energy(self, spins) -> float:
        s = np.asarray(spins, dtype=np.float64)
        return float(0.5 * s @ self.J @ s + self.h @ s + self.const)

    def site(self, x) -> int:
        """Position of ``x`` in the region; ``x`` is a position or a lattice coordinate."""
        if np.ndim(x) == 0:
            k = int(x)
            if not 0 <= k < self.size:
                raise KeyError(f"site {k} outside the region")
            return k
        hits = np.flatnonzero((self.coords == np.asarray(x)).all(axis=1))
        if len(hits) == 0:
            raise KeyError(f"vertex {tuple(x)} outside the region")
        return int(hits[0])

    def local_field(self, spins, x) -> float:
        k = self.site(x)
        return float(self.J[k] @ np.asarray(spins, dtype=np.float64) + self.h[k])

    def scaled(self, lattice=1.0) -> "Hamiltonian":
        return Hamiltonian(self.coords, self.J * lattice, self.h, self.const, self.label)


def _box_positions(inst: LatticeInstance, coords) -> np.ndarray:
    """Flat box index of each coordinate row."""
    n, side = inst.params.n, inst.params.side
    idx = np.asarray(coords, dtype=np.int64) + n
    if (idx < 0).any() or (idx >= side).any():
        raise KeyError("region leaves the box")
    return np.ravel_multi_index(tuple(idx.T), inst.params.shape)


def _finite_beta(inst: LatticeInstance) -> float:
    beta = inst.params.beta
    if math.isinf(beta):
        raise ValueError("p = 0 gives an infinite lattice coupling; the posterior is degenerate")
    return beta


def lattice_couplings(inst: LatticeInstance, coords, beta: float | None = None) -> np.ndarray:
    """``beta * Y`` on every nearest-neighbour edge with both ends in the region."""
    beta = _finite_beta(inst) if beta is None else beta
    coords = np.asarray(coords, dtype=np.int64)
    N, d = coords.shape
    side = inst.params.side
    flat = _box_positions(inst, coords)
    where = np.full(side**d, -1, dtype=np.int64)
    where[flat] = np.arange(N)
    J = np.zeros((N, N))
    for axis in range(d):
        nb = coords + np.eye(d, dtype=np.int64)[axis]
        inside = nb[:, axis] <= inst.params.n
        src = np.flatnonzero(inside)
        dst = where[_box_positions(inst, nb[inside])]
        keep = dst >= 0
        src, dst = src[keep], dst[keep]
        y = inst.edge_obs[axis][tuple((coords[src] + inst.params.n).T)].astype(np.float64)
        J[src, dst] += beta * y
        J[dst, src] += beta * y
    return J


def scalar_observations(inst: LatticeInstance, lam: float, coords) -> np.ndarray:
    """``y_x = sqrt(lam) theta_x + z_x`` at the given sites (noise keyed by site)."""
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam!r}")
    flat = _box_positions(inst, coords)
    z = stream(inst.params.seed, "scalar").standard_normal(inst.theta.size)[flat]
    return math.sqrt(lam) * inst.theta.ravel()[flat] + z


def region_goe(inst: LatticeInstance, coords, eta: float):
    """Homogeneous spiked GOE on all pairs of a region, ``snr = eta / |region|``.

    Returns the coupling matrix and constant of the Hamiltonian.
    """
    N = len(coords)
    snr = eta / N
    iu, ju = np.triu_indices(N, k=1)
    J = np.zeros((N, N))
    if eta == 0.0:
        return J, 0.0
    truth = inst.theta.ravel()[_box_positions(inst, coords)].astype(np.float64)
    key = _box_positions(inst, coords)
    noise = stream(inst.params.seed, "region_goe", int(key.min()), N).standard_normal(len(iu))
    y = math.sqrt(snr) * truth[iu] * truth[ju] + noise
    J[iu, ju] = math.sqrt(snr) * y
    return J + J.T, -0.5 * snr * len(iu)


def instance_goe(inst: LatticeInstance, coords):
    """Couplings from the stored range-``L`` GOE observations inside a region."""
    coords = np.asarray(coords, dtype=np.int64)
    N = len(coords)
    snr = inst.goe_snr
    J = np.zeros((N, N))
    const = 0.0
    for x in range(N):
        for y in range(x + 1, N):
            if np.abs(coords[x] - coords[y]).max() <= inst.params.range_L:
                J[x, y] = J[y, x] = math.sqrt(snr) * inst.goe(coords[x], coords[y])
                const -= 0.5 * snr
    return J, const


def region_hamiltonian(
    inst: LatticeInstance,
    coords,
    *,
    lam: float = 0.0,
    goe: str | None = None,
    eta: float | None = None,
    beta_scale: float = 1.0,
) -> Hamiltonian:
    """Posterior of ``theta`` on a region given edges, scalar channel and GOE.

    ``goe`` is ``None`` (no pair observations), ``"region"`` (homogeneous
    spiked GOE on all pairs with ``snr = eta / |region|``) or ``"instance"``
    (the stored range-``L`` observations).  ``beta_scale`` multiplies the
    lattice coupling; anything other than 1 leaves the Nishimori line.
    """
    coords = np.asarray(coords, dtype=np.int64)
    beta = _finite_beta(inst) * beta_scale
    J = lattice_couplings(inst, coords, beta)
    const = 0.0
    if goe == "region":
        Jg, c = region_goe(inst, coords, inst.params.eta if eta is None else eta)
        J, const = J + Jg, const + c
    elif goe == "instance":
        Jg, c = instance_goe(inst, coords)
        J, const = J + Jg, const + c
    elif goe is not None:
        raise ValueError(f"unknown goe mode {goe!r}")
    if lam > 0:
        h = math.sqrt(lam) * scalar_observations(inst, lam, coords)
        const -= 0.5 * lam * len(coords)
    else:
        h = np.zeros(len(coords))
    return Hamiltonian(coords, J, h, const, label="region")


def _block_index(part: BlockPartition, B) -> int:
    if np.ndim(B) == 0:
        b = int(B)
        if not 0 <= b < part.n_blocks:
            raise KeyError(f"block index {b} is not interior")
        return b
    return part.grid.index(B)


def block_hamiltonian(inst, part: BlockPartition, side: BlockSideInfo, B, beta_scale=1.0) -> Hamiltonian:
    """One-block posterior: lattice term on ``B`` plus all ``2d`` side families."""
    b = _block_index(part, B)
    coords = part.vertices(part.grid.coords[b])
    J = lattice_couplings(inst, coords, _finite_beta(inst) * beta_scale)
    Js, const = side.coupling(b)
    return Hamiltonian(coords, J + Js, np.zeros(len(coords)), const, label=f"block{b}")


def two_block_hamiltonian(inst, part: BlockPartition, side: BlockSideInfo, B, B2, beta_scale=1.0):
    """Two-block posterior on ``B ∪ B'`` with the side information of both blocks.

    Region order: the vertices of ``B`` in template order, then those of
    ``B' \\ B``.  Also returns the positions of ``B'`` in that order.
    """
    b, b2 = _block_index(part, B), _block_index(part, B2)
    a, a2 = part.grid.coords[b], part.grid.coords[b2]
    diff = a2 - a
    if np.abs(diff).sum() != 1:
        raise KeyError("blocks are not adjacent")
    i = int(np.flatnonzero(diff)[0])
    plus, minus = part.joint_align[i]
    if diff[i] < 0:
        plus, minus = minus, plus
    N = part.block_size
    pos2 = np.full(N, -1, dtype=np.int64)
    pos2[minus] = plus
    fresh = pos2 < 0
    pos2[fresh] = N + np.arange(fresh.sum())
    coords = np.concatenate([part.vertices(a), part.vertices(a2)[fresh]])

    J = lattice_couplings(inst, coords, _finite_beta(inst) * beta_scale)
    J1, c1 = side.coupling(b)
    J2, c2 = side.coupling(b2)
    J[:N, :N] += J1
    J[np.ix_(pos2, pos2)] += J2
    ham = Hamiltonian(coords, J, np.zeros(len(coords)), c1 + c2, label=f"pair{b}-{b2}")
    return ham, pos2


@dataclass(frozen=True, eq=False)
class BlockSample:
    """One posterior draw on a region with its provenance."""

    coords: np.ndarray
    spins: np.ndarray
    meta: dict = field(default_factory=dict)


def glauber_sweep(ham: Hamiltonian, spins, rng: np.random.Generator) -> np.ndarray:
    """One systematic-scan heat-bath sweep; returns the updated copy of ``spins``."""
    s = np.array(spins, dtype=np.int8)
    fields = ham.J @ s.astype(np.float64) + ham.h
    u = rng.random((1, ham.size))
    heat_bath_sweeps(ham.J, fields, s, u, np.ones(1), np.zeros((0, ham.size), np.int8))
    return s


def _anneal_scales(start: int, count: int, anneal: int) -> np.ndarray:
    s = np.arange(start, start + count, dtype=np.float64)
    if anneal <= 0:
        return np.ones(count)
    return np.minimum(1.0, (s + 1.0) / anneal)


def run_chain(ham: Hamiltonian, sweeps: int, rng: np.random.Generator, *, init=None, anneal: int = 0,
              record_from: int | None = None, on_chunk=None):
    """Run ``sweeps`` heat-bath sweeps and return the final spins.

    ``anneal`` sweeps at the start ramp the Hamiltonian linearly from 0 to
    full strength (a burn-in device; the chain targets ``exp(H)`` afterwards).
    If ``on_chunk`` is given it is called with the trace of every sweep with
    index ``>= record_from`` (in chunks, in order).
    """
    if sweeps < 0:
        raise ValueError("sweeps must be >= 0")
    N = ham.size
    J = np.ascontiguousarray(ham.J, dtype=np.float64)
    if init is None:
        spins = np.where(rng.random(N) < 0.5, 1, -1).astype(np.int8)
    else:
        spins = np.array(init, dtype=np.int8)
    record_from = sweeps if record_from is None else record_from
    done = 0
    while done < sweeps:
        count = min(CHUNK_SWEEPS, sweeps - done)
        fields = J @ spins.astype(np.float64) + ham.h
        u = rng.random((count, N))
        scales = _anneal_scales(done, count, anneal)
        want = on_chunk is not None and done + count > record_from
        trace = np.empty((count if want else 0, N), dtype=np.int8)
        heat_bath_sweeps(J, fields, spins, u, scales, trace)
        if want:
            on_chunk(trace[max(0, record_from - done):])
        done += count
    return spins


def default_burn_in(sweeps: int) -> int:
    return sweeps // 5


def sample_block_posterior(inst, part, side, B, sweeps: int = 500, replica: int = 0,
                           anneal: int | None = None, beta_scale: float = 1.0) -> BlockSample:
    """One approximate draw from the one-block posterior of block ``B``.

    Each ``(block, replica)`` has its own random stream, so calls are
    independent and reproducible in any order.
    """
    b = _block_index(part, B)
    a = part.grid.coords[b]
    ham = block_hamiltonian(inst, part, side, b, beta_scale)
    anneal = default_burn_in(sweeps) if anneal is None else anneal
    rng = stream(inst.params.seed, "sample", a, replica)
    spins = run_chain(ham, sweeps, rng, anneal=anneal)
    meta = {"sweeps": sweeps, "anneal": anneal, "seed": inst.params.seed, "block": tuple(int(c) for c in a),
            "replica": replica}
    return BlockSample(ham.coords, spins, meta)


def sample_two_block_posterior(inst, part, side, B, B2, sweeps: int = 500, replica: int = 0,
                               anneal: int | None = None, beta_scale: float = 1.0) -> BlockSample:
    b, b2 = _block_index(part, B), _block_index(part, B2)
    ham, _ = two_block_hamiltonian(inst, part, side, b, b2, beta_scale)
    anneal = default_burn_in(sweeps) if anneal is None else anneal
    rng = stream(inst.params.seed, "sample2", part.grid.coords[b], part.grid.coords[b2], replica)
    spins = run_chain(ham, sweeps, rng, anneal=anneal)
    meta = {"sweeps": sweeps, "anneal": anneal, "seed": inst.params.seed, "blocks": (b, b2), "replica": replica}
    return BlockSample(ham.coords, spins, meta)


@dataclass(frozen=True)
class ExactPosterior:
    pair_means: np.ndarray
    site_means: np.ndarray
    logZ: float


def _all_configs(N: int, start: int, stop: int) -> np.ndarray:
    codes = np.arange(start, stop, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(N, dtype=np.int64)) & 1
    return (2 * bits - 1).astype(np.float64)


def exact_posterior(ham: Hamiltonian, chunk: int = 1 << 16) -> ExactPosterior:
    """Enumerate all ``2^N`` states; ``logZ = log sum_theta 2^-N exp(H(theta))``."""
    N = ham.size
    if N > EXACT_MAX_SITES:
        raise ValueError(f"region has {N} sites; exact enumeration supports at most {EXACT_MAX_SITES}")
    total = 1 << N
    energies = np.empty(total)
    for lo in range(0, total, chunk):
        S = _all_configs(N, lo, min(total, lo + chunk))
        energies[lo:lo + len(S)] = 0.5 * np.einsum("ij,ij->i", S @ ham.J, S) + S @ ham.h
    top = energies.max()
    weights = np.exp(energies - top)
    Z = weights.sum()
    site = np.zeros(N)
    pair = np.zeros((N, N))
    for lo in range(0, total, chunk):
        S = _all_configs(N, lo, min(total, lo + chunk))
        w = weights[lo:lo + len(S)]
        site += w @ S
        pair += (S * w[:, None]).T @ S
    logZ = top + math.log(Z) - N * math.log(2.0) + ham.const
    return ExactPosterior(pair / Z, site / Z, float(logZ))


@dataclass(frozen=True)
class ChainMoments:
    site_mean: np.ndarray
    site_se: np.ndarray
    pair_mean: np.ndarray
    pair_se: np.ndarray
    sweeps: int
    n_batches: int


def chain_moments(ham: Hamiltonian, sweeps: int, rng, burn_in: int = 1000, n_batches: int = 50) -> ChainMoments:
    """Site and pair means along one chain with batch-means standard errors."""
    if sweeps < n_batches * 2:
        raise ValueError("need at least two sweeps per batch")
    N = ham.size
    size = sweeps // n_batches
    kept = size * n_batches
    site_b = np.zeros((n_batches, N))
    pair_b = np.zeros((n_batches, N, N))
    pos = [0]

    def collect(trace):
        t = trace.astype(np.float64)
        # assign each recorded sweep to its batch
        idx = np.arange(pos[0], pos[0] + len(t)) // size
        pos[0] += len(t)
        ok = idx < n_batches
        for bi in np.unique(idx[ok]):
            rows = t[(idx == bi)]
            site_b[bi] += rows.sum(axis=0)
            pair_b[bi] += rows.T @ rows

    run_chain(ham, burn_in + kept, rng, record_from=burn_in, on_chunk=collect)
    site_b /= size
    pair_b /= size
    root = math.sqrt(n_batches)
    return ChainMoments(site_b.mean(0), site_b.std(0, ddof=1) / root, pair_b.mean(0),
                        pair_b.std(0, ddof=1) / root, kept, n_batches)
