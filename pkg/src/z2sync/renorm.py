"""Renormalized instance on the block lattice and the block/joint overlaps."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import BlockPartition, build_partition
from .gibbs import default_burn_in, sample_block_posterior
from .model import LatticeInstance, ModelParams, generate_instance
from .rng import rep_seed
from .sideinfo import BlockSideInfo, build_block_side_info


def sign(x):
    """Sign with ``sign(0) = +1``, as int8."""
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class RenormInstance:
    """Block samples, hidden block spins and new synchronization variables.

    ``edges[e] = (b, b')`` with ``b' = b + e_axis[e]`` in block-index space;
    ``tilde_Y[e]`` is the sign of the joint inner product of the two samples.
    """

    part: BlockPartition
    samples: np.ndarray
    truth: np.ndarray
    tilde_theta: np.ndarray
    edges: np.ndarray
    axis: np.ndarray
    tilde_Y: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def disagree(self) -> np.ndarray:
        """``tilde_Y != tilde_theta_B tilde_theta_B'`` per edge."""
        t = self.tilde_theta
        return self.tilde_Y != t[self.edges[:, 0]] * t[self.edges[:, 1]]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def p_hat(self) -> float:
        return float(self.disagree.mean()) if self.n_edges else math.nan

    @property
    def delta_hat(self) -> float:
        return 1.0 - 2.0 * self.p_hat

    def joint_products(self) -> np.ndarray:
        """``sum_{x in B ∩ B'} theta^B_x theta^B'_x`` per edge."""
        out = np.empty(self.n_edges, dtype=np.int64)
        for i in range(self.part.d):
            plus, minus = self.part.joint_align[i]
            sel = self.axis == i
            e = self.edges[sel]
            out[sel] = (self.samples[e[:, 0]][:, plus].astype(np.int64) * self.samples[e[:, 1]][:, minus]).sum(1)
        return out

    def write_csv(self, edge_path, block_path, config_hash: str = "") -> None:
        d = self.part.d
        coords = self.part.grid.coords
        rep = overlap_report(self)
        with open(edge_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"a{i + 1}" for i in range(d)] + [f"b{i + 1}" for i in range(d)]
                       + ["tilde_Y", "agree", "W", "config_hash"])
            for e, (b, b2) in enumerate(self.edges):
                w.writerow([*map(int, coords[b]), *map(int, coords[b2]), int(self.tilde_Y[e]),
                            int(not self.disagree[e]), f"{rep.w[e]:.6g}", config_hash])
        with open(block_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"a{i + 1}" for i in range(d)] + ["tilde_theta", "M_B", "M_core", "config_hash"])
            for b, a in enumerate(coords):
                w.writerow([*map(int, a), int(self.tilde_theta[b]), f"{rep.m_B[b]:.6g}",
                            f"{rep.m_core[b]:.6g}", config_hash])


def renormalize_from_samples(inst: LatticeInstance, part: BlockPartition, samples, meta=None) -> RenormInstance:
    """Build the renormalized instance from given block samples (template order)."""
    samples = np.asarray(samples, dtype=np.int8)
    if samples.shape != (part.n_blocks, part.block_size):
        raise ValueError(f"samples must have shape {(part.n_blocks, part.block_size)}")
    truth = inst.theta.ravel()[part.vertex_index]
    tilde_theta = sign((samples.astype(np.int64) * truth).sum(axis=1))
    edges, axis = part.grid.all_edges()
    r = RenormInstance(part, samples, truth, tilde_theta, edges, axis,
                       np.zeros(len(edges), dtype=np.int8), dict(meta or {}))
    object.__setattr__(r, "tilde_Y", sign(r.joint_products()))
    return r


def sample_all_blocks(inst, part, side, sweeps=500, replica=0, threads=1, anneal=None, beta_scale=1.0):
    """One independent posterior sample per interior block, shape ``(n_blocks, |B|)``.

    The result does not depend on ``threads``: each block has its own stream.
    """
    def one(b):
        return sample_block_posterior(inst, part, side, b, sweeps, replica, anneal, beta_scale).spins

    if threads <= 1:
        rows = [one(b) for b in range(part.n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(part.n_blocks)))
    return np.stack(rows)


def renormalize(inst, part, side, sweeps=500, threads=1, replica=0, anneal=None) -> RenormInstance:
    samples = sample_all_blocks(inst, part, side, sweeps, replica, threads, anneal)
    anneal = default_burn_in(sweeps) if anneal is None else anneal
    meta = {"sweeps": sweeps, "anneal": anneal, "replica": replica, "t": side.t}
    return renormalize_from_samples(inst, part, samples, meta)


def bootstrap_se(values, stat=np.mean, n_boot=400, seed=0) -> float:
    """Nonparametric bootstrap standard error of ``stat`` over the first axis."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return math.nan
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    return float(np.std([stat(values[i]) for i in idx], ddof=1))


@dataclass(frozen=True)
class OverlapReport:
    m_B: np.ndarray
    m_core: np.ndarray
    w: np.ndarray
    summary: dict


def overlap_report(r: RenormInstance, n_boot: int = 400) -> OverlapReport:
    """Block, core and joint overlaps plus summary moments with bootstrap errors.

    The summary maps a name to ``(value, se)``; the product moment is
    averaged over edges of the block lattice.
    """
    part = r.part
    agree = r.samples.astype(np.float64) * r.truth
    m_B = agree.mean(axis=1)
    m_core = agree[:, part.core_mask].mean(axis=1)
    w = r.joint_products() / part.joint_size
    wmm = w * m_B[r.edges[:, 0]] * m_B[r.edges[:, 1]]

    def pair(v, stat=np.mean):
        return float(stat(v)), bootstrap_se(v, stat, n_boot)

    var = lambda v: np.var(v, ddof=1) if len(v) > 1 else math.nan  # noqa: E731
    summary = {
        "E[M_B^2]": pair(m_B**2),
        "Var(M_B^2)": pair(m_B**2, var),
        "E[M_core^2]": pair(m_core**2),
        "E[W^2]": pair(w**2),
        "Var(W^2)": pair(w**2, var),
        "E[W M_B M_B']": pair(wmm),
    }
    return OverlapReport(m_B, m_core, w, summary)


def pooled_p_hat(runs) -> tuple[float, float]:
    """Pool edge disagreements over repetitions.

    The standard error is a bootstrap over repetitions (edges inside one
    instance are not independent).
    """
    dis = [r.disagree for r in runs]
    counts = np.array([d.sum() for d in dis], dtype=np.float64)
    sizes = np.array([len(d) for d in dis], dtype=np.float64)
    p = counts.sum() / sizes.sum()
    if len(runs) < 2:
        return float(p), math.sqrt(p * (1 - p) / sizes.sum())
    ratio = np.stack([counts, sizes], axis=1)
    se = bootstrap_se(ratio, lambda v: v[:, 0].sum() / v[:, 1].sum())
    return float(p), se


def null_p_hat(part: BlockPartition, draws: int = 200_000, seed: int = 0, chunk: int = 50_000) -> tuple[float, float]:
    """``p_hat`` for uniform, independent block samples, with its standard error.

    Without information ``p_hat`` is not exactly 1/2: the joint enters both
    ``tilde_Y`` and the two block overlaps that define ``tilde_theta``, which
    correlates them.  The gap shrinks with ``|B ∩ B'| / |B|``.
    """
    rng = np.random.default_rng(seed)
    plus, minus = part.joint_align[0]
    N = part.block_size
    hits, done = 0, 0
    while done < draws:
        m = min(chunk, draws - done)
        a = np.where(rng.random((m, N)) < 0.5, 1, -1).astype(np.int16)
        b = np.where(rng.random((m, N)) < 0.5, 1, -1).astype(np.int16)
        y = sign((a[:, plus] * b[:, minus]).sum(axis=1))
        hits += int((y != sign(a.sum(axis=1)) * sign(b.sum(axis=1))).sum())
        done += m
    p = hits / draws
    return p, math.sqrt(p * (1 - p) / draws)


def instance_for_scale(params: ModelParams, scale_L: int) -> ModelParams:
    """Parameters with the GOE range matched to the block scale."""
    return params.with_(range_L=2 * scale_L)


def renormalize_params(params: ModelParams, scale_L: int, t=0.5, sweeps=500, threads=1, anneal=None):
    """Generate an instance at ``params`` and renormalize it at ``scale_L``."""
    params = instance_for_scale(params, scale_L)
    inst = generate_instance(params, goe=False)
    part = build_partition(params.n, params.d, scale_L)
    side = build_block_side_info(inst, part, t)
    return renormalize(inst, part, side, sweeps, threads, anneal=anneal)


def effective_noise_curve(params: ModelParams, scales, reps: int, t=0.5, sweeps=500, threads=1, anneal=None):
    """Pooled ``p_hat`` with standard error at each block scale.

    Repetition ``r`` uses the seed ``rep_seed(params.seed, r)`` at
    every scale, so the scales are compared on the same instances.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    scales = list(scales)
    if not scales:
        raise ValueError("no scales given")
    rows = []
    for L in scales:
        runs = [renormalize_params(params.with_(seed=rep_seed(params.seed, r)), L, t, sweeps, threads, anneal)
                for r in range(reps)]
        p, se = pooled_p_hat(runs)
        rows.append({"scale_L": L, "p_hat": p, "se": se, "reps": reps,
                     "edges": int(sum(r.n_edges for r in runs))})
    return rows
