"""Monte Carlo diagnostics: risk, overlaps, Nishimori checks, free energies.

Overlaps between posterior replicas are measured on independent chains of
the same Hamiltonian at the same sweep index, which gives unbiased estimates
of ``E<R_12>`` and ``E<R_12^2>`` once the chains have mixed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .geometry import BlockPartition, build_partition
from .gibbs import (
    Hamiltonian,
    block_hamiltonian,
    default_burn_in,
    exact_posterior,
    region_hamiltonian,
    run_chain,
    two_block_hamiltonian,
)
from .model import LatticeInstance, ModelParams, beta_of, generate_instance
from .multiscale import build_hierarchy, synchronize
from .renorm import bootstrap_se, pooled_p_hat, renormalize
from .rng import rep_seed, stream
from .sideinfo import build_block_side_info

EXACT_PAIR_LIMIT = 10**6


# --------------------------------------------------------------------------- risk


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    se: float
    exact: bool
    n_vertices: int
    pairs: int


def risk(theta, T, sample_pairs: int = 200_000, rng=None, exact: bool | None = None) -> RiskEstimate:
    """``(1/|V|^2) sum_{u,v} T_uv theta_u theta_v`` over the vertices ``V`` of ``theta``.

    ``T`` is an ``(N, N)`` matrix, a callable ``T(i, j)`` on index arrays, or a
    length-``N`` vector ``x`` meaning ``T_uv = x_u x_v``.  The sum is exact when
    ``N^2 <= 10^6`` and otherwise estimated from ``sample_pairs`` uniform pairs;
    ``exact`` overrides the choice.
    """
    theta = np.asarray(theta, dtype=np.float64)
    N = len(theta)
    if np.ndim(T) == 1 and not callable(T):
        x = np.asarray(T, dtype=np.float64)
        T = lambda i, j: x[i] * x[j]  # noqa: E731
    elif not callable(T):
        M = np.asarray(T, dtype=np.float64)
        T = lambda i, j: M[i, j]  # noqa: E731
    if exact is None:
        exact = N * N <= EXACT_PAIR_LIMIT
    if exact:
        i, j = np.divmod(np.arange(N * N), N)
        v = T(i, j) * theta[i] * theta[j]
        return RiskEstimate(float(v.mean()), 0.0, True, N, N * N)
    rng = np.random.default_rng(0) if rng is None else rng
    i = rng.integers(0, N, sample_pairs)
    j = rng.integers(0, N, sample_pairs)
    v = T(i, j) * theta[i] * theta[j]
    return RiskEstimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(sample_pairs)), False, N, sample_pairs)


def risk_rank_one(theta, theta_hat) -> float:
    """Exact risk of ``T = theta_hat theta_hat^T``: ``(mean theta_hat theta)^2``."""
    return float(np.mean(np.asarray(theta_hat, dtype=np.float64) * theta) ** 2)


# ------------------------------------------------------------------ replica chains


def replica_traces(ham: Hamiltonian, replicas: int, sweeps: int, rng_for, burn_in: int | None = None,
                   thin: int = 1, anneal: int | None = None) -> np.ndarray:
    """Recorded states of ``replicas`` independent chains, shape ``(replicas, T, N)``.

    ``rng_for(r)`` returns the generator of replica ``r``.  Sweep ``s`` of all
    replicas is kept when ``s >= burn_in`` and ``(s - burn_in) % thin == 0``.
    """
    burn_in = default_burn_in(sweeps) if burn_in is None else burn_in
    anneal = burn_in if anneal is None else anneal
    kept = (sweeps - burn_in + thin - 1) // thin
    out = np.empty((replicas, kept, ham.size), dtype=np.int8)
    for r in range(replicas):
        rows = []
        count = [0]

        def grab(trace, count=count, rows=rows):
            idx = np.arange(count[0], count[0] + len(trace))
            rows.append(trace[idx % thin == 0])
            count[0] += len(trace)

        run_chain(ham, sweeps, rng_for(r), anneal=anneal, record_from=burn_in, on_chunk=grab)
        out[r] = np.concatenate(rows) if rows else np.empty((0, ham.size), np.int8)
    return out


def _pairwise_overlaps(traces, subset=None) -> np.ndarray:
    """``R_ab(t)`` for every replica pair ``a < b``, shape ``(pairs, T)``."""
    tr = traces if subset is None else traces[:, :, subset]
    f = tr.astype(np.float32)
    rows = [(f[a] * f[b]).mean(axis=1) for a, b in itertools.combinations(range(len(tr)), 2)]
    return np.array(rows, dtype=np.float64)


def _truth_overlaps(traces, truth, subset=None) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.float32)
    tr = traces if subset is None else traces[:, :, subset]
    t = truth if subset is None else truth[subset]
    return (tr.astype(np.float32) * t).mean(axis=2).astype(np.float64)


def batch_se(series, n_batches: int = 20) -> float:
    """Batch-means standard error of the mean of a (time-ordered) series."""
    x = np.asarray(series, dtype=np.float64).ravel()
    n_batches = min(n_batches, len(x))
    if n_batches < 2:
        return math.nan
    size = len(x) // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


@dataclass(frozen=True)
class CorrelationEstimate:
    phi_e: float
    phi_e_se: float
    phi_v: float
    phi_v_se: float
    replicas: int
    sweeps: int
    size: int
    q_star_sq: float = math.nan
    meta: dict = field(default_factory=dict)


def _as_hamiltonian(inst, region, lam=0.0, goe="region", eta=None, beta_scale=1.0):
    if isinstance(region, Hamiltonian):
        return region
    return region_hamiltonian(inst, region, lam=lam, goe=goe, eta=eta, beta_scale=beta_scale)


def correlation_from_traces(traces) -> tuple[float, float, float, float]:
    # square per replica pair, then average over pairs
    R = _pairwise_overlaps(traces)
    R2 = (R**2).mean(axis=0)
    R1 = R.mean(axis=0)
    return float(R2.mean()), batch_se(R2), float(R1.mean()), batch_se(R1)


def pair_correlation(inst, region, replicas: int = 2, sweeps: int = 5000, *, lam=0.0, goe="region",
                     eta=None, key=0, burn_in=None) -> CorrelationEstimate:
    """``phi^e = E<R_12^2>`` and ``phi^v = E<R_12>`` on a region (or a given Hamiltonian).

    Errors are batch means over the chain; average several instances and
    bootstrap over them for disorder error bars.
    """
    if replicas < 2:
        raise ValueError("need at least two replicas")
    ham = _as_hamiltonian(inst, region, lam, goe, eta)
    seed = inst.params.seed
    traces = replica_traces(ham, replicas, sweeps, lambda r: stream(seed, "replica", key, r), burn_in)
    phi_e, se_e, phi_v, se_v = correlation_from_traces(traces)
    return CorrelationEstimate(phi_e, se_e, phi_v, se_v, replicas, sweeps, ham.size)


def q_star_sq_extrapolation(etas, phi_e) -> float:
    """Linear small-``eta`` extrapolation of ``phi^e`` to ``eta = 0`` (an extrapolation, not a limit)."""
    etas = np.asarray(etas, dtype=np.float64)
    if len(etas) < 2:
        raise ValueError("need at least two eta values")
    slope, icpt = np.polyfit(etas, np.asarray(phi_e, dtype=np.float64), 1)
    return float(icpt)


# ---------------------------------------------------------------- Nishimori checks


@dataclass(frozen=True)
class NishimoriReport:
    r12: float
    r10: float
    r12_sq: float
    r10_sq: float
    r12_abs: float
    r10_abs: float
    diff_sq: float
    diff_sq_se: float
    diff_abs: float
    diff_abs_se: float
    per_instance: np.ndarray
    ks: float = math.nan

    @property
    def z_sq(self) -> float:
        return self.diff_sq / self.diff_sq_se if self.diff_sq_se > 0 else math.inf

    @property
    def z_abs(self) -> float:
        return self.diff_abs / self.diff_abs_se if self.diff_abs_se > 0 else math.inf


def _nishimori_instance(ham, truth, sweeps, rng_for, burn_in):
    traces = replica_traces(ham, 2, sweeps, rng_for, burn_in)
    R12 = _pairwise_overlaps(traces)[0]
    R10 = _truth_overlaps(traces, truth)
    row = np.array([R12.mean(), R10.mean(), (R12**2).mean(), (R10**2).mean(),
                    np.abs(R12).mean(), np.abs(R10).mean()])
    return row, np.abs(R12), np.abs(R10).ravel()


def nishimori_check(inst, region, sweeps: int = 10_000, *, key=0, burn_in=None, beta_scale=1.0) -> NishimoriReport:
    """Replica-replica vs replica-truth overlaps for one instance and region."""
    return nishimori_experiment([inst], [region], sweeps, key=key, burn_in=burn_in, beta_scale=beta_scale)


def nishimori_experiment(insts, regions, sweeps: int = 10_000, *, key=0, burn_in=None,
                         beta_scale=1.0, truths=None) -> NishimoriReport:
    """Pool the Nishimori comparison over instances.

    ``regions[i]`` is a coordinate array or a ready Hamiltonian for instance
    ``i``.  The sign-invariant comparisons (``R^2`` and ``|R|``) carry the test:
    the first moments both vanish under the global sign symmetry.  Standard
    errors are over instances, so they include the chain noise.  ``ks`` is the
    two-sample Kolmogorov-Smirnov distance between the pooled ``|R_12|`` and
    ``|R_10|`` samples (a distance only: the samples are autocorrelated).
    """
    rows, a12, a10 = [], [], []
    for i, (inst, region) in enumerate(zip(insts, regions)):
        ham = region if isinstance(region, Hamiltonian) else _as_hamiltonian(inst, region, beta_scale=beta_scale)
        if truths is not None:
            truth = truths[i]
        else:
            flat = np.ravel_multi_index(tuple((ham.coords + inst.params.n).T), inst.params.shape)
            truth = inst.theta.ravel()[flat]
        seed = inst.params.seed
        row, x12, x10 = _nishimori_instance(ham, truth, sweeps, lambda r: stream(seed, "nishimori", key, r), burn_in)
        rows.append(row)
        a12.append(x12)
        a10.append(x10)
    rows = np.array(rows)
    ks = float(stats.ks_2samp(np.concatenate(a12), np.concatenate(a10)).statistic)
    m = rows.mean(axis=0)
    dsq = rows[:, 2] - rows[:, 3]
    dabs = rows[:, 4] - rows[:, 5]
    k = len(rows)
    se = (lambda v: float(v.std(ddof=1) / math.sqrt(k))) if k > 1 else (lambda v: math.nan)
    return NishimoriReport(*map(float, m), float(dsq.mean()), se(dsq), float(dabs.mean()), se(dabs), rows, ks)


def nishimori_exact(shape=(2, 3), p: float = 0.2, beta: float | None = None) -> dict:
    """Exact disorder average of replica and truth overlaps on a small lattice region.

    Enumerates every hidden assignment, every flip pattern and every posterior
    state.  On the Nishimori line ``E<R_12^k> = E<R_10^k>`` holds exactly.
    """
    beta = beta_of(p) if beta is None else beta
    coords = np.array(list(itertools.product(*[range(s) for s in shape])))
    N = len(coords)
    edges = [(a, b) for a in range(N) for b in range(a + 1, N) if np.abs(coords[a] - coords[b]).sum() == 1]
    E = len(edges)
    S = np.array(list(itertools.product((1, -1), repeat=N)), dtype=np.float64)
    F = np.stack([S[:, a] * S[:, b] for a, b in edges], axis=1)
    flips = np.array(list(itertools.product((0, 1), repeat=E)), dtype=np.float64)
    flip_w = np.prod(np.where(flips == 1, p, 1 - p), axis=1)
    out = {"R12": 0.0, "R10": 0.0, "R12_sq": 0.0, "R10_sq": 0.0}
    for t0 in S:
        prod0 = np.array([t0[a] * t0[b] for a, b in edges])
        Y = np.where(flips == 1, -prod0, prod0)
        H = beta * F @ Y.T
        H -= H.max(axis=0)
        w = np.exp(H)
        w /= w.sum(axis=0)
        site = S.T @ w
        pair = np.einsum("sx,sy,sd->dxy", S, S, w)
        pw = flip_w / 2**N
        out["R12"] += float(pw @ (site**2).mean(axis=0))
        out["R10"] += float(pw @ (site * t0[:, None]).mean(axis=0))
        out["R12_sq"] += float(pw @ (pair**2).mean(axis=(1, 2)))
        out["R10_sq"] += float(pw @ (pair * np.outer(t0, t0)).mean(axis=(1, 2)))
    return out


# --------------------------------------------------------------- block diagnostics


def _pair_setup(inst, part: BlockPartition, side, B, B2):
    b, b2 = (part.grid.index(x) if np.ndim(x) else int(x) for x in (B, B2))
    ham, pos2 = two_block_hamiltonian(inst, part, side, b, b2)
    return b, b2, ham, pos2


def locking_from_traces(traces, subsets, alpha: float) -> tuple[float, float]:
    """``alpha E<(R(J)-R(B))^2> + (1-alpha) E<(R(B\\B')-R(B))^2>`` with batch-means error.

    ``subsets = (block, joint, rest)`` index the traces' sites.
    """
    rb = _pairwise_overlaps(traces, subsets[0])
    rj = _pairwise_overlaps(traces, subsets[1])
    rr = _pairwise_overlaps(traces, subsets[2])
    series = (alpha * (rj - rb) ** 2 + (1 - alpha) * (rr - rb) ** 2).mean(axis=0)
    return float(series.mean()), batch_se(series)


def locking_deficit(inst, part: BlockPartition, side, B, B2, sweeps: int = 4000, *, B3=None,
                    replicas: int = 2, key=0) -> dict:
    """Locking deficits of block ``B`` towards ``B'`` (one-block) and ``B''`` (two-block on ``B ∪ B'``)."""
    b, b2, ham2, pos2 = _pair_setup(inst, part, side, B, B2)
    a, a2 = part.grid.coords[b], part.grid.coords[b2]
    a3 = a2 if B3 is None else np.asarray(B3 if np.ndim(B3) else part.grid.coords[int(B3)])
    diff = a3 - a
    if np.abs(diff).sum() != 1:
        raise KeyError("B'' must be adjacent to B")
    i = int(np.flatnonzero(diff)[0])
    j = 2 * i + (0 if diff[i] > 0 else 1)
    joint = np.flatnonzero(part.joint_masks[j])
    rest = np.flatnonzero(~part.joint_masks[j])
    everything = np.arange(part.block_size)
    alpha = len(joint) / part.block_size
    seed = inst.params.seed

    ham1 = block_hamiltonian(inst, part, side, b)
    t1 = replica_traces(ham1, replicas, sweeps, lambda r: stream(seed, "locking1", key, b, r))
    v1, s1 = locking_from_traces(t1, (everything, joint, rest), alpha)
    t2 = replica_traces(ham2, replicas, sweeps, lambda r: stream(seed, "locking2", key, b, b2, r))
    # B occupies the first |B| positions of the two-block region, in template order
    v2, s2 = locking_from_traces(t2, (everything, joint, rest), alpha)
    return {"V_one": v1, "V_one_se": s1, "V_two": v2, "V_two_se": s2, "alpha": alpha}


def chi_summary(samples) -> dict:
    """``chi = (1/(m N)) sum_r s_r s_r^T`` and its trace powers and operator norm."""
    S = np.asarray(samples, dtype=np.float64)
    m, N = S.shape
    chi = S.T @ S / (m * N)
    ev = np.clip(np.linalg.eigvalsh(chi), 0.0, None)
    return {"chi": chi, "tr2": float(np.sum(ev**2)), "tr3": float(np.sum(ev**3)), "opnorm": float(ev.max()),
            "tr2_direct": float(np.sum(chi * chi))}


def susceptibility(inst, part: BlockPartition, side, B, B2, replicas: int = 8, sweeps: int = 500, *, key=0) -> dict:
    """Empirical susceptibility of the two-block posterior from independent draws."""
    b, b2, ham, _ = _pair_setup(inst, part, side, B, B2)
    seed = inst.params.seed
    draws = [run_chain(ham, sweeps, stream(seed, "chi", key, b, b2, r), anneal=default_burn_in(sweeps))
             for r in range(replicas)]
    out = chi_summary(np.stack(draws))
    out["replicas"] = replicas
    return out


def sandwich_holds(summary: dict, tol: float = 1e-9) -> bool:
    """``||chi||_op <= tr(chi^3)^(1/3) <= tr(chi^2)^(1/2)`` up to ``tol``."""
    op, c3, c2 = summary["opnorm"], summary["tr3"] ** (1 / 3), summary["tr2"] ** 0.5
    return op <= c3 + tol and c3 <= c2 + tol


# -------------------------------------------------------------------- free energies


def ln_cosh_expectation(lam: float, n: int = 120) -> float:
    """``E ln cosh(lam + sqrt(lam) z)`` by Gauss-Hermite quadrature."""
    x, w = special.roots_hermitenorm(n)
    v = lam + math.sqrt(lam) * x
    # ln cosh(v) = |v| + log1p(exp(-2|v|)) - ln 2, stable for large |v|
    lc = np.abs(v) + np.log1p(np.exp(-2 * np.abs(v))) - math.log(2.0)
    return float(w @ lc / w.sum())


def scalar_free_energy_single_site(lam: float, include_constant: bool = True) -> float:
    """One decoupled site: ``E ln cosh(lam + sqrt(lam) z) - lam/2`` (or without ``-lam/2``)."""
    return ln_cosh_expectation(lam) - (0.5 * lam if include_constant else 0.0)


def trapezoid(y, x) -> np.ndarray:
    """Cumulative trapezoid integral starting at 0 along the last axis."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    steps = 0.5 * (y[..., 1:] + y[..., :-1]) * np.diff(x)
    return np.concatenate([np.zeros(y.shape[:-1] + (1,)), np.cumsum(steps, axis=-1)], axis=-1)


def geometric_grid(top: float, points: int = 13, include=()) -> np.ndarray:
    """0 followed by ``points - 1`` geometrically spaced values up to ``top``, plus ``include``."""
    g = np.geomspace(top / 2 ** (points - 2), top, points - 1)
    return np.unique(np.concatenate([[0.0], g, np.asarray(include, dtype=np.float64)]))


@dataclass(frozen=True)
class FreeEnergyCurve:
    grid: np.ndarray
    values: np.ndarray
    se: np.ndarray
    integrand: np.ndarray
    integrand_se: np.ndarray
    richardson: float
    per_rep: np.ndarray

    def at(self, x: float) -> tuple[float, float]:
        k = int(np.argmin(np.abs(self.grid - x)))
        if abs(self.grid[k] - x) > 1e-12:
            raise KeyError(f"{x} is not a grid point")
        return float(self.values[k]), float(self.se[k])


def _curve(grid, integrand_reps) -> FreeEnergyCurve:
    I = np.asarray(integrand_reps, dtype=np.float64)
    per_rep = trapezoid(I, grid)
    reps = len(I)
    se = per_rep.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.full(len(grid), math.nan)
    ise = I.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.full(len(grid), math.nan)
    # Richardson check: endpoint integral at half resolution vs full resolution
    half = np.unique(np.r_[np.arange(0, len(grid), 2), len(grid) - 1])
    coarse = trapezoid(I.mean(0)[half], grid[half])[-1]
    fine = per_rep.mean(0)
    return FreeEnergyCurve(np.asarray(grid), fine, se, I.mean(0), ise, float(fine[-1] - coarse), per_rep)


def free_energy_scalar(params: ModelParams, region, lambda_grid, sweeps: int = 2000, reps: int = 8,
                       replicas: int = 2, include_constant: bool = True) -> FreeEnergyCurve:
    """``f^sc(delta, lam) - f^sc(delta, 0)`` by integrating ``phi^v / 2`` over ``lam``.

    With ``include_constant=False`` the ``-lam/2`` per-site constants are
    dropped, which adds ``lam/2`` to the curve.  Each repetition draws a new
    instance; the scalar noise of a repetition is shared by all grid points.
    """
    grid = np.asarray(lambda_grid, dtype=np.float64)
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("lambda grid must start at 0 and increase")
    coords = np.asarray(region, dtype=np.int64)
    rows = []
    for r in range(reps):
        inst = generate_instance(params.with_(seed=rep_seed(params.seed, r)), goe=False)
        row = []
        for g, lam in enumerate(grid):
            if lam == 0.0:
                # no field: <theta_x> = 0 by the global sign symmetry
                row.append(0.0 if include_constant else 0.5)
                continue
            est = pair_correlation(inst, coords, replicas, sweeps, lam=lam, goe=None, key=g)
            row.append(0.5 * est.phi_v + (0.0 if include_constant else 0.5))
        rows.append(row)
    return _curve(grid, rows)


def free_energy_exact(inst, coords, lam: float, goe=None, eta=None) -> float:
    """``log Z / N`` of a small region by enumeration (one instance)."""
    ham = region_hamiltonian(inst, coords, lam=lam, goe=goe, eta=eta)
    return exact_posterior(ham).logZ / ham.size


def free_energy_goe(params: ModelParams, region, eta_grid, sweeps: int = 2000, reps: int = 8,
                    replicas: int = 2) -> FreeEnergyCurve:
    """``f(delta, eta) - f(delta, 0)`` for the homogeneous spiked GOE on a region.

    With unordered pairs ``u != v`` the exact derivative is ``(phi^e - 1/N) / 4``.
    """
    grid = np.asarray(eta_grid, dtype=np.float64)
    coords = np.asarray(region, dtype=np.int64)
    N = len(coords)
    rows = []
    for r in range(reps):
        inst = generate_instance(params.with_(seed=rep_seed(params.seed, r)), goe=False)
        row = []
        for g, eta in enumerate(grid):
            if eta == 0.0 and params.beta == 0.0:
                # uniform posterior: phi^e = 1/N exactly
                row.append(0.0)
                continue
            est = pair_correlation(inst, coords, replicas, sweeps, goe="region", eta=eta, key=1000 + g)
            row.append(0.25 * (est.phi_e - 1.0 / N))
        rows.append(row)
    return _curve(grid, rows)


def variational_check(params: ModelParams, region, eta: float, q_grid, sweeps: int = 2000, reps: int = 8,
                      replicas: int = 2, eta_points: int = 13) -> dict:
    """Compare ``f(delta, eta) - f(delta, 0)`` with ``sup_q {f^sc(delta, eta q) - f^sc(delta, 0) - eta q^2 / 4}``."""
    q = np.asarray(q_grid, dtype=np.float64)
    if q[0] != 0.0 or np.any(np.diff(q) <= 0) or q[-1] > 1:
        raise ValueError("q grid must start at 0, increase and stay within [0, 1]")
    if eta == 0.0:
        return {"lhs": 0.0, "lhs_se": 0.0, "rhs": 0.0, "rhs_se": 0.0, "q_hat": 0.0, "diff": 0.0,
                "se": 0.0, "disc_bound": 0.0, "objective": np.zeros(len(q))}
    sc = free_energy_scalar(params, region, eta * q, sweeps, reps, replicas)
    objective = sc.values - eta * q**2 / 4
    k = int(np.argmax(objective))
    lhs = free_energy_goe(params, region, geometric_grid(eta, eta_points), sweeps, reps, replicas)
    # the grid maximum misses the true sup by at most half a step times the local slope
    slopes = np.abs(np.diff(objective)) / np.diff(q)
    near = slopes[max(k - 1, 0): k + 1]
    grid_bound = 0.5 * float(np.max(np.diff(q))) * (float(near.max()) if len(near) else 0.0)
    out = {
        "lhs": float(lhs.values[-1]), "lhs_se": float(lhs.se[-1]), "lhs_richardson": lhs.richardson,
        "rhs": float(objective[k]), "rhs_se": float(sc.se[k]), "rhs_richardson": sc.richardson,
        "q_hat": float(q[k]), "objective": objective, "objective_se": sc.se, "q_grid": q,
    }
    out["diff"] = out["lhs"] - out["rhs"]
    out["se"] = math.hypot(out["lhs_se"], out["rhs_se"])
    out["disc_bound"] = abs(lhs.richardson) + abs(sc.richardson) + grid_bound
    return out


# ------------------------------------------------------------------------ pipeline


@dataclass(eq=False)
class PipelineResult:
    params: ModelParams
    inst: LatticeInstance
    part: BlockPartition
    renorm: object
    sync: object
    theta_hat: np.ndarray
    covered: np.ndarray
    risk: RiskEstimate
    risk_exact: float

    @property
    def p_hat(self) -> float:
        return self.renorm.p_hat

    @property
    def block_errors(self) -> float:
        """Fraction of block pairs with ``T~ != theta~ theta~'``, computed exactly."""
        agree = float(np.mean(self.sync.sigma_hat.astype(np.float64) * self.renorm.tilde_theta))
        return 0.5 * (1.0 - agree**2)


def final_estimates(part: BlockPartition, samples, sigma_hat) -> tuple[np.ndarray, np.ndarray]:
    """``theta_hat_x = sigma_hat_B theta^B_x`` with ``B`` the owner of ``x``; 0 where uncovered."""
    owner = part.owner
    covered = owner[:, 0] >= 0
    th = np.zeros(len(owner), dtype=np.int8)
    b, pos = owner[covered, 0], owner[covered, 1]
    th[covered] = samples[b, pos] * sigma_hat[b]
    return th, covered


def run_pipeline(params: ModelParams, scale_L: int = 6, kappa: int = 2, t: float = 0.5, sweeps: int = 500,
                 threads: int = 1, sample_pairs: int = 200_000, anneal=None) -> PipelineResult:
    """Generate, partition, renormalize, synchronize and score one instance."""
    params = params.with_(range_L=max(params.range_L, 2 * scale_L))
    inst = generate_instance(params, goe=False)
    part = build_partition(params.n, params.d, scale_L)
    side = build_block_side_info(inst, part, t)
    r = renormalize(inst, part, side, sweeps, threads, anneal=anneal)
    H = build_hierarchy(part, kappa)
    sync = synchronize(r, H)
    theta_hat, covered = final_estimates(part, r.samples, sync.sigma_hat)
    truth = inst.theta.ravel()[covered].astype(np.float64)
    est = risk(truth, theta_hat[covered], sample_pairs, stream(params.seed, "risk_pairs"))
    exact = risk_rank_one(truth, theta_hat[covered])
    return PipelineResult(params, inst, part, r, sync, theta_hat, covered, est, exact)


def combine_reps(values, inner_se) -> tuple[float, float]:
    """Mean over repetitions; bootstrap (outer) and chain/subsample (inner) errors in quadrature."""
    v = np.asarray(values, dtype=np.float64)
    inner = np.asarray(inner_se, dtype=np.float64)
    outer = bootstrap_se(v) if len(v) > 1 else 0.0
    inner_term = math.sqrt(np.sum(inner**2)) / len(v)
    return float(v.mean()), float(math.hypot(outer, inner_term))


def threshold_scan(base: ModelParams, p_grid, scale_L: int = 6, reps: int = 4, kappa: int = 2, t: float = 0.5,
                   sweeps: int = 500, threads: int = 1, on_row=None) -> list[dict]:
    """End-to-end risk and effective noise across a grid of flip probabilities."""
    p_grid = list(p_grid)
    if not p_grid:
        raise ValueError("empty p grid")
    for p in p_grid:
        if not 0.0 < p < 0.5:
            raise ValueError(f"p must lie in (0, 1/2), got {p!r}")
    rows = []
    for p in p_grid:
        runs = [run_pipeline(base.with_(p=p, seed=rep_seed(base.seed, r)), scale_L, kappa, t, sweeps, threads)
                for r in range(reps)]
        rk, rk_se = combine_reps([x.risk.value for x in runs], [x.risk.se for x in runs])
        ex, ex_se = combine_reps([x.risk_exact for x in runs], [0.0] * reps)
        ph, ph_se = pooled_p_hat([x.renorm for x in runs])
        row = {"p": p, "risk": rk, "risk_se": rk_se, "risk_exact": ex, "risk_exact_se": ex_se,
               "p_hat": ph, "p_hat_se": ph_se, "reps": reps,
               "coverage": float(np.mean([x.covered.mean() for x in runs]))}
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
