"""Multiscale synchronization of the renormalized block lattice.

Level-0 blocks are the points of the block grid.  A level-``k`` block is a cube
of side ``s_k = prod_{j<k} l_j`` level-0 blocks, ``l_j = 2 kappa (j+1)^2 + 1``.
All ``s_k`` are odd, so level-``k`` cells are centred at the origin:
``cell_k(a) = floor((a + (s_k - 1)/2) / s_k)`` and every level's cube around
the origin is a union of the cubes one level down.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .geometry import BlockGrid, BlockPartition

HONEST_FRACTION = 0.9


def scale_length(k: int, kappa: int) -> int:
    return 2 * kappa * (k + 1) ** 2 + 1


def _a1(kappa: int, d: int):
    """``sup_k k^2d l_k^2d (2 kappa)^(-(d-1)(k+5))`` in log space.

    Past ``k0 = 6d / ((d-1) log 2 kappa)`` the log-term has negative
    derivative, so scanning to twice that (and at least 200) finds the sup.
    """
    log2k = math.log(2 * kappa)
    k_stop = max(200, int(2 * 6 * d / ((d - 1) * log2k)) + 2)
    k = np.arange(1, k_stop + 1, dtype=np.float64)
    ell = 2 * kappa * (k + 1) ** 2 + 1
    logs = 2 * d * np.log(k) + 2 * d * np.log(ell) - (d - 1) * (k + 5) * log2k
    return float(np.exp(logs.max())), int(k[logs.argmax()])


def _a2(kappa: int, d: int, tol: float):
    """``sum_k (1 + 3^(d-1)) / l_k^(d-1)``: partial sum to ``K`` plus the integral remainder.

    With ``f(x) = l_x^-(d-1)`` decreasing, ``int_K^inf f <= sum_{k>=K} f(k) <=
    f(K) + int_K^inf f``, so adding the integral leaves an error of at most
    ``f(K)``.  The polynomial tail makes plain truncation far too slow.
    """
    c = 1 + 3 ** (d - 1)

    def f(x):
        return (2 * kappa * (x + 1) ** 2 + 1) ** (-(d - 1))

    # f(K) <= (2 kappa)^-(d-1) (K+1)^-(2d-2)
    K = int(math.ceil((c * (2 * kappa) ** (-(d - 1)) / tol) ** (1.0 / (2 * d - 2))))
    k = np.arange(K, dtype=np.float64)
    partial = float(np.sum(f(k)))
    remainder, _ = integrate.quad(f, K, np.inf, epsabs=tol * 1e-3, epsrel=1e-12)
    return c * (partial + remainder), c * float(f(K)), K


def _a3(kappa: int, d: int, tol: float):
    """``(1 + 3^d) sum_k k^2d (2 kappa)^(-(d-1)(k+6))`` with a geometric tail bound.

    The ratio of consecutive terms ``((k+1)/k)^2d (2 kappa)^-(d-1)`` decreases
    in ``k``; once it is ``r < 1`` the remainder is at most ``term * r / (1 - r)``.
    """
    c = 1 + 3**d
    log2k = math.log(2 * kappa)
    total, k = 0.0, 1
    while True:
        term = math.exp(2 * d * math.log(k) - (d - 1) * (k + 6) * log2k)
        total += term
        r = ((k + 1) / k) ** (2 * d) * (2 * kappa) ** (-(d - 1))
        if r < 1:
            tail = c * term * r / (1 - r)
            if tail < tol:
                return c * total, tail, k
        k += 1


def check_scale_conditions(kappa: int, d: int, tol: float = 1e-7) -> dict:
    """Evaluate the three scale conditions and compare with 1/2, 1/20, 1/42."""
    if kappa < 1 or d < 2:
        raise ValueError("need kappa >= 1 and d >= 2")
    a1, a1_at = _a1(kappa, d)
    a2, a2_tail, a2_terms = _a2(kappa, d, tol)
    a3, a3_tail, a3_terms = _a3(kappa, d, tol)
    out = {
        "kappa": kappa, "d": d,
        "A1": a1, "A1_argmax": a1_at, "A1_bound": 0.5,
        "A2": a2, "A2_tail": a2_tail, "A2_terms": a2_terms, "A2_bound": 1 / 20,
        "A3": a3, "A3_tail": a3_tail, "A3_terms": a3_terms, "A3_bound": 1 / 42,
    }
    # a condition passes only if it holds with the truncation error added
    out["A1_pass"] = a1 <= 0.5
    out["A2_pass"] = a2 + a2_tail <= 1 / 20
    out["A3_pass"] = a3 + a3_tail <= 1 / 42
    out["all_pass"] = out["A1_pass"] and out["A2_pass"] and out["A3_pass"]
    return out


@dataclass(frozen=True, eq=False)
class Level:
    """Level-``k`` blocks inside the grid and their within-parent adjacency."""

    k: int
    side: int
    cells: np.ndarray
    ids: np.ndarray
    parent: np.ndarray
    edges: np.ndarray
    edge_axis: np.ndarray
    xi_edge: np.ndarray
    xi_group: np.ndarray
    boundary_size: np.ndarray
    quartets: np.ndarray

    @property
    def n_blocks(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True, eq=False)
class Hierarchy:
    grid: BlockGrid
    kappa: int
    levels: list
    base_edges: np.ndarray
    base_axis: np.ndarray

    @property
    def K(self) -> int:
        """Level of the single block covering the grid."""
        return len(self.levels) - 1

    def ell(self, k: int) -> int:
        return scale_length(k, self.kappa)


def _cells(coords: np.ndarray, side: int) -> np.ndarray:
    return np.floor_divide(coords + (side - 1) // 2, side)


def build_hierarchy(part, kappa: int = 2) -> Hierarchy:
    """Nested cube partitions of the block grid up to a single covering block."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    grid = part.grid if isinstance(part, BlockPartition) else part
    coords = grid.coords
    d = grid.d
    base_edges, base_axis = grid.all_edges()

    sides = [1]
    while len(np.unique(_cells(coords, sides[-1]), axis=0)) > 1:
        sides.append(sides[-1] * scale_length(len(sides) - 1, kappa))
    K = len(sides) - 1

    cells_of, ids_of, uniq = [], [], []
    for s in sides:
        c = _cells(coords, s)
        u, inv = np.unique(c, axis=0, return_inverse=True)
        cells_of.append(c)
        ids_of.append(inv.reshape(-1))
        uniq.append(u)

    levels = []
    for k in range(K + 1):
        n_k = len(uniq[k])
        if k < K:
            parent = np.empty(n_k, dtype=np.int64)
            parent[ids_of[k]] = ids_of[k + 1]
        else:
            parent = np.full(n_k, -1, dtype=np.int64)
        lookup = {tuple(c): i for i, c in enumerate(uniq[k].tolist())}

        # within-parent adjacency, lower endpoint first
        edges, eaxis = [], []
        for i, c in enumerate(uniq[k].tolist()):
            for ax in range(d):
                nb = list(c)
                nb[ax] += 1
                j = lookup.get(tuple(nb))
                if j is not None and parent[i] == parent[j]:
                    edges.append((i, j))
                    eaxis.append(ax)
        edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
        eaxis = np.array(eaxis, dtype=np.int64)
        edge_id = {(int(a), int(b)): e for e, (a, b) in enumerate(edges)}

        # boundary sets and their checkerboard halves
        lo_id = ids_of[k][base_edges[:, 0]]
        hi_id = ids_of[k][base_edges[:, 1]]
        groups = np.array([edge_id.get((int(a), int(b)), -1) for a, b in zip(lo_id, hi_id)], dtype=np.int64)
        cross = np.flatnonzero(groups >= 0)
        g = groups[cross]
        ends = coords[base_edges[cross, 0]]
        face_min = np.full((len(edges), d), np.iinfo(np.int64).max, dtype=np.int64)
        for ax in range(d):
            np.minimum.at(face_min[:, ax], g, ends[:, ax])
        rel = ends - face_min[g]
        rel[np.arange(len(cross)), eaxis[g]] = 0
        chosen = rel.sum(axis=1) % 2 == 0
        boundary = np.bincount(g, minlength=len(edges))

        quartets = []
        for i, c in enumerate(uniq[k].tolist()):
            for a1 in range(d):
                for a2 in range(a1 + 1, d):
                    c1, c2, c12 = list(c), list(c), list(c)
                    c1[a1] += 1
                    c2[a2] += 1
                    c12[a1] += 1
                    c12[a2] += 1
                    j1, j2, j12 = (lookup.get(tuple(x)) for x in (c1, c2, c12))
                    if j1 is None or j2 is None or j12 is None:
                        continue
                    es = (edge_id.get((i, j1)), edge_id.get((j1, j12)), edge_id.get((j2, j12)), edge_id.get((i, j2)))
                    if None not in es:
                        quartets.append(es)
        quartets = np.array(quartets, dtype=np.int64).reshape(-1, 4)

        levels.append(Level(k, sides[k], uniq[k], ids_of[k], parent, edges, eaxis,
                            cross[chosen], g[chosen], boundary, quartets))
    return Hierarchy(grid, kappa, levels, base_edges, base_axis)


def boundary_xi(H: Hierarchy, k: int, B1, B2) -> np.ndarray:
    """Level-0 edge indices (into the grid edge list) of ``Xi(B1, B2)``.

    ``B1, B2`` are level-``k`` block ids adjacent inside a common parent.
    """
    lev = H.levels[k]
    lo, hi = min(B1, B2), max(B1, B2)
    hit = np.flatnonzero((lev.edges[:, 0] == lo) & (lev.edges[:, 1] == hi))
    if len(hit) == 0:
        raise KeyError(f"level-{k} blocks {B1} and {B2} are not adjacent within a parent")
    return lev.xi_edge[lev.xi_group == hit[0]]


@dataclass(eq=False)
class MultiscaleState:
    H: Hierarchy
    tilde_Y: np.ndarray
    level_sync: dict = field(default_factory=dict)
    block_vars: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)
    incoherent: dict = field(default_factory=dict)
    agreeable: dict = field(default_factory=dict)
    fallback: dict = field(default_factory=dict)

    def running_before(self, k: int) -> np.ndarray:
        """``W~^{(k-1)}`` per level-0 block, with ``W~^{(-1)} = 1``."""
        if k == 0:
            return np.ones(self.H.grid.size, dtype=np.int8)
        if k - 1 not in self.running:
            raise ValueError(f"level {k - 1} block variables are missing")
        return self.running[k - 1]


def _sign(x):
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


def level_sync_vars(state: MultiscaleState, k: int) -> MultiscaleState:
    """``Y^{(k)}`` on every within-parent level-``k`` edge."""
    H = state.H
    lev = H.levels[k]
    Wt = state.running_before(k)
    e0 = lev.xi_edge
    terms = state.tilde_Y[e0].astype(np.int64) * Wt[H.base_edges[e0, 0]] * Wt[H.base_edges[e0, 1]]
    sums = np.bincount(lev.xi_group, weights=terms, minlength=lev.n_edges)
    state.level_sync[k] = _sign(sums)
    return state


def _components(n, members, adj):
    """Connected components among ``members`` (sorted lists, smallest first)."""
    seen = set()
    comps = []
    for m in sorted(members):
        if m in seen:
            continue
        comp, queue = [], deque([m])
        seen.add(m)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v, _ in adj[u]:
                if v in members and v not in seen:
                    seen.add(v)
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def quartets_and_block_vars(state: MultiscaleState, k: int) -> MultiscaleState:
    """Quartet coherence, agreeable sets and ``W^{(k)}`` for every level-``k`` block."""
    H = state.H
    lev = H.levels[k]
    Y = state.level_sync[k]
    n = lev.n_blocks
    W = np.ones(n, dtype=np.int8)
    in_I = np.zeros(n, dtype=bool)
    bad = np.zeros(n, dtype=bool)
    incoherent = np.zeros(len(lev.quartets), dtype=bool)
    if len(lev.quartets):
        incoherent = Y[lev.quartets].astype(np.int64).prod(axis=1) < 0
        for q in lev.quartets[incoherent]:
            bad[lev.edges[q].ravel()] = True

    adj = [[] for _ in range(n)]
    for e, (a, b) in enumerate(lev.edges):
        adj[a].append((b, int(Y[e])))
        adj[b].append((a, int(Y[e])))

    failed = []
    if k < H.K:
        by_parent = {}
        for i in range(n):
            by_parent.setdefault(int(lev.parent[i]), []).append(i)
        for par, kids in by_parent.items():
            good = {i for i in kids if not bad[i]}
            comps = _components(n, good, adj)
            if not comps:
                continue
            # largest, ties to the one holding the smallest block (comps are in that order)
            best = max(comps, key=len)
            members = set(best)
            root = best[0]
            W[root] = 1
            queue = deque([root])
            seen = {root}
            while queue:
                u = queue.popleft()
                for v, y in adj[u]:
                    if v in members and v not in seen:
                        W[v] = W[u] * y
                        seen.add(v)
                        queue.append(v)
            ok = all(W[u] * W[v] == y for u in best for v, y in adj[u] if v in members)
            if ok:
                in_I[best] = True
            else:
                W[kids] = 1
                in_I[best] = True
                failed.append(par)
            W[[i for i in kids if i not in members]] = 1

    state.block_vars[k] = W
    state.incoherent[k] = incoherent
    state.agreeable[k] = in_I
    state.fallback[k] = failed
    prev = state.running_before(k)
    state.running[k] = (prev * W[lev.ids]).astype(np.int8)
    return state


@dataclass(frozen=True, eq=False)
class SyncResult:
    """Block estimates ``sigma_hat``; ``T~_{B1,B2} = sigma_hat_B1 sigma_hat_B2``."""

    sigma_hat: np.ndarray
    state: MultiscaleState

    def T(self, b1: int, b2: int) -> int:
        return int(self.sigma_hat[b1]) * int(self.sigma_hat[b2])

    def T_pair_lca(self, b1: int, b2: int) -> int:
        """The same estimate written as the product up to the lowest common ancestor."""
        H = self.state.H
        for k in range(H.K + 1):
            ids = H.levels[k].ids
            if ids[b1] == ids[b2]:
                if k == 0:
                    return 1
                Wt = self.state.running[k - 1]
                return int(Wt[b1]) * int(Wt[b2])
        raise AssertionError("grid has no common root")


def synchronize_variables(tilde_Y, H: Hierarchy) -> SyncResult:
    """Run every level on the given level-0 variables (grid edge order)."""
    tilde_Y = np.asarray(tilde_Y, dtype=np.int8)
    if tilde_Y.shape != (len(H.base_edges),):
        raise ValueError("tilde_Y does not match the grid edges")
    state = MultiscaleState(H, tilde_Y)
    for k in range(H.K):
        level_sync_vars(state, k)
        quartets_and_block_vars(state, k)
    sigma = state.running[H.K - 1] if H.K > 0 else np.ones(H.grid.size, dtype=np.int8)
    return SyncResult(sigma.copy(), state)


def synchronize(r, H: Hierarchy) -> SyncResult:
    """Synchronize the blocks of a renormalized instance."""
    return synchronize_variables(r.tilde_Y, H)


def bad_block_bound(k: int, kappa: int, d: int) -> float:
    return float(k ** (2 * d) * (2.0 * kappa) ** (-(d - 1) * (k + 6)))


def honest_good_audit(state: MultiscaleState, tilde_theta, delta_hat: float) -> list[dict]:
    """Per-level honest-edge rates and bad-block frequencies against the reference bound.

    ``tilde_theta`` are the hidden block spins; ``delta_hat = 1 - 2 p_hat``.
    """
    H = state.H
    d = H.grid.d
    tt = np.asarray(tilde_theta, dtype=np.int64)
    Z = state.tilde_Y.astype(np.int64) * tt[H.base_edges[:, 0]] * tt[H.base_edges[:, 1]]
    good = [np.ones(H.levels[0].n_blocks, dtype=bool)]
    honest = []
    rows = []
    for k in range(H.K + 1):
        lev = H.levels[k]
        sums = np.bincount(lev.xi_group, weights=Z[lev.xi_edge], minlength=lev.n_edges)
        size = np.bincount(lev.xi_group, minlength=lev.n_edges)
        hon = sums >= HONEST_FRACTION * delta_hat * size
        honest.append(hon)
        if k >= 1:
            below = H.levels[k - 1]
            n_bad = np.bincount(below.parent, weights=~good[k - 1], minlength=lev.n_blocks)
            dishonest = np.bincount(below.parent[below.edges[:, 0]], weights=~honest[k - 1], minlength=lev.n_blocks)
            good.append((n_bad <= 1) & (dishonest == 0))
        bad_freq = float(1.0 - good[k].mean())
        n_k = lev.n_blocks
        rows.append({
            "level": k,
            "blocks": n_k,
            "edges": lev.n_edges,
            "honest_rate": float(hon.mean()) if lev.n_edges else math.nan,
            "bad_blocks": int((~good[k]).sum()),
            "bad_freq": bad_freq,
            "bad_se": math.sqrt(max(bad_freq * (1 - bad_freq), 0.0) / n_k),
            "bound": bad_block_bound(k, H.kappa, d),
            "incoherent_quartets": int(state.incoherent[k].sum()) if k in state.incoherent else 0,
            "quartets": len(lev.quartets),
            "agreeable": int(state.agreeable[k].sum()) if k in state.agreeable else 0,
            "fallback_parents": len(state.fallback.get(k, [])),
        })
    state.audit = {"honest": honest, "good": good}
    return rows


def write_level_csv(rows: list[dict], path, config_hash: str = "") -> None:
    if not rows:
        return
    keys = list(rows[0]) + ["config_hash"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in rows:
            w.writerow({**row, "config_hash": config_hash})
