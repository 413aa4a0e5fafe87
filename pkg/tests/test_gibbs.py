import itertools
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from z2sync import _accel
from z2sync._kernels import _sweeps_numba, _sweeps_numpy, heat_bath_sweeps
from z2sync.geometry import build_partition
from z2sync.gibbs import (
    Hamiltonian, block_hamiltonian, chain_moments, exact_posterior, glauber_sweep, lattice_couplings,
    region_hamiltonian, run_chain, sample_block_posterior, sample_two_block_posterior, two_block_hamiltonian,
)
from z2sync.model import ModelParams, generate_instance
from z2sync.rng import stream
from z2sync.sideinfo import build_block_side_info


def random_ham(N, seed, field=True):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(N, N))
    J = np.triu(J, 1)
    J = J + J.T
    h = rng.normal(size=N) if field else np.zeros(N)
    return Hamiltonian(np.arange(N)[:, None], J, h, 0.3)


def brute_force(ham):
    N = ham.size
    Z, site, pair = 0.0, np.zeros(N), np.zeros((N, N))
    for s in itertools.product([-1.0, 1.0], repeat=N):
        s = np.array(s)
        w = math.exp(ham.energy(s))
        Z += w
        site += w * s
        pair += w * np.outer(s, s)
    return site / Z, pair / Z, math.log(Z / 2**N)


def test_exact_posterior_matches_brute_force():
    ham = random_ham(6, 1)
    ex = exact_posterior(ham)
    site, pair, logZ = brute_force(ham)
    assert np.allclose(ex.site_means, site)
    assert np.allclose(ex.pair_means, pair)
    assert ex.logZ == pytest.approx(logZ)


def test_exact_posterior_chunking():
    ham = random_ham(9, 2)
    a, b = exact_posterior(ham), exact_posterior(ham, chunk=7)
    assert np.allclose(a.pair_means, b.pair_means) and a.logZ == pytest.approx(b.logZ)


def test_exact_limit():
    with pytest.raises(ValueError):
        exact_posterior(Hamiltonian(np.zeros((23, 1)), np.zeros((23, 23)), np.zeros(23)))


@given(st.integers(2, 7), st.integers(0, 2**31))
def test_sign_symmetry_without_field(N, seed):
    ham = random_ham(N, seed, field=False)
    rng = np.random.default_rng(seed)
    s = np.where(rng.random(N) < 0.5, 1, -1)
    assert ham.energy(s) == pytest.approx(ham.energy(-s))
    ex = exact_posterior(ham)
    assert np.allclose(ex.site_means, 0, atol=1e-12)


@given(hnp.arrays(np.float64, (5, 5), elements=st.floats(-2, 2)), st.integers(0, 2**31))
def test_backends_agree_bitwise(A, seed):
    J = np.triu(A, 1)
    J = J + J.T
    rng = np.random.default_rng(seed)
    s0 = np.where(rng.random(5) < 0.5, 1, -1).astype(np.int8)
    u = rng.random((7, 5))
    scales = np.linspace(0.2, 1.0, 7)
    h = rng.normal(size=5)
    out = []
    for fn in (_sweeps_numpy, _sweeps_numba):
        s = s0.copy()
        f = J @ s.astype(np.float64) + h
        tr = np.empty((7, 5), np.int8)
        fn(J, f, s, u, scales, tr)
        out.append((s, f, tr))
    assert np.array_equal(out[0][0], out[1][0])
    assert np.array_equal(out[0][2], out[1][2])
    assert np.allclose(out[0][1], out[1][1], rtol=0, atol=1e-12)


def test_fields_stay_consistent():
    ham = random_ham(12, 3)
    s = np.ones(12, np.int8)
    f = ham.J @ s.astype(np.float64) + ham.h
    heat_bath_sweeps(ham.J, f, s, np.random.default_rng(0).random((50, 12)), np.ones(50), np.empty((0, 12), np.int8))
    assert np.allclose(f, ham.J @ s + ham.h)


def test_heat_bath_single_site_probability():
    # one site with field 0.7: P(+1) = (1 + tanh 0.7) / 2
    ham = Hamiltonian(np.zeros((1, 1)), np.zeros((1, 1)), np.array([0.7]))
    rng = np.random.default_rng(5)
    hits = []
    run_chain(ham, 40_000, rng, record_from=0, on_chunk=lambda t: hits.append(t[:, 0]))
    frac = (np.concatenate(hits) > 0).mean()
    p = 0.5 * (1 + math.tanh(0.7))
    assert abs(frac - p) < 4 * math.sqrt(p * (1 - p) / 40_000)


def test_glauber_sweep_matches_chain():
    ham = random_ham(8, 4)
    s0 = np.ones(8, np.int8)
    a = glauber_sweep(ham, s0, np.random.default_rng(9))
    b = run_chain(ham, 1, np.random.default_rng(9), init=s0)
    assert np.array_equal(a, b)
    assert np.array_equal(s0, np.ones(8))


def test_chain_moments_against_exact():
    ham = random_ham(6, 8)
    ex = exact_posterior(ham)
    cm = chain_moments(ham, 20_000, np.random.default_rng(2), burn_in=500)
    # frozen sites have zero batch variance, hence the small absolute floor
    err = np.abs(cm.site_mean - ex.site_means)
    assert (err <= 4.5 * cm.site_se + 1e-3).all()


def test_numpy_fallback_flag():
    code = "from z2sync import _accel; print(_accel.backend())"
    env = dict(os.environ, Z2SYNC_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env["Z2SYNC_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == _accel.backend()


def test_backend_dispatch_same_chain():
    ham = random_ham(10, 6)
    res = []
    for backend in ("numpy", "numba"):
        s = np.ones(10, np.int8)
        f = ham.J @ s.astype(np.float64) + ham.h
        u = stream(1, "t").random((30, 10))
        heat_bath_sweeps(ham.J, f, s, u, np.ones(30), np.empty((0, 10), np.int8), backend=backend)
        res.append(s)
    assert np.array_equal(*res)


@pytest.fixture(scope="module")
def lattice():
    params = ModelParams(d=2, n=12, p=0.1, eta=0.5, range_L=12, seed=21)
    inst = generate_instance(params, goe=False)
    part = build_partition(12, 2, 6)
    return inst, part, build_block_side_info(inst, part)


def test_lattice_couplings_count_edges_once(lattice):
    inst, _, _ = lattice
    coords = np.array([(x, y) for x in range(3) for y in range(2)])
    J = lattice_couplings(inst, coords)
    beta = inst.params.beta
    assert np.count_nonzero(np.triu(J)) == 7
    assert J[0, 2] == pytest.approx(beta * inst.edge((0, 0), (1, 0)))
    assert J[0, 1] == pytest.approx(beta * inst.edge((0, 0), (0, 1)))


def test_region_hamiltonian_channels(lattice):
    inst, _, _ = lattice
    coords = np.array([(0, y) for y in range(4)])
    plain = region_hamiltonian(inst, coords)
    full = region_hamiltonian(inst, coords, lam=0.5, goe="region", eta=1.0)
    assert not plain.h.any() and full.h.any()
    assert full.const < 0
    with pytest.raises(ValueError):
        region_hamiltonian(inst, coords, goe="bogus")
    zero = generate_instance(inst.params.with_(p=0.0), goe=False)
    with pytest.raises(ValueError):
        region_hamiltonian(zero, coords)


def test_two_block_hamiltonian_contains_both_blocks(lattice):
    inst, part, side = lattice
    b2 = part.grid.index((0, 1))
    b = part.grid.index((0, 0))
    ham, pos2 = two_block_hamiltonian(inst, part, side, b, b2)
    assert ham.size == 2 * part.block_size - part.joint_size
    assert np.array_equal(ham.coords[pos2], part.vertices((0, 1)))
    one = block_hamiltonian(inst, part, side, b)
    # B's own side couplings are present unchanged where B' has no pair
    mask = np.ones((part.block_size, part.block_size), bool)
    inside = pos2[pos2 < part.block_size]
    mask[np.ix_(inside, inside)] = False
    assert np.allclose(ham.J[: part.block_size, : part.block_size][mask], one.J[mask])


def test_block_sample_reproducible(lattice):
    inst, part, side = lattice
    a = sample_block_posterior(inst, part, side, 0, sweeps=50)
    b = sample_block_posterior(inst, part, side, 0, sweeps=50)
    c = sample_block_posterior(inst, part, side, 0, sweeps=50, replica=1)
    assert np.array_equal(a.spins, b.spins)
    assert not np.array_equal(a.spins, c.spins)
    assert a.meta["anneal"] == 10


def test_scalar_field_read_off():
    inst = generate_instance(ModelParams(d=2, n=3, p=0.2, seed=2), goe=False)
    lam = 0.7
    from z2sync.gibbs import scalar_observations

    ham = region_hamiltonian(inst, [[1, 1]], lam=lam)
    y = scalar_observations(inst, lam, [[1, 1]])
    assert ham.h[0] == pytest.approx(math.sqrt(lam) * y[0])
    ex = exact_posterior(ham)
    assert ex.site_means[0] == pytest.approx(math.tanh(math.sqrt(lam) * y[0]), abs=1e-12)


def test_null_hamiltonian():
    inst = generate_instance(ModelParams(d=2, n=3, p=0.5, eta=0.0, seed=2), goe=False)
    coords = np.array([(x, y) for x in range(3) for y in range(3)])
    ham = region_hamiltonian(inst, coords)
    assert not ham.h.any() and not ham.J.any()
    cm = chain_moments(ham, 20_000, np.random.default_rng(3), burn_in=100)
    assert (np.abs(cm.site_mean) <= 3.5 * cm.site_se).all()


def test_one_edge_pair_mean_is_delta():
    inst = generate_instance(ModelParams(d=2, n=3, p=0.2, seed=5), goe=False)
    ham = region_hamiltonian(inst, [[0, 0], [1, 0]])
    ex = exact_posterior(ham)
    assert ex.pair_means[0, 1] == pytest.approx(inst.edge((0, 0), (1, 0)) * 0.6, abs=1e-12)
    assert np.allclose(ex.site_means, 0, atol=1e-15)


def test_two_spin_chain_stationary_correlation():
    beta = math.atanh(0.6)
    ham = Hamiltonian(np.zeros((2, 1)), np.array([[0, beta], [beta, 0]]), np.zeros(2))
    cm = chain_moments(ham, 100_000, np.random.default_rng(7), burn_in=100)
    assert abs(cm.pair_mean[0, 1] - 0.6) <= 3 * cm.pair_se[0, 1]


@given(st.integers(0, 2**31))
def test_flip_energy_identity(seed):
    rng = np.random.default_rng(seed)
    params = ModelParams(d=2, n=3, p=0.15, eta=0.8, seed=seed % 1000)
    inst = generate_instance(params, goe=False)
    coords = np.array([(x, y) for x in range(-1, 2) for y in range(-1, 2)])
    ham = region_hamiltonian(inst, coords, lam=0.3, goe="region")
    s = np.where(rng.random(9) < 0.5, 1, -1)
    x = int(rng.integers(9))
    t = s.copy()
    t[x] = -t[x]
    assert ham.energy(t) - ham.energy(s) == pytest.approx(-2 * s[x] * ham.local_field(s, x), abs=1e-9)


def test_detailed_balance_of_heat_bath():
    ham = random_ham(5, 11)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = np.where(rng.random(5) < 0.5, 1.0, -1.0)
        x = int(rng.integers(5))
        t = s.copy()
        t[x] = -t[x]
        h = ham.local_field(s, x)
        p_to = lambda new: 0.5 * (1 + math.tanh(h)) if new > 0 else 0.5 * (1 - math.tanh(h))  # noqa: E731
        lhs = math.exp(ham.energy(s)) * p_to(t[x])
        rhs = math.exp(ham.energy(t)) * p_to(s[x])
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_three_by_three_marginals():
    params = ModelParams(d=2, n=3, p=0.15, eta=0.5, seed=12)
    inst = generate_instance(params, goe=False)
    coords = np.array([(x, y) for x in range(-1, 2) for y in range(-1, 2)])
    ham = region_hamiltonian(inst, coords, goe="region")
    ex = exact_posterior(ham)
    cm = chain_moments(ham, 50_000, np.random.default_rng(1), burn_in=500)
    assert np.abs(cm.pair_mean - ex.pair_means).max() < 0.02


def test_consistency_sixteen_sites():
    params = ModelParams(d=2, n=3, p=0.2, eta=0.5, seed=13)
    inst = generate_instance(params, goe=False)
    coords = np.array([(x, y) for x in range(-2, 2) for y in range(-2, 2)])
    ham = region_hamiltonian(inst, coords, goe="region", lam=0.5)
    ex = exact_posterior(ham)
    cm = chain_moments(ham, 100_000, np.random.default_rng(8), burn_in=1000, n_batches=100)
    iu = np.triu_indices(16, 1)
    z = np.abs(cm.pair_mean - ex.pair_means)[iu] / cm.pair_se[iu]
    # 120 correlated comparisons: allow the few 3-sigma exceedances chance predicts
    assert np.mean(z > 3) <= 0.03 and z.max() < 5


def test_strong_side_information_recovers_block(lattice):
    inst, part, _ = lattice
    strong = generate_instance(inst.params.with_(eta=1e3), goe=False)
    side = build_block_side_info(strong, part)
    s = sample_block_posterior(strong, part, side, 0, sweeps=100)
    truth = strong.theta.ravel()[part.vertex_index[0]]
    # agreement on 99% of sites up to global sign <=> |overlap| >= 0.98
    assert abs(np.mean(s.spins * truth)) >= 0.98


def test_uninformative_samples_are_uniform():
    params = ModelParams(d=2, n=12, p=0.5, eta=0.0, range_L=12, seed=4)
    inst = generate_instance(params, goe=False)
    part = build_partition(12, 2, 6)
    side = build_block_side_info(inst, part)
    truth = inst.theta.ravel()[part.vertex_index]
    m = np.array([np.mean(sample_block_posterior(inst, part, side, b, sweeps=20).spins * truth[b])
                  for b in range(part.n_blocks)])
    assert abs(m.mean()) <= 3 / math.sqrt(part.block_size * part.n_blocks)


def test_two_block_sample(lattice):
    inst, part, side = lattice
    a = sample_two_block_posterior(inst, part, side, 0, 1, sweeps=30)
    assert len(a.spins) == 2 * part.block_size - part.joint_size


def test_benchmark_script_runs(capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    assert mod.main(["--sizes", "10", "--sweeps", "5", "--repeat", "1"]) == 0
    assert "speedup" in capsys.readouterr().out
