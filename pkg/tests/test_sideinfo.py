import math

import numpy as np
import pytest

from z2sync.geometry import build_partition
from z2sync.model import ModelParams, generate_instance
from z2sync.sideinfo import build_block_side_info, direction_label, split_gaussian


@pytest.fixture(scope="module")
def setup():
    params = ModelParams(d=2, n=12, p=0.1, eta=1.0, range_L=12, seed=3)
    inst = generate_instance(params, goe=False)
    part = build_partition(12, 2, 6)
    return inst, part, build_block_side_info(inst, part, 0.5)


def test_split_gaussian_is_two_independent_halves():
    rng = np.random.default_rng(0)
    x = np.where(rng.random(200_000) < 0.5, 1.0, -1.0)
    s = 2.0
    obs = s * x + rng.standard_normal(x.size)
    a, b = split_gaussian(obs, np.random.default_rng(1))
    for half in (a, b):
        resid = half - s / math.sqrt(2) * x
        assert resid.mean() == pytest.approx(0, abs=0.01)
        assert resid.var() == pytest.approx(1, abs=0.01)
    assert np.corrcoef(a - s / math.sqrt(2) * x, b - s / math.sqrt(2) * x)[0, 1] == pytest.approx(0, abs=0.01)


def test_family_sizes_and_snr(setup):
    inst, part, side = setup
    fams = side.families(0)
    assert len(fams) == 3 * 2 * 2
    N, J = part.block_size, part.joint_size
    for f in fams:
        size = {"bullet": N, "cap": J, "minus": N - J}[f.name]
        assert len(f) == size * (size - 1) // 2
        w = 0.5
        assert f.snr == pytest.approx(w * 1.0 / size)
    assert side.count() == sum(len(f) for f in fams)


def test_signal_is_calibrated(setup):
    inst, part, side = setup
    truth = inst.theta.ravel()[part.vertex_index[0]]
    vals = []
    for f in side.families(0):
        if f.name == "bullet":
            vals.append(f.values * truth[f.rows] * truth[f.cols] - math.sqrt(f.snr))
    z = np.concatenate(vals)
    assert abs(z.mean()) < 4 / math.sqrt(len(z))


def test_t_extremes_drop_families(setup):
    inst, part, _ = setup
    only_bullet = build_block_side_info(inst, part, 1.0)
    J1, c1 = only_bullet.coupling(0)
    fams = only_bullet.families(0)
    expected = -0.5 * sum(f.snr * len(f) for f in fams if f.name == "bullet")
    assert c1 == pytest.approx(expected)
    assert np.allclose(J1, J1.T) and np.all(np.diag(J1) == 0)


def test_coupling_reproducible(setup):
    _, _, side = setup
    J1, c1 = side.coupling(1)
    J2, c2 = side.coupling(1)
    assert np.array_equal(J1, J2) and c1 == c2
    assert not np.array_equal(J1, side.coupling(0)[0])


def test_zero_eta_has_no_coupling():
    params = ModelParams(d=2, n=12, p=0.1, eta=0.0, range_L=12, seed=3)
    inst = generate_instance(params, goe=False)
    side = build_block_side_info(inst, build_partition(12, 2, 6))
    J, c = side.coupling(0)
    assert not J.any() and c == 0.0


def test_validation():
    params = ModelParams(d=2, n=12, p=0.1, eta=1.0, range_L=6, seed=3)
    inst = generate_instance(params, goe=False)
    part = build_partition(12, 2, 6)
    with pytest.raises(ValueError):
        build_block_side_info(inst, part)
    inst2 = generate_instance(params.with_(range_L=12), goe=False)
    with pytest.raises(ValueError):
        build_block_side_info(inst2, part, t=1.5)


def test_direction_labels():
    assert [direction_label(j, 2) for j in range(4)] == ["+e1", "-e1", "+e2", "-e2"]


def test_split_pure_noise_is_independent():
    rng = np.random.default_rng(3)
    a, b = split_gaussian(rng.standard_normal(100_000), rng)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_split_twice_gives_four_quarter_snr_copies():
    rng = np.random.default_rng(4)
    s = 3.0
    x = np.where(rng.random(100_000) < 0.5, 1.0, -1.0)
    obs = s * x + rng.standard_normal(x.size)
    copies = []
    for half in split_gaussian(obs, rng):
        copies += split_gaussian(half, rng)
    for c in copies:
        sig = c * x
        assert abs(sig.mean() - s / 2) <= 3 * sig.std() / math.sqrt(x.size)
        assert np.var(c - s / 2 * x) == pytest.approx(1.0, rel=0.02)


@pytest.mark.parametrize("t,silent", [(1.0, {"cap", "minus"}), (0.0, {"bullet"})])
def test_degenerate_split_carries_no_signal(setup, t, silent):
    inst, part, _ = setup
    side = build_block_side_info(inst, part, t)
    truth = inst.theta.ravel()[part.vertex_index[0]]
    for f in side.families(0):
        if f.name in silent:
            assert f.snr == 0.0
            z = f.values * truth[f.rows] * truth[f.cols]
            assert abs(z.mean()) <= 4 / math.sqrt(len(z))


def test_family_count_formula(setup):
    _, part, side = setup
    N, J = part.block_size, part.joint_size
    pairs = lambda k: k * (k - 1) // 2  # noqa: E731
    assert side.count() == 2 * 2 * (pairs(N) + pairs(J) + pairs(N - J))
