import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from z2sync.geometry import build_partition
from z2sync.model import ModelParams, generate_instance
from z2sync.renorm import (
    bootstrap_se, effective_noise_curve, null_p_hat, overlap_report, pooled_p_hat, renormalize, renormalize_from_samples,
    renormalize_params, sample_all_blocks, sign,
)
from z2sync.rng import rep_seed
from z2sync.sideinfo import build_block_side_info


@pytest.fixture(scope="module")
def setup():
    params = ModelParams(d=2, n=20, p=0.08, eta=0.3, range_L=12, seed=5)
    inst = generate_instance(params, goe=False)
    part = build_partition(20, 2, 6)
    return inst, part, build_block_side_info(inst, part)


def test_sign_of_zero_is_plus():
    assert sign([0, -3, 2]).tolist() == [1, -1, 1]


def test_truth_samples_give_clean_instance(setup):
    inst, part, _ = setup
    truth = inst.theta.ravel()[part.vertex_index]
    r = renormalize_from_samples(inst, part, truth)
    assert (r.tilde_theta == 1).all()
    assert r.p_hat == 0.0 and r.delta_hat == 1.0
    assert (r.joint_products() == part.joint_size).all()


@given(st.lists(st.booleans(), min_size=25, max_size=25))
def test_global_flips_per_block_are_invisible(flips):
    params = ModelParams(d=2, n=20, p=0.08, eta=0.3, range_L=12, seed=5)
    inst = generate_instance(params, goe=False)
    part = build_partition(20, 2, 6)
    truth = inst.theta.ravel()[part.vertex_index]
    s = np.where(np.array(flips)[:, None], -1, 1) * truth
    r = renormalize_from_samples(inst, part, s)
    assert np.array_equal(r.tilde_theta, np.where(flips, -1, 1))
    assert not r.disagree.any()


def test_shape_checked(setup):
    inst, part, _ = setup
    with pytest.raises(ValueError):
        renormalize_from_samples(inst, part, np.ones((2, 3)))


def test_samples_independent_of_threads(setup):
    inst, part, side = setup
    a = sample_all_blocks(inst, part, side, sweeps=30, threads=1)
    b = sample_all_blocks(inst, part, side, sweeps=30, threads=3)
    assert np.array_equal(a, b)


def test_renormalize_low_noise(setup):
    inst, part, side = setup
    r = renormalize(inst, part, side, sweeps=200)
    assert r.n_edges == 2 * 5 * 4
    assert r.p_hat < 0.2
    rep = overlap_report(r)
    assert set(rep.summary) >= {"E[M_B^2]", "E[W^2]", "E[W M_B M_B']"}
    assert 0 <= rep.summary["E[M_B^2]"][0] <= 1


def test_pooled_p_hat(setup):
    inst, part, _ = setup
    truth = inst.theta.ravel()[part.vertex_index]
    clean = renormalize_from_samples(inst, part, truth)
    p, se = pooled_p_hat([clean, clean])
    assert p == 0.0 and se == 0.0


def test_bootstrap_se_matches_normal_theory():
    x = np.random.default_rng(0).normal(size=400)
    assert bootstrap_se(x, n_boot=2000) == pytest.approx(x.std() / 20, rel=0.15)
    assert np.isnan(bootstrap_se([1.0]))


def test_noise_curve_validates():
    with pytest.raises(ValueError):
        effective_noise_curve(ModelParams(n=20), [6], 0)
    with pytest.raises(ValueError):
        effective_noise_curve(ModelParams(n=20), [], 1)


def test_write_csv(setup, tmp_path):
    inst, part, _ = setup
    r = renormalize_from_samples(inst, part, inst.theta.ravel()[part.vertex_index])
    r.write_csv(tmp_path / "e.csv", tmp_path / "b.csv", "abc")
    edges = (tmp_path / "e.csv").read_text().splitlines()
    blocks = (tmp_path / "b.csv").read_text().splitlines()
    assert len(edges) == 1 + r.n_edges and len(blocks) == 1 + part.n_blocks
    assert edges[1].endswith(",abc")


def test_plug_in_overlaps_are_one(setup):
    inst, part, _ = setup
    r = renormalize_from_samples(inst, part, inst.theta.ravel()[part.vertex_index])
    rep = overlap_report(r)
    assert (rep.m_B == 1).all() and (rep.m_core == 1).all() and (rep.w == 1).all()
    assert rep.summary["E[W M_B M_B']"][0] == 1.0


def test_one_block_flip_covariance(setup):
    inst, part, _ = setup
    truth = inst.theta.ravel()[part.vertex_index]
    rng = np.random.default_rng(2)
    s = np.where(rng.random(truth.shape) < 0.8, truth, -truth)
    base = overlap_report(renormalize_from_samples(inst, part, s))
    s2 = s.copy()
    s2[7] = -s2[7]
    r2 = renormalize_from_samples(inst, part, s2)
    flip = overlap_report(r2)
    touches = (r2.edges == 7).any(axis=1)
    assert np.array_equal(flip.m_B[7], -base.m_B[7])
    assert np.array_equal(flip.w[touches], -base.w[touches])
    assert np.array_equal(flip.w[~touches], base.w[~touches])
    prod = lambda rep: rep.w * rep.m_B[r2.edges[:, 0]] * rep.m_B[r2.edges[:, 1]]  # noqa: E731
    assert np.array_equal(prod(flip), prod(base))


def test_uninformative_renormalization():
    params = ModelParams(d=2, n=45, p=0.5, eta=0.0, range_L=12, seed=8)
    inst = generate_instance(params, goe=False)
    part = build_partition(45, 2, 6)
    r = renormalize(inst, part, build_block_side_info(inst, part), sweeps=20)
    # the no-information value sits slightly below 1/2 at finite scale
    null, null_se = null_p_hat(part)
    se = np.sqrt(0.25 / r.n_edges)
    assert abs(r.p_hat - null) <= 3 * np.hypot(se, null_se)
    m2 = overlap_report(r).m_B ** 2
    assert abs(m2.mean() - 1 / part.block_size) <= 3 * m2.std(ddof=1) / np.sqrt(len(m2))


def test_null_p_hat_below_half():
    p6, se6 = null_p_hat(build_partition(18, 2, 6))
    p12, se12 = null_p_hat(build_partition(36, 2, 12))
    assert 0.48 < p6 < 0.49
    assert p6 < p12 < 0.5


def test_near_symmetric_channel_both_scales():
    rows = effective_noise_curve(ModelParams(d=2, n=30, p=0.49, eta=0.0, seed=4), [6, 12], reps=6, sweeps=100)
    for row in rows:
        null, null_se = null_p_hat(build_partition(30, 2, row["scale_L"]))
        se = max(row["se"], np.sqrt(0.25 / row["edges"]))
        assert abs(row["p_hat"] - null) <= 3 * np.hypot(se, null_se)


def test_low_noise_shrinks_flip_rate():
    params = ModelParams(d=2, n=20, p=0.01, eta=1.0, seed=10)
    runs = [renormalize_params(params.with_(seed=rep_seed(10, r)), 6, sweeps=200) for r in range(20)]
    assert sum(r.p_hat < 0.01 for r in runs) > 10
    assert pooled_p_hat(runs)[0] < 0.01
