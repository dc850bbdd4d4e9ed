import numpy as np
import pytest
from scipy import linalg

from conftest import random_box_points, random_sphere_points
from sphlgcp.cov_approx import (REPLICATE_CHUNK, DenseFieldSimulator, FactorizationError,
                                FsaFieldSimulator, block_partition, build_fsa, cholesky_upper,
                                crn_normals, exact_simulate, implied_cov, replicate_chunks,
                                simulate_fields)
from sphlgcp.covariance import MultiMaternParams, exponential_cov
from sphlgcp.sphere_geom import Region, place_knots

BETA_EP = 1465.57


def sample_cov_check(x, target, n_se=4.0):
    """Max-entry deviation of the sample covariance from `target`, in standard errors."""
    s = x.shape[0]
    c = x.T @ x / s
    # var of x_k x_l for Gaussian zero-mean: S_kk S_ll + S_kl^2
    d = np.diag(target)
    se = np.sqrt((np.outer(d, d) + target**2) / s)
    return np.max(np.abs(c - target) / se)


@pytest.fixture
def fixture40():
    rng = np.random.default_rng(40)
    return random_box_points(rng, 40)


def test_knots_equal_locations_reproduce_sigma(fixture40):
    covfn = exponential_cov(BETA_EP)
    fsa = build_fsa(fixture40, fixture40, 10, covfn)
    sig = covfn(fixture40)
    w = implied_cov(fsa)
    assert np.max(np.abs(w - sig)) <= 1e-8 * np.max(np.abs(sig))
    for u in fsa.V_blocks:
        assert np.max(np.abs(u.T @ u)) <= 1e-8


def test_single_block_is_exact(fixture40):
    covfn = exponential_cov(BETA_EP)
    knots = place_knots(Region(-150, -140, -5, 5), 5)
    fsa = build_fsa(fixture40, knots, 40, covfn)
    sig = covfn(fixture40)
    assert np.max(np.abs(implied_cov(fsa) - sig)) <= 1e-10 * np.max(np.abs(sig))


def test_n40_fixture_frobenius_and_diagonal(fixture40):
    covfn = exponential_cov(BETA_EP)
    knots = place_knots(Region(-150, -140, -5, 5), 5)
    fsa = build_fsa(fixture40, knots, 10, covfn)
    sig = covfn(fixture40)
    w = implied_cov(fsa)
    frob = np.linalg.norm(w - sig) / np.linalg.norm(sig)
    assert 0.0 < frob < 0.05
    assert np.max(np.abs(np.diag(w) - np.diag(sig))) <= 1e-12
    assert len(fsa.blocks) == 4 and all(b.size == 10 for b in fsa.blocks)


def test_implied_cov_symmetric_psd(rng):
    x = random_box_points(rng, 60)
    fsa = build_fsa(x, place_knots(Region(-150, -140, -5, 5), 8), 15, exponential_cov(800.0))
    w = implied_cov(fsa)
    assert np.max(np.abs(w - w.T)) <= 1e-12
    assert np.linalg.eigvalsh(w)[0] >= -1e-8 * np.max(np.diag(w))


def test_materialization_cap(fixture40):
    fsa = build_fsa(fixture40, fixture40[:4], 10, exponential_cov(500.0))
    with pytest.raises(MemoryError):
        implied_cov(fsa, cap=39)


def test_forward_solve_residual(rng):
    for _ in range(10):
        x = random_sphere_points(rng, 80, lat_lim=30)
        knots = x[rng.choice(80, 12, replace=False)]
        fsa = build_fsa(x, knots, 20, exponential_cov(rng.uniform(300, 3000)))
        res = np.max(np.abs(fsa.R_chol.T @ fsa.B - fsa.A.T))
        assert res <= 1e-9 * np.max(np.abs(fsa.A))


def test_more_knots_never_worse(rng):
    x = random_box_points(rng, 50)
    covfn = exponential_cov(1200.0)
    sig = covfn(x)
    order = rng.permutation(50)
    errs = []
    for m in (3, 6, 12, 25):
        fsa = build_fsa(x, x[order[:m]], 10, covfn)
        errs.append(np.linalg.norm(implied_cov(fsa) - sig))
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_diagonal_exact_for_any_partition(rng):
    x = random_box_points(rng, 45)
    covfn = exponential_cov(700.0)
    knots = place_knots(Region(-150, -140, -5, 5), 6)
    for bs in (1, 4, 7, 45):
        w = implied_cov(build_fsa(x, knots, bs, covfn))
        assert np.max(np.abs(np.diag(w) - 1.0)) <= 1e-12


def test_coincident_knots_rejected(fixture40):
    knots = np.vstack([fixture40[:3], fixture40[:1]])
    with pytest.raises(ValueError, match="coincide"):
        build_fsa(fixture40, knots, 10, exponential_cov(500.0))


def test_singular_r_names_closest_pair(fixture40):
    # an invalid (indefinite) knot covariance survives every jitter level
    base = exponential_cov(1e9)

    def covfn(a, b=None):
        k = base(a, b)
        return k - 0.01 * np.eye(len(k)) if b is None and len(k) == 3 else k

    knots = np.array([[-145.0, 0.0], [-145.00001, 0.0], [-141.0, 4.0]])
    with pytest.raises(FactorizationError, match="closest knots are 0 and 1"):
        build_fsa(fixture40, knots, 10, covfn)


def test_too_many_knots(fixture40):
    with pytest.raises(ValueError):
        build_fsa(fixture40[:3], fixture40[:4], 2, exponential_cov(500.0))


def test_cholesky_jitter_ladder():
    m = np.ones((3, 3))
    u, jit = cholesky_upper(m)
    assert jit > 0
    assert np.allclose(u.T @ u, m + jit * np.eye(3))
    with pytest.raises(FactorizationError):
        cholesky_upper(-np.eye(2))


def test_block_partition_covers_and_is_coherent(rng):
    x = random_box_points(rng, 237)
    blocks = block_partition(x, 25)
    allidx = np.sort(np.concatenate(blocks))
    assert np.array_equal(allidx, np.arange(237))
    assert max(b.size for b in blocks) == 25
    # spatial coherence: within-block spread much smaller than the region
    spread = np.mean([np.ptp(x[b, 0]) + np.ptp(x[b, 1]) for b in blocks])
    assert spread < 0.6 * (10 + 10)


def test_block_partition_across_date_line():
    lon = np.concatenate([np.linspace(170, 179.5, 20), np.linspace(-180, -170.5, 20)])
    x = np.column_stack([lon, np.zeros(40)])
    blocks = block_partition(x, 10)
    for b in blocks:
        unwrapped = np.mod(x[b, 0] - 170.0, 360.0)
        assert np.ptp(unwrapped) < 6.0


def test_zero_normals_give_zero_field(fixture40):
    fsa = build_fsa(fixture40, fixture40[:5], 10, exponential_cov(500.0))
    out = simulate_fields(fsa, 1, 0, normals=(np.zeros((1, 5)), np.zeros((1, 40))))
    assert np.array_equal(out, np.zeros((1, 40)))


def test_simulation_deterministic_and_chunk_consistent(fixture40):
    fsa = build_fsa(fixture40, fixture40[:5], 10, exponential_cov(500.0))
    a = simulate_fields(fsa, 600, 11)
    b = simulate_fields(fsa, 600, 11)
    assert np.array_equal(a, b)
    # a prefix of the replicates does not depend on s
    c = simulate_fields(fsa, REPLICATE_CHUNK + 3, 11)
    assert np.array_equal(c, a[:REPLICATE_CHUNK + 3])
    assert not np.array_equal(simulate_fields(fsa, 5, 12), a[:5])


def test_replicate_chunks():
    assert list(replicate_chunks(600, 256)) == [(0, 256), (1, 256), (2, 88)]
    with pytest.raises(ValueError):
        list(replicate_chunks(0))


def test_crn_streams_independent():
    a = crn_normals(1, 0, 0, 1000)
    b = crn_normals(1, 1, 0, 1000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.15
    assert np.array_equal(a, crn_normals(1, 0, 0, 1000))


def test_simulate_targets_sigma_when_knots_are_locations():
    rng = np.random.default_rng(30)
    x = random_box_points(rng, 30)
    covfn = exponential_cov(BETA_EP)
    fsa = build_fsa(x, x, 10, covfn)
    f = simulate_fields(fsa, 200_000, 5)
    assert sample_cov_check(f, covfn(x)) < 4.0


def test_simulate_targets_w_not_sigma():
    rng = np.random.default_rng(50)
    x = random_box_points(rng, 50, lon=(-160, -130), lat=(-15, 15))
    covfn = exponential_cov(300.0)
    fsa = build_fsa(x, place_knots(Region(-160, -130, -15, 15), 10), 10, covfn)
    w = implied_cov(fsa)
    f = simulate_fields(fsa, 200_000, 8)
    assert sample_cov_check(f, w) < 4.0
    assert sample_cov_check(f, covfn(x)) > 4.0


def test_exact_simulate_variance_and_independence():
    one = exact_simulate([[0.0, 0.0]], exponential_cov(100.0, sigma2=4.0), 1_000_000, 1)
    assert one.var() == pytest.approx(4.0, rel=0.01)
    far = np.array([[0.0, 0.0], [90.0, 0.0], [180.0, 0.0]])
    ind = exact_simulate(far, exponential_cov(1e-3), 100_000, 2)
    assert sample_cov_check(ind, np.eye(3)) < 4.0


def test_exact_and_fsa_agree_in_distribution():
    rng = np.random.default_rng(31)
    x = random_box_points(rng, 20)
    covfn = exponential_cov(900.0)
    a = exact_simulate(x, covfn, 100_000, 1)
    b = simulate_fields(build_fsa(x, x, 5, covfn), 100_000, 2)
    ca, cb = a.T @ a / a.shape[0], b.T @ b / b.shape[0]
    sig = covfn(x)
    d = np.diag(sig)
    se = np.sqrt(2 * (np.outer(d, d) + sig**2) / a.shape[0])
    assert np.max(np.abs(ca - cb) / se) < 4.5


def test_field_simulators_joint_covariance(rng):
    x = random_box_points(rng, 15)
    par = MultiMaternParams([1.0, 0.5, 2.0], 1200.0,
                            [[1, 0.95, -0.11], [0.95, 1, 0.18], [-0.11, 0.18, 1]])
    from sphlgcp.covariance import assemble_joint_cov
    target = assemble_joint_cov(x, par)
    f = np.concatenate(list(DenseFieldSimulator(x).chunks(par, 100_000, 3)))
    f = f.reshape(f.shape[0], -1)
    assert sample_cov_check(f, target) < 4.0
    fs = FsaFieldSimulator(x, x, 5)
    g = np.concatenate(list(fs.chunks(par, 2000, 3)))
    assert g.shape == (2000, 3, 15)


def test_simulator_cache_reused_only_for_same_key(rng):
    x = random_box_points(rng, 12)
    sim = DenseFieldSimulator(x)
    par = MultiMaternParams([1.0, 1.0], 700.0)
    a = np.concatenate(list(sim.chunks(par, 300, 1)))
    par2 = MultiMaternParams([4.0, 1.0], 700.0)
    b = np.concatenate(list(sim.chunks(par2, 300, 1)))
    assert np.allclose(b[:, 0], 2.0 * a[:, 0]) and np.array_equal(b[:, 1], a[:, 1])
    c = np.concatenate(list(DenseFieldSimulator(x).chunks(par2, 300, 1)))
    assert np.array_equal(b, c)
    d = np.concatenate(list(sim.chunks(par, 300, 2)))
    assert not np.array_equal(a, d)
