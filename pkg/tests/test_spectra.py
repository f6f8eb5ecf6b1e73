import numpy as np
import pytest

from normgd.norms import (BlockL12Norm, EuclideanNorm, LinfNorm,
                          PreconditionedNorm, SpectralMaxNorm)
from normgd.objectives import QuadraticObjective
from normgd.params import BlockLayout, ParamVector, RngState, gaussian_like
from normgd.quadlab import oracle_constants, random_pd_matrix
from normgd.spectra import (FwConfig, directional_curvature,
                            directional_smoothness, fw_gap,
                            projected_power_iteration,
                            sharpness_bruteforce_linf, sharpness_closed,
                            sharpness_fw)

from conftest import GEOMETRIES, norm_for, vec


def hvp_of(H, layout):
    return lambda v: ParamVector(layout, H @ v.data)


# -- directional smoothness -----------------------------------------------------

def test_directional_smoothness_rayleigh_chord():
    lay = BlockLayout.flat(2)
    obj = QuadraticObjective(np.diag([2.0, 0.0]))
    w, y = vec(lay, [1, 0]), vec(lay, [0, 0])
    assert abs(directional_smoothness(obj, w, y, EuclideanNorm(lay)) - 2.0) < 1e-12
    assert abs(directional_smoothness(obj, w, y, LinfNorm(lay)) - 2.0) < 1e-12


def test_directional_smoothness_zero_chord_rejected():
    lay = BlockLayout.flat(2)
    obj = QuadraticObjective(np.eye(2))
    w = vec(lay, [1, 1])
    with pytest.raises(ValueError):
        directional_smoothness(obj, w, w, EuclideanNorm(lay))


@pytest.mark.parametrize("variant", GEOMETRIES)
def test_directional_smoothness_closed_form_on_quadratics(mixed_layout, variant):
    H = random_pd_matrix(mixed_layout.total_dim, 8.0, 2)
    obj = QuadraticObjective(H, layout=mixed_layout)
    norm = norm_for(variant, mixed_layout)
    rng = RngState(55)
    for _ in range(100):
        w = gaussian_like(mixed_layout, rng)
        y = gaussian_like(mixed_layout, rng)
        delta = y.data - w.data
        want = float(delta @ (H @ delta)) / norm.norm_value(ParamVector(mixed_layout, delta)) ** 2
        got = directional_smoothness(obj, w, y, norm)
        assert abs(got - want) <= 1e-10 * max(abs(want), 1.0)


# -- restarted conditional-gradient estimator ------------------------------------

def test_fw_euclidean_power_like():
    lay = BlockLayout.flat(2)
    est = sharpness_fw(hvp_of(np.diag([3.0, 1.0]), lay), EuclideanNorm(lay),
                       FwConfig(iters=200, restarts=3, seed=0))
    assert abs(est.value - 3.0) <= 1e-6


def test_fw_linf_exact_small():
    lay = BlockLayout.flat(2)
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    est = sharpness_fw(hvp_of(H, lay), LinfNorm(lay), FwConfig(iters=200, restarts=8, seed=0))
    assert abs(est.value - 6.0) <= 1e-9
    assert np.allclose(np.abs(est.direction.data), 1.0)


def test_fw_isotropic_scaling():
    d = 6
    lay = BlockLayout.flat(d)
    c = 0.7
    est = sharpness_fw(hvp_of(c * np.eye(d), lay), LinfNorm(lay),
                       FwConfig(iters=100, restarts=4, seed=1))
    assert abs(est.value - c * d) <= 1e-9  # max on the cube is c*d


def test_fw_estimate_invariants():
    lay = BlockLayout.flat(6)
    H = random_pd_matrix(6, 10.0, 4)
    est = sharpness_fw(hvp_of(H, lay), LinfNorm(lay), FwConfig(iters=80, restarts=6, seed=3))
    assert est.value == max(est.per_restart)
    d = est.direction
    quad = float(d.data @ (H @ d.data))
    assert abs(quad - est.value) <= 1e-10 * max(abs(est.value), 1.0)
    assert est.fw_gap >= -1e-10


def test_fw_monotone_in_restarts():
    lay = BlockLayout.flat(8)
    H = RngState(7).normal(64).reshape(8, 8)
    H = 0.5 * (H + H.T)
    vals = []
    for M in (1, 2, 4, 8):
        est = sharpness_fw(hvp_of(H, lay), LinfNorm(lay), FwConfig(iters=60, restarts=M, seed=5))
        vals.append(est.value)
    assert all(b >= a for a, b in zip(vals, vals[1:]))  # max-fold over a shared stream


def test_fw_threaded_matches_sequential():
    lay = BlockLayout.flat(8)
    H = random_pd_matrix(8, 10.0, 9)
    cfg = FwConfig(iters=50, restarts=6, seed=2)
    seq = sharpness_fw(hvp_of(H, lay), LinfNorm(lay), cfg, threads=1)
    par = sharpness_fw(hvp_of(H, lay), LinfNorm(lay), cfg, threads=4)
    assert seq.value == par.value
    assert seq.per_restart == par.per_restart


def test_fw_never_exceeds_enumeration():
    lay = BlockLayout.flat(10)
    for seed in range(10):
        A = RngState(seed).normal(100).reshape(10, 10)
        H = 0.5 * (A + A.T)
        truth, _ = sharpness_bruteforce_linf(H)
        est = sharpness_fw(hvp_of(H, lay), LinfNorm(lay), FwConfig(iters=100, restarts=10, seed=seed))
        assert est.value <= truth + 1e-8


# -- closed forms and enumeration ------------------------------------------------

def test_closed_euclidean():
    lay = BlockLayout.flat(2)
    est = sharpness_closed(EuclideanNorm(lay), H=np.diag([3.0, 1.0]))
    assert abs(est.value - 3.0) <= 1e-12


def test_closed_euclidean_hvp_indefinite():
    lay = BlockLayout.flat(6)
    A = RngState(13).normal(36).reshape(6, 6)
    H = 0.5 * (A + A.T) - 2.0 * np.eye(6)  # push the spectrum negative
    lam_max = np.linalg.eigvalsh(H)[-1]
    est = sharpness_closed(EuclideanNorm(lay), hvp=hvp_of(H, lay), seed=2)
    assert abs(est.value - lam_max) <= 1e-8 * max(1.0, abs(lam_max))


def test_closed_preconditioned_cancellation():
    lay = BlockLayout.flat(2)
    n = PreconditionedNorm(lay, diag=np.array([4.0, 1.0]))
    est = sharpness_closed(n, H=np.diag([4.0, 1.0]))
    assert abs(est.value - 1.0) <= 1e-10


def test_closed_preconditioned_change_of_variables():
    d = 6
    lay = BlockLayout.flat(d)
    rng = RngState(3)
    A = rng.normal(d * d).reshape(d, d)
    P = A @ A.T + d * np.eye(d)
    H = random_pd_matrix(d, 15.0, 8)
    n = PreconditionedNorm(lay, dense=P)
    est = sharpness_closed(n, H=H)
    import scipy.linalg

    L = np.linalg.cholesky(P)
    M = scipy.linalg.solve_triangular(L, scipy.linalg.solve_triangular(L, H, lower=True).T, lower=True)
    want = float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])
    assert abs(est.value - want) <= 1e-8 * want


def test_closed_block_l12_psd():
    lay = BlockLayout.of(("a", 2), ("b", 1))
    H = np.zeros((3, 3))
    H[:2, :2] = np.array([[2.0, 0.0], [0.0, 1.0]])
    H[2, 2] = 3.0
    est = sharpness_closed(BlockL12Norm(lay), H=H)
    assert abs(est.value - 3.0) <= 1e-9
    assert est.flag == "exact_psd"


def test_closed_block_l12_indefinite_flagged():
    lay = BlockLayout.of(("a", 2), ("b", 2))
    A = RngState(5).normal(16).reshape(4, 4)
    H = 0.5 * (A + A.T)
    est = sharpness_closed(BlockL12Norm(lay), H=H)
    assert est.flag == "psd_only_formula_not_a_bound"


def test_bruteforce_examples():
    v, s = sharpness_bruteforce_linf(np.diag([3.0, 1.0]))
    assert v == 4.0
    v, s = sharpness_bruteforce_linf(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert v == 6.0 and s[0] == s[1]
    v, s = sharpness_bruteforce_linf(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    assert v == 4.0 and s[0] == -s[1]
    with pytest.raises(ValueError):
        sharpness_bruteforce_linf(np.eye(23))


# -- stationarity gap -------------------------------------------------------------

def test_fw_gap_at_maximizer_and_saddle():
    lay = BlockLayout.flat(2)
    H = np.diag([3.0, 1.0])
    hvp = hvp_of(H, lay)
    n = EuclideanNorm(lay)
    assert abs(fw_gap(vec(lay, [1, 0]), hvp, n)) <= 1e-8
    # e2 is a stationary non-global point: the gap cannot distinguish it
    assert abs(fw_gap(vec(lay, [0, 1]), hvp, n)) <= 1e-12


def test_fw_gap_nonnegative_random():
    lay = BlockLayout.flat(8)
    n = LinfNorm(lay)
    rng = RngState(6)
    for seed in range(50):
        A = RngState(1000 + seed).normal(64).reshape(8, 8)
        H = 0.5 * (A + A.T)
        u = n.project_sphere(gaussian_like(lay, rng))
        assert fw_gap(u, hvp_of(H, lay), n) >= -1e-10


def test_fw_gap_requires_ball_membership():
    lay = BlockLayout.flat(2)
    with pytest.raises(ValueError):
        fw_gap(vec(lay, [2.0, 0.0]), hvp_of(np.eye(2), lay), EuclideanNorm(lay))


# -- projected power iteration ----------------------------------------------------

def test_projected_power_euclidean():
    lay = BlockLayout.flat(2)
    est = projected_power_iteration(hvp_of(np.diag([3.0, 1.0]), lay),
                                    EuclideanNorm(lay), iters=100, seed=0)
    assert abs(est.value - 3.0) <= 1e-8


def test_projected_power_linf_fixed_point():
    lay = BlockLayout.flat(2)
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    est = projected_power_iteration(hvp_of(H, lay), LinfNorm(lay), iters=50, seed=1)
    assert est.value == 6.0  # (1,1) is a fixed point of sign(H .)


def test_projected_power_caps_iterations():
    lay = BlockLayout.flat(4)
    H = random_pd_matrix(4, 5.0, 1)
    est = projected_power_iteration(hvp_of(H, lay), LinfNorm(lay), iters=7, seed=2)
    assert np.isfinite(est.value)


# -- curvature along fixed directions ----------------------------------------------

def test_directional_curvature_quadratic():
    lay = BlockLayout.flat(3)
    H = random_pd_matrix(3, 4.0, 2)
    obj = QuadraticObjective(H)
    d = gaussian_like(lay, RngState(8))
    want = float(d.data @ (H @ d.data))
    assert abs(directional_curvature(obj, vec(lay, [1, 2, 3]), d) - want) <= 1e-12 * abs(want)


def test_directional_curvature_matches_fw_value():
    lay = BlockLayout.flat(5)
    H = random_pd_matrix(5, 6.0, 3)
    obj = QuadraticObjective(H)
    n = LinfNorm(lay)
    est = sharpness_fw(obj.hvp_at(vec(lay, np.zeros(5))), n, FwConfig(iters=100, restarts=6, seed=4))
    w = vec(lay, np.ones(5))
    assert abs(directional_curvature(obj, w, est.direction) - est.value) <= 1e-10 * abs(est.value)


def test_directional_curvature_frozen_on_taylor():
    from normgd.objectives import MlpObjective, make_taylor

    rng = RngState(10)
    X = rng.normal(20 * 3).reshape(20, 3)
    Y = rng.normal(20 * 2).reshape(20, 2)
    obj = MlpObjective([3, 6, 2], X, Y)
    anchor = obj.init_params(0)
    tay = make_taylor(obj, anchor)
    d = gaussian_like(obj.layout, RngState(11))
    w2 = ParamVector(obj.layout, anchor.data + rng.normal(len(anchor)))
    c1 = directional_curvature(tay, anchor, d)
    c2 = directional_curvature(tay, w2, d)
    assert abs(c1 - c2) <= 1e-12 * max(abs(c1), 1.0)


# -- invariants across geometries ---------------------------------------------------

def test_lower_bound_soundness_against_oracles():
    # linf enumeration
    lay = BlockLayout.flat(12)
    for seed in range(5):
        A = RngState(2000 + seed).normal(144).reshape(12, 12)
        H = 0.5 * (A + A.T)
        truth, _ = sharpness_bruteforce_linf(H)
        est = sharpness_fw(hvp_of(H, lay), LinfNorm(lay), FwConfig(iters=100, restarts=20, seed=seed))
        assert est.value <= truth + 1e-8
    # block l12 PSD closed form
    layb = BlockLayout.of(("a", 4), ("b", 4), ("c", 4))
    for seed in range(5):
        H = random_pd_matrix(12, 20.0, 3000 + seed)
        truth = sharpness_closed(BlockL12Norm(layb), H=H).value
        est = sharpness_fw(hvp_of(H, layb), BlockL12Norm(layb), FwConfig(iters=100, restarts=20, seed=seed))
        assert est.value <= truth + 1e-8


def test_smoothness_bounded_by_sharpness_on_quadratics(mixed_layout):
    # the chord of an actual optimizer step never out-curves the global max
    from normgd.optimizers import OptimizerSpec, step

    H = random_pd_matrix(mixed_layout.total_dim, 10.0, 12)
    obj = QuadraticObjective(H, layout=mixed_layout)
    for variant in GEOMETRIES:
        norm = norm_for(variant, mixed_layout)
        case = oracle_constants(H, norm, compute_mu=False)
        w = gaussian_like(mixed_layout, RngState(13))
        spec = OptimizerSpec(norm=norm, eta=0.8 / case.S)
        for t in range(20):
            w_new, rec = step(obj, w, spec, t)
            if rec.stationary:
                break
            assert rec.dir_smoothness <= case.S + 1e-9 * max(case.S, 1.0)
            w = w_new


def test_spectral_max_scalar_blocks_match_linf_sharpness():
    lay = BlockLayout.of(*[(f"c{i}", (1, 1)) for i in range(8)])
    H = random_pd_matrix(8, 10.0, 21)
    truth, _ = sharpness_bruteforce_linf(H)
    est = sharpness_fw(hvp_of(H, lay), SpectralMaxNorm(lay), FwConfig(iters=150, restarts=30, seed=3))
    assert est.value <= truth + 1e-8
    assert est.value >= truth * (1 - 1e-6)


def test_block_l12_singleton_blocks_psd_max_diagonal():
    lay = BlockLayout.of(*[(f"c{i}", 1) for i in range(6)])
    H = random_pd_matrix(6, 8.0, 22)
    est = sharpness_closed(BlockL12Norm(lay), H=H)
    assert abs(est.value - np.max(np.diag(H))) <= 1e-9 * np.max(np.diag(H))


def test_preconditioned_sharpness_change_of_variables_fw():
    d = 6
    lay = BlockLayout.flat(d)
    rng = RngState(23)
    diag = np.exp(rng.uniform(d) * 2 - 1)
    H = random_pd_matrix(d, 10.0, 24)
    n = PreconditionedNorm(lay, diag=diag)
    est = sharpness_closed(n, H=H)
    Dh = np.diag(1.0 / np.sqrt(diag))
    want = float(np.linalg.eigvalsh(Dh @ H @ Dh)[-1])
    assert abs(est.value - want) <= 1e-8 * want
