import numpy as np
import pytest

from normgd.norms import BlockL12Norm, EuclideanNorm, LinfNorm, make_norm
from normgd.objectives import QuadraticObjective
from normgd.optimizers import OptimizerSpec
from normgd.params import BlockLayout, ParamVector, RngState, gaussian_like
from normgd.quadlab import (locate_transition, oracle_constants, pl_rate_factor,
                            random_pd_matrix, simulate, stability_diagram,
                            taylor_switch, verify_invariant_direction)

from conftest import norm_for, vec


def test_random_pd_matrix_properties():
    for seed in range(5):
        H = random_pd_matrix(8, 20.0, seed)
        evals = np.linalg.eigvalsh(H)
        assert evals[0] > 0
        assert evals[-1] / evals[0] <= 20.0 * (1 + 1e-12)
        assert np.abs(H - H.T).max() == 0.0


def test_oracle_euclidean_diag():
    lay = BlockLayout.flat(2)
    case = oracle_constants(np.diag([3.0, 1.0]), EuclideanNorm(lay))
    assert case.S == 3.0 and case.mu == 1.0
    assert np.allclose(np.abs(case.dhat.data), [1.0, 0.0])


def test_oracle_linf_diag():
    lay = BlockLayout.flat(2)
    case = oracle_constants(np.diag([3.0, 1.0]), LinfNorm(lay))
    assert case.S == 4.0                       # attained at (+-1, +-1)
    assert abs(case.mu - 1.0) <= 1e-6          # attained at e2 on the cube face
    assert np.allclose(np.abs(case.dhat.data), 1.0)


def test_oracle_block_l12_blockdiag():
    lay = BlockLayout.of(("a", 2), ("b", 1))
    H = np.zeros((3, 3))
    H[:2, :2] = np.diag([2.0, 1.0])
    H[2, 2] = 3.0
    case = oracle_constants(H, BlockL12Norm(lay))
    assert abs(case.S - 3.0) <= 1e-12
    assert np.allclose(np.abs(case.dhat.data), [0, 0, 1])


def test_oracle_preconditioned_exact():
    lay = BlockLayout.flat(4)
    diag = np.array([4.0, 1.0, 2.0, 0.5])
    n = make_norm("preconditioned", lay, diag=diag)
    H = np.diag([4.0, 1.0, 2.0, 0.5])
    case = oracle_constants(H, n)
    assert abs(case.S - 1.0) <= 1e-12  # exact cancellation
    assert abs(case.mu - 1.0) <= 1e-12
    assert abs(n.norm_value(case.dhat) - 1.0) <= 1e-12


@pytest.mark.parametrize("variant", ["euclidean", "linf", "block_l12",
                                     "preconditioned", "spectral_max", "spectral_sum"])
def test_invariant_direction_random_pd(mixed_layout, variant):
    # spectral geometries get square 2x2 blocks, where the torus-grid oracle
    # is effectively exact; elsewhere the mixed layout exercises more shapes
    if variant.startswith("spectral"):
        layout = BlockLayout.of(("m1", (2, 2)), ("m2", (2, 2)))
    else:
        layout = mixed_layout
    norm = norm_for(variant, layout)
    for seed in range(10):
        H = random_pd_matrix(layout.total_dim, 20.0, 400 + seed)
        case = oracle_constants(H, norm, compute_mu=False)
        report = verify_invariant_direction(H, norm, case.dhat)
        assert report["passed"], (variant, seed, report)
        assert abs(float(case.dhat.data @ (H @ case.dhat.data)) - case.S) \
            <= 1e-8 * max(case.S, 1.0)


def test_quadcase_constants_ordered(mixed_layout):
    for variant in ("euclidean", "linf", "block_l12"):
        norm = norm_for(variant, mixed_layout)
        H = random_pd_matrix(mixed_layout.total_dim, 15.0, 77)
        case = oracle_constants(H, norm)
        assert 0 < case.mu <= case.S * (1 + 1e-9)
        assert abs(norm.norm_value(case.dhat) - 1.0) <= 1e-9


# -- dynamics ---------------------------------------------------------------------

def test_simulate_converges_with_pl_rate_bound():
    lay = BlockLayout.flat(8)
    H = random_pd_matrix(8, 12.0, 3)
    case = oracle_constants(H, EuclideanNorm(lay))
    eta = 1.0 / case.S
    w0 = gaussian_like(lay, RngState(1))
    res = simulate(H, case.norm, eta, w0, 20000)
    assert res.classification == "converged"
    rate = pl_rate_factor(case.mu, eta, case.S)
    L0 = res.losses[0]
    bound = L0 * rate ** np.arange(len(res.losses)) + 1e-12
    assert np.all(res.losses <= bound + 1e-12 * L0)


@pytest.mark.parametrize("variant", ["euclidean", "linf", "block_l12", "preconditioned"])
def test_theorem2_trajectory_identity(mixed_layout, variant):
    norm = norm_for(variant, mixed_layout)
    H = random_pd_matrix(mixed_layout.total_dim, 15.0, 31)
    case = oracle_constants(H, norm, compute_mu=False)
    eta = 2.2 / case.S
    res = simulate(H, norm, eta, case.dhat, 30, keep_iterates=True)
    assert res.steps_run == 30
    factor = 1.0 - eta * case.S          # = -1.2
    pred = case.dhat.data[None, :] * (factor ** np.arange(31))[:, None]
    scale = np.abs(pred).max(axis=1, keepdims=True)
    assert np.all(np.abs(res.iterates - pred) <= 1e-8 * scale)
    # per-step growth factor along dhat
    norms = np.linalg.norm(res.iterates, axis=1)
    growth = norms[1:] / norms[:-1]
    assert np.all(np.abs(growth - abs(factor)) <= 1e-6 * abs(factor))


def test_global_divergence_above_two_over_mu():
    lay = BlockLayout.flat(8)
    for seed in range(5):
        H = random_pd_matrix(8, 10.0, 600 + seed)
        case = oracle_constants(H, EuclideanNorm(lay))
        eta = 2.2 / case.mu
        for ws in range(3):
            w0 = gaussian_like(lay, RngState(700 + ws))
            res = simulate(H, case.norm, eta, w0, 500)
            assert res.classification == "diverged"


def test_locate_transition_euclidean():
    lay = BlockLayout.flat(8)
    H = random_pd_matrix(8, 10.0, 8)
    case = oracle_constants(H, EuclideanNorm(lay))
    eta_star = locate_transition(H, case.norm, case.dhat, 1.5 / case.S, 2.5 / case.S,
                                 rel_tol=1e-4)
    assert abs(eta_star - 2.0 / case.S) <= 1e-3 * (2.0 / case.S)


def test_stability_diagram_rows():
    lay = BlockLayout.flat(6)
    H = random_pd_matrix(6, 8.0, 9)
    case = oracle_constants(H, EuclideanNorm(lay))
    etas = [0.5 / case.S, 1.9 / case.S, 2.5 / case.S]
    rows = stability_diagram(H, case.norm, etas, case.dhat, T=20000, seed=0, n_random=2)
    assert len(rows) == len(etas) * 3
    by = {(round(r["eta"], 12), r["init"]): r["classification"] for r in rows}
    assert by[(round(etas[0], 12), "dhat")] == "converged"
    assert by[(round(etas[2], 12), "dhat")] == "diverged"
    # random inits also diverge above 2/S under the euclidean geometry
    assert by[(round(etas[2], 12), "random0")] == "diverged"
    # oscillation indicator is recorded (sign alternations happen while diverging)
    div = [r for r in rows if r["classification"] == "diverged"]
    assert any(r["sign_alternations"] > 0 for r in div)


def test_simulate_rejects_bad_horizon():
    lay = BlockLayout.flat(2)
    with pytest.raises(ValueError):
        simulate(np.eye(2), EuclideanNorm(lay), 0.1, vec(lay, [1, 0]), 0)


# -- taylor switch -----------------------------------------------------------------

def test_taylor_switch_exact_on_quadratics():
    lay = BlockLayout.flat(5)
    H = random_pd_matrix(5, 6.0, 10)
    obj = QuadraticObjective(H, layout=lay)
    w = gaussian_like(lay, RngState(2))
    spec = OptimizerSpec(norm=EuclideanNorm(lay), eta=0.5 / np.linalg.eigvalsh(H)[-1])
    true_c, tay_c = taylor_switch(obj, w, spec, 40)
    assert len(true_c) == 41 and len(tay_c) == 41
    assert np.all(np.abs(true_c - tay_c) <= 1e-10 * np.maximum(np.abs(true_c), 1.0))


def test_taylor_switch_theory_mode_perturbation():
    # seeding the frozen model on the invariant line forces divergence above 2/S
    lay = BlockLayout.flat(6)
    H = random_pd_matrix(6, 8.0, 12)
    obj = QuadraticObjective(H, layout=lay)
    case = oracle_constants(H, EuclideanNorm(lay), compute_mu=False)
    w = ParamVector(lay, np.zeros(6))  # exact minimum: unperturbed model stays put
    spec = OptimizerSpec(norm=case.norm, eta=2.2 / case.S)
    _, flat = taylor_switch(obj, w, spec, 20)
    assert np.all(flat == 0.0)
    _, kicked = taylor_switch(obj, w, spec, 20, perturb=1e-6, perturb_direction=case.dhat)
    assert kicked[-1] > 1e3 * max(kicked[0], 1e-300)
    with pytest.raises(ValueError):
        taylor_switch(obj, w, spec, 5, perturb=1e-6)


def test_taylor_switch_diverges_past_threshold():
    # frozen quadratic model of a quadratic run above 2/S diverges; below it tracks
    lay = BlockLayout.flat(6)
    H = random_pd_matrix(6, 8.0, 11)
    obj = QuadraticObjective(H, layout=lay)
    case = oracle_constants(H, EuclideanNorm(lay), compute_mu=False)
    w = gaussian_like(lay, RngState(3))
    stable = OptimizerSpec(norm=case.norm, eta=1.0 / case.S)
    _, tay_stable = taylor_switch(obj, w, stable, 50)
    assert tay_stable[-1] <= 2.0 * tay_stable[0]
    unstable = OptimizerSpec(norm=case.norm, eta=2.5 / case.S)
    _, tay_unstable = taylor_switch(obj, w, unstable, 50)
    assert np.nanmax(tay_unstable) >= 10.0 * tay_unstable[0]
