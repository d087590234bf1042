import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dote.config import SolverConfig
from dote.csc_solver import (
    FilterBank,
    _map_system,
    _apply_system,
    csc_objective,
    infer_feature_maps,
    project_unit_ball,
    reconstruct,
    soft_threshold,
    update_feature_maps_dual,
    update_feature_maps_joint,
    update_filters,
)
from dote.errors import DimensionError, FormatError, InvalidInputError
from dote.grid import embed_kernel, rfft_grid, irfft_grid
from dote.mapping import ChannelMap
from oracles import channel_operator, dictionary_matrix, direct_csc_objective, ista

TIGHT = SolverConfig(max_inner=3000, tol=1e-12)


def instance(seed, K=2, d=3, n=8):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n, n)), FilterBank.random(K, d, 2, rng)


# --- proximal operators ------------------------------------------------------


def test_soft_threshold_examples():
    assert soft_threshold(5.0, 2.0) == 3.0
    assert soft_threshold(-1.0, 2.0) == 0.0
    assert soft_threshold(-5.0, 2.0) == -3.0
    assert soft_threshold(2.0, 2.0) == 0.0
    v = np.linspace(-3, 3, 13)
    np.testing.assert_array_equal(soft_threshold(v, 0.0), v)
    with pytest.raises(InvalidInputError):
        soft_threshold(1.0, -0.1)


def test_project_unit_ball_examples():
    f = np.full((3, 3), 0.5 / 3.0)
    np.testing.assert_array_equal(project_unit_ball(f), f)
    g = np.full((2, 2), 2.0)  # norm 4
    p = project_unit_ball(g)
    assert np.linalg.norm(p) == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(p, g / 4.0)
    np.testing.assert_array_equal(project_unit_ball(p), p)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(0, 100))
def test_soft_threshold_is_the_l1_prox(values, t):
    v = np.array(values)
    out = soft_threshold(v, t)
    assert np.all(np.abs(out) <= np.abs(v))
    assert np.all(np.abs(v - out) <= t + 1e-12)
    assert np.all(out[np.abs(v) <= t] == 0.0)


# --- filter bank -------------------------------------------------------------


def test_filter_bank_validation():
    with pytest.raises(DimensionError):
        FilterBank(np.zeros((2, 4, 4)))
    with pytest.raises(DimensionError):
        FilterBank(np.zeros((2, 3, 5)))
    with pytest.raises(InvalidInputError):
        FilterBank(np.ones((1, 3, 3)))
    F = FilterBank.random(4, 5, 3, np.random.default_rng(0))
    assert (F.K, F.d, F.rank) == (4, 5, 3)
    assert np.all(np.linalg.norm(F.filters.reshape(4, -1), axis=1) <= 1 + 1e-12)
    with pytest.raises(ValueError):
        F.filters[0, 0, 0, 0] = 1.0


def test_filter_bank_random_is_seeded():
    a = FilterBank.random(3, 3, 2, np.random.default_rng(5))
    b = FilterBank.random(3, 3, 2, np.random.default_rng(5))
    assert a.filters.tobytes() == b.filters.tobytes()


def test_filter_bank_serialization():
    F = FilterBank.random(3, 3, 2, np.random.default_rng(1))
    buf = F.to_bytes()
    assert buf[:4] == b"DFBK"
    assert struct.unpack_from("<QQB", buf, 4) == (3, 3, 2)
    G, end = FilterBank.from_bytes(buf)
    assert end == len(buf)
    assert G.filters.tobytes() == F.filters.tobytes()
    with pytest.raises(FormatError):
        FilterBank.from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        FilterBank.from_bytes(buf[:4] + struct.pack("<QQB", 4, 3, 2) + buf[21:])


# --- objective ---------------------------------------------------------------


def test_csc_objective_examples():
    x, F = instance(0)
    assert csc_objective(np.zeros((8, 8)), F, np.zeros((2, 8, 8)), 0.1) == 0.0
    assert csc_objective(x, F, np.zeros((2, 8, 8)), 0.1) == pytest.approx(0.5 * np.sum(x * x), rel=1e-14)


def test_csc_objective_matches_direct_evaluation():
    rng = np.random.default_rng(3)
    x, F = instance(3)
    S = rng.standard_normal((2, 8, 8))
    assert csc_objective(x, F, S, 0.07) == pytest.approx(direct_csc_objective(x, F.filters, S, 0.07), rel=1e-10)


def test_csc_objective_shape_checks():
    x, F = instance(0)
    with pytest.raises(DimensionError):
        csc_objective(x, F, np.zeros((3, 8, 8)), 0.1)
    with pytest.raises(DimensionError):
        reconstruct(F, np.zeros((2, 8)))


# --- map inference -----------------------------------------------------------


def test_zero_image_gives_zero_maps():
    _, F = instance(0)
    S, trace = infer_feature_maps(np.zeros((8, 8)), F, 0.05, SolverConfig())
    assert not np.any(S)
    assert trace.converged and trace.iterations == 1


def test_lambda_max_gives_zero_maps():
    x, F = instance(1)
    D = dictionary_matrix(F.filters, x.shape)
    lam_max = np.max(np.abs(D.T @ x.ravel()))
    S, _ = infer_feature_maps(x, F, lam_max * 1.001, SolverConfig(max_inner=500))
    assert not np.any(S)
    S, _ = infer_feature_maps(x, F, lam_max * 0.9, SolverConfig(max_inner=500))
    assert np.any(S)


@pytest.mark.parametrize("seed", range(3))
def test_inference_matches_ista(seed):
    x, F = instance(seed)
    D = dictionary_matrix(F.filters, x.shape)
    ref = ista(D, x.ravel(), 0.05).reshape(2, 8, 8)
    S, _ = infer_feature_maps(x, F, 0.05, SolverConfig(max_inner=2000, tol=1e-12))
    assert csc_objective(x, F, S, 0.05) <= csc_objective(x, F, ref, 0.05) + 1e-6


def test_inference_trace_is_almost_monotone():
    for seed in range(5):
        x, F = instance(seed)
        _, trace = infer_feature_maps(x, F, 0.05, SolverConfig(max_inner=200, tol=1e-10))
        obj = np.array(trace.objective)
        assert np.all(np.diff(obj[2:]) <= 1e-8)


def test_converged_solve_is_feasible():
    x, F = instance(2)
    cfg = SolverConfig(max_inner=3000, tol=1e-6)
    S, trace = infer_feature_maps(x, F, 0.05, cfg)
    assert trace.converged
    st_ = trace.state
    assert np.linalg.norm(st_.primary - st_.auxiliary) / max(np.linalg.norm(st_.primary), 1.0) < cfg.tol
    assert trace.primal_residual[-1] >= 0 and trace.dual_residual[-1] >= 0


def test_nonconverged_returns_best_iterate():
    x, F = instance(4)
    S, trace = infer_feature_maps(x, F, 0.05, SolverConfig(max_inner=5, tol=1e-12))
    assert not trace.converged
    assert csc_objective(x, F, S, 0.05) == pytest.approx(min(trace.objective))


def test_warm_start_never_loses():
    x, F = instance(5)
    S0, _ = infer_feature_maps(x, F, 0.05, TIGHT)
    S1, _ = infer_feature_maps(x, F, 0.05, SolverConfig(max_inner=3), init=S0)
    assert csc_objective(x, F, S1, 0.05) <= csc_objective(x, F, S0, 0.05)


def test_trace_csv():
    x, F = instance(0)
    _, trace = infer_feature_maps(x, F, 0.05, SolverConfig(max_inner=4, tol=1e-12))
    lines = trace.to_csv().splitlines()
    assert lines[0] == "iteration,objective,primal_residual,dual_residual"
    assert len(lines) == 5 and lines[1].startswith("1,")


def test_inference_input_checks():
    x, F = instance(0)
    with pytest.raises(InvalidInputError):
        infer_feature_maps(x, F, -0.1, SolverConfig())
    with pytest.raises(DimensionError):
        infer_feature_maps(np.zeros((2, 2)), F, 0.1, SolverConfig())
    with pytest.raises(DimensionError):
        infer_feature_maps(np.zeros((8, 8, 8)), F, 0.1, SolverConfig())


def test_spectral_solve_equals_spatial_normal_equations():
    rng = np.random.default_rng(6)
    dims = (6, 5)
    N = 30
    for K in (1, 2, 3):
        F = FilterBank.random(K, 3, 2, rng)
        Q = rng.standard_normal((K, K))
        Q = Q @ Q.T
        sigma = 0.7
        rhs = rng.standard_normal((K,) + dims)
        Minv = _map_system([F.spectra(dims)], Q, sigma)
        spectral = irfft_grid(_apply_system(Minv, rfft_grid(rhs, 2)), dims)
        D = dictionary_matrix(F.filters, dims)
        A = D.T @ D + channel_operator(Q, N) + sigma * np.eye(K * N)
        spatial = np.linalg.solve(A, rhs.ravel()).reshape(rhs.shape)
        np.testing.assert_allclose(spectral, spatial, atol=1e-8)


# --- coupled maps ------------------------------------------------------------


def test_zero_coupling_is_plain_inference():
    x, F = instance(7)
    other = np.random.default_rng(7).standard_normal((2, 8, 8))
    W = ChannelMap(np.array([[0.9, 0.2], [-0.1, 1.1]]))
    cfg = SolverConfig(max_inner=40)
    S0, _ = infer_feature_maps(x, F, 0.05, cfg)
    for direction in ("primal", "dual"):
        S1, _ = update_feature_maps_dual(x, F, other, W, direction, 0.05, 0.0, cfg)
        np.testing.assert_array_equal(S0, S1)


def test_dominant_coupling_copies_other_maps():
    x, F = instance(8)
    other = np.random.default_rng(8).standard_normal((2, 8, 8))
    S, _ = update_feature_maps_dual(
        x, F, other, ChannelMap.identity(2), "primal", 0.0, 1e6, SolverConfig(max_inner=500, tol=1e-12)
    )
    assert np.linalg.norm(S - other) / np.linalg.norm(other) < 1e-3


@pytest.mark.parametrize("direction", ["primal", "dual"])
def test_coupled_solve_matches_normal_equations(direction):
    # lam = 0: the minimizer solves (D'D + 2 beta A'A) s = D'x + 2 beta A'c
    x, F = instance(9)
    rng = np.random.default_rng(9)
    other = rng.standard_normal((2, 8, 8))
    W = ChannelMap(np.array([[1.2, 0.3], [-0.4, 0.8]]))
    beta = 0.5
    S, _ = update_feature_maps_dual(x, F, other, W, direction, 0.0, beta, SolverConfig(max_inner=3000, tol=1e-13))
    N = 64
    D = dictionary_matrix(F.filters, x.shape)
    if direction == "primal":  # beta ||W s - Sy||^2
        A, c = channel_operator(W.matrix, N), other.ravel()
    else:  # beta ||W^-1 s - Sx||^2
        A, c = channel_operator(W.inverse(), N), other.ravel()
    ref = np.linalg.solve(D.T @ D + 2 * beta * A.T @ A, D.T @ x.ravel() + 2 * beta * A.T @ c)
    np.testing.assert_allclose(S.ravel(), ref, atol=1e-6)


def test_coupled_solve_matches_active_set_qp():
    # with the support and signs of the converged maps fixed, the l1 problem
    # is a quadratic program whose solution comes from the reduced normal equations
    x, F = instance(10)
    rng = np.random.default_rng(10)
    other = rng.standard_normal((2, 8, 8)) * 0.3
    W = ChannelMap(np.array([[1.0, 0.2], [0.1, 0.9]]))
    beta, lam = 0.3, 0.05
    S, trace = update_feature_maps_dual(x, F, other, W, "primal", lam, beta, SolverConfig(max_inner=5000, tol=1e-13))
    N = 64
    D = dictionary_matrix(F.filters, x.shape)
    A = channel_operator(W.matrix, N)
    H = D.T @ D + 2 * beta * A.T @ A
    g = D.T @ x.ravel() + 2 * beta * A.T @ other.ravel()
    s = S.ravel()
    act = s != 0
    assert act.any() and not act.all()
    ref = np.linalg.solve(H[np.ix_(act, act)], g[act] - lam * np.sign(s[act]))
    np.testing.assert_allclose(s[act], ref, atol=1e-6)
    # optimality on the inactive set
    grad = H @ s - g
    assert np.all(np.abs(grad[~act]) <= lam + 1e-6)


def test_coupled_input_checks():
    x, F = instance(0)
    other = np.zeros((2, 8, 8))
    W = ChannelMap.identity(2)
    with pytest.raises(InvalidInputError):
        update_feature_maps_dual(x, F, other, W, "sideways", 0.1, 0.1, SolverConfig())
    with pytest.raises(InvalidInputError):
        update_feature_maps_dual(x, F, other, W, "primal", 0.1, -1.0, SolverConfig())
    with pytest.raises(DimensionError):
        update_feature_maps_dual(x, F, np.zeros((2, 4, 4)), W, "primal", 0.1, 0.1, SolverConfig())
    with pytest.raises(DimensionError):
        update_feature_maps_dual(x, F, other, ChannelMap.identity(3), "primal", 0.1, 0.1, SolverConfig())
    with pytest.raises(InvalidInputError):
        update_feature_maps_dual(x, F, other, W, "primal", 0.1, 0.1, SolverConfig(), terms=("both",))


def test_joint_solve_without_coupling_splits():
    x, Fx = instance(11)
    y, Fy = instance(12)
    cfg = SolverConfig(max_inner=60)
    Sx, Sy, _ = update_feature_maps_joint(x, y, Fx, Fy, ChannelMap.identity(2), 0.05, 0.0, cfg)
    np.testing.assert_allclose(Sx, infer_feature_maps(x, Fx, 0.05, cfg)[0], atol=1e-9)
    np.testing.assert_allclose(Sy, infer_feature_maps(y, Fy, 0.05, cfg)[0], atol=1e-9)


def test_joint_solve_matches_normal_equations():
    x, Fx = instance(13)
    y, Fy = instance(14)
    W = ChannelMap(np.array([[1.1, -0.2], [0.3, 0.7]]))
    beta = 0.4
    Sx, Sy, _ = update_feature_maps_joint(
        x, y, Fx, Fy, W, 0.0, beta, SolverConfig(max_inner=4000, tol=1e-13), terms=("primal", "dual")
    )
    N = 64
    Dx = dictionary_matrix(Fx.filters, x.shape)
    Dy = dictionary_matrix(Fy.filters, y.shape)
    D = np.block([[Dx, np.zeros_like(Dy)], [np.zeros_like(Dx), Dy]])
    I2 = np.eye(2)
    A1 = channel_operator(np.hstack([-W.matrix, I2]), N)  # Sy - W Sx
    A2 = channel_operator(np.hstack([I2, -W.inverse()]), N)  # Sx - W^-1 Sy
    H = D.T @ D + 2 * beta * (A1.T @ A1 + A2.T @ A2)
    ref = np.linalg.solve(H, D.T @ np.concatenate([x.ravel(), y.ravel()]))
    np.testing.assert_allclose(np.concatenate([Sx.ravel(), Sy.ravel()]), ref, atol=1e-6)


def test_joint_solve_checks_registration():
    x, F = instance(0)
    with pytest.raises(DimensionError):
        update_feature_maps_joint(x, np.zeros((6, 6)), F, F, ChannelMap.identity(2), 0.1, 0.1, SolverConfig())


# --- filters -----------------------------------------------------------------


def delta_maps(K, k, dims):
    S = np.zeros((K,) + dims)
    S[(k,) + (0,) * len(dims)] = 1.0
    return S


@pytest.mark.parametrize("scale", [0.8, 2.5])
def test_filter_recovery_from_delta_maps(scale):
    rng = np.random.default_rng(15)
    kernel = rng.standard_normal((3, 3))
    kernel *= scale / np.linalg.norm(kernel)
    X = embed_kernel(kernel, (8, 8))
    F = update_filters([(X, delta_maps(2, 1, (8, 8)))], 3, SolverConfig(max_inner=2000, tol=1e-12))
    np.testing.assert_allclose(F.filters[1], project_unit_ball(kernel), atol=1e-6)
    assert not np.any(F.filters[0])


def test_filter_recovery_3d():
    rng = np.random.default_rng(16)
    kernel = 0.5 * project_unit_ball(rng.standard_normal((3, 3, 3)))
    X = embed_kernel(kernel, (6, 6, 6))
    F = update_filters([(X, delta_maps(1, 0, (6, 6, 6)))], 3, SolverConfig(max_inner=2000, tol=1e-12))
    np.testing.assert_allclose(F.filters[0], kernel, atol=1e-6)


def test_zero_images_give_zero_filters():
    rng = np.random.default_rng(17)
    pairs = [(np.zeros((8, 8)), rng.standard_normal((2, 8, 8))) for _ in range(2)]
    F = update_filters(pairs, 3, SolverConfig())
    assert not np.any(F.filters)


def test_filter_update_descends():
    rng = np.random.default_rng(18)
    F0 = FilterBank.random(2, 3, 2, rng)
    pairs = [(rng.uniform(0, 1, (8, 8)), rng.standard_normal((2, 8, 8)) * 0.3) for _ in range(2)]

    def data(F):
        return sum(csc_objective(X, F, S, 0.0) for X, S in pairs)

    F1 = update_filters(pairs, 3, SolverConfig(), init=F0)
    assert data(F1) <= data(F0)
    assert np.all(np.linalg.norm(F1.filters.reshape(2, -1), axis=1) <= 1 + 1e-9)


def test_unused_filter_keeps_its_warm_start():
    rng = np.random.default_rng(19)
    F0 = FilterBank.random(2, 3, 2, rng)
    S = rng.standard_normal((2, 8, 8))
    S[0] = 0.0
    F1 = update_filters([(rng.uniform(0, 1, (8, 8)), S)], 3, SolverConfig(), init=F0)
    np.testing.assert_array_equal(F1.filters[0], F0.filters[0])


def test_filter_update_input_checks():
    with pytest.raises(InvalidInputError):
        update_filters([], 3, SolverConfig())
    with pytest.raises(DimensionError):
        update_filters([(np.zeros((8, 8)), np.zeros((2, 8, 8)))], 4, SolverConfig())
    with pytest.raises(DimensionError):
        update_filters([(np.zeros((8, 8)), np.zeros((2, 8, 8))), (np.zeros((6, 6)), np.zeros((2, 6, 6)))], 3, SolverConfig())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.sampled_from([1, 3, 5]))
def test_filter_update_respects_unit_ball(seed, K, d):
    rng = np.random.default_rng(seed)
    pairs = [(rng.uniform(0, 1, (7, 7)) * 10, rng.standard_normal((K, 7, 7)))]
    F = update_filters(pairs, d, SolverConfig(max_inner=20))
    assert np.all(np.linalg.norm(F.filters.reshape(K, -1), axis=1) <= 1 + 1e-9)
