"""GP prior building blocks: transition maps, noise covariances, charts, and
the four prior error functions.

The closed-form k_matrix is checked against direct quadrature of the defining
integral, and the cell noise covariance against a Monte-Carlo simulation of
the driving white-noise double integral.
"""

import numpy as np
import pytest
from scipy.integrate import quad

import stgp.prior as P
from stgp.liegroup import Pose, se3_exp
from stgp.prior import (ChartRangeError, NodeState, PriorParams, chart_decode,
                        chart_encode, k_matrix, phi_cell, phi_s, phi_t,
                        q_binary_s, q_binary_t, q_quaternary, retract)
from conftest import random_state, random_states


def quad_k_matrix(d: float) -> np.ndarray:
    """integral over [0, d] of M(d-u) e2 e2^T M(d-u)^T, M(x) = [[1,x],[0,1]]."""
    out = np.zeros((2, 2))
    fns = [[lambda u: (d - u) ** 2, lambda u: (d - u)],
           [lambda u: (d - u), lambda u: 1.0]]
    for i in range(2):
        for j in range(2):
            out[i, j] = quad(fns[i][j], 0.0, d)[0]
    return out


# k_matrix and transitions


def test_k_matrix_zero():
    assert np.allclose(k_matrix(0.0), 0.0)


def test_k_matrix_unit_step():
    assert np.allclose(k_matrix(1.0), [[1 / 3, 1 / 2], [1 / 2, 1.0]],
                       atol=1e-15)
    assert np.allclose(k_matrix(1.0), quad_k_matrix(1.0), atol=1e-12)


def test_k_matrix_two_step():
    assert np.allclose(k_matrix(2.0), [[8 / 3, 2.0], [2.0, 2.0]], atol=1e-14)
    assert np.allclose(k_matrix(2.0), quad_k_matrix(2.0), atol=1e-12)


def test_k_matrix_quadrature_sweep():
    for d in (0.1, 0.37, 1.9, 4.0):
        assert np.allclose(k_matrix(d), quad_k_matrix(d), atol=1e-10)
        assert np.allclose(k_matrix(d) @ P.k_matrix_inv(d), np.eye(2),
                           atol=1e-10)


def test_phi_zero_is_identity():
    assert np.allclose(phi_s(0.0), np.eye(24))
    assert np.allclose(phi_t(0.0), np.eye(24))


def test_phi_semigroup():
    for a, b in ((0.2, 0.3), (1.0, 0.5), (0.01, 2.0)):
        assert np.allclose(phi_s(a) @ phi_s(b), phi_s(a + b), atol=1e-12)
        assert np.allclose(phi_t(a) @ phi_t(b), phi_t(a + b), atol=1e-12)


def test_phi_commutation_and_cell():
    a, b = 0.2, 0.5
    assert np.allclose(phi_t(b) @ phi_s(a), phi_s(a) @ phi_t(b), atol=1e-12)
    assert np.allclose(phi_cell(a, b), phi_t(b) @ phi_s(a), atol=1e-12)


def test_phi_cell_bilinear_taylor_step():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(24)
    ds, dt = 0.3, 0.7
    out = phi_cell(ds, dt) @ z
    xi, eps, pi, psi = z[:6], z[6:12], z[12:18], z[18:]
    assert np.allclose(out[:6], xi + ds * eps + dt * pi + ds * dt * psi,
                       atol=1e-12)


# noise covariances


def test_q_binary_shapes_and_symmetry(params):
    for q in (q_binary_s(0.3, params), q_binary_t(0.8, params),
              q_quaternary(0.3, 0.8, params)):
        assert q.shape == (24, 24)
        assert np.max(np.abs(q - q.T)) < 1e-12
        assert np.min(np.linalg.eigvalsh(q)) > -1e-10


def test_q_binary_t_top_left_block():
    params = PriorParams(qs_psd=np.eye(6), qt_psd=np.diag([1, 2, 3, 4, 5, 6.0]),
                         qst_psd=np.eye(6), p0=np.eye(24))
    q = q_binary_t(2.0, params)
    assert np.allclose(q[:6, :6], (8 / 3) * np.diag([1, 2, 3, 4, 5, 6.0]),
                       atol=1e-12)


def test_q_quaternary_identity_kronecker(identity_params):
    k1 = np.array([[1 / 3, 1 / 2], [1 / 2, 1.0]])
    ref = np.kron(np.kron(k1, k1), np.eye(6))
    assert np.allclose(q_quaternary(1.0, 1.0, identity_params), ref,
                       atol=1e-12)


def test_q_quaternary_monte_carlo(identity_params):
    """Covariance of the discretized double white-noise integral.

    z = sum_ij M_t(dt-u_i) e2 (x) M_s(ds-v_j) e2 (x) w_ij sqrt(du dv) with
    unit-density w; its covariance is k_matrix(dt) (x) k_matrix(ds) (x) I6.
    """
    ds = dt = 1.0
    nu = nv = 20
    du, dv = dt / nu, ds / nv
    u = (np.arange(nu) + 0.5) * du
    v = (np.arange(nv) + 0.5) * dv
    A = np.stack([dt - u, np.ones(nu)])            # M_t(dt-u) e2, (2, nu)
    B = np.stack([ds - v, np.ones(nv)])            # M_s(ds-v) e2, (2, nv)
    rng = np.random.default_rng(42)
    samples, chunk = 100000, 10000
    emp = np.zeros((24, 24))
    for _ in range(samples // chunk):
        w = rng.standard_normal((chunk, nu, nv, 6)) * np.sqrt(du * dv)
        z = np.einsum("iu,jv,suvk->sijk", A, B, w).reshape(chunk, 24)
        emp += z.T @ z
    emp /= samples
    ref = q_quaternary(ds, dt, identity_params)
    scale = np.max(np.abs(ref))
    assert np.max(np.abs(emp - ref)) < 0.02 * scale


def test_q_degenerate_step_rejected(params):
    with pytest.raises(ValueError):
        q_binary_s(0.0, params)
    with pytest.raises(ValueError):
        q_binary_t(-1.0, params)
    with pytest.raises(ValueError):
        q_quaternary(0.0, 1.0, params)


# charts


def test_chart_origin():
    x = random_states(1, 1)[0]
    z = chart_encode(x, x.pose)
    assert np.allclose(z[:6], 0.0, atol=1e-12)
    assert np.allclose(z[6:12], x.strain, atol=1e-12)
    assert np.allclose(z[12:18], x.velocity, atol=1e-12)
    assert np.allclose(z[18:], x.strain_velocity, atol=1e-12)


def test_chart_roundtrip_100_states():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = random_state(rng, angle=0.8)
        base = Pose.exp(rng.standard_normal(6) * 0.3)
        y = chart_decode(chart_encode(x, base), base)
        assert np.max(np.abs(y.pose.matrix() - x.pose.matrix())) < 1e-9
        assert np.max(np.abs(y.strain - x.strain)) < 1e-9
        assert np.max(np.abs(y.velocity - x.velocity)) < 1e-9
        assert np.max(np.abs(y.strain_velocity - x.strain_velocity)) < 1e-9


def test_chart_range_error():
    x = NodeState(Pose.exp(np.array([0, 0, 0, 0, 0, 0.99 * np.pi])),
                  np.zeros(6), np.zeros(6), np.zeros(6))
    with pytest.raises(ChartRangeError):
        chart_encode(x, Pose.identity())


def test_retract_is_chart_additive():
    rng = np.random.default_rng(3)
    x = random_state(rng)
    delta = 0.01 * rng.standard_normal(24)
    y = retract(x, delta)
    ref = chart_decode(chart_encode(x, x.pose) + delta, x.pose)
    assert np.max(np.abs(y.pose.matrix() - ref.pose.matrix())) < 1e-12
    assert np.max(np.abs(y.strain - ref.strain)) < 1e-12


# prior errors


def test_unary_zero_at_prior_mean(params):
    e = P.unary_error(params.prior_mean.copy(), params)
    assert np.max(np.abs(e)) < 1e-14


def test_unary_pure_translation_offset(params):
    x = params.prior_mean.copy()
    x = NodeState(Pose(x.pose.R, x.pose.t + np.array([0.1, 0, 0])),
                  x.strain, x.velocity, x.strain_velocity)
    e = P.unary_error(x, params)
    assert np.allclose(e[:6], [0.1, 0, 0, 0, 0, 0], atol=1e-12)
    assert np.allclose(e[6:], 0.0, atol=1e-12)


def test_unary_matches_encode_formula(params):
    rng = np.random.default_rng(4)
    x = random_state(rng)
    e = P.unary_error(x, params)
    m = params.prior_mean
    ref = chart_encode(x, m.pose) - np.concatenate(
        [np.zeros(6), m.strain, m.velocity, m.strain_velocity])
    assert np.allclose(e, ref, atol=1e-12)


def test_binary_spatial_zero_error_construction():
    rng = np.random.default_rng(5)
    for _ in range(10):
        x_a = random_state(rng)
        x_b = P.propagate_spatial(x_a, 0.1)
        e = P.binary_spatial_error(x_a, x_b, 0.1)
        assert np.max(np.abs(e)) < 1e-12


def test_binary_identical_states_zero_strain():
    x = NodeState(Pose.exp(np.array([0.2, 0, 0, 0, 0, 0.1])), np.zeros(6),
                  np.zeros(6), np.zeros(6))
    assert np.max(np.abs(P.binary_spatial_error(x, x.copy(), 0.1))) < 1e-14


def test_binary_strain_forces_xi_block():
    x_a = NodeState(Pose.identity(), np.array([1.0, 0, 0, 0, 0, 0]),
                    np.zeros(6), np.zeros(6))
    e = P.binary_spatial_error(x_a, x_a.copy(), 0.1)
    assert np.allclose(e[:6], [-0.1, 0, 0, 0, 0, 0], atol=1e-14)
    assert np.allclose(e[6:], 0.0, atol=1e-14)


def test_binary_temporal_zero_error_construction():
    rng = np.random.default_rng(6)
    for _ in range(10):
        x_a = random_state(rng)
        x_b = P.propagate_temporal(x_a, 0.4)
        assert np.max(np.abs(P.binary_temporal_error(x_a, x_b, 0.4))) < 1e-12


def test_quaternary_zero_on_constant_corners():
    x = NodeState(Pose.exp(np.array([0.1, -0.2, 0.3, 0.1, 0, 0.2])),
                  np.zeros(6), np.zeros(6), np.zeros(6))
    e = P.quaternary_error(x, x.copy(), x.copy(), x.copy(), 0.3, 0.5)
    assert np.max(np.abs(e)) < 1e-12


def test_quaternary_zero_error_construction():
    rng = np.random.default_rng(7)
    for _ in range(10):
        x00 = random_state(rng)
        x10 = P.propagate_spatial(x00, 0.3)
        x01 = P.propagate_temporal(x00, 0.5)
        x11 = P.propagate_corner(x00, x10, x01, 0.3, 0.5)
        e = P.quaternary_error(x00, x10, x01, x11, 0.3, 0.5)
        assert np.max(np.abs(e)) < 1e-12


def test_quaternary_linear_case_matches_raw_formula():
    # identity poses: charts are the raw stacked vectors, so the error is the
    # signed transition combination applied to them directly
    rng = np.random.default_rng(8)
    zs = 0.1 * rng.standard_normal((4, 18))
    states = [NodeState(Pose.identity(), z[:6], z[6:12], z[12:]) for z in zs]
    ds, dt = 0.3, 0.5
    e = P.quaternary_error(*states, ds, dt)
    raw = [np.concatenate([np.zeros(6), z]) for z in zs]
    ref = raw[3] - phi_s(ds) @ raw[2] - phi_t(dt) @ raw[1] \
        + phi_cell(ds, dt) @ raw[0]
    assert np.allclose(e, ref, atol=1e-12)


# analytic Jacobians


def fd_jacobian(fn, states, slot, h=1e-6):
    cols = []
    for d in range(24):
        delta = np.zeros(24)
        delta[d] = h
        sp = list(states)
        sp[slot] = retract(states[slot], delta)
        sm = list(states)
        sm[slot] = retract(states[slot], -delta)
        cols.append((fn(*sp) - fn(*sm)) / (2 * h))
    return np.stack(cols, axis=1)


def check_fd(J, J_fd, rel=1e-5):
    scale = 1.0 + np.max(np.abs(J_fd))
    assert np.max(np.abs(J - J_fd)) < rel * scale


def test_unary_jacobian_identity_at_mean(params):
    J = P.unary_jacobian(params.prior_mean.copy(), params)
    assert np.allclose(J, np.eye(24), atol=1e-12)


def test_binary_jacobians_linear_regime():
    x = NodeState.identity()
    ja, jb = P.binary_spatial_jacobians(x, x.copy(), 0.25)
    assert np.allclose(ja, -phi_s(0.25), atol=1e-12)
    assert np.allclose(jb, np.eye(24), atol=1e-12)


def test_unary_jacobian_fd(params):
    rng = np.random.default_rng(9)
    for _ in range(10):
        x = random_state(rng)
        J = P.unary_jacobian(x, params)
        J_fd = fd_jacobian(lambda a: P.unary_error(a, params), [x], 0)
        check_fd(J, J_fd)


def test_binary_spatial_jacobians_fd():
    rng = np.random.default_rng(10)
    for _ in range(10):
        x_a, x_b = random_state(rng), random_state(rng)
        ja, jb = P.binary_spatial_jacobians(x_a, x_b, 0.3)
        err = lambda a, b: P.binary_spatial_error(a, b, 0.3)
        check_fd(ja, fd_jacobian(err, [x_a, x_b], 0))
        check_fd(jb, fd_jacobian(err, [x_a, x_b], 1))


def test_binary_temporal_jacobians_fd():
    rng = np.random.default_rng(11)
    for _ in range(10):
        x_a, x_b = random_state(rng), random_state(rng)
        ja, jb = P.binary_temporal_jacobians(x_a, x_b, 0.6)
        err = lambda a, b: P.binary_temporal_error(a, b, 0.6)
        check_fd(ja, fd_jacobian(err, [x_a, x_b], 0))
        check_fd(jb, fd_jacobian(err, [x_a, x_b], 1))


def test_quaternary_jacobians_fd():
    rng = np.random.default_rng(12)
    for _ in range(5):
        xs = [random_state(rng) for _ in range(4)]
        jacs = P.quaternary_jacobians(*xs, 0.3, 0.5)
        err = lambda *a: P.quaternary_error(*a, 0.3, 0.5)
        for slot in range(4):
            check_fd(jacs[slot], fd_jacobian(err, xs, slot))


def test_params_validation():
    with pytest.raises(ValueError):
        PriorParams(qs_psd=np.diag([1, 1, 1, 1, 1, -1.0]), qt_psd=np.eye(6),
                    qst_psd=np.eye(6), p0=np.eye(24))
    bad = np.eye(6)
    bad[0, 1] = 0.5
    with pytest.raises(ValueError):
        PriorParams(qs_psd=bad, qt_psd=np.eye(6), qst_psd=np.eye(6),
                    p0=np.eye(24))
