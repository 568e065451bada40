"""Space-time Gaussian-process prior over SE(3) trajectories of a rod.

Each grid node carries a pose T plus three 6-vector derivative states, all in
the left (world-frame) convention:

* strain        eps = (dT/ds) T^-1, as a twist,
* velocity      pi  = (dT/dt) T^-1,
* strain rate   psi = the mixed s,t derivative.

Local coordinates ("charts") about a base pose stack a 24-vector
z = (xi, eps~, pi~, psi~) where xi = log(T base^-1) and the derivative states
are transported by the inverse left Jacobian of xi.  Block order is
temporal-derivative-major: (0,0)=xi, (0,1)=eps~, (1,0)=pi~, (1,1)=psi~.

In these coordinates the prior is a linear two-parameter Markov model: the
transition over a grid step is a Kronecker product of 2x2 integrator blocks
M(d) = [[1, d], [0, 1]] acting on the temporal/spatial derivative pairs, and
white noise enters at the highest derivative of each chain, giving the
familiar [[d^3/3, d^2/2], [d^2/2, d]] covariance blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .liegroup import (Pose, ad6, adjoint, dleft_jacobian_inv_vec, se3_exp,
                       se3_left_jacobian, se3_left_jacobian_inv, se3_log,
                       so3_exp, so3_log, so3_left_jacobian,
                       so3_left_jacobian_inv, hat3)

CHART_ANGLE_LIMIT = 0.9 * np.pi

STATE_DIM = 24
_I6 = np.eye(6)
_I24 = np.eye(24)


class ChartRangeError(ValueError):
    """Relative rotation too large to coordinatize reliably."""

    def __init__(self, angle: float, index: int = 0, detail: str = ""):
        self.angle = float(angle)
        self.index = int(index)
        msg = (f"chart out of range: relative rotation angle {self.angle:.4f} "
               f"rad exceeds limit {CHART_ANGLE_LIMIT:.4f} (batch item "
               f"{self.index})")
        if detail:
            msg += "; " + detail
        super().__init__(msg)


@dataclass
class NodeState:
    """Full state of one grid node."""

    pose: Pose
    strain: np.ndarray
    velocity: np.ndarray
    strain_velocity: np.ndarray

    def __post_init__(self):
        self.strain = np.asarray(self.strain, dtype=float).reshape(6)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(6)
        self.strain_velocity = np.asarray(self.strain_velocity, dtype=float).reshape(6)

    @staticmethod
    def identity() -> "NodeState":
        return NodeState(Pose.identity(), np.zeros(6), np.zeros(6), np.zeros(6))

    def copy(self) -> "NodeState":
        return NodeState(self.pose.copy(), self.strain.copy(),
                         self.velocity.copy(), self.strain_velocity.copy())

    def derivative_vector(self) -> np.ndarray:
        """(0, eps, pi, psi): the chart of the state about its own pose."""
        return np.concatenate([np.zeros(6), self.strain, self.velocity,
                               self.strain_velocity])


def _as_psd6(m, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape == ():
        m = float(m) * _I6
    elif m.shape == (6,):
        m = np.diag(m)
    if m.shape != (6, 6):
        raise ValueError(f"{name} must be a scalar, 6-vector, or 6x6 matrix")
    if np.max(np.abs(m - m.T)) > 1e-12 * (1 + np.max(np.abs(m))):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(m)) < -1e-10 * (1 + np.max(np.abs(m))):
        raise ValueError(f"{name} must be positive semidefinite")
    return 0.5 * (m + m.T)


@dataclass
class PriorParams:
    """Power-spectral densities of the three white-noise sources plus the
    initial condition (mean state and 24x24 covariance at the first node)."""

    qs_psd: np.ndarray
    qt_psd: np.ndarray
    qst_psd: np.ndarray
    p0: np.ndarray
    prior_mean: NodeState = field(default_factory=NodeState.identity)

    def __post_init__(self):
        self.qs_psd = _as_psd6(self.qs_psd, "qs_psd")
        self.qt_psd = _as_psd6(self.qt_psd, "qt_psd")
        self.qst_psd = _as_psd6(self.qst_psd, "qst_psd")
        p0 = np.asarray(self.p0, dtype=float)
        if p0.shape == ():
            p0 = float(p0) * _I24
        elif p0.shape == (24,):
            p0 = np.diag(p0)
        if p0.shape != (24, 24):
            raise ValueError("p0 must be a scalar, 24-vector, or 24x24 matrix")
        if np.max(np.abs(p0 - p0.T)) > 1e-12 * (1 + np.max(np.abs(p0))):
            raise ValueError("p0 must be symmetric")
        self.p0 = 0.5 * (p0 + p0.T)


def k_matrix(d: float) -> np.ndarray:
    """Covariance of (level, derivative) accumulated over a step of length d
    when unit white noise drives the derivative."""
    d = float(d)
    if d < 0:
        raise ValueError("step must be >= 0")
    return np.array([[d ** 3 / 3.0, d ** 2 / 2.0], [d ** 2 / 2.0, d]])


def k_matrix_inv(d: float) -> np.ndarray:
    d = float(d)
    if d <= 0:
        raise ValueError("step must be > 0")
    return np.array([[12.0 / d ** 3, -6.0 / d ** 2], [-6.0 / d ** 2, 4.0 / d]])


def _check_step(d: float, name: str) -> float:
    d = float(d)
    if d < 0:
        raise ValueError(f"{name} must be >= 0")
    return d


def _check_positive_step(d: float, name: str) -> float:
    d = float(d)
    if d <= 0:
        raise ValueError(f"{name} must be > 0 (degenerate factor)")
    return d


def _m2(d: float) -> np.ndarray:
    return np.array([[1.0, float(d)], [0.0, 1.0]])


def phi_s(ds: float) -> np.ndarray:
    """Transition over a pure arclength step."""
    return np.kron(np.eye(2), np.kron(_m2(_check_step(ds, "ds")), _I6))


def phi_t(dt: float) -> np.ndarray:
    """Transition over a pure time step."""
    return np.kron(_m2(_check_step(dt, "dt")), np.eye(12))


def phi_cell(ds: float, dt: float) -> np.ndarray:
    """Transition across a full cell diagonal; equals phi_t(dt) @ phi_s(ds)."""
    return np.kron(_m2(_check_step(dt, "dt")),
                   np.kron(_m2(_check_step(ds, "ds")), _I6))


def q_binary_s(ds: float, params: PriorParams) -> np.ndarray:
    ds = _check_positive_step(ds, "ds")
    return np.kron(np.eye(2), np.kron(k_matrix(ds), params.qs_psd))


def q_binary_t(dt: float, params: PriorParams) -> np.ndarray:
    dt = _check_positive_step(dt, "dt")
    return np.kron(k_matrix(dt), np.kron(np.eye(2), params.qt_psd))


def q_quaternary(ds: float, dt: float, params: PriorParams) -> np.ndarray:
    ds = _check_positive_step(ds, "ds")
    dt = _check_positive_step(dt, "dt")
    return np.kron(k_matrix(dt), np.kron(k_matrix(ds), params.qst_psd))


def q_binary_s_inv(ds: float, params: PriorParams) -> np.ndarray:
    return np.kron(np.eye(2), np.kron(k_matrix_inv(ds), np.linalg.inv(params.qs_psd)))


def q_binary_t_inv(dt: float, params: PriorParams) -> np.ndarray:
    return np.kron(k_matrix_inv(dt), np.kron(np.eye(2), np.linalg.inv(params.qt_psd)))


def q_quaternary_inv(ds: float, dt: float, params: PriorParams) -> np.ndarray:
    return np.kron(k_matrix_inv(dt), np.kron(k_matrix_inv(ds), np.linalg.inv(params.qst_psd)))


# ---------------------------------------------------------------------------
# batched state arrays and chart coordinates


@dataclass
class StateArrays:
    """Stacked node states for vectorized factor evaluation."""

    R: np.ndarray    # (B, 3, 3)
    t: np.ndarray    # (B, 3)
    eps: np.ndarray  # (B, 6)
    vel: np.ndarray  # (B, 6)
    sv: np.ndarray   # (B, 6)

    @staticmethod
    def from_states(states) -> "StateArrays":
        return StateArrays(
            R=np.stack([s.pose.R for s in states]),
            t=np.stack([s.pose.t for s in states]),
            eps=np.stack([s.strain for s in states]),
            vel=np.stack([s.velocity for s in states]),
            sv=np.stack([s.strain_velocity for s in states]),
        )

    @staticmethod
    def from_state(state: NodeState) -> "StateArrays":
        return StateArrays.from_states([state])

    def take(self, idx) -> "StateArrays":
        idx = np.asarray(idx, dtype=int)
        return StateArrays(self.R[idx], self.t[idx], self.eps[idx],
                           self.vel[idx], self.sv[idx])


def _relative_chart(R: np.ndarray, t: np.ndarray, Rb: np.ndarray,
                    tb: np.ndarray) -> np.ndarray:
    """xi = log(T base^-1), batched over leading dimension."""
    R_rel = R @ np.swapaxes(Rb, -1, -2)
    t_rel = t - np.squeeze(R_rel @ tb[..., None], -1)
    phi = so3_log(R_rel)
    ang = np.linalg.norm(phi, axis=-1)
    bad = ang >= CHART_ANGLE_LIMIT
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise ChartRangeError(float(np.max(ang)), idx)
    v = np.squeeze(so3_left_jacobian_inv(phi) @ t_rel[..., None], -1)
    return np.concatenate([v, phi], axis=-1)


def chart_encode_batch(sa: StateArrays, Rb: np.ndarray, tb: np.ndarray) -> np.ndarray:
    xi = _relative_chart(sa.R, sa.t, Rb, tb)
    jli = se3_left_jacobian_inv(xi)
    z = np.empty(xi.shape[:-1] + (24,))
    z[..., 0:6] = xi
    z[..., 6:12] = np.squeeze(jli @ sa.eps[..., None], -1)
    z[..., 12:18] = np.squeeze(jli @ sa.vel[..., None], -1)
    z[..., 18:24] = np.squeeze(jli @ sa.sv[..., None], -1)
    return z


def chart_encode(x: NodeState, base: Pose) -> np.ndarray:
    """24-vector chart of x about the base pose."""
    return chart_encode_batch(StateArrays.from_state(x), base.R[None], base.t[None])[0]


def chart_decode(z: np.ndarray, base: Pose) -> NodeState:
    """Inverse of chart_encode for the same base."""
    z = np.asarray(z, dtype=float).reshape(24)
    xi = z[0:6]
    jl = se3_left_jacobian(xi)
    pose = Pose.from_matrix(se3_exp(xi)) @ base
    return NodeState(pose, jl @ z[6:12], jl @ z[12:18], jl @ z[18:24])


def retract(x: NodeState, delta: np.ndarray) -> NodeState:
    """Apply a 24-dim perturbation in the state's own chart."""
    return chart_decode(x.derivative_vector() + np.asarray(delta, dtype=float), x.pose)


def retract_all(states, delta: np.ndarray):
    """Batched retract over a list of states; delta is (B, 24)."""
    sa = StateArrays.from_states(states)
    delta = np.asarray(delta, dtype=float).reshape(len(states), 24)
    xi = delta[:, 0:6]
    T = se3_exp(xi)
    Re, te = T[:, :3, :3], T[:, :3, 3]
    Rn = Re @ sa.R
    tn = np.squeeze(Re @ sa.t[:, :, None], -1) + te
    jl = se3_left_jacobian(xi)
    eps = np.squeeze(jl @ (sa.eps + delta[:, 6:12])[:, :, None], -1)
    vel = np.squeeze(jl @ (sa.vel + delta[:, 12:18])[:, :, None], -1)
    sv = np.squeeze(jl @ (sa.sv + delta[:, 18:24])[:, :, None], -1)
    return [NodeState(Pose(Rn[b], tn[b]), eps[b], vel[b], sv[b])
            for b in range(len(states))]


def _deriv_triplet(sa: StateArrays):
    return (sa.eps, sa.vel, sa.sv)


def encode_with_jacobians_batch(sa: StateArrays, Rb: np.ndarray, tb: np.ndarray,
                                want_jac: bool = True):
    """Charts of states about fixed base poses, plus the two Jacobians the
    factors need: d(chart)/d(own perturbation) and d(chart)/d(base pose
    perturbation).  Returns (z, enc_jac | None, base_motion | None)."""
    xi = _relative_chart(sa.R, sa.t, Rb, tb)
    jli = se3_left_jacobian_inv(xi)
    vs = np.stack(_deriv_triplet(sa), axis=-2)
    jli_s = jli[..., None, :, :]
    z = np.empty(xi.shape[:-1] + (24,))
    z[..., 0:6] = xi
    z[..., 6:] = (jli_s @ vs[..., None])[..., 0].reshape(xi.shape[:-1] + (18,))
    if not want_jac:
        return z, None, None

    B = xi.shape[:-1]
    enc = np.zeros(B + (24, 24))
    enc[..., 0:6, 0:6] = jli
    ad_rel = adjoint(se3_exp(xi))
    jr_inv = jli @ ad_rel
    bm = np.zeros(B + (24, 6))
    bm[..., 0:6, :] = -jr_inv
    # one series sweep for all three transported derivatives
    dvs = dleft_jacobian_inv_vec(xi[..., None, :], vs)
    own = dvs @ jli_s - 0.5 * (jli_s @ ad6(vs))
    base = -(dvs @ jr_inv[..., None, :, :])
    for i in range(3):
        r = slice(6 * (i + 1), 6 * (i + 2))
        enc[..., r, 0:6] = own[..., i, :, :]
        enc[..., r, r] = jli
        bm[..., r, :] = base[..., i, :, :]
    return z, enc, bm


def encode_self_jacobian_batch(sa: StateArrays) -> np.ndarray:
    """d/d(own perturbation) of the chart of a state about its own pose."""
    B = sa.eps.shape[:-1]
    out = np.zeros(B + (24, 24))
    for i, v in enumerate(_deriv_triplet(sa)):
        r = slice(6 * (i + 1), 6 * (i + 2))
        out[..., r, 0:6] = -0.5 * ad6(v)
        out[..., r, r] = np.eye(6)
    return out


def encode_with_jacobians(x: NodeState, base: Pose, want_jac: bool = True):
    """Single-state chart about `base` with encode and base-motion Jacobians."""
    z, enc, bm = encode_with_jacobians_batch(StateArrays.from_state(x),
                                             base.R[None], base.t[None],
                                             want_jac)
    if not want_jac:
        return z[0], None, None
    return z[0], enc[0], bm[0]


def encode_self_jacobian(x: NodeState) -> np.ndarray:
    """d/d(own perturbation) of a state's chart about its own pose."""
    return encode_self_jacobian_batch(StateArrays.from_state(x))[0]


def phi_s_batch(ds: np.ndarray) -> np.ndarray:
    ds = np.asarray(ds, dtype=float)
    out = np.broadcast_to(_I24, ds.shape + (24, 24)).copy()
    for a in (0, 12):
        idx = np.arange(6)
        out[..., a + idx, a + 6 + idx] = ds[..., None]
    return out


def phi_t_batch(dt: np.ndarray) -> np.ndarray:
    dt = np.asarray(dt, dtype=float)
    out = np.broadcast_to(_I24, dt.shape + (24, 24)).copy()
    idx = np.arange(12)
    out[..., idx, 12 + idx] = dt[..., None]
    return out


def phi_cell_batch(ds: np.ndarray, dt: np.ndarray) -> np.ndarray:
    return phi_t_batch(dt) @ phi_s_batch(ds)


# ---------------------------------------------------------------------------
# prior factor errors and Jacobians (batched cores; scalar wrappers below)


def unary_batch(sa: StateArrays, params: PriorParams, want_jac: bool = True):
    base = params.prior_mean.pose
    B = sa.eps.shape[0]
    Rb = np.broadcast_to(base.R, (B, 3, 3))
    tb = np.broadcast_to(base.t, (B, 3))
    z, enc, _ = encode_with_jacobians_batch(sa, Rb, tb, want_jac)
    e = z - params.prior_mean.derivative_vector()
    return e, enc


def binary_batch(sa_a: StateArrays, sa_b: StateArrays, phi: np.ndarray,
                 want_jac: bool = True):
    """Shared core of the spatial and temporal two-node factors; `phi` is the
    (B, 24, 24) transition over the step."""
    z_b, enc_b, bm_b = encode_with_jacobians_batch(sa_b, sa_a.R, sa_a.t, want_jac)
    z_a = np.concatenate([np.zeros_like(sa_a.eps), sa_a.eps, sa_a.vel, sa_a.sv],
                         axis=-1)
    e = z_b - np.squeeze(phi @ z_a[..., None], -1)
    if not want_jac:
        return e, None, None
    j_a = -(phi @ encode_self_jacobian_batch(sa_a))
    j_a[..., :, 0:6] += bm_b
    return e, j_a, enc_b


def quaternary_batch(sa00: StateArrays, sa10: StateArrays, sa01: StateArrays,
                     sa11: StateArrays, ds: np.ndarray, dt: np.ndarray,
                     want_jac: bool = True):
    """Four-node cell factor.  Corner subscripts are (spatial, temporal)
    offsets within the cell; charts are taken about the (0,0) corner."""
    ps = phi_s_batch(ds)
    pt = phi_t_batch(dt)
    pc = pt @ ps
    z10, enc10, bm10 = encode_with_jacobians_batch(sa10, sa00.R, sa00.t, want_jac)
    z01, enc01, bm01 = encode_with_jacobians_batch(sa01, sa00.R, sa00.t, want_jac)
    z11, enc11, bm11 = encode_with_jacobians_batch(sa11, sa00.R, sa00.t, want_jac)
    z00 = np.concatenate([np.zeros_like(sa00.eps), sa00.eps, sa00.vel, sa00.sv],
                         axis=-1)
    e = (z11 - np.squeeze(ps @ z01[..., None], -1)
         - np.squeeze(pt @ z10[..., None], -1)
         + np.squeeze(pc @ z00[..., None], -1))
    if not want_jac:
        return e, None, None, None, None
    j11 = enc11
    j01 = -(ps @ enc01)
    j10 = -(pt @ enc10)
    j00 = pc @ encode_self_jacobian_batch(sa00)
    j00[..., :, 0:6] += bm11 - ps @ bm01 - pt @ bm10
    return e, j00, j10, j01, j11


def unary_error(x: NodeState, params: PriorParams) -> np.ndarray:
    e, _ = unary_batch(StateArrays.from_state(x), params, want_jac=False)
    return e[0]


def unary_jacobian(x: NodeState, params: PriorParams) -> np.ndarray:
    _, j = unary_batch(StateArrays.from_state(x), params, want_jac=True)
    return j[0]


def binary_spatial_error(x_a: NodeState, x_b: NodeState, ds: float) -> np.ndarray:
    e, _, _ = binary_batch(StateArrays.from_state(x_a), StateArrays.from_state(x_b),
                           phi_s(ds)[None], want_jac=False)
    return e[0]


def binary_spatial_jacobians(x_a: NodeState, x_b: NodeState, ds: float):
    _, ja, jb = binary_batch(StateArrays.from_state(x_a), StateArrays.from_state(x_b),
                             phi_s(ds)[None], want_jac=True)
    return ja[0], jb[0]


def binary_temporal_error(x_a: NodeState, x_b: NodeState, dt: float) -> np.ndarray:
    e, _, _ = binary_batch(StateArrays.from_state(x_a), StateArrays.from_state(x_b),
                           phi_t(dt)[None], want_jac=False)
    return e[0]


def binary_temporal_jacobians(x_a: NodeState, x_b: NodeState, dt: float):
    _, ja, jb = binary_batch(StateArrays.from_state(x_a), StateArrays.from_state(x_b),
                             phi_t(dt)[None], want_jac=True)
    return ja[0], jb[0]


def quaternary_error(x00: NodeState, x10: NodeState, x01: NodeState,
                     x11: NodeState, ds: float, dt: float) -> np.ndarray:
    e = quaternary_batch(StateArrays.from_state(x00), StateArrays.from_state(x10),
                         StateArrays.from_state(x01), StateArrays.from_state(x11),
                         np.array([ds]), np.array([dt]), want_jac=False)[0]
    return e[0]


def quaternary_jacobians(x00: NodeState, x10: NodeState, x01: NodeState,
                         x11: NodeState, ds: float, dt: float):
    _, j00, j10, j01, j11 = quaternary_batch(
        StateArrays.from_state(x00), StateArrays.from_state(x10),
        StateArrays.from_state(x01), StateArrays.from_state(x11),
        np.array([ds]), np.array([dt]), want_jac=True)
    return j00[0], j10[0], j01[0], j11[0]


# ---------------------------------------------------------------------------
# zero-noise continuation of the prior mean across the grid


def propagate_spatial(x: NodeState, ds: float) -> NodeState:
    z = phi_s(ds) @ x.derivative_vector()
    return chart_decode(z, x.pose)


def propagate_temporal(x: NodeState, dt: float) -> NodeState:
    z = phi_t(dt) @ x.derivative_vector()
    return chart_decode(z, x.pose)


def propagate_corner(x00: NodeState, x10: NodeState, x01: NodeState,
                     ds: float, dt: float) -> NodeState:
    """Fill the (1,1) corner of a cell so the cell factor error vanishes."""
    z10 = chart_encode(x10, x00.pose)
    z01 = chart_encode(x01, x00.pose)
    z11 = (phi_s(ds) @ z01 + phi_t(dt) @ z10
           - phi_cell(ds, dt) @ x00.derivative_vector())
    return chart_decode(z11, x00.pose)
