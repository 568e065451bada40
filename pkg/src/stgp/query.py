"""Continuous posterior queries at arbitrary (s, t) inside the grid hull.

Interpolation is two-stage and touches exactly one cell: a 1D conditioning in
time on each of the cell's two columns, then a 1D conditioning in arclength
between the two column results.  Each 1D stage conditions the bridge value on
its endpoints, with gain Lam(u) = Q(u) phi(D-u)^T Q(D)^-1 and residual
R(u) = Q(u) - Lam(u) Q(D) Lam(u)^T.

The nonlinear evaluation decodes the temporal stage in each column's own
local chart before the spatial stage runs in a chart about the left column's
result.  On cell edges the gains collapse onto the shared nodes exactly, so
adjacent cells evaluate boundary queries through literally the same chain and
queries are continuous across the whole hull.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .liegroup import Pose
from .prior import (NodeState, PriorParams, chart_decode, k_matrix,
                    encode_self_jacobian, encode_with_jacobians, phi_s, phi_t)

HULL_TOL = 1e-9


class OutOfHullError(ValueError):
    """Query coordinate outside the rectangle covered by the grid."""


def locate(knots: np.ndarray, u: float, name: str) -> Tuple[int, float]:
    """Cell index and offset for coordinate u, clamping on-knot queries to the
    cell whose left edge they sit on (last knot maps into the last cell)."""
    knots = np.asarray(knots, dtype=float)
    span = max(1.0, float(np.max(np.abs(knots))))
    if u < knots[0] - HULL_TOL * span or u > knots[-1] + HULL_TOL * span:
        raise OutOfHullError(
            f"{name}={u} outside hull [{knots[0]}, {knots[-1]}]")
    if len(knots) == 1:
        return 0, 0.0
    idx = int(np.clip(np.searchsorted(knots, u, side="right") - 1,
                      0, len(knots) - 2))
    return idx, float(np.clip(u - knots[idx], 0.0, knots[idx + 1] - knots[idx]))


def _m2(d: float) -> np.ndarray:
    return np.array([[1.0, d], [0.0, 1.0]])


def _pair_gain(delta: float, u: float):
    """2x2 integrator-chain conditioning pieces (gain on the far endpoint,
    prior-rollout weight on the near endpoint, and their residual kernel)."""
    if not 0.0 <= u <= delta * (1.0 + 1e-12):
        raise ValueError(f"offset {u} outside segment [0, {delta}]")
    lam = k_matrix(u) @ _m2(delta - u).T @ np.linalg.inv(k_matrix(delta))
    psi = _m2(u) - lam @ _m2(delta)
    resid = k_matrix(u) - lam @ k_matrix(delta) @ lam.T
    return lam, psi, resid


_I2 = np.eye(2)
_I6 = np.eye(6)
_I12 = np.eye(12)


def temporal_gain(dt: float, tau: float, params: PriorParams):
    """(Lam, Psi, R) as 24x24 operators for the within-column time stage."""
    lam, psi, r2 = _pair_gain(dt, tau)
    return (np.kron(lam, _I12), np.kron(psi, _I12),
            np.kron(r2, np.kron(_I2, params.qt_psd)))


def spatial_gain(ds: float, sigma: float, params: PriorParams):
    """(Lam, Psi, R) as 24x24 operators for the arclength stage."""
    lam, psi, r2 = _pair_gain(ds, sigma)
    return (np.kron(_I2, np.kron(lam, _I6)), np.kron(_I2, np.kron(psi, _I6)),
            np.kron(_I2, np.kron(r2, params.qs_psd)))


def interp_weights(ds: float, dt: float, sigma: float, tau: float,
                   params: PriorParams):
    """Chart-level interpolation map onto the four corner charts, plus the
    residual covariance, for a query at offsets (sigma, tau) inside a cell of
    size (ds, dt).  Corner order is (00, 10, 01, 11) with subscripts (spatial,
    temporal).  This is the exact linearization of the query chain about any
    common chart; the nonlinear path in query_mean composes the same gains
    through per-column local charts."""
    if ds <= 0 or dt <= 0:
        raise ValueError("cell dimensions must be positive")
    lam_t, psi_t, r_t = temporal_gain(dt, tau, params)
    lam_s, psi_s, r_s = spatial_gain(ds, sigma, params)
    W = np.hstack([psi_s @ psi_t, lam_s @ psi_t, psi_s @ lam_t, lam_s @ lam_t])
    resid = psi_s @ r_t @ psi_s.T + lam_s @ r_t @ lam_s.T + r_s
    return W, 0.5 * (resid + resid.T)


# ---------------------------------------------------------------------------
# nonlinear interpolation chain


def _pair_state(x_a: NodeState, x_b: NodeState, lam: np.ndarray,
                psi: np.ndarray, want_jac: bool):
    """Condition the bridge state on endpoints (x_a, x_b) in x_a's chart and
    decode.  Returns (state, J_a, J_b, S) where the Jacobians map endpoint
    chart perturbations to the result's own chart and S maps chart-level
    residual noise into the result's own chart."""
    z_b, enc_b, bm_b = encode_with_jacobians(x_b, x_a.pose, want_jac)
    z_m = psi @ x_a.derivative_vector() + lam @ z_b
    x_m = chart_decode(z_m, x_a.pose)
    if not want_jac:
        return x_m, None, None, None
    _, enc_m, bm_m = encode_with_jacobians(x_m, x_a.pose, True)
    j_a = psi @ encode_self_jacobian(x_a)
    j_a[:, 0:6] += lam @ bm_b - bm_m
    j_b = lam @ enc_b
    s = np.linalg.inv(enc_m)
    return x_m, s @ j_a, s @ j_b, s


@dataclass
class Interpolant:
    """One query's interpolation chain: corner node ids (flat, in the order
    weights apply) and the per-stage gain operators."""

    node_ids: Tuple[int, ...]
    temporal: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]
    spatial: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]

    def state(self, states: Sequence[NodeState]) -> NodeState:
        return self._chain(states, want_jac=False)[0]

    def state_with_jacobians(self, states: Sequence[NodeState]):
        """(state, jacobians onto each node's chart, residual in the state's
        own chart)."""
        return self._chain(states, want_jac=True)

    def _chain(self, states: Sequence[NodeState], want_jac: bool):
        xs = [states[i] for i in self.node_ids]
        if self.temporal is None and self.spatial is None:
            x = xs[0]
            return (x, [np.eye(24)], np.zeros((24, 24))) if want_jac \
                else (x, None, None)
        if self.spatial is None:
            lam_t, psi_t, r_t = self.temporal
            x_q, j_a, j_b, s = _pair_state(xs[0], xs[1], lam_t, psi_t, want_jac)
            if not want_jac:
                return x_q, None, None
            return x_q, [j_a, j_b], (s @ r_t @ s.T)
        if self.temporal is None:
            lam_s, psi_s, r_s = self.spatial
            x_q, j_a, j_b, s = _pair_state(xs[0], xs[1], lam_s, psi_s, want_jac)
            if not want_jac:
                return x_q, None, None
            return x_q, [j_a, j_b], (s @ r_s @ s.T)

        lam_t, psi_t, r_t = self.temporal
        lam_s, psi_s, r_s = self.spatial
        x00, x10, x01, x11 = xs
        x_l, jl_00, jl_01, s_l = _pair_state(x00, x01, lam_t, psi_t, want_jac)
        x_r, jr_10, jr_11, s_r = _pair_state(x10, x11, lam_t, psi_t, want_jac)
        x_q, jq_l, jq_r, s_q = _pair_state(x_l, x_r, lam_s, psi_s, want_jac)
        if not want_jac:
            return x_q, None, None
        jacs = [jq_l @ jl_00, jq_r @ jr_10, jq_l @ jl_01, jq_r @ jr_11]
        tl = jq_l @ s_l
        tr = jq_r @ s_r
        resid = tl @ r_t @ tl.T + tr @ r_t @ tr.T + s_q @ r_s @ s_q.T
        return x_q, jacs, 0.5 * (resid + resid.T)


def _snap_knot(knots: np.ndarray, idx: int, off: float) -> Optional[int]:
    """Index of the knot the offset lands on, or None inside the cell."""
    span = max(1.0, float(np.max(np.abs(knots))))
    if abs(off) <= HULL_TOL * span:
        return idx
    if idx + 1 < len(knots) \
            and abs(off - (knots[idx + 1] - knots[idx])) <= HULL_TOL * span:
        return idx + 1
    return None


def make_interpolant(s_knots, t_knots, params: PriorParams, s: float, t: float,
                     cell: Optional[Tuple[int, int]] = None) -> Interpolant:
    """Resolve (s, t) to corner nodes and stage gains.  A coordinate on a knot
    drops its stage, so knot-line queries bind to 2 nodes and grid-node
    queries to 1.  `cell` forces a specific (n, k) cell for boundary
    continuity checks; offsets are then measured from that cell's corner and
    no stage is dropped."""
    s_knots = np.asarray(s_knots, dtype=float)
    t_knots = np.asarray(t_knots, dtype=float)
    N, K = len(s_knots), len(t_knots)
    sn = kn = None
    if cell is None:
        n0, sigma = locate(s_knots, s, "s")
        k0, tau = locate(t_knots, t, "t")
        sn = _snap_knot(s_knots, n0, sigma)
        kn = _snap_knot(t_knots, k0, tau)
    else:
        n0, k0 = cell
        if not (0 <= n0 <= max(N - 2, 0) and 0 <= k0 <= max(K - 2, 0)):
            raise ValueError(f"cell {cell} outside grid")
        sigma = s - s_knots[n0]
        tau = t - t_knots[k0]
    if N == 1 and abs(s - s_knots[0]) > HULL_TOL * max(1.0, abs(s_knots[0])):
        raise OutOfHullError(f"s={s} outside degenerate hull {{{s_knots[0]}}}")
    if K == 1 and abs(t - t_knots[0]) > HULL_TOL * max(1.0, abs(t_knots[0])):
        raise OutOfHullError(f"t={t} outside degenerate hull {{{t_knots[0]}}}")

    temporal = spatial = None
    if K > 1:
        if kn is not None:
            k0 = kn
        else:
            dt = float(t_knots[k0 + 1] - t_knots[k0])
            temporal = temporal_gain(dt, float(np.clip(tau, 0.0, dt)), params)
    if N > 1:
        if sn is not None:
            n0 = sn
        else:
            ds = float(s_knots[n0 + 1] - s_knots[n0])
            spatial = spatial_gain(ds, float(np.clip(sigma, 0.0, ds)), params)

    flat = lambda n, k: k * N + n
    if temporal is None and spatial is None:
        ids: Tuple[int, ...] = (flat(n0, k0),)
    elif spatial is None:
        ids = (flat(n0, k0), flat(n0, k0 + 1))
    elif temporal is None:
        ids = (flat(n0, k0), flat(n0 + 1, k0))
    else:
        ids = (flat(n0, k0), flat(n0 + 1, k0), flat(n0, k0 + 1),
               flat(n0 + 1, k0 + 1))
    return Interpolant(ids, temporal, spatial)


def query_mean(posterior, s: float, t: float,
               cell: Optional[Tuple[int, int]] = None) -> NodeState:
    """Posterior mean state at (s, t); touches only the containing cell."""
    grid = posterior.grid
    interp = make_interpolant(grid.s_knots, grid.t_knots, posterior.params,
                              s, t, cell)
    return interp.state(grid.states)


def query_covariance(posterior, s: float, t: float,
                     cell: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Posterior covariance of the state at (s, t), in that state's own chart:
    corner joint pushed through the interpolation chain plus the two-stage
    conditioning residual."""
    grid = posterior.grid
    interp = make_interpolant(grid.s_knots, grid.t_knots, posterior.params,
                              s, t, cell)
    _, jacs, resid = interp.state_with_jacobians(grid.states)
    joint = posterior.cov.joint(interp.node_ids)
    U = np.hstack(jacs)
    cov = U @ joint @ U.T + resid
    return 0.5 * (cov + cov.T)


def query_state(posterior, s: float, t: float,
                cell: Optional[Tuple[int, int]] = None):
    """(mean state, covariance) in one pass over the cell."""
    grid = posterior.grid
    interp = make_interpolant(grid.s_knots, grid.t_knots, posterior.params,
                              s, t, cell)
    x_q, jacs, resid = interp.state_with_jacobians(grid.states)
    joint = posterior.cov.joint(interp.node_ids)
    U = np.hstack(jacs)
    cov = U @ joint @ U.T + resid
    return x_q, 0.5 * (cov + cov.T)
