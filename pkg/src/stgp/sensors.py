"""Sensor models and the measurement factors they induce on the grid.

Four kinds:
  pose6      full pose observation; error lives in the pose tangent
  position3  world-frame position of the cross-section origin
  gyro3      body-frame angular rate
  strain6    body-frame strain, optionally masked to a component subset

A measurement taken at a grid node attaches directly to that node.  Anywhere
else inside the hull it attaches to the containing cell's corners through the
query-interpolation chain, so the factor constrains the nodes that determine
the continuous state at the sample point.  The interpolated factor evaluated
at a node-coincident sample reduces to the on-node factor exactly because the
interpolation weights collapse onto that corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .graph import Grid
from .liegroup import Pose, ad6, hat3, se3_left_jacobian_inv
from .prior import NodeState, PriorParams
from .query import HULL_TOL, Interpolant, make_interpolant

KINDS = ("pose6", "position3", "gyro3", "strain6")

_DIMS = {"pose6": 6, "position3": 3, "gyro3": 3, "strain6": 6}


@dataclass
class Measurement:
    """One sensor sample at continuous coordinates (s, t)."""

    kind: str
    s: float
    t: float
    value: object
    noise_cov: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if self.kind == "pose6":
            if not isinstance(self.value, Pose):
                raise ValueError("pose6 value must be a Pose")
        else:
            self.value = np.asarray(self.value, dtype=float).reshape(
                _DIMS[self.kind])
        if self.mask is not None and self.kind != "strain6":
            raise ValueError("mask applies to strain6 only")
        if self.kind == "strain6":
            m = np.ones(6, dtype=bool) if self.mask is None \
                else np.asarray(self.mask, dtype=bool).reshape(6)
            if not m.any():
                raise ValueError("strain6 mask selects no components")
            self.mask = m
        self.noise_cov = np.asarray(self.noise_cov, dtype=float)
        d = self.dim
        if self.noise_cov.shape == ():
            self.noise_cov = float(self.noise_cov) * np.eye(d)
        if self.noise_cov.shape != (d, d):
            raise ValueError(
                f"noise_cov must be {d}x{d} for {self.kind}, got "
                f"{self.noise_cov.shape}")
        if np.max(np.abs(self.noise_cov - self.noise_cov.T)) > 0:
            raise ValueError("noise_cov must be symmetric")
        np.linalg.cholesky(self.noise_cov)

    @property
    def dim(self) -> int:
        if self.kind == "strain6":
            return int(np.count_nonzero(self.mask))
        return _DIMS[self.kind]


# ---------------------------------------------------------------------------
# error models, each returning (error, d(error)/d(own chart perturbation))


def _pose_model(x: NodeState, value: Pose, want_jac: bool):
    e = (value @ x.pose.inverse()).log()
    if not want_jac:
        return e, None
    J = np.zeros((6, 24))
    J[:, 0:6] = -se3_left_jacobian_inv(-e)
    return e, J


def _position_model(x: NodeState, value: np.ndarray, want_jac: bool):
    e = value - x.pose.t
    if not want_jac:
        return e, None
    J = np.zeros((3, 24))
    J[:, 0:3] = -np.eye(3)
    J[:, 3:6] = hat3(x.pose.t)
    return e, J


def _gyro_model(x: NodeState, value: np.ndarray, want_jac: bool):
    R = x.pose.R
    omega = x.velocity[3:6]
    e = value - R.T @ omega
    if not want_jac:
        return e, None
    J = np.zeros((3, 24))
    J[:, 3:6] = -0.5 * (R.T @ hat3(omega))
    J[:, 15:18] = -R.T
    return e, J


def _strain_model(x: NodeState, value: np.ndarray, mask: np.ndarray,
                  want_jac: bool):
    ad_inv = x.pose.inverse().adjoint()
    body = ad_inv @ x.strain
    e = (value - body)[mask]
    if not want_jac:
        return e, None
    J = np.zeros((6, 24))
    J[:, 0:6] = -0.5 * (ad_inv @ ad6(x.strain))
    J[:, 6:12] = -ad_inv
    return e, J[mask]


def measurement_model(meas: Measurement, x: NodeState, want_jac: bool = True):
    """Error and chart Jacobian of `meas` against state `x`."""
    if meas.kind == "pose6":
        return _pose_model(x, meas.value, want_jac)
    if meas.kind == "position3":
        return _position_model(x, meas.value, want_jac)
    if meas.kind == "gyro3":
        return _gyro_model(x, meas.value, want_jac)
    return _strain_model(x, meas.value, meas.mask, want_jac)


def strain_node_batch(sa, values: np.ndarray, want_jac: bool = True):
    """Stacked unmasked strain errors/Jacobians for a batch of node states.

    Same model as `_strain_model` with a full mask; the per-state loop is the
    dominant linearization cost when strain is measured at every node, so the
    solver routes that group here.
    """
    values = np.asarray(values, dtype=float)
    rt = np.swapaxes(sa.R, 1, 2)
    ad_inv = np.zeros((values.shape[0], 6, 6))
    ad_inv[:, 0:3, 0:3] = rt
    ad_inv[:, 3:6, 3:6] = rt
    ad_inv[:, 0:3, 3:6] = -(rt @ hat3(sa.t))
    e = values - np.einsum("bij,bj->bi", ad_inv, sa.eps)
    if not want_jac:
        return e, None
    J = np.zeros((values.shape[0], 6, 24))
    J[:, :, 0:6] = -0.5 * (ad_inv @ ad6(sa.eps))
    J[:, :, 6:12] = -ad_inv
    return e, J


# ---------------------------------------------------------------------------
# factors


@dataclass
class NodeMeasurementFactor:
    """Measurement attached directly to one grid node."""

    node: int
    meas: Measurement
    weight: np.ndarray = field(init=False)
    kind = "measurement"

    def __post_init__(self):
        self.weight = np.linalg.inv(self.meas.noise_cov)

    @property
    def nodes(self) -> Tuple[int, ...]:
        return (self.node,)

    def error(self, grid: Grid) -> np.ndarray:
        return measurement_model(self.meas, grid.states[self.node], False)[0]

    def jacobians(self, grid: Grid) -> List[np.ndarray]:
        return [measurement_model(self.meas, grid.states[self.node], True)[1]]


@dataclass
class InterpolatedMeasurementFactor:
    """Measurement at an off-node point, bound to the containing cell's
    corners: the sampled state is the interpolation-chain state and the
    measurement Jacobians compose with the chain's."""

    interp: Interpolant
    meas: Measurement
    weight: np.ndarray = field(init=False)
    kind = "measurement"

    def __post_init__(self):
        self.weight = np.linalg.inv(self.meas.noise_cov)

    @property
    def nodes(self) -> Tuple[int, ...]:
        return self.interp.node_ids

    def error(self, grid: Grid) -> np.ndarray:
        x_q = self.interp.state(grid.states)
        return measurement_model(self.meas, x_q, False)[0]

    def jacobians(self, grid: Grid) -> List[np.ndarray]:
        x_q, chain, _ = self.interp.state_with_jacobians(grid.states)
        Jm = measurement_model(self.meas, x_q, True)[1]
        return [Jm @ Ji for Ji in chain]


def _nearest_knot(knots: np.ndarray, u: float) -> Optional[int]:
    span = max(1.0, float(np.max(np.abs(knots))))
    i = int(np.argmin(np.abs(knots - u)))
    return i if abs(knots[i] - u) <= HULL_TOL * span else None


def build_measurement_factor(meas: Measurement, grid: Grid,
                             params: PriorParams):
    """Bind one measurement to the grid: on-node when (s, t) coincides with a
    knot pair, otherwise interpolated over the containing cell's corners."""
    n = _nearest_knot(grid.s_knots, meas.s)
    k = _nearest_knot(grid.t_knots, meas.t)
    if n is not None and k is not None:
        return NodeMeasurementFactor(grid.flat(n, k), meas)
    interp = make_interpolant(grid.s_knots, grid.t_knots, params,
                              meas.s, meas.t)
    return InterpolatedMeasurementFactor(interp, meas)


def build_measurement_factors(measurements, grid: Grid,
                              params: PriorParams) -> list:
    return [build_measurement_factor(m, grid, params) for m in measurements]
