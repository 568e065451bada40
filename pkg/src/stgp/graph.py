"""Estimation grid and factor construction.

Nodes live on an arclength x time lattice, flattened space-major:
flat index = k * N + n for arclength index n and time index k.  The prior
couples each node only to its immediate lattice neighbors, which is what
keeps the normal equations block-banded with bandwidth N + 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Union

import numpy as np

from .prior import (NodeState, PriorParams, StateArrays, binary_spatial_error,
                    binary_spatial_jacobians, binary_temporal_error,
                    binary_temporal_jacobians, propagate_corner,
                    propagate_spatial, propagate_temporal, q_binary_s,
                    q_binary_s_inv, q_binary_t, q_binary_t_inv, q_quaternary,
                    q_quaternary_inv, quaternary_error, quaternary_jacobians,
                    unary_error, unary_jacobian)


@dataclass
class Grid:
    s_knots: np.ndarray
    t_knots: np.ndarray
    states: List[NodeState]

    def __post_init__(self):
        self.s_knots = np.asarray(self.s_knots, dtype=float).reshape(-1)
        self.t_knots = np.asarray(self.t_knots, dtype=float).reshape(-1)
        if len(self.states) != self.n_nodes:
            raise ValueError("grid states length does not match knot counts")

    @property
    def N(self) -> int:
        return len(self.s_knots)

    @property
    def K(self) -> int:
        return len(self.t_knots)

    @property
    def n_nodes(self) -> int:
        return self.N * self.K

    def flat(self, n: int, k: int) -> int:
        return k * self.N + n

    def node_indices(self, i: int):
        return i % self.N, i // self.N

    def state(self, n: int, k: int) -> NodeState:
        return self.states[self.flat(n, k)]

    def copy(self) -> "Grid":
        return Grid(self.s_knots.copy(), self.t_knots.copy(),
                    [s.copy() for s in self.states])

    def state_arrays(self) -> StateArrays:
        return StateArrays.from_states(self.states)


def _check_knots(knots: np.ndarray, name: str):
    if knots.ndim != 1 or len(knots) < 1:
        raise ValueError(f"{name} must be a non-empty 1-d array")
    if len(knots) > 1 and np.min(np.diff(knots)) <= 0:
        raise ValueError(f"{name} must be strictly increasing")


def build_grid(s_knots: Sequence[float], t_knots: Sequence[float],
               init: Union[NodeState, Callable[[float, float], NodeState]]) -> Grid:
    """Lay out the lattice and initialize every node.

    `init` is either the state at the first node, continued across the grid
    with zero process noise (so every prior factor starts at zero error), or
    a callable (s, t) -> NodeState sampled at each knot pair.
    """
    s_knots = np.asarray(s_knots, dtype=float).reshape(-1)
    t_knots = np.asarray(t_knots, dtype=float).reshape(-1)
    _check_knots(s_knots, "s_knots")
    _check_knots(t_knots, "t_knots")
    N, K = len(s_knots), len(t_knots)
    states: List[NodeState] = [None] * (N * K)  # type: ignore[list-item]
    if callable(init):
        for k in range(K):
            for n in range(N):
                st = init(float(s_knots[n]), float(t_knots[k]))
                states[k * N + n] = st.copy()
    else:
        states[0] = init.copy()
        for n in range(1, N):
            states[n] = propagate_spatial(states[n - 1], s_knots[n] - s_knots[n - 1])
        for k in range(1, K):
            dt = t_knots[k] - t_knots[k - 1]
            states[k * N] = propagate_temporal(states[(k - 1) * N], dt)
            for n in range(1, N):
                ds = s_knots[n] - s_knots[n - 1]
                states[k * N + n] = propagate_corner(
                    states[(k - 1) * N + n - 1], states[(k - 1) * N + n],
                    states[k * N + n - 1], ds, dt)
    return Grid(s_knots, t_knots, states)


# ---------------------------------------------------------------------------
# factors


@dataclass
class UnaryPriorFactor:
    node: int
    params: PriorParams
    noise_cov: np.ndarray
    weight: np.ndarray

    kind = "prior_unary"

    @property
    def nodes(self):
        return (self.node,)

    def error(self, grid: Grid) -> np.ndarray:
        return unary_error(grid.states[self.node], self.params)

    def jacobians(self, grid: Grid):
        return [unary_jacobian(grid.states[self.node], self.params)]


@dataclass
class BinarySpatialFactor:
    node_a: int
    node_b: int
    ds: float
    noise_cov: np.ndarray
    weight: np.ndarray

    kind = "prior_binary_spatial"

    @property
    def nodes(self):
        return (self.node_a, self.node_b)

    def error(self, grid: Grid) -> np.ndarray:
        return binary_spatial_error(grid.states[self.node_a],
                                    grid.states[self.node_b], self.ds)

    def jacobians(self, grid: Grid):
        return list(binary_spatial_jacobians(grid.states[self.node_a],
                                             grid.states[self.node_b], self.ds))


@dataclass
class BinaryTemporalFactor:
    node_a: int
    node_b: int
    dt: float
    noise_cov: np.ndarray
    weight: np.ndarray

    kind = "prior_binary_temporal"

    @property
    def nodes(self):
        return (self.node_a, self.node_b)

    def error(self, grid: Grid) -> np.ndarray:
        return binary_temporal_error(grid.states[self.node_a],
                                     grid.states[self.node_b], self.dt)

    def jacobians(self, grid: Grid):
        return list(binary_temporal_jacobians(grid.states[self.node_a],
                                              grid.states[self.node_b], self.dt))


@dataclass
class QuaternaryFactor:
    """Cell factor over corners (n00, n10, n01, n11); subscripts are
    (spatial, temporal) offsets within the cell."""

    node00: int
    node10: int
    node01: int
    node11: int
    ds: float
    dt: float
    noise_cov: np.ndarray
    weight: np.ndarray

    kind = "prior_quaternary"

    @property
    def nodes(self):
        return (self.node00, self.node10, self.node01, self.node11)

    def error(self, grid: Grid) -> np.ndarray:
        s = grid.states
        return quaternary_error(s[self.node00], s[self.node10], s[self.node01],
                                s[self.node11], self.ds, self.dt)

    def jacobians(self, grid: Grid):
        s = grid.states
        return list(quaternary_jacobians(s[self.node00], s[self.node10],
                                         s[self.node01], s[self.node11],
                                         self.ds, self.dt))


@dataclass
class FactorSet:
    unary: List[UnaryPriorFactor] = field(default_factory=list)
    binary_spatial: List[BinarySpatialFactor] = field(default_factory=list)
    binary_temporal: List[BinaryTemporalFactor] = field(default_factory=list)
    quaternary: List[QuaternaryFactor] = field(default_factory=list)
    measurement: list = field(default_factory=list)

    def all_factors(self):
        yield from self.unary
        yield from self.binary_spatial
        yield from self.binary_temporal
        yield from self.quaternary
        yield from self.measurement

    def prior_count(self) -> int:
        return (len(self.unary) + len(self.binary_spatial)
                + len(self.binary_temporal) + len(self.quaternary))

    def total_count(self) -> int:
        return self.prior_count() + len(self.measurement)


def build_prior_factors(grid: Grid, params: PriorParams) -> FactorSet:
    """One unary factor at the first node, binary chains along the first time
    row and first arclength column, and one cell factor per lattice cell."""
    fs = FactorSet()
    p0 = params.p0
    fs.unary.append(UnaryPriorFactor(0, params, p0, np.linalg.inv(p0)))
    N, K = grid.N, grid.K
    for n in range(1, N):
        ds = float(grid.s_knots[n] - grid.s_knots[n - 1])
        fs.binary_spatial.append(BinarySpatialFactor(
            grid.flat(n - 1, 0), grid.flat(n, 0), ds,
            q_binary_s(ds, params), q_binary_s_inv(ds, params)))
    for k in range(1, K):
        dt = float(grid.t_knots[k] - grid.t_knots[k - 1])
        fs.binary_temporal.append(BinaryTemporalFactor(
            grid.flat(0, k - 1), grid.flat(0, k), dt,
            q_binary_t(dt, params), q_binary_t_inv(dt, params)))
    for k in range(1, K):
        dt = float(grid.t_knots[k] - grid.t_knots[k - 1])
        for n in range(1, N):
            ds = float(grid.s_knots[n] - grid.s_knots[n - 1])
            fs.quaternary.append(QuaternaryFactor(
                grid.flat(n - 1, k - 1), grid.flat(n, k - 1),
                grid.flat(n - 1, k), grid.flat(n, k), ds, dt,
                q_quaternary(ds, dt, params), q_quaternary_inv(ds, dt, params)))
    return fs


def precision_pattern(factors: FactorSet, n_nodes: int) -> np.ndarray:
    """Boolean block-sparsity pattern of J^T W J from factor membership."""
    pat = np.zeros((n_nodes, n_nodes), dtype=bool)
    for f in factors.all_factors():
        for i in f.nodes:
            for j in f.nodes:
                pat[i, j] = True
    return pat
