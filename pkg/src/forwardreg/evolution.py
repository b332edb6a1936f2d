"""Semilinear evolution: plants, IMEX stepping, tangent and adjoint flows.

The state equation is dw/dt + A w + F(w) = f with A linear monotone and F a
Lipschitz semilinear part vanishing at the origin. Time stepping is IMEX
Euler, implicit in A and explicit in F:

    (I + dt A) w' = w + dt (f - F(w)).

The tangent flow integrates the first variation along a stored base
trajectory with the same scheme, and the adjoint flow propagates the exact
Gram-weighted adjoint of every discrete tangent step in reverse, so discrete
duality holds to roundoff rather than to O(dt).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .spaces import LinMap, SpaceSpec

__all__ = [
    "Plant",
    "Trajectory",
    "OperatorSolver",
    "AlphaEstimate",
    "ContractionReport",
    "apply_nonlinear_A",
    "step",
    "flow",
    "tangent_flow",
    "adjoint_tangent_flow",
    "estimate_alpha",
    "contraction_check",
]


class OperatorSolver:
    """LU-backed solves for A and the IMEX step matrices (I + dt A).

    One factorization per distinct dt is cached; transposed solves reuse the
    same factorization. ``dense_step_inverse`` materializes (I + dt A)^{-1}
    for the quadrature-heavy inner loops of the forwarding evaluations.
    """

    def __init__(self, a_matrix: np.ndarray):
        self._a = np.asarray(a_matrix, dtype=float)
        self._dim = self._a.shape[0]
        self._lu_a = sla.lu_factor(self._a)
        self._step_lu: dict[float, tuple] = {}
        self._step_inv: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def solve_a(self, b: np.ndarray, transpose: bool = False) -> np.ndarray:
        return sla.lu_solve(self._lu_a, b, trans=1 if transpose else 0)

    def _step_factor(self, dt: float):
        key = float(dt)
        if key not in self._step_lu:
            self._step_lu[key] = sla.lu_factor(np.eye(self._dim) + dt * self._a)
        return self._step_lu[key]

    def solve_step(self, dt: float, b: np.ndarray, transpose: bool = False) -> np.ndarray:
        return sla.lu_solve(self._step_factor(dt), b, trans=1 if transpose else 0)

    def dense_step_inverse(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Return (P, P.T contiguous) with P = (I + dt A)^{-1}."""
        key = float(dt)
        if key not in self._step_inv:
            p = sla.lu_solve(self._step_factor(dt), np.eye(self._dim))
            self._step_inv[key] = (np.ascontiguousarray(p), np.ascontiguousarray(p.T))
        return self._step_inv[key]


@dataclass
class Plant:
    """Semilinear plant dw/dt + A w + F(w) = B u, y = C w.

    ``dF`` maps a state to the Jacobian of F there, as a LinMap on H whose
    ``rmatvec`` is the plain transpose (Gram weighting is applied by callers
    where adjoints are needed). ``alpha_cert`` is the certified monotonicity
    margin of A + dF(.) in the H product, or None when the construction could
    not certify one. ``lip_F`` / ``lip_dF`` are global Lipschitz bounds used
    for step-size guards and quadrature tail bounds.
    """

    name: str
    space_H: SpaceSpec
    space_U: SpaceSpec
    space_Z: SpaceSpec
    A: LinMap
    F: Callable[[np.ndarray], np.ndarray]
    dF: Callable[[np.ndarray], LinMap]
    B: LinMap
    C: LinMap
    solver: OperatorSolver
    alpha_cert: Optional[float]
    lip_F: float
    lip_dF: Optional[float] = None
    feasible: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.space_H.dim

    def require_alpha(self) -> float:
        if self.alpha_cert is None:
            raise ValueError(
                f"plant {self.name!r} has no certified monotonicity margin"
            )
        return self.alpha_cert


@dataclass
class Trajectory:
    """States of a flow on a uniform grid; states[k] is the state at times[k]."""

    times: np.ndarray
    states: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.times)


def apply_nonlinear_A(plant: Plant, w: np.ndarray) -> np.ndarray:
    """Full drift A w + F(w)."""
    return plant.A(w) + plant.F(w)


def _check_step_size(plant: Plant, dt: float) -> None:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if plant.lip_F > 0 and dt * plant.lip_F >= 1.0:
        raise ValueError(
            f"dt too large for the explicit part: dt * lip_F = {dt * plant.lip_F:.3g} >= 1"
        )


def step(plant: Plant, w: np.ndarray, f: Optional[np.ndarray], dt: float) -> np.ndarray:
    """One IMEX Euler step: solve (I + dt A) w' = w + dt (f - F(w))."""
    _check_step_size(plant, dt)
    rhs = w - dt * plant.F(w)
    if f is not None:
        rhs = rhs + dt * f
    return plant.solver.solve_step(dt, rhs)


def flow(
    plant: Plant,
    w0: np.ndarray,
    forcing,
    T: float,
    dt: float,
) -> Trajectory:
    """Integrate the plant on [0, T] with fixed step dt.

    ``forcing`` is None, a constant vector, or a callable t -> vector. The
    horizon is rounded to a whole number of steps.
    """
    _check_step_size(plant, dt)
    n = max(int(round(T / dt)), 0)
    times = dt * np.arange(n + 1)
    states = np.empty((n + 1, plant.dim))
    states[0] = w0
    cur = np.array(w0, dtype=float)
    const_f = forcing if (forcing is None or not callable(forcing)) else None
    for k in range(n):
        f = forcing(times[k]) if callable(forcing) else const_f
        rhs = cur - dt * plant.F(cur)
        if f is not None:
            rhs = rhs + dt * f
        cur = plant.solver.solve_step(dt, rhs)
        states[k + 1] = cur
    return Trajectory(times, states)


def tangent_flow(plant: Plant, base: Trajectory, h: np.ndarray) -> Trajectory:
    """First-variation flow dv/dt + A v + dF(w(t)) v = 0 along ``base``.

    Same IMEX scheme and grid as the base trajectory: the dF term is frozen
    at the stored base state of the step's left endpoint.
    """
    dt = base.dt
    n = len(base) - 1
    states = np.empty((n + 1, plant.dim))
    states[0] = h
    v = np.array(h, dtype=float)
    for k in range(n):
        jac = plant.dF(base.states[k])
        v = plant.solver.solve_step(dt, v - dt * jac(v))
        states[k + 1] = v
    return Trajectory(base.times.copy(), states)


def adjoint_tangent_flow(plant: Plant, base: Trajectory, zeta: np.ndarray) -> Trajectory:
    """Exact discrete adjoint of :func:`tangent_flow`, propagated in reverse.

    Each tangent step is T_k = (I + dt A)^{-1} (I - dt dF(w_k)); the adjoint
    trajectory applies the Gram-weighted T_k* backwards from ``zeta`` so that
    (tangent(h)[-1], zeta)_H == (h, adjoint(zeta)[0])_H to roundoff. States
    are indexed forward in time, states[-1] == zeta.
    """
    dt = base.dt
    n = len(base) - 1
    gram = plant.space_H
    states = np.empty((n + 1, plant.dim))
    states[n] = zeta
    # run in Gram-multiplied coordinates: no Gram solves inside the loop
    st = gram.apply_gram(np.asarray(zeta, dtype=float))
    for k in range(n - 1, -1, -1):
        st = plant.solver.solve_step(dt, st, transpose=True)
        jac = plant.dF(base.states[k])
        st = st - dt * jac.rmatvec(st)
        states[k] = gram.solve_gram(st)
    return Trajectory(base.times.copy(), states)


@dataclass
class AlphaEstimate:
    """Sampled monotonicity quotients of the full drift."""

    minimum: float
    certified: Optional[float]
    violates_certificate: bool
    n_samples: int


def estimate_alpha(
    plant: Plant,
    n_samples: int = 50,
    radius: float = 1.0,
    seed: int = 0,
    tol: float = 1e-3,
) -> AlphaEstimate:
    """Empirical monotonicity margin over sampled state pairs.

    Draws pairs (w1, w2) from the Gram-weighted ball of the given radius and
    returns the worst normalized quotient
    (A(w1) - A(w2), w1 - w2)_H / ||w1 - w2||_H^2. The violation flag compares
    against ``alpha_cert - tol`` (tolerance on the normalized quotient).
    """
    rng = np.random.default_rng(seed)
    space = plant.space_H
    worst = np.inf
    for _ in range(n_samples):
        w1 = space.sample_ball(rng, radius)
        w2 = space.sample_ball(rng, radius)
        d = w1 - w2
        nd2 = space.inner(d, d)
        if nd2 <= 1e-28:
            continue
        q = space.inner(apply_nonlinear_A(plant, w1) - apply_nonlinear_A(plant, w2), d) / nd2
        worst = min(worst, q)
    cert = plant.alpha_cert
    violates = cert is None or (worst < cert - tol)
    return AlphaEstimate(float(worst), cert, bool(violates), n_samples)


@dataclass
class ContractionReport:
    max_ratio: float
    passed: bool
    alpha: float
    horizon: float

    def __bool__(self) -> bool:
        return self.passed


def contraction_check(
    plant: Plant,
    w1: np.ndarray,
    w2: np.ndarray,
    T: float,
    dt: float,
    alpha: Optional[float] = None,
    tol: float = 0.05,
) -> ContractionReport:
    """Check ||T_t w1 - T_t w2||_H <= (1 + tol) e^{-alpha t} ||w1 - w2||_H.

    ``alpha`` defaults to the plant certificate. The report carries the worst
    ratio over the grid.
    """
    if alpha is None:
        alpha = plant.require_alpha()
    t1 = flow(plant, w1, None, T, dt)
    t2 = flow(plant, w2, None, T, dt)
    space = plant.space_H
    d0 = space.norm(np.asarray(w1, dtype=float) - np.asarray(w2, dtype=float))
    if d0 == 0.0:
        return ContractionReport(0.0, True, alpha, T)
    worst = 0.0
    for k in range(len(t1)):
        ratio = space.norm(t1.states[k] - t2.states[k]) / (
            np.exp(-alpha * t1.times[k]) * d0
        )
        worst = max(worst, ratio)
    return ContractionReport(float(worst), bool(worst <= 1.0 + tol), alpha, T)
