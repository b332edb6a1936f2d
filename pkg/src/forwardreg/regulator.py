"""Closed-loop synthesis: integral action, forwarding feedback, simulation.

The loop augments the plant with an output integrator dz/dt = C w - y_ref
and applies u = B* dM(w)* (z - M(w)). States advance by the plant's IMEX
step with forcing B u + d; z advances by explicit Euler with the current
output (the z-dynamics are not stiff, and this keeps the step matrices
identical to the open loop). The candidate Lyapunov function is

    V(w, z) = 1/2 ||w||_H^2 + (rho/2) ||z - M(w)||_Z^2.

Equilibria are located by budgeted simulation with stagnation detection and
tail averaging; at any discrete fixed point the z-update forces C w = y_ref
exactly, so the located equilibrium is a true regulation point up to the
stagnation tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .evolution import Plant
from .forwarding import ForwardingMap, StateEvaluation

__all__ = [
    "ClosedLoopState",
    "Scenario",
    "RunResult",
    "RegulationReport",
    "EquilibriumResult",
    "feedback",
    "lyapunov",
    "simulate",
    "find_equilibrium",
    "convergence_report",
]


@dataclass
class ClosedLoopState:
    """Plant state plus output-integrator state."""

    w: np.ndarray
    z: np.ndarray


@dataclass
class Scenario:
    """Constant-disturbance regulation scenario on [0, T].

    ``d`` is the constant disturbance in H (None means zero), ``y_ref`` the
    constant reference in Z. ``w0``/``z0`` default to the origin.
    """

    y_ref: np.ndarray
    T: float
    dt: float
    d: Optional[np.ndarray] = None
    w0: Optional[np.ndarray] = None
    z0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.T <= 0 or self.dt <= 0:
            raise ValueError("scenario needs T > 0 and dt > 0")
        self.y_ref = np.atleast_1d(np.asarray(self.y_ref, dtype=float))


@dataclass
class RunResult:
    """Closed-loop trajectory with per-step diagnostics.

    ``m`` stores M(w_k) so that eta = z - m comes free after the run;
    ``v`` is the Lyapunov value per step. A diverged run is truncated at the
    step where the state norm blew past the guard.
    """

    times: np.ndarray
    w: np.ndarray
    z: np.ndarray
    y: np.ndarray
    u: np.ndarray
    m: np.ndarray
    v: np.ndarray
    diverged: bool
    scenario: Scenario

    @property
    def final(self) -> ClosedLoopState:
        return ClosedLoopState(self.w[-1], self.z[-1])

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class RegulationReport:
    """Empirical convergence metrics of one closed-loop run."""

    w_star: np.ndarray
    z_star: np.ndarray
    final_output_error: float
    averaged_output_error: float
    fitted_rate: Optional[float]
    lyapunov_monotone: bool
    max_lyapunov_jump: float


@dataclass
class EquilibriumResult:
    converged: bool
    t_reached: float
    drift_residual: float
    output_residual: float
    iterations: int

    def as_dict(self) -> dict:
        return {
            "converged": self.converged,
            "t_reached": self.t_reached,
            "drift_residual": self.drift_residual,
            "output_residual": self.output_residual,
            "iterations": self.iterations,
        }


def _require_feasible(fmap: ForwardingMap) -> None:
    if not fmap.feasible:
        raise ValueError(
            "forwarding map is infeasible (range condition or contraction "
            "certificate missing); closed-loop synthesis undefined"
        )


def feedback(fmap: ForwardingMap, state: ClosedLoopState) -> np.ndarray:
    """Control u = B* dM(w)* (z - M(w))."""
    _require_feasible(fmap)
    ev = StateEvaluation(fmap, state.w)
    return ev.dM_adjoint_B(state.z - ev.M())


def lyapunov(fmap: ForwardingMap, state: ClosedLoopState) -> float:
    """V = 1/2 ||w||_H^2 + (rho/2) ||z - M(w)||_Z^2."""
    _require_feasible(fmap)
    ev = StateEvaluation(fmap, state.w)
    eta = state.z - ev.M()
    plant = fmap.plant
    return 0.5 * plant.space_H.inner(state.w, state.w) + 0.5 * fmap.rho * (
        plant.space_Z.inner(eta, eta)
    )


def _prep_scenario(plant: Plant, scenario: Scenario):
    dim_z = plant.space_Z.dim
    y_ref = scenario.y_ref
    if y_ref.shape != (dim_z,):
        raise ValueError(f"y_ref must have shape ({dim_z},), got {y_ref.shape}")
    w0 = np.zeros(plant.dim) if scenario.w0 is None else np.asarray(scenario.w0, float)
    z0 = np.zeros(dim_z) if scenario.z0 is None else np.asarray(scenario.z0, float)
    d = None if scenario.d is None else np.asarray(scenario.d, float)
    return w0, z0, d, y_ref


def simulate(
    plant: Plant,
    fmap: ForwardingMap,
    scenario: Scenario,
    divergence_guard: float = 1e6,
) -> RunResult:
    """Integrate the closed loop over the scenario horizon.

    Deterministic: no randomness anywhere in the loop. Returns a truncated
    result with ``diverged=True`` when the H-norm of the state passes the
    guard or stops being finite.
    """
    if plant is not fmap.plant:
        raise ValueError("fmap was built for a different plant")
    _require_feasible(fmap)
    w0, z0, d, y_ref = _prep_scenario(plant, scenario)
    dt = scenario.dt
    n = max(int(round(scenario.T / dt)), 1)

    space_h, space_z = plant.space_H, plant.space_Z
    dim_u = plant.space_U.dim
    times = dt * np.arange(n + 1)
    w_hist = np.empty((n + 1, plant.dim))
    z_hist = np.empty((n + 1, space_z.dim))
    y_hist = np.empty((n + 1, space_z.dim))
    u_hist = np.empty((n + 1, dim_u))
    m_hist = np.empty((n + 1, space_z.dim))
    v_hist = np.empty(n + 1)

    w = w0.copy()
    z = z0.copy()
    rho = fmap.rho
    diverged = False
    k_stop = n
    for k in range(n + 1):
        ev = StateEvaluation(fmap, w)
        m = ev.M()
        eta = z - m
        u = ev.dM_adjoint_B(eta)
        y = plant.C(w)
        w_hist[k], z_hist[k], y_hist[k], u_hist[k], m_hist[k] = w, z, y, u, m
        v_hist[k] = 0.5 * space_h.inner(w, w) + 0.5 * rho * space_z.inner(eta, eta)
        if not np.isfinite(v_hist[k]) or space_h.norm(w) > divergence_guard:
            diverged = True
            k_stop = k
            break
        if k == n:
            break
        forcing = plant.B(u) if d is None else plant.B(u) + d
        w = plant.solver.solve_step(dt, w - dt * plant.F(w) + dt * forcing)
        z = z + dt * (y - y_ref)

    end = k_stop + 1
    return RunResult(
        times=times[:end],
        w=w_hist[:end],
        z=z_hist[:end],
        y=y_hist[:end],
        u=u_hist[:end],
        m=m_hist[:end],
        v=v_hist[:end],
        diverged=diverged,
        scenario=scenario,
    )


def find_equilibrium(
    plant: Plant,
    fmap: ForwardingMap,
    d: Optional[np.ndarray],
    y_ref: np.ndarray,
    *,
    dt: float,
    t_budget: float,
    stag_tol: float = 1e-10,
    check_every: int = 50,
    tail_steps: int = 20,
) -> tuple[np.ndarray, np.ndarray, EquilibriumResult]:
    """Locate the closed-loop equilibrium by budgeted simulation.

    Runs from the origin and stops when the state movement over
    ``check_every`` steps falls below ``stag_tol`` (normalized by dt and the
    interval, i.e. a bound on the mean drift speed), then averages the last
    ``tail_steps`` states. Residuals report the stationary-equation defect
    and the regulation error at the averaged point. A run that exhausts the
    budget without stagnating returns ``converged=False``; per the local
    theory this can simply mean (d, y_ref) are too large for the basin.
    """
    _require_feasible(fmap)
    y_ref = np.atleast_1d(np.asarray(y_ref, dtype=float))
    scenario = Scenario(y_ref=y_ref, T=t_budget, dt=dt, d=d)
    w0, z0, d_vec, y_ref = _prep_scenario(plant, scenario)
    space_h, space_z = plant.space_H, plant.space_Z

    n = max(int(round(t_budget / dt)), 1)
    tail_w = []
    tail_z = []
    w, z = w0.copy(), z0.copy()
    w_mark, z_mark = w.copy(), z.copy()
    converged = False
    k_done = n
    for k in range(n):
        ev = StateEvaluation(fmap, w)
        u = ev.dM_adjoint_B(z - ev.M())
        y = plant.C(w)
        forcing = plant.B(u) if d_vec is None else plant.B(u) + d_vec
        w = plant.solver.solve_step(dt, w - dt * plant.F(w) + dt * forcing)
        z = z + dt * (y - y_ref)
        tail_w.append(w)
        tail_z.append(z)
        if len(tail_w) > tail_steps:
            tail_w.pop(0)
            tail_z.pop(0)
        if (k + 1) % check_every == 0:
            speed = (
                space_h.norm(w - w_mark) + space_z.norm(z - z_mark)
            ) / (check_every * dt)
            if speed <= stag_tol:
                converged = True
                k_done = k + 1
                break
            w_mark, z_mark = w.copy(), z.copy()
            if not np.isfinite(space_h.norm(w)):
                break

    w_star = np.mean(tail_w, axis=0)
    z_star = np.mean(tail_z, axis=0)
    ev = StateEvaluation(fmap, w_star)
    u_star = ev.dM_adjoint_B(z_star - ev.M())
    drift = -(plant.A(w_star) + plant.F(w_star)) + plant.B(u_star)
    if d_vec is not None:
        drift = drift + d_vec
    res = EquilibriumResult(
        converged=converged,
        t_reached=k_done * dt,
        drift_residual=space_h.norm(drift),
        output_residual=space_z.norm(plant.C(w_star) - y_ref),
        iterations=k_done,
    )
    return w_star, z_star, res


def convergence_report(
    result: RunResult,
    fmap: ForwardingMap,
    w_star: np.ndarray,
    z_star: np.ndarray,
    window: float,
    jump_tol: float = 0.0,
) -> RegulationReport:
    """Convergence metrics of a run against a known equilibrium.

    averaged_output_error is the root mean square of ||C w - y_ref||_Z over
    the trailing ``window`` time units. fitted_rate is the negative slope of
    the least-squares line through log ||[w - w*, eta - eta*]||_rho on the
    mid-decay band (deviation between 10% and 0.1% of its initial value);
    None when the deviation never enters the band.
    """
    plant = fmap.plant
    space_h, space_z = plant.space_H, plant.space_Z
    y_ref = result.scenario.y_ref
    dt = result.scenario.dt
    rho = fmap.rho

    errs_sq = np.array(
        [space_z.inner(y - y_ref, y - y_ref) for y in result.y]
    )
    n_win = max(int(round(window / dt)), 1)
    tail = errs_sq[-(n_win + 1):]
    if len(tail) > 1:
        duration = (len(tail) - 1) * dt
        averaged = float(np.sqrt(np.trapezoid(tail, dx=dt) / duration))
    else:
        averaged = float(np.sqrt(tail[-1]))
    final_err = float(np.sqrt(errs_sq[-1]))

    eta_star = z_star - StateEvaluation(fmap, w_star).M()
    dev = np.empty(len(result))
    for k in range(len(result)):
        dw = result.w[k] - w_star
        deta = (result.z[k] - result.m[k]) - eta_star
        dev[k] = np.sqrt(
            space_h.inner(dw, dw) + rho * space_z.inner(deta, deta)
        )

    fitted = None
    d0 = dev[0]
    if d0 > 0:
        band = (dev <= 0.1 * d0) & (dev >= 1e-3 * d0)
        if band.sum() >= 5:
            t_band = result.times[band]
            log_dev = np.log(dev[band])
            slope = np.polyfit(t_band, log_dev, 1)[0]
            fitted = float(-slope)

    jumps = np.diff(result.v)
    max_jump = float(jumps.max()) if jumps.size else 0.0
    return RegulationReport(
        w_star=w_star,
        z_star=z_star,
        final_output_error=final_err,
        averaged_output_error=averaged,
        fitted_rate=fitted,
        lyapunov_monotone=bool(max_jump <= jump_tol),
        max_lyapunov_jump=max_jump,
    )
