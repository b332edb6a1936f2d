"""Forwarding map, its differential and adjoint, and the controller gains.

For the semilinear plant dw/dt + A w + F(w) = B u the forwarding map has the
quadrature form

    M(w) = -C A^{-1} (w - Q(w)),      Q(w) = integral_0^inf F(T_t w) dt,

where T_t is the uncontrolled flow. Its differential replaces Q by the
quadrature of dF(T_t w) v(t) with v the tangent flow of the direction, and
the adjoint of the differential is the exact discrete adjoint of those
quadrature steps, so duality holds to roundoff.

The integral converges because the flow contracts at rate alpha and F is
Lipschitz with F(0) = 0; the neglected tail beyond a horizon tau is below
lip_F * e^{-alpha tau} * ||w|| * ||CA^{-1}|| / alpha, which fixes the
per-evaluation horizon.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .evolution import Plant, apply_nonlinear_A
from .spaces import LinMap, weighted_singular_values

__all__ = [
    "ForwardingMap",
    "StateEvaluation",
    "CoercivityReport",
    "build_forwarding",
    "linear_forwarding",
    "eval_M",
    "eval_dM",
    "eval_dM_adjoint",
    "eval_dM_adjoint_B",
    "assemble_feedback_matrix",
    "coercivity_lambda",
    "gains",
    "uniform_coercivity_check",
    "functional_equation_residual",
]

# rank cutoff: sigma_min / sigma_max below this means the range condition fails
_RANK_EPS = 1e-8


def linear_forwarding(plant: Plant) -> LinMap:
    """The linear part -C A^{-1} as a dense map H -> Z.

    Assembled with dim(Z) transposed solves: C A^{-1} = (A^{-T} C^T)^T.
    """
    c_mat = plant.C.as_matrix()
    x = plant.solver.solve_a(c_mat.T, transpose=True)
    return LinMap(plant.space_H, plant.space_Z, matrix=-x.T, label="M_lin")


class ForwardingMap:
    """Forwarding construction for one plant: map, differential, gains.

    Not meant to be instantiated directly; use :func:`build_forwarding`.
    Immutable after construction; evaluations are pure and may run
    concurrently.

    Attributes
    ----------
    m_lin : LinMap
        The linear part -C A^{-1}.
    tau_max : float
        Ceiling on the per-evaluation quadrature horizon.
    dt_quad, tail_tol : float
        Quadrature step and accepted tail bound for the truncated integral.
    tau_extra : float
        Extra horizon added past the tail-bound value (refinement ladders).
    lam, lam_tilde, rho, kappa : float or None
        Coercivity constant, lam/3, Lyapunov weight and certified decay rate;
        None when the plant is infeasible (lam = 0) or has no alpha.
    """

    def __init__(
        self,
        plant: Plant,
        dt_quad: float,
        tail_tol: float,
        tau_max: float,
        tau_extra: float = 0.0,
    ):
        self.plant = plant
        self.dt_quad = float(dt_quad)
        self.tail_tol = float(tail_tol)
        self.tau_max = float(tau_max)
        self.tau_extra = float(tau_extra)

        self.m_lin = linear_forwarding(plant)
        self.ca_inv_norm = float(weighted_singular_values(self.m_lin)[0])
        # Gram-multiplied pieces reused by every adjoint evaluation:
        # psi_tilde = G_H M_lin* zeta = M_lin^T G_Z zeta
        self._mlin_t_gz = np.ascontiguousarray(
            self.m_lin.as_matrix().T @ plant.space_Z.gram
        )
        self._b_mat = plant.B.as_matrix()

        svals_b = weighted_singular_values(plant.B)
        self.b_norm = float(svals_b[0]) if svals_b.size else 0.0

        k0 = assemble_feedback_matrix(self, np.zeros(plant.dim))
        svals = weighted_singular_values(
            LinMap(plant.space_Z, plant.space_U, matrix=k0)
        )
        smax = float(svals[0]) if svals.size else 0.0
        smin = float(svals[-1]) if svals.size else 0.0
        self.lam = smin**2
        self.range_ok = smax > 0.0 and (smin / smax) > _RANK_EPS

        # stiffness of the explicit integrator update: spectral radius of the
        # eta-block M B K; the z-step is only stable for dt well below
        # 2 / loop_gain, so simulation drivers clamp their dt with this
        eta_block = self.m_lin.as_matrix() @ self._b_mat @ k0
        eigs = np.linalg.eigvals(eta_block) if eta_block.size else np.zeros(0)
        self.loop_gain = float(np.max(np.abs(eigs))) if eigs.size else 0.0

        alpha = plant.alpha_cert
        self.feasible = bool(self.range_ok and alpha is not None and alpha > 0)
        if self.feasible:
            self.lam_tilde = self.lam / 3.0
            self.rho = self.b_norm**2 * max(1.0, 2.0 / alpha)
            self.kappa = min(alpha / 4.0, self.lam_tilde / 4.0)
        else:
            self.lam_tilde = self.lam / 3.0
            self.rho = None
            self.kappa = None

    @property
    def dim_Z(self) -> int:
        return self.plant.space_Z.dim

    def horizon(self, w_norm: float) -> float:
        """Quadrature horizon for a state of the given H-norm.

        Set so the neglected tail lip_F * e^{-alpha tau} ||w|| ||CA^{-1}|| / alpha
        is below tail_tol, never below 5/alpha, plus tau_extra, clamped to
        tau_max.
        """
        plant = self.plant
        alpha = plant.alpha_cert
        if alpha is None or alpha <= 0:
            warnings.warn(
                "no contraction certificate: quadrature tail bound unverifiable, "
                "using the tau_max ceiling",
                stacklevel=2,
            )
            return self.tau_max
        ratio = plant.lip_F * w_norm * self.ca_inv_norm / (alpha * self.tail_tol)
        tau = 5.0 / alpha
        if ratio > 1.0:
            tau = max(math.log(ratio) / alpha, tau)
        return min(tau + self.tau_extra, self.tau_max)

    def __repr__(self) -> str:
        return (
            f"ForwardingMap(plant={self.plant.name!r}, dt_quad={self.dt_quad}, "
            f"lam={self.lam:.4g}, feasible={self.feasible})"
        )


def build_forwarding(
    plant: Plant,
    dt_quad: float,
    tail_tol: float = 1e-6,
    tau_max: Optional[float] = None,
    tau_extra: float = 0.0,
) -> ForwardingMap:
    """Construct the forwarding map and gains for a plant.

    ``tau_max`` defaults to 40/alpha when the plant has a contraction
    certificate; plants without one must pass it explicitly (the horizon
    then always sits at the ceiling).
    """
    if dt_quad <= 0:
        raise ValueError("dt_quad must be positive")
    if tau_max is None:
        if plant.alpha_cert is None or plant.alpha_cert <= 0:
            raise ValueError(
                "tau_max must be given for plants without a contraction certificate"
            )
        tau_max = 40.0 / plant.alpha_cert
    return ForwardingMap(plant, dt_quad, tail_tol, tau_max, tau_extra)


class StateEvaluation:
    """All forwarding evaluations at one state, sharing one base trajectory.

    The base flow T_t w is integrated once on the quadrature grid; M, dM in
    any direction, and the adjoint actions all reuse it. Closed-loop stepping
    builds one of these per state and calls M and the adjoint from it.
    """

    def __init__(self, fmap: ForwardingMap, w: np.ndarray):
        self.fmap = fmap
        self.plant = fmap.plant
        self.w = np.asarray(w, dtype=float)
        plant = self.plant
        w_norm = plant.space_H.norm(self.w)
        if plant.lip_F == 0.0 or w_norm == 0.0:
            # linear path: Q and its derivative quadrature vanish identically
            self.nq = 0
            self.tau = 0.0
            self.base_states = None
            self.q = np.zeros(plant.dim)
            return
        self.tau = fmap.horizon(w_norm)
        self.nq = max(int(math.ceil(self.tau / fmap.dt_quad)), 1)
        dtq = fmap.dt_quad
        p_dense, pt_dense = plant.solver.dense_step_inverse(dtq)
        self._p_dense = p_dense
        self._pt_dense = pt_dense
        n = self.nq
        states = np.empty((n + 1, plant.dim))
        states[0] = self.w
        q = np.zeros(plant.dim)
        cur = self.w
        # trapezoid accumulation of Q = int F(T_t w) dt along the base flow
        for k in range(n):
            g = plant.F(cur)
            q += (0.5 * dtq if k == 0 else dtq) * g
            cur = p_dense @ (cur - dtq * g)
            states[k + 1] = cur
        q += 0.5 * dtq * plant.F(cur)
        self.base_states = states
        self.q = q

    # -- primal evaluations -------------------------------------------------

    def M(self) -> np.ndarray:
        return self.fmap.m_lin(self.w - self.q)

    def dM(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if self.nq == 0:
            return self.fmap.m_lin(h)
        plant = self.plant
        dtq = self.fmap.dt_quad
        qp = np.zeros(plant.dim)
        v = h
        for k in range(self.nq):
            g = plant.dF(self.base_states[k])(v)
            qp += (0.5 * dtq if k == 0 else dtq) * g
            v = self._p_dense @ (v - dtq * g)
        qp += 0.5 * dtq * plant.dF(self.base_states[self.nq])(v)
        return self.fmap.m_lin(h - qp)

    # -- adjoint evaluations ------------------------------------------------

    def _adjoint_gram_coords(self, zeta: np.ndarray) -> np.ndarray:
        """G_H-multiplied dM(w)* zeta, i.e. G_H (psi - r).

        Reverse sweep of the exact transposes of the discrete tangent steps
        with trapezoid weights folded in; runs entirely in Gram-multiplied
        coordinates so the loop contains no Gram solves.
        """
        psi_t = self.fmap._mlin_t_gz @ np.asarray(zeta, dtype=float)
        if self.nq == 0:
            return psi_t
        plant = self.plant
        dtq = self.fmap.dt_quad
        r_t = np.zeros(plant.dim)
        for k in range(self.nq, -1, -1):
            ck = 0.5 * dtq if (k == 0 or k == self.nq) else dtq
            if k == self.nq:
                y = np.zeros(plant.dim)
            else:
                y = self._pt_dense @ r_t
            jac = plant.dF(self.base_states[k])
            r_t = y + jac.rmatvec(ck * psi_t - dtq * y)
        return psi_t - r_t

    def dM_adjoint(self, zeta: np.ndarray) -> np.ndarray:
        return self.plant.space_H.solve_gram(self._adjoint_gram_coords(zeta))

    def dM_adjoint_B(self, zeta: np.ndarray) -> np.ndarray:
        """B* dM(w)* zeta, the feedback direction for integrator error zeta."""
        gh = self._adjoint_gram_coords(zeta)
        return self.plant.space_U.solve_gram(self.fmap._b_mat.T @ gh)


def eval_M(fmap: ForwardingMap, w: np.ndarray) -> np.ndarray:
    """Forwarding map M(w) = -CA^{-1}(w - Q(w))."""
    return StateEvaluation(fmap, w).M()


def eval_dM(fmap: ForwardingMap, w: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Differential dM(w) h along the base flow at w."""
    return StateEvaluation(fmap, w).dM(h)


def eval_dM_adjoint(fmap: ForwardingMap, w: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """Adjoint dM(w)* zeta in H (exact discrete adjoint of eval_dM)."""
    return StateEvaluation(fmap, w).dM_adjoint(zeta)


def eval_dM_adjoint_B(
    fmap: ForwardingMap, w: np.ndarray, zeta: np.ndarray
) -> np.ndarray:
    """Feedback direction B* dM(w)* zeta in U."""
    return StateEvaluation(fmap, w).dM_adjoint_B(zeta)


def assemble_feedback_matrix(fmap: ForwardingMap, w: np.ndarray) -> np.ndarray:
    """Dense (dim_U, dim_Z) matrix of z -> B* dM(w)* z, assembled columnwise.

    One shared base trajectory, one adjoint sweep per Z basis vector; the
    example plants keep dim_Z small, so this stays cheap. Used for the
    coercivity constant and its uniform sampled check.
    """
    ev = StateEvaluation(fmap, w)
    dim_z = fmap.dim_Z
    if dim_z > 32:
        warnings.warn(
            f"columnwise feedback assembly over dim_Z = {dim_z} basis sweeps",
            stacklevel=2,
        )
    cols = [ev.dM_adjoint_B(e) for e in np.eye(dim_z)]
    return np.column_stack(cols)


def coercivity_lambda(fmap: ForwardingMap) -> float:
    """lambda = sigma_min(z -> B* dM(0)* z)^2; zero signals infeasibility."""
    return fmap.lam


def gains(fmap: ForwardingMap) -> tuple[float, float]:
    """(rho, kappa) from the computed lambda, alpha and ||B||.

    rho = ||B||^2 max{1, 2/alpha}, kappa = min{alpha/4, lam/12}. Raises when
    the range condition fails (lambda = 0) or alpha is missing.
    """
    if not fmap.range_ok:
        raise ValueError(
            "range condition fails (lambda = 0 within rank tolerance): "
            "regulation infeasible"
        )
    if fmap.plant.alpha_cert is None or fmap.plant.alpha_cert <= 0:
        raise ValueError("gains need a positive contraction certificate alpha")
    return fmap.rho, fmap.kappa


@dataclass
class CoercivityReport:
    """Sampled lower bound on the feedback coercivity over a state ball."""

    min_sigma_sq: float
    lam_global: float
    passed: bool
    n_samples: int
    radius: float

    def __bool__(self) -> bool:
        return self.passed


def uniform_coercivity_check(
    fmap: ForwardingMap,
    n_samples: int,
    radius: float,
    seed: int = 0,
    lam_global: Optional[float] = None,
) -> CoercivityReport:
    """Min over sampled states of sigma_min(z -> B* dM(w)* z)^2.

    Passes iff the achieved minimum is at least ``lam_global`` (defaults to
    lam/3, the local coercivity level the gain formulas rely on). The report
    carries the achieved minimum either way.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if lam_global is None:
        lam_global = fmap.lam_tilde
    rng = np.random.default_rng(seed)
    space = fmap.plant.space_H
    worst = np.inf
    for _ in range(n_samples):
        w = space.sample_ball(rng, radius) if radius > 0 else np.zeros(space.dim)
        k_mat = assemble_feedback_matrix(fmap, w)
        svals = weighted_singular_values(
            LinMap(fmap.plant.space_Z, fmap.plant.space_U, matrix=k_mat)
        )
        smin = float(svals[-1]) if svals.size else 0.0
        worst = min(worst, smin**2)
    return CoercivityReport(
        min_sigma_sq=float(worst),
        lam_global=float(lam_global),
        passed=bool(worst >= lam_global > 0),
        n_samples=n_samples,
        radius=radius,
    )


def functional_equation_residual(fmap: ForwardingMap, w: np.ndarray) -> float:
    """Normalized residual of dM(w) applied to the full drift plus C w.

    The exact forwarding map satisfies dM(w)(A w + F(w)) + C w = 0; the
    quadrature evaluation leaves a residual that shrinks as dt_quad and the
    horizon are refined. Normalization: ||C w||_Z + ||A w + F(w)||_H + floor.
    """
    w = np.asarray(w, dtype=float)
    plant = fmap.plant
    drift = apply_nonlinear_A(plant, w)
    num = plant.space_Z.norm(eval_dM(fmap, w, drift) + plant.C(w))
    den = plant.space_Z.norm(plant.C(w)) + plant.space_H.norm(drift) + 1e-14
    return float(num / den)
