"""Phase-field subproblem: Ambrosio-Tortorelli residual with penalty.

For fixed displacement u, previous timestep field phi_old, and previous
staggered iterate phi_prev, the residual against a test function psi is

    (1-kappa)(phi sigma(u):eps(u), psi) - Gc (1/xi (1-phi), psi)
    + Gc (xi grad phi, grad psi)
    + (eta (omega + gamma (phi - phi_old)), psi)
    + L_phi (phi - phi_prev, psi)

where eta is the nodewise 0/1 indicator of omega + gamma (phi - phi_old)
> 0, so that eta (omega + gamma (phi - phi_old)) is the nodewise
positive part [omega + gamma (phi - phi_old)]+.  The positive part is
taken at the nodes and then interpolated to quadrature points; taking
it after interpolation would leak negative multiplier expressions from
inactive nodes into the force integrals of neighboring active cells and
destroy the complementarity of the converged state.  The subproblem is
solved with a semi-smooth Newton iteration: eta is recomputed at each
iterate and frozen inside the Jacobian, whose penalty block is the
exact residual derivative (column-scaled by the nodal eta; it is
nonsymmetric only across cells straddling the active-set boundary).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import constitutive as cst
from .constitutive import MaterialParams
from .fem import FeSpace, SparseSystem, solve_linear, solve_reusing_factor
from .mechanics import MechanicsConfig, NonConvergence, _stress_at

__all__ = [
    "PhaseFieldConfig",
    "PenaltyState",
    "driving_energy",
    "pf_residual",
    "pf_jacobian",
    "solve_phasefield",
    "update_multiplier",
]


@dataclass
class PhaseFieldConfig:
    """Solver knobs for the phase-field subproblem."""
    l_phi: float = 1e-6
    newton_tol: float = 1e-8   # eps_b on |dphi|
    max_newton: int = 50
    ls_backtracks: int = 8

    def __post_init__(self):
        if self.newton_tol <= 0 or self.l_phi < 0:
            raise ValueError("newton_tol must be positive and l_phi nonnegative")


@dataclass
class PenaltyState:
    """Augmented-Lagrangian multiplier field and penalty coefficient."""
    omega: np.ndarray      # nodal multiplier, >= 0
    gamma: float

    @classmethod
    def zeros(cls, space: FeSpace, gamma: float) -> "PenaltyState":
        return cls(omega=np.zeros(space.ndof), gamma=gamma)


def driving_energy(vspace: FeSpace, u: np.ndarray, mech_cfg: MechanicsConfig,
                   m: MaterialParams, nq1d: int = 2) -> np.ndarray:
    """sigma(u):eps(u) at quadrature points, with sigma per the mechanics model."""
    qd = vspace.quad_data(nq1d)
    eps = vspace.eval_sym_grad(u, qd)
    sig = _stress_at(eps, mech_cfg, m)
    return cst.ddot(sig, eps)


def _eta_nodal(space: FeSpace, phi: np.ndarray, phi_old: np.ndarray,
               pen: PenaltyState) -> np.ndarray:
    """Nodewise 0/1 indicator of an active penalty."""
    return (pen.omega + pen.gamma * (phi - phi_old) > 0.0).astype(float)


def pf_residual(space: FeSpace, phi: np.ndarray, u_frozen_or_driving,
                phi_prev_step: np.ndarray, phi_prev_iter: np.ndarray,
                pen: PenaltyState, cfg: PhaseFieldConfig, m: MaterialParams,
                mech_cfg: Optional[MechanicsConfig] = None,
                vspace: Optional[FeSpace] = None,
                l_phi: Optional[float] = None) -> np.ndarray:
    """Weak phase-field residual against the (constrained) test space.

    The driving field sigma(u):eps(u) may be passed precomputed as a
    (ncell, nq) array, or as the displacement vector together with
    `mech_cfg` and `vspace`.
    """
    lphi = cfg.l_phi if l_phi is None else l_phi
    qd = space.quad_data(2)
    if isinstance(u_frozen_or_driving, np.ndarray) and u_frozen_or_driving.ndim == 2:
        drive = u_frozen_or_driving
    else:
        if mech_cfg is None or vspace is None:
            raise ValueError("pass mech_cfg and vspace to evaluate the driving term")
        drive = driving_energy(vspace, u_frozen_or_driving, mech_cfg, m)
    blocks = space.blocks(2)
    phiq = space.eval_values(phi, qd)
    gphi = space.eval_grads(phi, qd)
    # nodewise positive part, then interpolation
    pen_nodal = np.maximum(0.0, pen.omega + pen.gamma * (phi - phi_prev_step))
    penq = space.eval_values(pen_nodal, qd)
    dphiq = space.eval_values(phi - phi_prev_iter, qd)

    coef = ((1.0 - m.kappa) * drive * phiq
            - m.gc / m.xi * (1.0 - phiq)
            + penq
            + lphi * dphiq)
    gkey = ("gradw", 2)
    if gkey not in space._quad_cache:
        space._quad_cache[gkey] = qd.grad * qd.jxw[:, :, None, None]
    r = np.einsum("cq,cqa->ca", coef, blocks["nw"])
    r += m.gc * m.xi * np.einsum("cqd,cqad->ca", gphi, space._quad_cache[gkey])
    return space.vector_from_cell_blocks(r)


def pf_jacobian(space: FeSpace, phi: np.ndarray, u_frozen_or_driving,
                pen: PenaltyState, cfg: PhaseFieldConfig, m: MaterialParams,
                mech_cfg: Optional[MechanicsConfig] = None,
                vspace: Optional[FeSpace] = None,
                phi_prev_step: Optional[np.ndarray] = None,
                l_phi: Optional[float] = None,
                eta: Optional[np.ndarray] = None) -> SparseSystem:
    """Jacobian of the phase-field residual with eta frozen (semi-smooth Newton).

    Positive definite whenever the driving field is nonnegative; the
    penalty block is symmetric except across cells whose nodes straddle
    the active-set boundary, where the exact derivative of the nodal
    positive part is column-scaled by eta.
    """
    lphi = cfg.l_phi if l_phi is None else l_phi
    qd = space.quad_data(2)
    if isinstance(u_frozen_or_driving, np.ndarray) and u_frozen_or_driving.ndim == 2:
        drive = u_frozen_or_driving
    else:
        if mech_cfg is None or vspace is None:
            raise ValueError("pass mech_cfg and vspace to evaluate the driving term")
        drive = driving_energy(vspace, u_frozen_or_driving, mech_cfg, m)
    if eta is None:
        if phi_prev_step is None:
            raise ValueError("need phi_prev_step (or eta) to evaluate the switch")
        eta = _eta_nodal(space, phi, phi_prev_step, pen)
    mcoef = (1.0 - m.kappa) * drive + m.gc / m.xi + lphi
    eta_cell = eta[space.mesh.cells]
    blocks = space.blocks(2)
    skey = ("stiff_sum", 2)
    if skey not in space._quad_cache:
        space._quad_cache[skey] = blocks["stiff"].sum(axis=1)
    K = np.einsum("cq,cqab->cab", mcoef, blocks["mass"])
    K += m.gc * m.xi * space._quad_cache[skey]
    # exact derivative of the interpolated nodal positive part:
    # d/dphi_b [omega_b + gamma (phi_b - phi_old_b)]+ = gamma eta_b
    K += pen.gamma * np.einsum("cqab,cb->cab", blocks["mass"], eta_cell)
    A = space.matrix_from_cell_blocks(K)
    return SparseSystem(matrix=A, rhs=np.zeros(space.ndof))


def solve_phasefield(space: FeSpace, phi_init: np.ndarray, driving: np.ndarray,
                     phi_prev_step: np.ndarray, phi_prev_iter: np.ndarray,
                     pen: PenaltyState, cfg: PhaseFieldConfig,
                     m: MaterialParams, log=None, solver_cache=None):
    """Semi-smooth Newton for the phase-field subproblem.

    Returns (phi, newton_iterations).  The iteration starts from
    phi_init (normally the previous staggered iterate).
    """
    phi = space.distribute(phi_init.copy())
    r = pf_residual(space, phi, driving, phi_prev_step, phi_prev_iter, pen, cfg, m)
    rnorm0 = max(np.linalg.norm(r), 1e-300)
    iters = 0
    for b in range(1, cfg.max_newton + 1):
        rnorm = np.linalg.norm(r)
        if rnorm <= 1e-13 * rnorm0:
            break
        eta = _eta_nodal(space, phi, phi_prev_step, pen)
        system = pf_jacobian(space, phi, driving, pen, cfg, m, eta=eta)
        system.rhs = -space.constrain_residual(r)
        if solver_cache is None:
            dphi = space.distribute(solve_linear(system))
        else:
            dphi = space.distribute(
                solve_reusing_factor(system.matrix, system.rhs, solver_cache))
        # Full steps by default: the subproblem is linear for a fixed
        # switch state, and a norm-decrease line search would stall at the
        # switching surfaces of the penalty indicator.  Backtrack only on
        # non-finite trial residuals.
        omega = 1.0
        for _ in range(cfg.ls_backtracks + 1):
            r_try = pf_residual(space, phi + omega * dphi, driving,
                                phi_prev_step, phi_prev_iter, pen, cfg, m)
            if np.all(np.isfinite(r_try)):
                r = r_try
                break
            omega *= 0.5
        else:
            raise NonConvergence("phase-field step produced non-finite residuals")
        phi = phi + omega * dphi
        iters = b
        inc = float(np.linalg.norm(omega * dphi))
        if log is not None:
            log(b, float(np.linalg.norm(r)), inc)
        if np.linalg.norm(dphi) <= cfg.newton_tol:
            return phi, iters
    rnorm = np.linalg.norm(r)
    if rnorm <= 1e-13 * rnorm0 or rnorm == 0.0:
        return phi, iters
    raise NonConvergence(
        f"phase-field Newton did not converge in {cfg.max_newton} iterations")


def update_multiplier(pen: PenaltyState, phi: np.ndarray,
                      phi_prev_step: np.ndarray) -> PenaltyState:
    """Positive-part multiplier update omega <- [omega + gamma (phi - phi_old)]+."""
    omega = np.maximum(0.0, pen.omega + pen.gamma * (phi - phi_prev_step))
    return PenaltyState(omega=omega, gamma=pen.gamma)
