"""Displacement subproblem: degradation-weighted elasticity with L-scheme term.

Solves, for fixed phase field phi and previous staggered iterate u_prev,

    (g(phi) sigma(u), eps(w)) + L_u (u - u_prev, w) = (f, w)

for all test functions w, with sigma either linear (LEFM) or the
strain-limiting law (NLSL).  Newton's method with a backtracking line
search is used; trial states violating the strain-limiting ellipticity
bound are rejected during the search.  If Newton cannot converge from
the available starting points, the Dirichlet load (and body force) is
ramped up in adaptive continuation stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import constitutive as cst
from .constitutive import LimitExceeded, MaterialParams
from .fem import (AssemblyError, FeSpace, SparseSystem, apply_dirichlet,
                  solve_linear, solve_reusing_factor)

__all__ = [
    "MechanicsConfig",
    "DirichletBC",
    "NonConvergence",
    "mech_residual",
    "mech_jacobian",
    "solve_mechanics",
    "max_limit_monitor",
]


@dataclass
class MechanicsConfig:
    """Solver knobs for the displacement subproblem.

    model             : "LEFM" (linear) or "NLSL" (strain-limiting)
    l_u               : L-scheme stabilization coefficient
    newton_tol        : increment tolerance eps_a on |du|
    max_newton        : Newton iteration cap
    ls_backtracks     : max step halvings in the line search
    warm_start_linear : use the linear solve as initial guess (NLSL)
    """

    model: str = "LEFM"
    l_u: float = 1e-6
    newton_tol: float = 1e-8
    max_newton: int = 50
    ls_backtracks: int = 40
    warm_start_linear: bool = True
    # starting states above this beta*|E^(1/2)[eps]| are considered unsafe
    admissible_start: float = 0.9

    def __post_init__(self):
        if self.model not in ("LEFM", "NLSL"):
            raise ValueError(f"unknown mechanics model {self.model!r}")
        if self.newton_tol <= 0 or self.l_u < 0:
            raise ValueError("newton_tol must be positive and l_u nonnegative")


@dataclass
class DirichletBC:
    """Prescribed displacement DOFs and values."""
    dofs: np.ndarray
    values: np.ndarray

    def scaled(self, factor: float) -> "DirichletBC":
        return DirichletBC(self.dofs, factor * self.values)


class NonConvergence(RuntimeError):
    """Newton failed; carries the iterate residual/increment history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


# ----------------------------------------------------------------------
# kernels
# ----------------------------------------------------------------------

_DUP = np.array([1.0, 1.0, 2.0])


def _hooke_matrix(m: MaterialParams) -> np.ndarray:
    """3x3 action of the elasticity tensor on (xx, yy, xy) components."""
    return np.array([
        [2 * m.mu + m.lam, m.lam, 0.0],
        [m.lam, 2 * m.mu + m.lam, 0.0],
        [0.0, 0.0, 2 * m.mu],
    ])


def _tangent_matrices(eps: np.ndarray, m: MaterialParams) -> np.ndarray:
    """Per-point 3x3 tangent of the strain-limiting stress (raises LimitExceeded)."""
    Emat = _hooke_matrix(m)
    if m.beta == 0.0:
        return np.broadcast_to(Emat, eps.shape[:-1] + (3, 3)).copy()
    s = cst.half_norm_strain(eps, m)
    arg = (m.beta * s) ** m.alpha
    if np.any(arg >= 1.0 - cst.ELLIPTICITY_GUARD):
        raise LimitExceeded(float(np.max(m.beta * s)))
    D = (1.0 - arg) ** (1.0 / m.alpha)
    M = Emat[None, None] / D[..., None, None]
    Ee = cst.hooke_stress(eps, m)
    ssafe = np.where(s > cst.SMALL_NORM, s, 1.0)
    coef = np.where(
        s > cst.SMALL_NORM,
        m.beta ** m.alpha * ssafe ** (m.alpha - 2.0) / (1.0 - arg) ** (1.0 + 1.0 / m.alpha),
        0.0,
    )
    # rank-one update: coef * E[eps] (x) (E[eps] with xy doubled)
    g = Ee * _DUP
    M = M + coef[..., None, None] * Ee[..., :, None] * g[..., None, :]
    return M


def _stress_at(eps: np.ndarray, cfg: MechanicsConfig, m: MaterialParams) -> np.ndarray:
    if cfg.model == "NLSL":
        return cst.stress_sl(eps, m)
    return cst.hooke_stress(eps, m)


def mech_residual(space: FeSpace, u: np.ndarray, phi: np.ndarray,
                  u_prev_iter: np.ndarray, cfg: MechanicsConfig,
                  m: MaterialParams, body_force=None,
                  dirichlet_dofs: Optional[np.ndarray] = None,
                  l_u: Optional[float] = None) -> np.ndarray:
    """Weak residual of the mechanics subproblem against the test space.

    Hanging constraints are folded in; rows of Dirichlet-constrained test
    functions are zeroed when `dirichlet_dofs` is given.  Raises
    LimitExceeded if the NLSL law is evaluated outside its domain.
    """
    lu = cfg.l_u if l_u is None else l_u
    qd = space.quad_data(2)
    blocks = space.blocks(2)
    B = blocks["bmat"]
    nw = blocks["nw"]
    gq = cst.degradation(space.eval_scalar_values(phi, qd), m.kappa)
    eps_all = space.eval_sym_grad(u, qd)
    sig_all = _stress_at(eps_all, cfg, m)
    w = gq * qd.jxw
    r = np.einsum("cqs,s,cqks,cq->ck", sig_all, _DUP, B, w)
    if lu != 0.0:
        du_all = space.eval_values(u - u_prev_iter, qd)
        r[:, 0::2] += lu * np.einsum("cq,cqa->ca", du_all[..., 0], nw)
        r[:, 1::2] += lu * np.einsum("cq,cqa->ca", du_all[..., 1], nw)
    if body_force is not None:
        f_all = np.asarray(body_force(qd.xq[..., 0], qd.xq[..., 1]), dtype=float)
        if f_all.shape != qd.xq.shape:
            f_all = np.moveaxis(f_all, 0, -1)
        r[:, 0::2] -= np.einsum("cq,cqa->ca", f_all[..., 0], nw)
        r[:, 1::2] -= np.einsum("cq,cqa->ca", f_all[..., 1], nw)
    if not np.isfinite(r).all():
        bad = int(np.nonzero(~np.isfinite(r).all(axis=1))[0][0])
        raise AssemblyError(f"non-finite mechanics residual on cell {bad}")
    r = space.vector_from_cell_blocks(r)
    if dirichlet_dofs is not None:
        r[dirichlet_dofs] = 0.0
    return r


def mech_jacobian_blocks(space: FeSpace, u: np.ndarray, phi: np.ndarray,
                         cfg: MechanicsConfig, m: MaterialParams,
                         l_u: Optional[float] = None) -> np.ndarray:
    """Per-cell Jacobian blocks (ncell, 8, 8) before scatter."""
    lu = cfg.l_u if l_u is None else l_u
    qd = space.quad_data(2)
    blocks = space.blocks(2)
    gq = cst.degradation(space.eval_scalar_values(phi, qd), m.kappa)
    if cfg.model == "NLSL" and m.beta != 0.0:
        # tangent = E/D + coef * (E eps) (x) (E eps): reuse the cached
        # elasticity blocks for the first part and assemble the second
        # as a symmetric rank-one update per quadrature point
        eps = space.eval_sym_grad(u, qd)
        s = cst.half_norm_strain(eps, m)
        arg = (m.beta * s) ** m.alpha
        if np.any(arg >= 1.0 - cst.ELLIPTICITY_GUARD):
            raise LimitExceeded(float(np.max(m.beta * s)))
        D = (1.0 - arg) ** (1.0 / m.alpha)
        Ee = cst.hooke_stress(eps, m)
        ssafe = np.where(s > cst.SMALL_NORM, s, 1.0)
        coef = np.where(
            s > cst.SMALL_NORM,
            m.beta ** m.alpha * ssafe ** (m.alpha - 2.0)
            / (1.0 - arg) ** (1.0 + 1.0 / m.alpha),
            0.0,
        )
        B = blocks["bmat"]
        ekey = ("elast", 2, m.lam, m.mu)
        if ekey not in space._quad_cache:
            DM = _DUP[:, None] * _hooke_matrix(m)
            space._quad_cache[ekey] = np.einsum("cqks,st,cqlt,cq->cqkl",
                                                B, DM, B, qd.jxw)
        K = np.einsum("cq,cqkl->ckl", gq / D, space._quad_cache[ekey])
        a = np.einsum("cqks,cqs->cqk", B, _DUP * Ee)
        K += np.einsum("cq,cqk,cql->ckl", coef * gq * qd.jxw, a, a)
    else:
        # per-point elasticity blocks are constant; only g(phi) varies
        ekey = ("elast", 2, m.lam, m.mu)
        if ekey not in space._quad_cache:
            B = blocks["bmat"]
            DM = _DUP[:, None] * _hooke_matrix(m)
            space._quad_cache[ekey] = np.einsum("cqks,st,cqlt,cq->cqkl",
                                                B, DM, B, qd.jxw)
        K = np.einsum("cq,cqkl->ckl", gq, space._quad_cache[ekey])
    if lu != 0.0:
        vkey = ("vmass_sum", 2)
        if vkey not in space._quad_cache:
            space._quad_cache[vkey] = blocks["vmass"].sum(axis=1)
        K = K + lu * space._quad_cache[vkey]
    if not np.isfinite(K).all():
        bad = int(np.nonzero(~np.isfinite(K.reshape(len(K), -1)).all(axis=1))[0][0])
        raise AssemblyError(f"non-finite mechanics Jacobian on cell {bad}")
    return K


def mech_jacobian(space: FeSpace, u: np.ndarray, phi: np.ndarray,
                  cfg: MechanicsConfig, m: MaterialParams,
                  l_u: Optional[float] = None) -> SparseSystem:
    """Jacobian of the mechanics residual (condensed, no Dirichlet rows yet)."""
    K = mech_jacobian_blocks(space, u, phi, cfg, m, l_u=l_u)
    A = space.matrix_from_cell_blocks(K)
    return SparseSystem(matrix=A, rhs=np.zeros(space.ndof))


def max_limit_monitor(space: FeSpace, u: np.ndarray, m: MaterialParams,
                      nq1d: int = 2) -> float:
    """max over quadrature points of beta * |E^(1/2)[eps(u)]| (0 when beta=0)."""
    if m.beta == 0.0:
        return 0.0
    qd = space.quad_data(nq1d)
    eps = space.eval_sym_grad(u, qd)
    return float(np.max(m.beta * cst.half_norm_strain(eps, m)))


# ----------------------------------------------------------------------
# Newton solver
# ----------------------------------------------------------------------

def _linear_solve(space, phi, bc, cfg, m, body_force, u_like, u_prev_iter, lu,
                  cache=None):
    """One linear (LEFM-tangent) solve with the given data, from state u_like."""
    lin_cfg = MechanicsConfig(model="LEFM", l_u=lu, newton_tol=cfg.newton_tol)
    u0 = u_like.copy()
    u0[bc.dofs] = bc.values
    u0 = space.distribute(u0)  # hanging slaves follow their (possibly lifted) masters
    sysJ = mech_jacobian(space, u0, phi, lin_cfg, m, l_u=lu)
    r = mech_residual(space, u0, phi, u_prev_iter, lin_cfg, m,
                      body_force=body_force)
    system = SparseSystem(matrix=sysJ.matrix, rhs=-r)
    system = apply_dirichlet(system, bc.dofs, np.zeros(len(bc.dofs)))
    if cache is None:
        du = solve_linear(system)
    else:
        du = solve_reusing_factor(system.matrix, system.rhs, cache)
    u = space.distribute(u0 + du)
    u[bc.dofs] = bc.values
    return u


def _newton(space, u0, phi, u_prev_iter, bc, cfg, m, body_force, log,
            cache=None):
    """Damped Newton iteration from an admissible start.  Returns (u, iters, hist)."""
    u = space.distribute(u0.copy())
    hist = []
    r = mech_residual(space, u, phi, u_prev_iter, cfg, m, body_force=body_force,
                      dirichlet_dofs=bc.dofs)
    rnorm0 = max(np.linalg.norm(r), 1e-300)
    iters = 0
    for a in range(1, cfg.max_newton + 1):
        rnorm = np.linalg.norm(r)
        if rnorm <= 1e-13 * rnorm0:
            break
        sysJ = mech_jacobian(space, u, phi, cfg, m)
        system = SparseSystem(matrix=sysJ.matrix, rhs=-space.constrain_residual(r))
        system = apply_dirichlet(system, bc.dofs, np.zeros(len(bc.dofs)))
        if cache is None:
            du = solve_linear(system)
        else:
            du = solve_reusing_factor(system.matrix, system.rhs, cache)
        du = space.distribute(du)
        omega = 1.0
        r_new = None
        accepted = False
        for _ in range(cfg.ls_backtracks + 1):
            try:
                r_try = mech_residual(space, u + omega * du, phi, u_prev_iter,
                                      cfg, m, body_force=body_force,
                                      dirichlet_dofs=bc.dofs)
            except LimitExceeded:
                omega *= 0.5
                continue
            if np.all(np.isfinite(r_try)) and np.linalg.norm(r_try) < rnorm:
                r_new, accepted = r_try, True
                break
            omega *= 0.5
        if not accepted:
            # accept the full step only if it is at least evaluable
            try:
                r_new = mech_residual(space, u + du, phi, u_prev_iter, cfg, m,
                                      body_force=body_force, dirichlet_dofs=bc.dofs)
                omega = 1.0
            except LimitExceeded as exc:
                raise NonConvergence(
                    f"mechanics line search failed at iteration {a}", hist) from exc
        u = u + omega * du
        r = r_new
        iters = a
        inc = float(np.linalg.norm(omega * du))
        hist.append((a, float(np.linalg.norm(r)), inc))
        if log is not None:
            log(a, float(np.linalg.norm(r)), inc)
        if np.linalg.norm(du) <= cfg.newton_tol:
            return u, iters, hist
    rnorm = np.linalg.norm(r)
    if rnorm <= 1e-13 * rnorm0 or rnorm == 0.0:
        return u, iters, hist
    if hist and hist[-1][2] <= cfg.newton_tol:
        return u, iters, hist
    raise NonConvergence(
        f"mechanics Newton did not converge in {cfg.max_newton} iterations "
        f"(|r|/|r0| = {rnorm / rnorm0:.3e})", hist)


def newton_sweep(space: FeSpace, u: np.ndarray, phi: np.ndarray,
                 u_prev_iter: np.ndarray, bc: DirichletBC,
                 cfg: MechanicsConfig, m: MaterialParams,
                 body_force=None, cache=None, pattern=None):
    """One damped Newton update of the mechanics iterate.

    Used by the staggered loop between its outer passes: the displacement
    is refined once per pass instead of being fully re-converged against
    every intermediate phase field, which leaves the coupled fixed point
    (and the staggered exit test) unchanged.  Returns (u_new, 1).
    Raises LimitExceeded if the input state itself is inadmissible.
    """
    u = u.copy()
    u[bc.dofs] = bc.values
    u = space.distribute(u)
    if cfg.model == "NLSL" and \
            max_limit_monitor(space, u, m) >= 1.0 - 1e-9:
        raise LimitExceeded(max_limit_monitor(space, u, m))
    r = mech_residual(space, u, phi, u_prev_iter, cfg, m,
                      body_force=body_force, dirichlet_dofs=bc.dofs)
    rnorm = np.linalg.norm(r)
    if pattern is not None:
        K = mech_jacobian_blocks(space, u, phi, cfg, m)
        A = pattern.assemble(K)
        rhs = -space.constrain_residual(r)
        rhs[bc.dofs] = 0.0
        if cache is None:
            du = solve_linear(SparseSystem(matrix=A, rhs=rhs))
        else:
            du = solve_reusing_factor(A, rhs, cache)
    else:
        sysJ = mech_jacobian(space, u, phi, cfg, m)
        system = SparseSystem(matrix=sysJ.matrix,
                              rhs=-space.constrain_residual(r))
        system = apply_dirichlet(system, bc.dofs, np.zeros(len(bc.dofs)))
        if cache is None:
            du = solve_linear(system)
        else:
            du = solve_reusing_factor(system.matrix, system.rhs, cache)
    du = space.distribute(du)
    omega = 1.0
    for _ in range(cfg.ls_backtracks + 1):
        try:
            r_try = mech_residual(space, u + omega * du, phi, u_prev_iter,
                                  cfg, m, body_force=body_force,
                                  dirichlet_dofs=bc.dofs)
        except LimitExceeded:
            omega *= 0.5
            continue
        if np.all(np.isfinite(r_try)) and np.linalg.norm(r_try) < rnorm:
            return u + omega * du, 1
        omega *= 0.5
    raise NonConvergence("mechanics sweep found no admissible decrease")


def solve_mechanics(space: FeSpace, u_init: np.ndarray, phi: np.ndarray,
                    u_prev_iter: np.ndarray, bc: DirichletBC,
                    cfg: MechanicsConfig, m: MaterialParams,
                    body_force=None, log=None, solver_cache=None,
                    prefer_init: bool = False, tol_hint: float = 0.0):
    """Solve the mechanics subproblem.  Returns (u, newton_iterations).

    For NLSL the initial guess is the linear solve when admissible (the
    warm start), otherwise the previous iterate or a zero-forcing lift;
    if Newton still fails the boundary load is ramped in adaptive
    continuation stages.  With prefer_init (later staggered iterations)
    the previous iterate is tried before paying for the linear solve.
    """
    if tol_hint > cfg.newton_tol:
        cfg = replace(cfg, newton_tol=tol_hint)
    u_start = u_init.copy()
    u_start[bc.dofs] = bc.values
    if cfg.model == "LEFM":
        u = _linear_solve(space, phi, bc, cfg, m, body_force, u_start,
                          u_prev_iter, cfg.l_u, cache=solver_cache)
        if log is not None:
            r = mech_residual(space, u, phi, u_prev_iter, cfg, m,
                              body_force=body_force, dirichlet_dofs=bc.dofs)
            log(1, float(np.linalg.norm(r)), 0.0)
        return u, 1

    candidates = []
    if prefer_init:
        candidates.append(space.distribute(u_start.copy()))
    if cfg.warm_start_linear:
        def linear_with_force():
            return _linear_solve(space, phi, bc, cfg, m, body_force, u_start,
                                 u_prev_iter, cfg.l_u, cache=solver_cache)
        candidates.append(linear_with_force)
    if not prefer_init:
        candidates.append(space.distribute(u_start.copy()))
    candidates.append(lambda: _linear_solve(space, phi, bc, cfg, m, None,
                                            u_start, u_prev_iter, cfg.l_u,
                                            cache=solver_cache))

    u0 = None
    for cand in candidates:
        if callable(cand):
            try:
                cand = cand()
            except Exception:
                continue
        cand[bc.dofs] = bc.values
        if max_limit_monitor(space, cand, m) < cfg.admissible_start:
            u0 = cand
            break
    if u0 is not None:
        try:
            u, iters, _ = _newton(space, u0, phi, u_prev_iter, bc, cfg, m,
                                  body_force, log, cache=solver_cache)
            return u, iters
        except NonConvergence:
            pass

    return _continuation(space, u_start, phi, u_prev_iter, bc, cfg, m,
                         body_force, log)


def _continuation(space, u_init, phi, u_prev_iter, bc, cfg, m, body_force, log):
    """Adaptive load stepping: solve at growing fractions of the boundary data."""
    total_iters = 0
    rho_prev = 0.0
    u = np.zeros(space.ndof)
    drho = 0.25
    guard = 0
    while rho_prev < 1.0:
        guard += 1
        if guard > 200:
            raise NonConvergence("load continuation exceeded 200 stages")
        rho = min(1.0, rho_prev + drho)
        scale = rho / rho_prev if rho_prev > 0 else 0.0
        u_try = u * scale
        bcr = bc.scaled(rho)
        u_try[bcr.dofs] = bcr.values
        u_try = space.distribute(u_try)
        fb = None
        if body_force is not None:
            fb = lambda x, y, _r=rho: _r * np.asarray(body_force(x, y))
        try:
            u_new, iters, _ = _newton(space, u_try, phi, u_prev_iter, bcr, cfg,
                                      m, fb, log if rho == 1.0 else None)
        except (NonConvergence, LimitExceeded):
            drho *= 0.5
            if drho < 1.0 / 1024.0:
                raise NonConvergence("load continuation stalled")
            continue
        u = u_new
        total_iters += iters
        rho_prev = rho
        drho = min(2 * drho, 0.25)
    return u, total_iters
