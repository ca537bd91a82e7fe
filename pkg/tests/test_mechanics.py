"""Mechanics subproblem: residual/Jacobian consistency, Newton behavior,
homogeneous-deformation oracle, manufactured-solution spot checks."""

import numpy as np
import pytest

from limitfrac.constitutive import MaterialParams
from limitfrac.fem import FeSpace, l2_error
from limitfrac.mechanics import (DirichletBC, MechanicsConfig, mech_jacobian,
                                 mech_residual, solve_mechanics)
from limitfrac.mesh import QuadMesh, refine_global, refine_where
from limitfrac.driver import (bc_builder, convergence_study, mms_exact,
                              mms_forcing, preset)


def mms_bc(space):
    v = space.mesh.vertices
    onb = np.nonzero((np.abs(v[:, 0]) < 1e-12) | (np.abs(v[:, 0] - 1) < 1e-12)
                     | (np.abs(v[:, 1]) < 1e-12) | (np.abs(v[:, 1] - 1) < 1e-12))[0]
    ue = mms_exact(v[onb, 0], v[onb, 1])
    return DirichletBC(dofs=np.concatenate([2 * onb, 2 * onb + 1]),
                       values=np.concatenate([ue[:, 0], ue[:, 1]]))


def interpolant(space, fn):
    return space.interpolate(fn)


# ----------------------------------------------------------------------
# residual
# ----------------------------------------------------------------------

def test_residual_consistency_under_refinement():
    # residual of the exact-solution interpolant shrinks under refinement
    m = MaterialParams(lam=0.01, mu=0.01, beta=0.0)
    cfg = MechanicsConfig(model="LEFM", l_u=0.0)
    norms = []
    for k in (2, 3, 4):
        mesh = refine_global(QuadMesh.unit_square(), k)
        space = FeSpace(mesh, "vector")
        u = interpolant(space, mms_exact)
        bc = mms_bc(space)
        force = lambda x, y: mms_forcing(x, y, m, "LEFM")
        r = mech_residual(space, u, np.ones(mesh.n_vertices), u, cfg, m,
                          body_force=force, dirichlet_dofs=bc.dofs)
        norms.append(np.linalg.norm(r))
    assert norms[0] > norms[1] > norms[2]


def test_residual_zero_at_equilibrium():
    # solve, then evaluate the residual at the solution: ~ 0
    mesh = refine_global(QuadMesh.unit_square(), 3)
    space = FeSpace(mesh, "vector")
    m = MaterialParams(lam=2.0, mu=1.0)
    cfg = MechanicsConfig(model="LEFM", l_u=0.0)
    phi = np.ones(mesh.n_vertices)
    bc = bc_builder(space, "top_pull", lambda t: 0.01)(0.0)
    u, _ = solve_mechanics(space, np.zeros(space.ndof), phi,
                           np.zeros(space.ndof), bc, cfg, m)
    r = mech_residual(space, u, phi, u, cfg, m, dirichlet_dofs=bc.dofs)
    assert np.linalg.norm(r) < 1e-12


def test_l_term_switch():
    # residual with l_u = 0 equals an assembly that omits the L-term
    mesh = refine_global(QuadMesh.unit_square(), 2)
    space = FeSpace(mesh, "vector")
    m = MaterialParams(lam=1.0, mu=1.0)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(space.ndof) * 0.01
    uprev = rng.standard_normal(space.ndof) * 0.01
    phi = rng.random(mesh.n_vertices)
    r0 = mech_residual(space, u, phi, uprev, MechanicsConfig(l_u=0.0), m)
    r1 = mech_residual(space, u, phi, uprev, MechanicsConfig(l_u=1e-3), m, l_u=0.0)
    r2 = mech_residual(space, u, phi, u, MechanicsConfig(l_u=1e-3), m)
    assert np.array_equal(r0, r1)
    assert np.allclose(r0, r2, atol=1e-16)


# ----------------------------------------------------------------------
# Jacobian
# ----------------------------------------------------------------------

def _random_state(space, m, rng, scale=1.0, frac=0.5):
    from limitfrac.constitutive import half_norm_strain
    u = space.distribute(scale * rng.standard_normal(space.ndof))
    if m.beta > 0.0:
        qd = space.quad_data(2)
        s = float(np.max(m.beta * half_norm_strain(space.eval_sym_grad(u, qd), m)))
        if s > frac:
            u *= frac / s
    return u


@pytest.mark.parametrize("model,mat", [
    ("LEFM", MaterialParams(lam=2.0, mu=1.0)),
    ("NLSL", MaterialParams(lam=1.0, mu=1.0, alpha=0.5, beta=1.0)),
    ("NLSL", MaterialParams(lam=0.01, mu=0.01, alpha=0.1, beta=0.1)),
])
def test_jacobian_directional_fd(model, mat):
    mesh = refine_where(refine_global(QuadMesh.unit_square(), 2),
                        lambda x, y: x < 0.3, 1)
    space = FeSpace(mesh, "vector")
    sspace = FeSpace(mesh, "scalar")
    cfg = MechanicsConfig(model=model, l_u=1e-6)
    rng = np.random.default_rng(11)
    phi = sspace.distribute(rng.random(mesh.n_vertices))
    bdofs = space.boundary_dofs("top")
    for _ in range(25):
        u = _random_state(space, mat, rng, scale=0.05)
        v = rng.standard_normal(space.ndof)
        v[bdofs] = 0.0
        v = space.distribute(v)  # homogeneous on Dirichlet rows, hanging-consistent
        h = 1e-6 * max(np.linalg.norm(u), 1.0) / np.linalg.norm(v)
        rp = mech_residual(space, u + h * v, phi, u, cfg, mat, dirichlet_dofs=bdofs)
        rm = mech_residual(space, u - h * v, phi, u, cfg, mat, dirichlet_dofs=bdofs)
        fd = (rp - rm) / (2 * h)
        J = mech_jacobian(space, u, phi, cfg, mat).matrix
        jv = J @ v
        # compare on the test space: Dirichlet rows and the artificial
        # identity rows of condensed-out hanging DOFs carry no residual
        jv[bdofs] = 0.0
        jv[space.slave_dofs] = 0.0
        denom = max(np.linalg.norm(fd), 1e-30)
        assert np.linalg.norm(jv - fd) / denom < 1e-5


def test_jacobian_beta_zero_equals_linear():
    mesh = refine_global(QuadMesh.unit_square(), 2)
    space = FeSpace(mesh, "vector")
    m = MaterialParams(lam=2.0, mu=1.0, beta=0.0)
    rng = np.random.default_rng(5)
    u = rng.standard_normal(space.ndof)
    phi = rng.random(mesh.n_vertices)
    Jn = mech_jacobian(space, u, phi, MechanicsConfig(model="NLSL"), m).matrix
    Jl = mech_jacobian(space, u, phi, MechanicsConfig(model="LEFM"), m).matrix
    assert np.allclose((Jn - Jl).data, 0.0, atol=1e-15)


def test_jacobian_spectral_floor_fully_broken():
    # phi = 0 everywhere: J ~ kappa*K + l_u*M stays positive definite
    mesh = refine_global(QuadMesh.unit_square(), 1)
    space = FeSpace(mesh, "vector")
    hmin = mesh.h_min
    m = MaterialParams(lam=2.0, mu=1.0, kappa=1e-10 * hmin)
    cfg = MechanicsConfig(model="LEFM", l_u=1e-6)
    phi = np.zeros(mesh.n_vertices)
    J = mech_jacobian(space, np.zeros(space.ndof), phi, cfg, m).matrix.toarray()
    w = np.linalg.eigvalsh(0.5 * (J + J.T))
    assert w.min() > 0.0
    # mass floor: smallest eigenvalue at least of order l_u * (h^2 scale)
    assert w.min() > 1e-6 * 0.25 * 0.01


# ----------------------------------------------------------------------
# solve
# ----------------------------------------------------------------------

def homogeneous_oracle(mesh_levels, m, utop):
    """Uniform uniaxial stretch, slip bottom, x pinned at one bottom vertex.

    The analytic plane-strain solution is u_y = utop * y and
    u_x = -lam/(lam+2mu) * utop * (x - x_c), with x_c the pin location.
    """
    mesh = refine_global(QuadMesh.unit_square(), mesh_levels)
    space = FeSpace(mesh, "vector")
    cfg = MechanicsConfig(model="LEFM", l_u=0.0)
    bc = bc_builder(space, "top_slip", lambda t: utop)(0.0)
    u, iters = solve_mechanics(space, np.zeros(space.ndof), np.ones(mesh.n_vertices),
                               np.zeros(space.ndof), bc, cfg, m)
    v = mesh.vertices
    bottom = space.boundary_vertices("bottom")
    pin = bottom[int(np.argmin(np.abs(v[bottom, 0] - 0.5)))]
    lateral = -m.lam / (m.lam + 2 * m.mu) * utop
    expect = np.empty(space.ndof)
    expect[0::2] = lateral * (v[:, 0] - v[pin, 0])
    expect[1::2] = utop * v[:, 1]
    return u, expect, iters


def test_homogeneous_stretch_matches_plane_strain():
    m = MaterialParams(lam=2.0, mu=1.0)
    u, expect, _ = homogeneous_oracle(0, m, 0.02)
    assert np.max(np.abs(u - expect)) < 1e-12


def test_homogeneous_stretch_mesh_independent():
    m = MaterialParams(lam=2.0, mu=1.0)
    u1, e1, _ = homogeneous_oracle(0, m, 0.02)
    u2, e2, _ = homogeneous_oracle(4, m, 0.02)
    assert np.max(np.abs(u1 - e1)) < 1e-10
    assert np.max(np.abs(u2 - e2)) < 1e-10


def test_lefm_one_iteration_when_lu_zero():
    m = MaterialParams(lam=2.0, mu=1.0)
    _, _, iters = homogeneous_oracle(2, m, 0.01)
    assert iters == 1


def test_dirichlet_exactness():
    mesh = refine_global(QuadMesh.unit_square(), 3)
    space = FeSpace(mesh, "vector")
    m = MaterialParams(lam=2.0, mu=1.0)
    bc = bc_builder(space, "top_pull", lambda t: 0.05)(0.0)
    u, _ = solve_mechanics(space, np.zeros(space.ndof), np.ones(mesh.n_vertices),
                           np.zeros(space.ndof), bc, MechanicsConfig(l_u=0.0), m)
    top = space.boundary_dofs("top", component=1)
    assert np.max(np.abs(u[top] - 0.05)) == 0.0


def test_nlsl_beta_zero_matches_lefm():
    mesh = refine_global(QuadMesh.unit_square(), 3)
    space = FeSpace(mesh, "vector")
    m = MaterialParams(lam=0.01, mu=0.01, alpha=0.1, beta=0.0)
    bc = mms_bc(space)
    phi = np.ones(mesh.n_vertices)
    force = lambda x, y: mms_forcing(x, y, m, "LEFM")
    ul, _ = solve_mechanics(space, np.zeros(space.ndof), phi, np.zeros(space.ndof),
                            bc, MechanicsConfig(model="LEFM", l_u=0.0), m,
                            body_force=force)
    un, _ = solve_mechanics(space, np.zeros(space.ndof), phi, np.zeros(space.ndof),
                            bc, MechanicsConfig(model="NLSL", l_u=0.0), m,
                            body_force=force)
    assert np.max(np.abs(ul - un)) < 1e-10


def test_nlsl_superlinear_tail_on_mms():
    # track increments on a mid-size manufactured-solution mesh
    from limitfrac.mechanics import _newton, _linear_solve
    mesh = refine_global(QuadMesh.unit_square(), 4)
    space = FeSpace(mesh, "vector")
    m = MaterialParams(lam=0.01, mu=0.01, alpha=0.1, beta=0.1)
    cfg = MechanicsConfig(model="NLSL", l_u=0.0, newton_tol=1e-12)
    bc = mms_bc(space)
    phi = np.ones(mesh.n_vertices)
    force = lambda x, y: mms_forcing(x, y, m, "NLSL")
    # the admissible start here is the zero-forcing lift (the forcing-driven
    # linear solve overshoots the strain limit, as the solver itself detects)
    u0 = _linear_solve(space, phi, bc, cfg, m, None, np.zeros(space.ndof),
                       np.zeros(space.ndof), 0.0)
    _, _, hist = _newton(space, u0, phi, np.zeros(space.ndof), bc, cfg, m,
                         force, None)
    incs = [h[2] for h in hist]
    assert len(incs) >= 3
    # superlinear tail: the last contraction factor beats the previous one
    assert incs[-1] / incs[-2] < 0.5 * incs[-2] / incs[-3]


# ----------------------------------------------------------------------
# manufactured solution (published error values)
# ----------------------------------------------------------------------

MMS_FORCING_TABLE = [
    # hand-derived closed form: f = 2*mu*(sin x sin y, cos x cos y)
    (0.0, 0.0, 0.0, 0.02),
    (1.0, 1.0, 0.0141614683654714, 0.00583853163452858),
    (0.5, 0.25, 0.00237223552836824, 0.0170060129058447),
    (0.123, 0.456, 0.00108055703184691, 0.0178207621424339),
    (0.9, 0.1, 0.00156404403479026, 0.0123700901521531),
]


def test_mms_forcing_spot_values():
    m = MaterialParams(lam=0.01, mu=0.01)
    for (x, y, f1, f2) in MMS_FORCING_TABLE:
        f = mms_forcing(np.array(x), np.array(y), m, "LEFM")
        assert np.allclose(f, [f1, f2], rtol=1e-12, atol=1e-15)


def test_mms_forcing_beta_zero_matches_linear():
    m = MaterialParams(lam=0.01, mu=0.01, alpha=0.1, beta=0.0)
    x = np.linspace(0.05, 0.95, 7)
    y = np.linspace(0.1, 0.9, 7)
    fl = mms_forcing(x, y, m, "LEFM")
    fn = mms_forcing(x, y, m, "NLSL")
    assert np.allclose(fl, fn, atol=1e-8)


def test_mms_cycle2_errors_match_published():
    # cycle 2 (16 cells): linear 0.008457780816, nonlinear 0.007450392935
    lin = convergence_study(preset("ex1_linear"), cycles=2)
    assert abs(lin[-1]["error"] - 0.008457780816) / 0.008457780816 < 0.01
    nl = convergence_study(preset("ex1_nlsl"), cycles=2)
    assert abs(nl[-1]["error"] - 0.007450392935) / 0.007450392935 < 0.02
