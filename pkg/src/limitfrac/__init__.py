"""Quasi-static phase-field brittle fracture with strain-limiting elasticity."""

from .constitutive import (LimitExceeded, MaterialParams, compliance,
                           degradation, half_norm_strain, half_norm_stress,
                           hooke_stress, phi_tilde, strain_nl, stress_sl,
                           tangent_sl)
from .coupling import CouplingConfig, SolveState, run_quasi_static, staggered_step
from .fem import FeSpace, SparseSystem, assemble, l2_error, shape_eval, solve_linear
from .mechanics import (DirichletBC, MechanicsConfig, NonConvergence,
                        mech_jacobian, mech_residual, solve_mechanics)
from .mesh import QuadMesh, refine_global, refine_where, split_slit
from .phasefield import (PenaltyState, PhaseFieldConfig, pf_jacobian,
                         pf_residual, solve_phasefield, update_multiplier)

__version__ = "0.1.0"
