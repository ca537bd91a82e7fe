"""Derived quantities: energies, crack speed, line samples, field export.

Axial stress is reported through Hooke's law on the raw symmetric
gradient for both models; axial strain follows the model (raw strain for
LEFM, the strain-limiting strain computed from the Hooke stress for
NLSL).  Cell values are the plain mean over the 2x2 quadrature points of
the cell; energies use elevated 3x3 quadrature.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import constitutive as cst
from .constitutive import MaterialParams
from .fem import FeSpace
from .mechanics import MechanicsConfig, _stress_at
from .vtkio import write_vtk

__all__ = [
    "EnergyRecord",
    "bulk_energy",
    "crack_energy",
    "total_energy",
    "crack_speed",
    "line_sample",
    "sample_to_csv",
    "export_vtk",
]


@dataclass
class EnergyRecord:
    step: int
    time: float
    bulk: float
    crack: float

    @property
    def total(self) -> float:
        return self.bulk + self.crack


def bulk_energy(vspace: FeSpace, u: np.ndarray, phi: np.ndarray,
                mech_cfg: MechanicsConfig, m: MaterialParams) -> float:
    """Degraded elastic energy; the NLSL variant divides the density by
    the strain-limiting denominator (so NLSL >= LEFM for a shared state)."""
    qd = vspace.quad_data(3)
    eps = vspace.eval_sym_grad(u, qd)
    g = cst.degradation(vspace.eval_scalar_values(phi, qd), m.kappa)
    dens = cst.ddot(eps, cst.hooke_stress(eps, m))  # 2 mu e:e + lam tr(e)^2
    if mech_cfg.model == "NLSL" and m.beta != 0.0:
        s = cst.half_norm_strain(eps, m)
        dens = dens / cst._limit_denominator(s, m)
    return float(np.sum(0.5 * g * dens * qd.jxw))


def crack_energy(sspace: FeSpace, phi: np.ndarray, m: MaterialParams) -> float:
    """Gc/2 * integral of (1-phi)^2/xi + xi |grad phi|^2."""
    qd = sspace.quad_data(3)
    phiq = sspace.eval_values(phi, qd)
    gphi = sspace.eval_grads(phi, qd)
    dens = (1.0 - phiq) ** 2 / m.xi + m.xi * np.sum(gphi ** 2, axis=-1)
    return float(0.5 * m.gc * np.sum(dens * qd.jxw))


def total_energy(vspace, sspace, u, phi, mech_cfg, m) -> EnergyRecord:
    return EnergyRecord(step=-1, time=0.0,
                        bulk=bulk_energy(vspace, u, phi, mech_cfg, m),
                        crack=crack_energy(sspace, phi, m))


def crack_speed(records: Sequence[EnergyRecord]) -> List[Tuple[float, float]]:
    """Forward-difference rate of crack energy, reported at the left time.

    The take-off step is thereby attributed to the step where the energy
    first rises.
    """
    if len(records) < 2:
        raise ValueError("need at least two energy records")
    out = []
    for k in range(len(records) - 1):
        dt = records[k + 1].time - records[k].time
        out.append((records[k].time,
                    (records[k + 1].crack - records[k].crack) / dt))
    return out


# ----------------------------------------------------------------------
# line sampling
# ----------------------------------------------------------------------

def _segment_hits_rect(p0, p1, lo, hi) -> bool:
    """Liang-Barsky clip: does segment p0-p1 intersect the axis box [lo,hi]?"""
    d = (p1[0] - p0[0], p1[1] - p0[1])
    t0, t1 = 0.0, 1.0
    for axis in (0, 1):
        if abs(d[axis]) < 1e-300:
            if p0[axis] < lo[axis] - 1e-12 or p0[axis] > hi[axis] + 1e-12:
                return False
            continue
        ta = (lo[axis] - p0[axis]) / d[axis]
        tb = (hi[axis] - p0[axis]) / d[axis]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1 + 1e-12:
            return False
    return True


def cell_quantity(vspace: FeSpace, sspace: FeSpace, u: np.ndarray,
                  phi: np.ndarray, quantity: str, mech_cfg: MechanicsConfig,
                  m: MaterialParams) -> np.ndarray:
    """Cell-averaged quantity over the 2x2 quadrature points of each cell.

    Quantities: "sigma22" (Hooke stress from the raw strain, both
    models), "eps22" (model strain), "eps_nl22" (strain-limiting strain),
    "eps_raw22", "phi", "sigma_phi22" (degraded stress).
    """
    qd = vspace.quad_data(2)
    if quantity == "phi":
        return sspace.eval_values(phi, qd).mean(axis=1)
    eps = vspace.eval_sym_grad(u, qd)
    sig = cst.hooke_stress(eps, m)
    if quantity == "sigma22":
        vals = sig[..., 1]
    elif quantity == "sigma_phi22":
        g = cst.degradation(vspace.eval_scalar_values(phi, qd), m.kappa)
        vals = g * sig[..., 1]
    elif quantity == "eps_raw22":
        vals = eps[..., 1]
    elif quantity == "eps_nl22":
        vals = cst.strain_nl(sig, m)[..., 1]
    elif quantity == "eps22":
        if mech_cfg.model == "NLSL":
            vals = cst.strain_nl(sig, m)[..., 1]
        else:
            vals = eps[..., 1]
    else:
        raise ValueError(f"unknown quantity {quantity!r}")
    return vals.mean(axis=1)


def line_sample(vspace: FeSpace, sspace: FeSpace, u: np.ndarray,
                phi: np.ndarray, quantity: str, p_from, p_to,
                mech_cfg: MechanicsConfig, m: MaterialParams):
    """Cell-averaged samples along a segment, one row per intersected cell.

    Returns a list of (centroid_x, centroid_y, quantity, value) rows
    ordered along the segment direction.
    """
    mesh = vspace.mesh
    vals = cell_quantity(vspace, sspace, u, phi, quantity, mech_cfg, m)
    p0 = np.asarray(p_from, dtype=float)
    p1 = np.asarray(p_to, dtype=float)
    d = p1 - p0
    rows = []
    for c in range(mesh.n_cells):
        lo = mesh.cell_origin[c]
        hi = lo + mesh.cell_size[c]
        if _segment_hits_rect(p0, p1, lo, hi):
            cx, cy = lo + 0.5 * mesh.cell_size[c]
            rows.append((float(cx), float(cy), quantity, float(vals[c])))
    rows.sort(key=lambda r: (r[0] * d[0] + r[1] * d[1], r[0], r[1]))
    return rows


def sample_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("x,y,quantity,value\n")
    for (x, y, q, v) in rows:
        buf.write(f"{x:.10g},{y:.10g},{q},{v:.12g}\n")
    return buf.getvalue()


def export_vtk(path: str, vspace: FeSpace, sspace: FeSpace, u: np.ndarray,
               phi: np.ndarray, mech_cfg: MechanicsConfig, m: MaterialParams,
               title: str = "state") -> None:
    """Write displacement/phase point fields and cell stress/strain fields."""
    mesh = vspace.mesh
    point_data = {
        "u": np.stack([u[0::2], u[1::2]], axis=-1),
        "phi": phi,
    }
    cell_data = {
        "sigma22": cell_quantity(vspace, sspace, u, phi, "sigma22", mech_cfg, m),
        "eps22": cell_quantity(vspace, sspace, u, phi, "eps22", mech_cfg, m),
        "sigma_phi22": cell_quantity(vspace, sspace, u, phi, "sigma_phi22",
                                     mech_cfg, m),
    }
    write_vtk(path, title, mesh.vertices, mesh.cells, point_data, cell_data)
