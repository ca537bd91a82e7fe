"""Material laws for linear (LEFM) and strain-limiting (NLSL) elasticity.

Symmetric 2-tensors are stored as numpy arrays with a trailing axis of
length 3 holding the (xx, yy, xy) components.  All functions broadcast
over leading axes, so the same code path serves a single tensor and a
batch of quadrature-point values.

Strain states are plane strain (eps_zz = 0).  Stress tensors keep only
their in-plane components; wherever the isotropic compliance constant
2*mu + 3*lambda appears, the out-of-plane stress sigma_zz is recovered
from the plane-strain relation first, so that the compliance map is the
exact inverse of Hooke's law and the strain-limiting strain/stress maps
are exact mutual inverses on the admissible set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MaterialParams",
    "LimitExceeded",
    "sym2",
    "trace",
    "ddot",
    "hooke_stress",
    "compliance",
    "half_norm_stress",
    "half_norm_strain",
    "phi_tilde",
    "strain_nl",
    "stress_sl",
    "tangent_sl",
    "degradation",
]

# Ellipticity guard: (beta*|E^{1/2}[eps]|)^alpha must stay below 1 by at
# least this margin for the strain-limiting stress to be evaluated.
ELLIPTICITY_GUARD = 1e-10

# Below this strain half-norm the singular factor s^(alpha-2) in the
# tangent is replaced by its removable limit (the full term is O(s^alpha)).
SMALL_NORM = 1e-14

# Radicand clamp for the half norms (floating-point noise on near-zero states).
RADICAND_CLAMP = -1e-14


class LimitExceeded(RuntimeError):
    """Strain state violates the strain-limiting ellipticity condition.

    Carries ``value`` = max of beta*|E^{1/2}[eps]| over the offending states.
    """

    def __init__(self, value: float):
        self.value = float(value)
        super().__init__(
            f"beta*|E^(1/2)[eps]| = {value:.6g} reaches the ellipticity limit"
        )


@dataclass
class MaterialParams:
    """Material and regularization constants.

    lam, mu      : Lame coefficients (stress units); mu > 0 and the bulk
                   modulus lam + 2/3 mu must be positive.
    alpha, beta  : strain-limiting parameters; beta = 0 recovers LEFM.
    gc           : critical energy release rate (N/m).
    xi           : phase-field bandwidth (length).
    kappa        : residual stiffness regularizer, 0 <= kappa << xi << 1.
    """

    lam: float
    mu: float
    alpha: float = 1.0
    beta: float = 0.0
    gc: float = 1.0
    xi: float = 0.01
    kappa: float = 0.0

    def __post_init__(self):
        if self.mu <= 0.0:
            raise ValueError(f"shear modulus must be positive, got mu={self.mu}")
        if self.lam + (2.0 / 3.0) * self.mu <= 0.0:
            raise ValueError("bulk modulus lam + (2/3) mu must be positive")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if self.kappa < 0.0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")


def sym2(xx, yy, xy):
    """Pack components into the (..., 3) symmetric-tensor layout."""
    return np.stack(np.broadcast_arrays(xx, yy, xy), axis=-1).astype(float)


def trace(t: np.ndarray) -> np.ndarray:
    """In-plane trace xx + yy."""
    return t[..., 0] + t[..., 1]


def ddot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Double contraction A:B of symmetric tensors (xy counted twice)."""
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + 2.0 * a[..., 2] * b[..., 2]


def _sigma_zz(sigma: np.ndarray, m: MaterialParams) -> np.ndarray:
    # Plane-strain out-of-plane stress recovered from the in-plane trace.
    return m.lam * trace(sigma) / (2.0 * (m.lam + m.mu))


def hooke_stress(eps: np.ndarray, m: MaterialParams) -> np.ndarray:
    """Linear elastic stress sigma = 2 mu eps + lam tr(eps) I (in-plane part)."""
    tr = trace(eps)
    out = 2.0 * m.mu * np.asarray(eps, dtype=float).copy()
    out[..., 0] += m.lam * tr
    out[..., 1] += m.lam * tr
    return out


def compliance(sigma: np.ndarray, m: MaterialParams) -> np.ndarray:
    """Inverse of Hooke's law: eps = sigma/2mu - lam tr3(sigma) I / (2mu(2mu+3lam)).

    The trace is the full 3D trace with sigma_zz recovered from plane
    strain, which makes compliance(hooke_stress(eps)) == eps exactly.
    """
    sigma = np.asarray(sigma, dtype=float)
    tr3 = trace(sigma) + _sigma_zz(sigma, m)
    c = m.lam / (2.0 * m.mu * (2.0 * m.mu + 3.0 * m.lam))
    out = sigma / (2.0 * m.mu)
    out = out.copy()
    out[..., 0] -= c * tr3
    out[..., 1] -= c * tr3
    return out


def half_norm_stress(sigma: np.ndarray, m: MaterialParams) -> np.ndarray:
    """|K^{1/2}[sigma]| = sqrt(sigma : K[sigma]).

    Evaluates (sigma:sigma / 2mu - lam tr(sigma)^2 / (2mu(2mu+3lam)))^(1/2)
    on the plane-strain completed stress.  Raises ValueError if the
    radicand is negative beyond floating-point noise.
    """
    sigma = np.asarray(sigma, dtype=float)
    szz = _sigma_zz(sigma, m)
    tr3 = trace(sigma) + szz
    ss = ddot(sigma, sigma) + szz * szz
    rad = ss / (2.0 * m.mu) - m.lam * tr3 * tr3 / (2.0 * m.mu * (2.0 * m.mu + 3.0 * m.lam))
    if np.any(rad < RADICAND_CLAMP * max(1.0, float(np.max(np.abs(rad))))):
        raise ValueError(
            "negative radicand in half_norm_stress: check Lame parameters"
        )
    return np.sqrt(np.maximum(rad, 0.0))


def half_norm_strain(eps: np.ndarray, m: MaterialParams) -> np.ndarray:
    """|E^{1/2}[eps]| = sqrt(2 mu eps:eps + lam tr(eps)^2) = sqrt(eps : E[eps])."""
    eps = np.asarray(eps, dtype=float)
    tr = trace(eps)
    rad = 2.0 * m.mu * ddot(eps, eps) + m.lam * tr * tr
    return np.sqrt(np.maximum(rad, 0.0))


def phi_tilde(r, alpha: float, beta: float):
    """Strain-limiting factor 1 / (1 + (beta r)^alpha)^(1/alpha), in (0, 1]."""
    r = np.asarray(r, dtype=float)
    if beta == 0.0:
        return np.ones_like(r)
    return (1.0 + (beta * r) ** alpha) ** (-1.0 / alpha)


def strain_nl(sigma: np.ndarray, m: MaterialParams) -> np.ndarray:
    """Strain-limiting strain: K[sigma] scaled by phi_tilde(|K^{1/2}[sigma]|)."""
    k = compliance(sigma, m)
    if m.beta == 0.0:
        return k
    r = half_norm_stress(sigma, m)
    return k * phi_tilde(r, m.alpha, m.beta)[..., None]


def _limit_denominator(s: np.ndarray, m: MaterialParams) -> np.ndarray:
    """(1 - (beta s)^alpha)^(1/alpha) with the ellipticity guard."""
    arg = (m.beta * s) ** m.alpha
    bad = arg >= 1.0 - ELLIPTICITY_GUARD
    if np.any(bad):
        raise LimitExceeded(float(np.max(m.beta * s)))
    return (1.0 - arg) ** (1.0 / m.alpha)


def stress_sl(eps: np.ndarray, m: MaterialParams) -> np.ndarray:
    """Strain-limiting stress E[eps] / (1 - (beta |E^{1/2}[eps]|)^alpha)^(1/alpha).

    Raises LimitExceeded when the ellipticity condition fails.
    Equals hooke_stress(eps) for beta = 0.
    """
    sig = hooke_stress(eps, m)
    if m.beta == 0.0:
        return sig
    s = half_norm_strain(eps, m)
    return sig / _limit_denominator(s, m)[..., None]


def tangent_sl(eps: np.ndarray, deps: np.ndarray, m: MaterialParams) -> np.ndarray:
    """Directional derivative of stress_sl at eps along deps.

    E[deps]/D + beta^alpha theta1 theta2 E[eps] / (1 - beta^alpha s^alpha)^(1+1/alpha)
    with s = |E^{1/2}[eps]|, theta1 = s^(alpha-2), theta2 = E[eps]:deps.
    The second term has the removable limit 0 as s -> 0 and is dropped
    for s < 1e-14 (avoids 0^negative for alpha < 2).
    """
    Edeps = hooke_stress(deps, m)
    if m.beta == 0.0:
        return Edeps
    s = half_norm_strain(eps, m)
    D = _limit_denominator(s, m)
    out = Edeps / D[..., None]
    Eeps = hooke_stress(eps, m)
    theta2 = ddot(Eeps, deps)
    ssafe = np.where(s > SMALL_NORM, s, 1.0)
    coef = np.where(
        s > SMALL_NORM,
        m.beta ** m.alpha
        * ssafe ** (m.alpha - 2.0)
        * theta2
        / (1.0 - (m.beta * s) ** m.alpha) ** (1.0 + 1.0 / m.alpha),
        0.0,
    )
    return out + coef[..., None] * Eeps


def degradation(phi: np.ndarray, kappa: float) -> np.ndarray:
    """Stiffness degradation g(phi) = (1 - kappa) phi^2 + kappa."""
    return (1.0 - kappa) * np.square(phi) + kappa
