"""Material-law unit tests: closed forms, round trips, tangent checks."""

import numpy as np
import pytest

from limitfrac.constitutive import (LimitExceeded, MaterialParams, compliance,
                                    ddot, degradation, half_norm_strain,
                                    half_norm_stress, hooke_stress, phi_tilde,
                                    strain_nl, stress_sl, sym2, tangent_sl, trace)

RNG = np.random.default_rng(42)


def random_tensors(n, scale=1.0, rng=RNG):
    return sym2(scale * rng.standard_normal(n),
                scale * rng.standard_normal(n),
                scale * rng.standard_normal(n))


def admissible_strains(n, m, frac=0.8, rng=RNG):
    """Random strains scaled so beta * |E^(1/2)[eps]| <= frac."""
    eps = random_tensors(n, rng=rng)
    if m.beta == 0.0:
        return eps
    s = half_norm_strain(eps, m)
    return eps * (frac / (m.beta * s))[..., None]


# ----------------------------------------------------------------------
# parameter validation
# ----------------------------------------------------------------------

def test_material_validation():
    with pytest.raises(ValueError):
        MaterialParams(lam=1.0, mu=0.0)
    with pytest.raises(ValueError):
        MaterialParams(lam=-10.0, mu=1.0)  # bulk modulus <= 0
    with pytest.raises(ValueError):
        MaterialParams(lam=1.0, mu=1.0, alpha=0.0)
    with pytest.raises(ValueError):
        MaterialParams(lam=1.0, mu=1.0, beta=-0.1)


# ----------------------------------------------------------------------
# Hooke stress
# ----------------------------------------------------------------------

def test_hooke_zero():
    m = MaterialParams(lam=1.0, mu=1.0)
    assert np.all(hooke_stress(sym2(0, 0, 0), m) == 0.0)


def test_hooke_identity():
    m = MaterialParams(lam=1.0, mu=1.0)
    sig = hooke_stress(sym2(1.0, 1.0, 0.0), m)
    # 2 mu * 1 + lam * 2 on each diagonal component
    assert np.allclose(sig, sym2(4.0, 4.0, 0.0))


def test_hooke_componentwise_oracle():
    m = MaterialParams(lam=121.15e3, mu=80.77e3)
    eps = random_tensors(50)
    sig = hooke_stress(eps, m)
    tr = eps[..., 0] + eps[..., 1]
    assert np.allclose(sig[..., 0], 2 * m.mu * eps[..., 0] + m.lam * tr, rtol=1e-14)
    assert np.allclose(sig[..., 1], 2 * m.mu * eps[..., 1] + m.lam * tr, rtol=1e-14)
    assert np.allclose(sig[..., 2], 2 * m.mu * eps[..., 2], rtol=1e-14)


# ----------------------------------------------------------------------
# compliance
# ----------------------------------------------------------------------

def test_compliance_zero():
    m = MaterialParams(lam=1.0, mu=1.0)
    assert np.all(compliance(sym2(0, 0, 0), m) == 0.0)


def test_compliance_hydrostatic_plane_strain():
    # For the in-plane state p*I under plane strain, sigma_zz recovers as
    # lam*2p/(2(lam+mu)) and the inverse map gives, for lam = mu = 1,
    # K[pI] = p*(1/2 - 2.5/10) I = 0.25 p I.  Derived by hand from the
    # 3D isotropic formula; the classic 3D-hydrostatic reduction
    # 1/(2mu+3lam) = 0.2 is checked as scalar algebra below.
    m = MaterialParams(lam=1.0, mu=1.0)
    k = compliance(sym2(1.0, 1.0, 0.0), m)
    assert np.allclose(k, sym2(0.25, 0.25, 0.0), atol=1e-14)
    # scalar identity of the printed hydrostatic constant (3D trace = 3p)
    val = 1.0 / (2 * m.mu) - 3 * m.lam / (2 * m.mu * (2 * m.mu + 3 * m.lam))
    assert np.isclose(val, 1.0 / (2 * m.mu + 3 * m.lam))
    assert np.isclose(val, 0.2)


def test_compliance_round_trip():
    m = MaterialParams(lam=1.0, mu=1.0)
    sig = random_tensors(200)
    assert np.allclose(hooke_stress(compliance(sig, m), m), sig,
                       atol=1e-12 * np.abs(sig).max())
    eps = random_tensors(200)
    assert np.allclose(compliance(hooke_stress(eps, m), m), eps,
                       atol=1e-12 * np.abs(eps).max())


# ----------------------------------------------------------------------
# half norms
# ----------------------------------------------------------------------

def test_half_norm_stress_zero_and_hydrostatic():
    m = MaterialParams(lam=1.0, mu=1.0)
    assert half_norm_stress(sym2(0, 0, 0), m) == 0.0
    # plane-strain completion of pI: sigma_3 = diag(p, p, p/2);
    # radicand = (2.25/2 - 2.5^2/10) p^2 = 0.5 p^2
    assert np.isclose(half_norm_stress(sym2(1.0, 1.0, 0.0), m), np.sqrt(0.5))
    # scalar identity of the printed 3D-hydrostatic value sqrt(0.6)
    rad3 = 3.0 / (2 * m.mu) - m.lam * 9.0 / (2 * m.mu * (2 * m.mu + 3 * m.lam))
    assert np.isclose(np.sqrt(rad3), np.sqrt(0.6))


def test_half_norm_stress_equals_contraction_oracle():
    m = MaterialParams(lam=2.0, mu=1.5)
    sig = random_tensors(300)
    r = half_norm_stress(sig, m)
    assert np.allclose(r ** 2, ddot(sig, compliance(sig, m)), rtol=1e-12, atol=1e-14)


def test_half_norm_strain_values():
    m = MaterialParams(lam=1.0, mu=1.0)
    assert half_norm_strain(sym2(0, 0, 0), m) == 0.0
    assert np.isclose(half_norm_strain(sym2(1.0, 1.0, 0.0), m), np.sqrt(8.0))
    eps = random_tensors(300)
    s = half_norm_strain(eps, m)
    assert np.allclose(s ** 2, ddot(eps, hooke_stress(eps, m)), rtol=1e-12)


# ----------------------------------------------------------------------
# phi_tilde
# ----------------------------------------------------------------------

def test_phi_tilde_closed_forms():
    assert phi_tilde(0.0, 0.5, 2.0) == 1.0
    assert np.all(phi_tilde(np.linspace(0, 100, 11), 0.7, 0.0) == 1.0)
    assert np.isclose(phi_tilde(3.0, 1.0, 2.0), 1.0 / 7.0)


def test_phi_tilde_monotone_bounds():
    r = np.linspace(0.0, 200.0, 2001)
    for alpha in (0.25, 0.5, 1.0, 2.0):
        v = phi_tilde(r, alpha, 1.5)
        assert np.all(v > 0) and np.all(v <= 1.0)
        assert np.all(np.diff(v) < 0)          # strictly decreasing for beta>0
        assert np.all(r * v <= 1.0 / 1.5 + 1e-12)  # r*phi_tilde bounded by 1/beta


# ----------------------------------------------------------------------
# strain_nl / stress_sl
# ----------------------------------------------------------------------

def test_strain_nl_limits():
    m0 = MaterialParams(lam=1.0, mu=1.0, alpha=1.0, beta=0.0)
    sig = random_tensors(100)
    assert np.allclose(strain_nl(sig, m0), compliance(sig, m0), rtol=1e-14)
    assert np.all(strain_nl(sym2(0, 0, 0), m0) == 0.0)


def test_strain_nl_hydrostatic_closed_form():
    m = MaterialParams(lam=1.0, mu=1.0, alpha=1.0, beta=1.0)
    got = strain_nl(sym2(1.0, 1.0, 0.0), m)
    expect = 0.25 / (1.0 + np.sqrt(0.5))  # K[pI] * phi_tilde(sqrt(0.5))
    assert np.allclose(got, sym2(expect, expect, 0.0))
    # the printed 3D-hydrostatic reduction: 0.2/(1+sqrt(0.6)) ~= 0.112702
    assert np.isclose(0.2 / (1.0 + np.sqrt(0.6)), 0.112702, atol=5e-7)


def test_strain_nl_monotone_in_beta():
    sig = random_tensors(50)
    prev = None
    for beta in (0.0, 0.2, 0.5, 1.0, 3.0, 10.0):
        m = MaterialParams(lam=1.3, mu=0.9, alpha=0.75, beta=beta)
        fro = np.sqrt(np.sum(strain_nl(sig, m) ** 2, axis=-1))
        if prev is not None:
            assert np.all(fro <= prev + 1e-14)
        prev = fro


def test_stress_sl_limits_and_guard():
    m0 = MaterialParams(lam=1.0, mu=1.0, beta=0.0)
    eps = random_tensors(100)
    assert np.allclose(stress_sl(eps, m0), hooke_stress(eps, m0), rtol=1e-14)
    m = MaterialParams(lam=1.0, mu=1.0, alpha=1.0, beta=1.0)
    big = sym2(10.0, -3.0, 2.0)
    with pytest.raises(LimitExceeded) as err:
        stress_sl(big, m)
    assert err.value.value >= 1.0


def test_inverse_pair_1000_states():
    # strain_nl(stress_sl(eps)) == eps on the admissible set
    for m in (MaterialParams(lam=1.0, mu=1.0, alpha=0.5, beta=2.0),
              MaterialParams(lam=121.15e3, mu=80.77e3, alpha=0.25, beta=4.8e-4),
              MaterialParams(lam=0.01, mu=0.01, alpha=0.1, beta=0.1)):
        eps = admissible_strains(1000, m, frac=0.9)
        back = strain_nl(stress_sl(eps, m), m)
        assert np.allclose(back, eps, rtol=1e-10,
                           atol=1e-10 * np.abs(eps).max())


def test_alpha_inf_recovers_hooke():
    m = MaterialParams(lam=1.0, mu=1.0, alpha=64.0, beta=1.0)
    eps = admissible_strains(200, m, frac=0.5)
    sig = stress_sl(eps, m)
    ref = hooke_stress(eps, m)
    denom = np.maximum(np.abs(ref), 1e-12 * np.abs(ref).max())
    assert np.max(np.abs(sig - ref) / denom) < 1e-3


# ----------------------------------------------------------------------
# tangent
# ----------------------------------------------------------------------

def test_tangent_beta_zero_is_linear():
    m = MaterialParams(lam=1.0, mu=1.0, beta=0.0)
    eps, deps = random_tensors(20), random_tensors(20)
    assert np.allclose(tangent_sl(eps, deps, m), hooke_stress(deps, m), rtol=1e-14)


def test_tangent_at_zero_strain_alpha_ge_2():
    m = MaterialParams(lam=1.0, mu=1.0, alpha=2.0, beta=1.0)
    deps = random_tensors(20)
    got = tangent_sl(np.zeros_like(deps), deps, m)
    assert np.allclose(got, hooke_stress(deps, m), rtol=1e-14)


def test_tangent_matches_finite_differences():
    rng = np.random.default_rng(3)
    for m in (MaterialParams(lam=1.0, mu=1.0, alpha=0.5, beta=1.0),
              MaterialParams(lam=2.0, mu=0.7, alpha=2.0, beta=0.6),
              MaterialParams(lam=0.01, mu=0.01, alpha=0.1, beta=0.1)):
        eps = admissible_strains(50, m, frac=0.6, rng=rng)
        deps = random_tensors(50, rng=rng)
        nrm = np.sqrt(ddot(eps, eps))
        h = (1e-6 * nrm / np.sqrt(ddot(deps, deps)))[..., None]
        fd = (stress_sl(eps + h * deps, m) - stress_sl(eps - h * deps, m)) / (2 * h)
        an = tangent_sl(eps, deps, m)
        scale = np.abs(fd).max()
        assert np.allclose(an, fd, rtol=1e-6, atol=1e-6 * scale)


# ----------------------------------------------------------------------
# degradation
# ----------------------------------------------------------------------

def test_degradation():
    assert degradation(1.0, 0.0) == 1.0
    assert degradation(0.0, 1e-8) == 1e-8
    phi = np.linspace(0, 1, 11)
    assert np.allclose(degradation(phi, 0.1), 0.9 * phi ** 2 + 0.1)
