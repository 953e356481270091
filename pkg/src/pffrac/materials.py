"""Material model: degradation, crack-energy densities, stress splitting.

Symmetric 2x2 tensors are stored in Voigt order ``(xx, yy, xy)`` with the
tensor (not engineering) shear component; double contractions therefore use
the metric ``diag(1, 1, 2)``.  All tangent operators freeze the max/positive
part branches at the evaluation point (generalized derivatives), matching
the semismooth Newton treatment in the solver.

Units: stresses in MPa, lengths in mm, energy release rate in N/mm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

IDENTITY_VOIGT = np.array([1.0, 1.0, 0.0])
CONTRACTION_WEIGHTS = np.array([1.0, 1.0, 2.0])

CRACK_ENERGY_KINDS = ("wu", "at1", "at2")
SPLIT_KINDS = ("amor_mixed", "none")
POSITIVE_PARTS = ("spectral", "componentwise")


class MaterialError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Elastic constants
# ---------------------------------------------------------------------------

def lame_from_E_nu(E, nu):
    """Lame coefficients (mu, lam) from Young's modulus and Poisson ratio."""
    if E <= 0:
        raise MaterialError("E must be positive")
    if not 0 < nu < 0.5:
        raise MaterialError(f"nu must lie in (0, 0.5), got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def bulk_from_lame(mu, lam):
    return lam + 2.0 * mu / 3.0


def nu_from_lame(mu, lam):
    return lam / (2.0 * (lam + mu))


def E_from_lame(mu, lam):
    return mu * (3.0 * lam + 2.0 * mu) / (lam + mu)


@dataclass(frozen=True)
class MaterialParams:
    """Full parameter set of the coupled model.

    ``E``/``nu`` are reported values; the solver uses ``mu``/``lam``
    directly.  Consistency of the two descriptions is enforced to 0.5%
    (published tables round aggressively near the incompressible limit).
    """

    E: float
    nu: float
    mu: float
    lam: float
    K: float
    gc: float
    kappa: float
    eps: float

    def __post_init__(self):
        if min(self.mu, self.lam, self.gc, self.eps) <= 0:
            raise MaterialError("mu, lam, gc, eps must be positive")
        if not 0 < self.kappa < 1:
            raise MaterialError("kappa must lie in (0, 1)")
        if not 0 < self.nu < 0.5:
            raise MaterialError("nu must lie in (0, 0.5)")
        E_chk = E_from_lame(self.mu, self.lam)
        nu_chk = nu_from_lame(self.mu, self.lam)
        if abs(E_chk - self.E) > 5e-3 * self.E or abs(nu_chk - self.nu) > 5e-3 * self.nu:
            raise MaterialError(
                f"(E, nu)=({self.E}, {self.nu}) inconsistent with "
                f"(mu, lam)=({self.mu}, {self.lam}): implied "
                f"({E_chk:.6g}, {nu_chk:.6g})"
            )

    @classmethod
    def from_E_nu(cls, E, nu, gc, kappa, eps):
        mu, lam = lame_from_E_nu(E, nu)
        return cls(E, nu, mu, lam, bulk_from_lame(mu, lam), gc, kappa, eps)

    @classmethod
    def from_lame(cls, mu, lam, gc, kappa, eps, E=None, nu=None):
        E = E_from_lame(mu, lam) if E is None else E
        nu = nu_from_lame(mu, lam) if nu is None else nu
        return cls(E, nu, mu, lam, bulk_from_lame(mu, lam), gc, kappa, eps)


# ---------------------------------------------------------------------------
# Degradation and crack energy
# ---------------------------------------------------------------------------

def degradation(phi, kappa):
    """g(phi) = (1 - kappa) * phi^2 + kappa."""
    return (1.0 - kappa) * np.square(phi) + kappa


def degradation_deriv(phi, kappa):
    return 2.0 * (1.0 - kappa) * np.asarray(phi)


def crack_energy_density(kind, phi, grad_phi, gc, eps):
    """Crack surface energy density of the chosen functional.

    ``grad_phi`` has shape (..., 2).
    """
    phi = np.asarray(phi, dtype=float)
    g2 = np.sum(np.square(np.asarray(grad_phi, dtype=float)), axis=-1)
    omphi = 1.0 - phi
    if kind == "wu":
        return (gc / math.pi) * ((2.0 * omphi - omphi**2) / eps + eps * g2)
    if kind == "at2":
        return 0.5 * gc * (omphi**2 / eps + eps * g2)
    if kind == "at1":
        return 0.375 * gc * (omphi / eps + eps * g2)
    raise MaterialError(f"unknown crack energy kind '{kind}'")


def crack_residual_coefficients(kind, gc, eps):
    """Coefficients of the phi-equation's crack terms.

    The weak crack contribution is
    ``(c_lin * phi + c_const, psi) + c_grad * (grad phi, grad psi)``,
    i.e. the phi-derivative of :func:`crack_energy_density`.
    """
    if kind == "wu":
        return -2.0 * gc / (math.pi * eps), 0.0, 2.0 * gc * eps / math.pi
    if kind == "at2":
        return gc / eps, -gc / eps, gc * eps
    if kind == "at1":
        return 0.0, -3.0 * gc / (8.0 * eps), 0.75 * gc * eps
    raise MaterialError(f"unknown crack energy kind '{kind}'")


# ---------------------------------------------------------------------------
# Positive parts and the volumetric-deviatoric split
# ---------------------------------------------------------------------------

def smooth_max(x, delta):
    """C^1 ramp (x + sqrt(x^2 + delta^2))/2; exact max(x, 0) for delta = 0."""
    x = np.asarray(x, dtype=float)
    if delta == 0.0:
        return np.maximum(x, 0.0)
    return 0.5 * (x + np.sqrt(x * x + delta * delta))


def smooth_max_deriv(x, delta):
    """Derivative of :func:`smooth_max`; closes from the tension side at 0."""
    x = np.asarray(x, dtype=float)
    if delta == 0.0:
        return (x >= 0).astype(float)
    return 0.5 * (1.0 + x / np.sqrt(x * x + delta * delta))


def positive_part_spectral(E, smoothing=0.0):
    """Spectral positive part of symmetric 2x2 tensors in Voigt form.

    Returns ``(Ep, P)`` where ``P = dEp/dE`` (shape (..., 3, 3)).  With
    ``smoothing = 0`` the derivative is branch-frozen (tension side at the
    kink); a positive ``smoothing`` width replaces the eigenvalue ramps by
    their C^1 regularization, which perturbs values only within an
    O(smoothing) band around the kinks.
    """
    E = np.asarray(E, dtype=float)
    a, b, c = E[..., 0], E[..., 1], E[..., 2]
    m = 0.5 * (a + b)
    d = 0.5 * (a - b)
    r = np.sqrt(d * d + c * c)
    lam1, lam2 = m + r, m - r
    s1, s2 = smooth_max(lam1, smoothing), smooth_max(lam2, smoothing)
    H1 = smooth_max_deriv(lam1, smoothing)
    H2 = smooth_max_deriv(lam2, smoothing)

    scale = 1.0 + np.abs(a) + np.abs(b) + np.abs(c)
    degen = r <= 1e-14 * scale

    # robust first eigenvector (lam1): pick the larger of the two candidates
    use_a = d >= 0
    vx = np.where(use_a, d + r, c)
    vy = np.where(use_a, c, r - d)
    nrm = np.hypot(vx, vy)
    nrm = np.where(nrm == 0, 1.0, nrm)
    ct, st = vx / nrm, vy / nrm

    cc, ss, cs = ct * ct, st * st, ct * st
    out1 = np.stack([cc, ss, cs], axis=-1)
    in1 = np.stack([cc, ss, 2 * cs], axis=-1)
    out2 = np.stack([ss, cc, -cs], axis=-1)
    in2 = np.stack([ss, cc, -2 * cs], axis=-1)
    out3 = np.stack([-2 * cs, 2 * cs, cc - ss], axis=-1)
    in3 = np.stack([-cs, cs, cc - ss], axis=-1)

    Ep = s1[..., None] * out1 + s2[..., None] * out2

    # divided difference (s1 - s2)/(lam1 - lam2); average slope when the
    # eigenvalues collapse (cancellation-safe)
    near = r <= 1e-7 * scale
    safe_r = np.where(near, 1.0, r)
    beta = np.where(near, 0.5 * (H1 + H2), (s1 - s2) / (2.0 * safe_r))
    P = (
        H1[..., None, None] * out1[..., :, None] * in1[..., None, :]
        + H2[..., None, None] * out2[..., :, None] * in2[..., None, :]
        + beta[..., None, None] * out3[..., :, None] * in3[..., None, :]
    )

    if np.any(degen):
        Hm = smooth_max_deriv(m, smoothing)
        sm = smooth_max(m, smoothing)
        Ep_deg = sm[..., None] * IDENTITY_VOIGT + Hm[..., None] * (
            E - m[..., None] * IDENTITY_VOIGT
        )
        Ep = np.where(degen[..., None], Ep_deg, Ep)
        eye = np.broadcast_to(np.eye(3), P.shape)
        P = np.where(degen[..., None, None], Hm[..., None, None] * eye, P)
    return Ep, P


def positive_part_componentwise(E, smoothing=0.0):
    """Entry-wise clamp of negative Voigt components (config alternative)."""
    E = np.asarray(E, dtype=float)
    Ep = smooth_max(E, smoothing)
    H = smooth_max_deriv(E, smoothing)
    P = np.zeros(E.shape + (3,))
    for i in range(3):
        P[..., i, i] = H[..., i]
    return Ep, P


def positive_part(E, method="spectral", smoothing=0.0):
    if method == "spectral":
        return positive_part_spectral(E, smoothing)
    if method == "componentwise":
        return positive_part_componentwise(E, smoothing)
    raise MaterialError(f"unknown positive-part method '{method}'")


def stress_split(E, p, mu, method="spectral", smoothing=0.0, p_smoothing=0.0):
    """Tension/compression stress split with pressure.

    sigma_plus  = mu*max(0, tr E+)*I + 2mu*(E+ - tr(E+)/3 * I) + max(p,0)*I
    sigma_minus = mu*(tr E+ - max(0, tr E+))*I + (p - max(p,0))*I

    ``E`` in Voigt form (..., 3); ``p`` scalar field broadcastable to the
    leading shape.  Returns ``(sigma_plus, sigma_minus)``.
    """
    parts = stress_split_with_tangents(E, p, mu, method, smoothing, p_smoothing)
    return parts[0], parts[1]


def stress_split_with_tangents(E, p, mu, method="spectral", smoothing=0.0,
                               p_smoothing=0.0):
    """Split stresses plus consistent derivatives.

    Returns ``(sp, sm, dsp_dE, dsm_dE, dsp_dp, dsm_dp)`` with ``dsp_dE`` of
    shape (..., 3, 3) and ``dsp_dp`` of shape (..., 3).  Zero smoothing
    keeps the exact branch-frozen forms; positive widths regularize the
    eigenvalue and pressure ramps (solver robustness knob).
    """
    E = np.asarray(E, dtype=float)
    p = np.asarray(p, dtype=float)
    Ep, P = positive_part(E, method, smoothing)
    trEp = Ep[..., 0] + Ep[..., 1]
    trp = np.maximum(trEp, 0.0)
    H0 = (trEp >= 0).astype(float)
    pp = smooth_max(p, p_smoothing)
    Hp = smooth_max_deriv(p, p_smoothing)

    I = IDENTITY_VOIGT
    dev = Ep - (trEp[..., None] / 3.0) * I
    sp = (mu * trp + pp)[..., None] * I + 2.0 * mu * dev
    sm = (mu * (trEp - trp) + (p - pp))[..., None] * I

    tr_row = P[..., 0, :] + P[..., 1, :]  # d(tr E+)/dE
    outer_tr = I[:, None] * tr_row[..., None, :]
    dsp_dE = mu * H0[..., None, None] * outer_tr + 2.0 * mu * (
        P - outer_tr / 3.0
    )
    dsm_dE = mu * (1.0 - H0)[..., None, None] * outer_tr
    dsp_dp = Hp[..., None] * I
    dsm_dp = (1.0 - Hp)[..., None] * I
    return sp, sm, dsp_dE, dsm_dE, dsp_dp, dsm_dp


def isotropic_stress(E, mu, lam):
    """Undecomposed sigma(u) = 2 mu E + lam tr(E) I, Voigt form."""
    E = np.asarray(E, dtype=float)
    trE = E[..., 0] + E[..., 1]
    return 2.0 * mu * E + lam * trE[..., None] * IDENTITY_VOIGT


def contract(sig, E):
    """Frobenius double contraction of Voigt tensors (tensor shear)."""
    return np.einsum("...i,i,...i->...", sig, CONTRACTION_WEIGHTS, E)
