"""Constitutive model for ferroelectric switching with remanent polarization.

The stored energy density splits into a reversible part, quadratic in the
elastic strain S - S_r(P) and the reversible dielectric displacement D - P,
and a saturating hardening part depending only on the remanent polarization
magnitude |P|:

    psi(S, D, P) = 1/2 (S - S_r):C:(S - S_r) - (S - S_r):h(P).(D - P)
                   + 1/2 (D - P).B.(D - P) + psi_hard(|P|)

C is the stiffness at constant dielectric displacement, B the inverse
permittivity at constant strain, and h(P) the piezoelectric coupling in
energy form, scaled linearly with |P|/P0 and oriented along P (the coupling
vanishes in the unpoled state).  The remanent strain follows the polarization
one-to-one through the volume-preserving quadratic map of McMeeking-Landis
type.  Rate-independent dissipation is modeled by E0 |dP| and regularized
quadratically below |dP| = eps so the incremental problem becomes smooth.

Two hardening laws are available: a power law with shape parameter m and a
logarithmic law without shape parameter.  Both diverge as |P| -> P0; an
optional regularization caps the derivative beyond |P| = P0 - eps_h.

All evaluation routines are pure and accept batches: S of shape (n, 3, 3),
D and P of shape (n, 3).  Consistent first and second derivatives are
hand-coded and verified against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConstitutiveState",
    "EnergyFormTensors",
    "Material",
    "MaterialDomainError",
    "MaterialParams",
    "PointDriverError",
    "build_tensors",
    "d2phi_eps",
    "d2psi",
    "dphi_eps",
    "dpsi",
    "phi_eps",
    "psi",
    "psi_i_prime_regularized",
    "remanent_strain",
    "run_pointwise_driver",
]

EYE3 = np.eye(3)


class MaterialDomainError(ValueError):
    """Remanent polarization at or beyond saturation with no regularization."""


class PointDriverError(RuntimeError):
    """Newton failure in the uniform-field constitutive driver."""


@dataclass
class MaterialParams:
    """Engineering constants; SI units throughout.

    ``permittivity_flavor`` states whether ``permittivity`` is measured at
    constant strain ('strain') or at constant stress ('stress'); in the
    latter case the coupling correction is subtracted during tensor setup.
    ``d15`` defaults to ``d33`` when not given.  ``eps_dissipation`` defaults
    to 1e-4 * saturation_polarization; ``eps_hardening`` = 0 disables the
    hardening regularization.
    """

    youngs_modulus: float
    poisson_ratio: float
    permittivity: float
    d31: float
    d33: float
    coercive_field: float
    saturation_polarization: float
    saturation_strain: float
    hardening_h0: float
    shape_m: float = 1.4
    d15: float | None = None
    permittivity_flavor: str = "strain"
    hardening_law: str = "power"
    eps_dissipation: float | None = None
    eps_hardening: float = 0.0
    poling_axis: tuple = (0.0, 0.0, 1.0)
    # Mollification radius for the direction-dependent part of the coupling;
    # the |P|-linear scaling makes the energy non-smooth at P = 0, which
    # stalls Newton exactly at switching onset.  The radial factor 1/|P|^2 is
    # replaced by 1/(|P|^2 + r_c^2), changing the coupling only at order
    # (r_c/|P|)^2 away from the origin.
    coupling_smoothing: float | None = None

    def __post_init__(self):
        if self.youngs_modulus <= 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 1/2)")
        for name in ("permittivity", "coercive_field",
                     "saturation_polarization", "saturation_strain",
                     "hardening_h0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hardening_law not in ("power", "log"):
            raise ValueError("hardening_law must be 'power' or 'log'")
        if self.hardening_law == "power":
            if self.shape_m <= 1.0 or self.shape_m == 2.0:
                raise ValueError("shape parameter m must satisfy m > 1, m != 2")
        if self.permittivity_flavor not in ("strain", "stress"):
            raise ValueError("permittivity_flavor must be 'strain' or 'stress'")
        if self.d15 is None:
            self.d15 = self.d33
        if self.eps_dissipation is None:
            self.eps_dissipation = 1e-4 * self.saturation_polarization
        if self.eps_dissipation <= 0:
            raise ValueError("eps_dissipation must be positive")
        if self.eps_hardening < 0:
            raise ValueError("eps_hardening must be non-negative")
        if self.coupling_smoothing is None:
            self.coupling_smoothing = 1e-3 * self.saturation_polarization
        if self.coupling_smoothing <= 0:
            raise ValueError("coupling_smoothing must be positive")

    @property
    def lame(self):
        nu = self.poisson_ratio
        mu = self.youngs_modulus / (2.0 * (1.0 + nu))
        lam = self.youngs_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return lam, mu


@dataclass(frozen=True)
class EnergyFormTensors:
    """Energy-form material tensors derived from the engineering constants.

    ``stiffness_d``: 4th-order stiffness at constant dielectric displacement;
    ``coupling_sat``: energy-form coupling at saturation about the poling
    axis, index order (field, strain, strain); ``beta_s``: inverse
    permittivity at constant strain.  The isotropic stiffness ``stiffness_e``
    and stress-charge coupling ``e_sat`` are kept for reference solutions.
    """

    stiffness_d: np.ndarray
    coupling_sat: np.ndarray
    beta_s: np.ndarray
    stiffness_e: np.ndarray
    e_sat: np.ndarray
    eps_s: np.ndarray


def isotropic_stiffness(lam: float, mu: float) -> np.ndarray:
    """Isotropic 4th-order stiffness tensor from the Lame constants."""
    I = EYE3
    return (lam * np.einsum("ij,kl->ijkl", I, I)
            + mu * (np.einsum("ik,jl->ijkl", I, I)
                    + np.einsum("il,jk->ijkl", I, I)))


def piezo_d_tensor(d31: float, d33: float, d15: float,
                   axis: np.ndarray) -> np.ndarray:
    """Transversely isotropic strain-charge coupling about a unit axis."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    P = EYE3 - np.outer(a, a)
    d = (d33 * np.einsum("k,i,j->kij", a, a, a)
         + d31 * np.einsum("k,ij->kij", a, P)
         + 0.5 * d15 * (np.einsum("ki,j->kij", P, a)
                        + np.einsum("kj,i->kij", P, a)))
    return d


def build_tensors(params: MaterialParams) -> EnergyFormTensors:
    """Convert engineering constants to the energy-form tensors.

    Chain: isotropic stiffness from (Y, nu); e = d : C_E; permittivity at
    constant strain (subtracting d C_E d^T if the constant-stress value was
    given); beta = inverse permittivity; coupling h = beta . e; stiffness at
    constant dielectric displacement C_D = C_E + e^T beta e.  Raises if a
    resulting quadratic form fails positive definiteness.
    """
    lam, mu = params.lame
    c_e = isotropic_stiffness(lam, mu)
    d = piezo_d_tensor(params.d31, params.d33, params.d15,
                       np.asarray(params.poling_axis))
    e_sat = np.einsum("kmn,mnij->kij", d, c_e)
    if params.permittivity_flavor == "stress":
        eps_s = params.permittivity * EYE3 - np.einsum(
            "kpq,lpq->kl", e_sat, d)
    else:
        eps_s = params.permittivity * EYE3
    eig = np.linalg.eigvalsh(eps_s)
    if eig.min() <= 0:
        raise ValueError(
            "permittivity at constant strain is not positive definite; "
            "inconsistent coupling constants")
    beta_s = np.linalg.inv(eps_s)
    h_sat = np.einsum("kl,lij->kij", beta_s, e_sat)
    c_d = c_e + np.einsum("mij,mn,nkl->ijkl", e_sat, beta_s, e_sat)

    rng = np.random.default_rng(1234)
    for _ in range(64):
        s = rng.standard_normal((3, 3))
        s = 0.5 * (s + s.T)
        if np.einsum("ij,ijkl,kl->", s, c_d, s) <= 0:
            raise ValueError("stiffness at constant D is not positive definite")
    return EnergyFormTensors(stiffness_d=c_d, coupling_sat=h_sat,
                             beta_s=beta_s, stiffness_e=c_e, e_sat=e_sat,
                             eps_s=eps_s)


@dataclass
class ConstitutiveState:
    """One material point: strain, dielectric displacement, polarization."""

    S: np.ndarray
    D: np.ndarray
    Pi: np.ndarray


def remanent_strain(Pi: np.ndarray, params: MaterialParams) -> np.ndarray:
    """Volume-preserving remanent strain map, batched over leading axes."""
    Pi = np.asarray(Pi, dtype=float)
    a0 = params.saturation_strain / (2.0 * params.saturation_polarization ** 2)
    outer = np.einsum("...i,...j->...ij", Pi, Pi)
    norm2 = np.einsum("...i,...i->...", Pi, Pi)
    return a0 * (3.0 * outer - norm2[..., None, None] * EYE3)


def _remanent_strain_grad(Pi: np.ndarray, params: MaterialParams):
    """W[..., i, j, m] = d S_r,ij / d P_m (linear in P)."""
    a0 = params.saturation_strain / (2.0 * params.saturation_polarization ** 2)
    n = Pi.shape[:-1]
    W = np.zeros(n + (3, 3, 3))
    W += 3.0 * np.einsum("im,...j->...ijm", EYE3, Pi)
    W += 3.0 * np.einsum("jm,...i->...ijm", EYE3, Pi)
    W -= 2.0 * np.einsum("ij,...m->...ijm", EYE3, Pi)
    return a0 * W


def _remanent_strain_hess() -> np.ndarray:
    """Constant X[i, j, m, n] with d2 S_r,ij / dP_m dP_n = a0 * X."""
    X = (3.0 * np.einsum("im,jn->ijmn", EYE3, EYE3)
         + 3.0 * np.einsum("jm,in->ijmn", EYE3, EYE3)
         - 2.0 * np.einsum("ij,mn->ijmn", EYE3, EYE3))
    return X


# ---------------------------------------------------------------------------
# Regularized dissipation
# ---------------------------------------------------------------------------

def phi_eps(dPi: np.ndarray, params: MaterialParams) -> np.ndarray:
    """Regularized dissipation increment: quadratic below |dP| = eps."""
    dPi = np.asarray(dPi, dtype=float)
    e0, eps = params.coercive_field, params.eps_dissipation
    n = np.linalg.norm(dPi, axis=-1)
    return np.where(n >= eps, e0 * (n - 0.5 * eps), 0.5 * e0 * n ** 2 / eps)


def dphi_eps(dPi: np.ndarray, params: MaterialParams) -> np.ndarray:
    """Gradient of the regularized dissipation; bounded by E0 in norm."""
    dPi = np.asarray(dPi, dtype=float)
    e0, eps = params.coercive_field, params.eps_dissipation
    n = np.linalg.norm(dPi, axis=-1)
    scale = np.where(n >= eps, e0 / np.maximum(n, eps), e0 / eps)
    return scale[..., None] * dPi


def d2phi_eps(dPi: np.ndarray, params: MaterialParams) -> np.ndarray:
    """Hessian of the regularized dissipation (continuous across the branch)."""
    dPi = np.asarray(dPi, dtype=float)
    e0, eps = params.coercive_field, params.eps_dissipation
    n = np.linalg.norm(dPi, axis=-1)
    inner = n < eps
    safe = np.maximum(n, eps)
    unit = dPi / safe[..., None]
    outer = np.einsum("...i,...j->...ij", unit, unit)
    H_out = (e0 / safe)[..., None, None] * (EYE3 - outer)
    H_in = (e0 / eps) * np.broadcast_to(EYE3, dPi.shape[:-1] + (3, 3))
    return np.where(inner[..., None, None], H_in, H_out)


# ---------------------------------------------------------------------------
# Hardening laws (radial functions of r = |P|)
# ---------------------------------------------------------------------------

def _hardening_radial(r: np.ndarray, params: MaterialParams, order: int = 2):
    """Value, first and second radial derivative of the hardening potential.

    Applies the derivative clamp beyond r = P0 - eps_h when eps_hardening is
    active; otherwise raises on r >= P0 (the potential diverges there).
    """
    p0 = params.saturation_polarization
    h0 = params.hardening_h0
    eps_h = params.eps_hardening
    r = np.asarray(r, dtype=float)
    if eps_h <= 0.0 and np.any(r >= p0):
        raise MaterialDomainError(
            f"|P| reached saturation P0={p0:g} (max |P| = {r.max():g}); "
            "enable eps_hardening or reduce the load step")

    r_in = np.minimum(r, p0 - eps_h) if eps_h > 0 else r

    if params.hardening_law == "power":
        m = params.shape_m
        u = 1.0 - r_in / p0
        c_val = h0 * p0 ** 2 / ((m - 1.0) * (m - 2.0))
        val = c_val * u ** (2.0 - m) - h0 * p0 ** 2 / (m - 1.0) * (r_in / p0)
        g = h0 * p0 / (m - 1.0) * (u ** (1.0 - m) - 1.0)
        gp = h0 * u ** (-m)
        g0 = h0  # limit of g(r)/r as r -> 0
    else:
        val = 0.5 * h0 * p0 * ((p0 + r_in) * np.log(p0 + r_in)
                               + (p0 - r_in) * np.log(p0 - r_in)
                               - 2.0 * p0 * np.log(p0))
        g = 0.5 * h0 * p0 * np.log((p0 + r_in) / (p0 - r_in))
        gp = h0 * p0 ** 2 / (p0 ** 2 - r_in ** 2)
        g0 = h0

    if eps_h > 0:
        rc = p0 - eps_h
        beyond = r > rc
        if np.any(beyond):
            g_c = np.where(beyond, g, 0.0)
            slope = g_c / rc
            val = np.where(beyond,
                           val + 0.5 * slope * (r ** 2 - rc ** 2), val)
            g = np.where(beyond, slope * r, g)
            gp = np.where(beyond, slope, gp)
    return val, g, gp, g0


def psi_i_prime_regularized(Pi: np.ndarray,
                            params: MaterialParams) -> np.ndarray:
    """Clamped hardening derivative; requires eps_hardening > 0."""
    if params.eps_hardening <= 0:
        raise ValueError("psi_i_prime_regularized requires eps_hardening > 0")
    Pi = np.asarray(Pi, dtype=float)
    r = np.linalg.norm(Pi, axis=-1)
    _, g, _, g0 = _hardening_radial(r, params)
    ratio = np.where(r > 1e-12 * params.saturation_polarization,
                     g / np.maximum(r, 1e-300), g0)
    return ratio[..., None] * Pi


# ---------------------------------------------------------------------------
# Coupling tensor h(P) and its polarization derivatives
# ---------------------------------------------------------------------------

class Material:
    """Bundles parameters and derived tensors; all evaluations are pure."""

    def __init__(self, params: MaterialParams,
                 tensors: EnergyFormTensors | None = None):
        self.params = params
        self.tensors = tensors if tensors is not None else build_tensors(params)
        lam, mu = params.lame
        d31, d33, d15 = params.d31, params.d33, params.d15
        # coupling structure e(a) = c1 a delta + c2 (delta a + delta a)
        #                         + c3 a a a   for a unit axis a
        self._c1 = lam * (d33 + 2.0 * d31) + 2.0 * mu * d31
        self._c2 = mu * d15
        self._c3 = 2.0 * mu * (d33 - d31 - d15)
        self._r_floor = 1e-12 * params.saturation_polarization

    # -- coupling ----------------------------------------------------------

    def _inv_r2(self, Pi: np.ndarray):
        """Mollified 1/|P|^2 used in the direction-dependent coupling part."""
        r2 = np.einsum("...i,...i->...", Pi, Pi)
        return 1.0 / (r2 + self.params.coupling_smoothing ** 2)

    def _coupling_raw(self, Pi: np.ndarray):
        """F[..., k, i, j] with h = beta . F; linear part plus radial part."""
        p0 = self.params.saturation_polarization
        batch = Pi.shape[:-1]
        F = np.zeros(batch + (3, 3, 3))
        F += self._c1 / p0 * np.einsum("...k,ij->...kij", Pi, EYE3)
        F += self._c2 / p0 * (np.einsum("ki,...j->...kij", EYE3, Pi)
                              + np.einsum("kj,...i->...kij", EYE3, Pi))
        w = self._inv_r2(Pi)
        F += (self._c3 / p0) * np.einsum(
            "...k,...i,...j->...kij", Pi, Pi, Pi) * w[..., None, None, None]
        return F

    def _coupling_raw_grad(self, Pi: np.ndarray):
        """dF[..., k, i, j, m] of the mollified coupling."""
        p0 = self.params.saturation_polarization
        batch = Pi.shape[:-1]
        dF = np.zeros(batch + (3, 3, 3, 3))
        dF += self._c1 / p0 * np.einsum("km,ij->kijm", EYE3, EYE3)
        dF += self._c2 / p0 * (np.einsum("ki,jm->kijm", EYE3, EYE3)
                               + np.einsum("kj,im->kijm", EYE3, EYE3))
        w = self._inv_r2(Pi)
        t = np.einsum("km,...i,...j->...kijm", EYE3, Pi, Pi)
        t += np.einsum("im,...k,...j->...kijm", EYE3, Pi, Pi)
        t += np.einsum("jm,...k,...i->...kijm", EYE3, Pi, Pi)
        quad = np.einsum("...k,...i,...j,...m->...kijm", Pi, Pi, Pi, Pi)
        dF += (self._c3 / p0) * (
            t * w[..., None, None, None, None]
            - 2.0 * quad * (w ** 2)[..., None, None, None, None])
        return dF

    def _coupling_raw_hess(self, Pi: np.ndarray):
        """d2F[..., k, i, j, m, n] of the mollified coupling (zero at P = 0)."""
        p0 = self.params.saturation_polarization
        batch = Pi.shape[:-1]
        d2F = np.zeros(batch + (3, 3, 3, 3, 3))
        w = self._inv_r2(Pi)
        I = EYE3
        t1 = (np.einsum("km,in,...j->...kijmn", I, I, Pi)
              + np.einsum("km,jn,...i->...kijmn", I, I, Pi)
              + np.einsum("im,kn,...j->...kijmn", I, I, Pi)
              + np.einsum("im,jn,...k->...kijmn", I, I, Pi)
              + np.einsum("jm,kn,...i->...kijmn", I, I, Pi)
              + np.einsum("jm,in,...k->...kijmn", I, I, Pi))
        t1 = t1 * w[..., None, None, None, None, None]
        tsum = (np.einsum("km,...i,...j->...kijm", I, Pi, Pi)
                + np.einsum("im,...k,...j->...kijm", I, Pi, Pi)
                + np.einsum("jm,...k,...i->...kijm", I, Pi, Pi))
        t2 = -2.0 * np.einsum("...kijm,...n->...kijmn", tsum, Pi) \
            * (w ** 2)[..., None, None, None, None, None]
        quad_grad = (np.einsum("kn,...i,...j,...m->...kijmn", I, Pi, Pi, Pi)
                     + np.einsum("in,...k,...j,...m->...kijmn", I, Pi, Pi, Pi)
                     + np.einsum("jn,...k,...i,...m->...kijmn", I, Pi, Pi, Pi)
                     + np.einsum("mn,...k,...i,...j->...kijmn", I, Pi, Pi, Pi))
        t3 = -2.0 * quad_grad * (w ** 2)[..., None, None, None, None, None]
        quad = np.einsum("...k,...i,...j,...m,...n->...kijmn",
                         Pi, Pi, Pi, Pi, Pi)
        t4 = 8.0 * quad * (w ** 3)[..., None, None, None, None, None]
        d2F += (self._c3 / p0) * (t1 + t2 + t3 + t4)
        return d2F

    def _coupling_hess_contracted(self, Pi, e_el, bp):
        """C[..., m, n] = bp_k e_ij d2F[..., k, i, j, m, n], in closed form.

        Contracting the rank-5 coupling Hessian with the elastic strain and
        the beta-weighted reversible dielectric displacement analytically
        avoids materializing the (n, 3, 3, 3, 3, 3) array in assembly.
        """
        w = self._inv_r2(Pi)
        ePi = np.einsum("...ij,...j->...i", e_el, Pi)
        bpPi = np.einsum("...k,...k->...", bp, Pi)
        s1 = np.einsum("...i,...i->...", ePi, Pi)
        I = EYE3
        t1 = (2.0 * np.einsum("...m,...n->...mn", bp, ePi)
              + 2.0 * np.einsum("...m,...n->...mn", ePi, bp)
              + 2.0 * bpPi[..., None, None] * e_el) \
            * w[..., None, None]
        tsum = (bp * s1[..., None] + 2.0 * ePi * bpPi[..., None])
        t2 = -2.0 * np.einsum("...m,...n->...mn", tsum, Pi) \
            * (w ** 2)[..., None, None]
        t3 = -2.0 * (w ** 2)[..., None, None] * (
            s1[..., None, None] * np.einsum("...m,...n->...mn", Pi, bp)
            + 2.0 * bpPi[..., None, None]
            * np.einsum("...m,...n->...mn", Pi, ePi)
            + (bpPi * s1)[..., None, None] * I)
        t4 = 8.0 * (w ** 3 * bpPi * s1)[..., None, None] \
            * np.einsum("...m,...n->...mn", Pi, Pi)
        return (self._c3 / self.params.saturation_polarization) \
            * (t1 + t2 + t3 + t4)

    def coupling(self, Pi: np.ndarray) -> np.ndarray:
        """h(P)[..., k, i, j]: energy-form coupling at polarization P."""
        Pi = np.asarray(Pi, dtype=float)
        return np.einsum("kl,...lij->...kij", self.tensors.beta_s,
                         self._coupling_raw(Pi))

    # -- energy and derivatives --------------------------------------------

    def _kinematics(self, S, D, Pi):
        S = np.asarray(S, dtype=float)
        D = np.asarray(D, dtype=float)
        Pi = np.asarray(Pi, dtype=float)
        e_el = S - remanent_strain(Pi, self.params)
        p = D - Pi
        return S, D, Pi, e_el, p

    def psi(self, S, D, Pi):
        """Free energy density, batched."""
        S, D, Pi, e_el, p = self._kinematics(S, D, Pi)
        c = self.tensors.stiffness_d
        B = self.tensors.beta_s
        h = self.coupling(Pi)
        r = np.linalg.norm(Pi, axis=-1)
        val, _, _, _ = _hardening_radial(r, self.params)
        out = 0.5 * np.einsum("...ij,ijkl,...kl->...", e_el, c, e_el)
        out -= np.einsum("...ij,...kij,...k->...", e_el, h, p)
        out += 0.5 * np.einsum("...k,kl,...l->...", p, B, p)
        return out + val

    def dpsi(self, S, D, Pi):
        """Stress T, electric field E, and driving force (negated gradient).

        Returns (T, E, Ehat) with T = dpsi/dS, E = dpsi/dD and
        Ehat = -dpsi/dPi.
        """
        S, D, Pi, e_el, p = self._kinematics(S, D, Pi)
        c = self.tensors.stiffness_d
        B = self.tensors.beta_s
        h = self.coupling(Pi)
        T = np.einsum("ijkl,...kl->...ij", c, e_el) \
            - np.einsum("...k,...kij->...ij", p, h)
        E = -np.einsum("...kij,...ij->...k", h, e_el) \
            + np.einsum("kl,...l->...k", B, p)
        W = _remanent_strain_grad(Pi, self.params)
        dh = np.einsum("kl,...lijm->...kijm", self.tensors.beta_s,
                       self._coupling_raw_grad(Pi))
        r = np.linalg.norm(Pi, axis=-1)
        _, g, _, g0 = _hardening_radial(r, self.params)
        ratio = np.where(r > self._r_floor, g / np.maximum(r, 1e-300), g0)
        grad_pi = (-np.einsum("...ij,...ijm->...m", T, W)
                   - E
                   - np.einsum("...ij,...kijm,...k->...m", e_el, dh, p)
                   + ratio[..., None] * Pi)
        return T, E, -grad_pi

    def grad_psi_pi(self, S, D, Pi):
        """dpsi/dPi (the negative of the driving force)."""
        return -self.dpsi(S, D, Pi)[2]

    def d2psi(self, S, D, Pi):
        """Hessian blocks of psi as a dict keyed by field pair.

        Keys: 'SS' (..,3,3,3,3), 'SD' (..,3,3,3) [d2/dS dD, last index D],
        'SPi' (..,3,3,3), 'DD' (..,3,3), 'DPi' (..,3,3), 'PiPi' (..,3,3).
        """
        S, D, Pi, e_el, p = self._kinematics(S, D, Pi)
        batch = Pi.shape[:-1]
        c = self.tensors.stiffness_d
        B = self.tensors.beta_s
        h = self.coupling(Pi)
        dh = np.einsum("kl,...lijm->...kijm", self.tensors.beta_s,
                       self._coupling_raw_grad(Pi))
        W = _remanent_strain_grad(Pi, self.params)
        X = _remanent_strain_hess()
        a0 = self.params.saturation_strain / (
            2.0 * self.params.saturation_polarization ** 2)

        T = np.einsum("ijkl,...kl->...ij", c, e_el) \
            - np.einsum("...k,...kij->...ij", p, h)

        p_dh = np.einsum("...k,...kijm->...ijm", p, dh)
        e_dh = np.einsum("...kijm,...ij->...km", dh, e_el)

        SS = np.broadcast_to(c, batch + (3, 3, 3, 3))
        SD = np.broadcast_to(-np.einsum("...kij->...ijk", h),
                             batch + (3, 3, 3))
        SPi = (-np.einsum("ijkl,...klm->...ijm", c, W)
               + np.einsum("...mij->...ijm", h)
               - p_dh)
        DD = np.broadcast_to(B, batch + (3, 3))
        DPi = (-e_dh
               + np.einsum("...kij,...ijm->...km", h, W)
               - np.broadcast_to(B, batch + (3, 3)))

        r = np.linalg.norm(Pi, axis=-1)
        _, g, gp, g0 = _hardening_radial(r, self.params)
        ratio = np.where(r > self._r_floor, g / np.maximum(r, 1e-300), g0)
        unit = Pi / np.maximum(r, 1e-300)[..., None]
        unit = np.where((r > self._r_floor)[..., None], unit, 0.0)
        outer = np.einsum("...m,...n->...mn", unit, unit)
        iso = ratio[..., None, None] * (EYE3 - outer) \
            + np.where((r > self._r_floor), gp, g0)[..., None, None] * outer

        # d/dPi_n of  -T : W_m
        termA = (-np.einsum("...ijn,...ijm->...mn", SPi, W)
                 - a0 * np.einsum("...ij,ijmn->...mn", T, X))
        # d/dPi_n of  -E_m
        termB = -DPi
        # d/dPi_n of the explicit coupling-derivative term; the rank-5
        # coupling Hessian enters only contracted with e and B p
        bp = np.einsum("kl,...l->...k", B, p)
        termC = (np.einsum("...ijn,...ijm->...mn", W, p_dh)
                 - self._coupling_hess_contracted(Pi, e_el, bp)
                 + np.einsum("...ij,...nijm->...mn", e_el, dh))
        PiPi = termA + termB + termC + iso
        return {"SS": SS, "SD": SD, "SPi": SPi, "DD": DD, "DPi": DPi,
                "PiPi": PiPi}


# -- spec-level convenience wrappers ----------------------------------------

def psi(state: ConstitutiveState, material: Material):
    return material.psi(state.S, state.D, state.Pi)


def dpsi(state: ConstitutiveState, material: Material):
    return material.dpsi(state.S, state.D, state.Pi)


def d2psi(state: ConstitutiveState, material: Material):
    return material.d2psi(state.S, state.D, state.Pi)


# ---------------------------------------------------------------------------
# Uniform-field constitutive driver (hysteresis oracle)
# ---------------------------------------------------------------------------

_SYM_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))


def _sym_to_mat(v):
    S = np.zeros((3, 3))
    for idx, (i, j) in enumerate(_SYM_PAIRS):
        S[i, j] = v[idx]
        S[j, i] = v[idx]
    return S


def _sym_block(H4):
    """Reduce a (3,3,3,3) Hessian to the 6x6 over independent sym entries."""
    out = np.zeros((6, 6))
    for a, (i, j) in enumerate(_SYM_PAIRS):
        for b, (k, l) in enumerate(_SYM_PAIRS):
            out[a, b] = H4[i, j, k, l] + (H4[i, j, l, k] if k != l else 0.0)
    return out


def _sym_rect(H3):
    """Reduce (3,3,3) [sym pair, vector] to (6, 3)."""
    out = np.zeros((6, 3))
    for a, (i, j) in enumerate(_SYM_PAIRS):
        out[a] = H3[i, j]
    return out


class _PointStepFailed(Exception):
    def __init__(self, norm, iters):
        self.norm = norm
        self.iters = iters


def _solve_point_step(mat: Material, S, D, Pi, Pi_prev, E_pre, stress_free,
                      tol, max_iter):
    """One incremental solve at a material point; returns state + iterations."""
    params = mat.params
    # Nondimensionalized residual blocks: the line search must not let the
    # Pa-scale stress rows veto progress on the V/m-scale field rows.
    w_stress = 1.0 / params.youngs_modulus
    w_field = 1.0 / params.coercive_field

    def unpack(x):
        if stress_free:
            return _sym_to_mat(x[:6]), x[6:9].copy(), x[9:].copy()
        return np.zeros((3, 3)), x[:3].copy(), x[3:].copy()

    def residual(S, D, Pi):
        T, E, Ehat = mat.dpsi(S, D, Pi)
        r_pi = -Ehat + dphi_eps(Pi - Pi_prev, params)
        parts = [w_field * (E - E_pre), w_field * r_pi]
        if stress_free:
            parts.insert(0, w_stress * np.array(
                [T[i, j] for i, j in _SYM_PAIRS]))
        return np.concatenate(parts)

    def jacobian(S, D, Pi):
        H = mat.d2psi(S, D, Pi)
        Hpp = H["PiPi"] + d2phi_eps(Pi - Pi_prev, params)
        if stress_free:
            # off-diagonal strain entries perturb two tensor components
            fac = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
            J = np.zeros((12, 12))
            J[:6, :6] = _sym_block(H["SS"])
            SD = _sym_rect(H["SD"])
            SP = _sym_rect(H["SPi"])
            J[:6, 6:9] = SD
            J[6:9, :6] = (SD * fac[:, None]).T
            J[:6, 9:] = SP
            J[9:, :6] = (SP * fac[:, None]).T
            J[6:9, 6:9] = H["DD"]
            J[6:9, 9:] = H["DPi"]
            J[9:, 6:9] = np.swapaxes(H["DPi"], -1, -2)
            J[9:, 9:] = Hpp
            J[:6] *= w_stress
            J[6:] *= w_field
            return J
        J = np.zeros((6, 6))
        J[:3, :3] = H["DD"]
        J[:3, 3:] = H["DPi"]
        J[3:, :3] = np.swapaxes(H["DPi"], -1, -2)
        J[3:, 3:] = Hpp
        return J * w_field

    if stress_free:
        x = np.concatenate([[S[i, j] for i, j in _SYM_PAIRS], D, Pi])
    else:
        x = np.concatenate([D, Pi])
    r = residual(*unpack(x))
    ref = max(np.linalg.norm(r), 1.0)
    iters = 0
    while np.linalg.norm(r) > tol * ref and iters < max_iter:
        J = jacobian(*unpack(x))
        dx = np.linalg.solve(J, -r)
        alpha = 1.0
        cur = np.linalg.norm(r)
        for _ in range(40):
            x_try = x + alpha * dx
            try:
                r_try = residual(*unpack(x_try))
            except MaterialDomainError:
                alpha *= 0.5
                continue
            if np.linalg.norm(r_try) <= (1.0 - 1e-4 * alpha) * cur:
                break
            alpha *= 0.5
        else:
            raise _PointStepFailed(cur, iters)
        x = x_try
        r = r_try
        iters += 1
    if np.linalg.norm(r) > tol * ref:
        raise _PointStepFailed(np.linalg.norm(r), iters)
    S, D, Pi = unpack(x)
    return S, D, Pi, iters


def run_pointwise_driver(params: MaterialParams, E_history,
                         stress_free: bool = True, initial=None,
                         tol: float = 1e-10, max_iter: int = 60,
                         max_substep_depth: int = 6):
    """Drive a single material point through a history of uniform fields.

    Solves, per step, the incremental stationarity conditions (zero stress if
    ``stress_free``, prescribed electric field, and polarization update
    balancing driving force against regularized dissipation) by Newton with
    backtracking.  A step whose Newton iteration stalls (the saturating
    hardening makes the problem very stiff near |P| -> P0) is bisected into
    sub-increments, up to ``max_substep_depth`` halvings.  Returns a list of
    records with keys E, D, Pi, S, iterations and substeps.  The pseudo-time
    scale of the history is irrelevant for the outcome apart from
    regularization effects.
    """
    mat = Material(params)
    E_history = [np.asarray(E, dtype=float).reshape(3) for E in E_history]
    if initial is None:
        S = np.zeros((3, 3))
        D = np.zeros(3)
        Pi = np.zeros(3)
        E_prev = np.zeros(3)
    else:
        S = np.asarray(initial.S, dtype=float).copy()
        D = np.asarray(initial.D, dtype=float).copy()
        Pi = np.asarray(initial.Pi, dtype=float).copy()
        E_prev = np.asarray(initial.E, dtype=float).reshape(3) \
            if hasattr(initial, "E") else np.zeros(3)

    records = []
    for step, E_target in enumerate(E_history):
        total_iters = 0
        substeps = 0

        def advance(E_from, E_to, depth):
            nonlocal S, D, Pi, total_iters, substeps
            try:
                Sn, Dn, Pin, its = _solve_point_step(
                    mat, S, D, Pi, Pi.copy(), E_to, stress_free, tol,
                    max_iter)
            except _PointStepFailed as fail:
                if depth >= max_substep_depth:
                    raise PointDriverError(
                        f"step {step}: Newton failed at |r|={fail.norm:.3e} "
                        f"after bisecting {depth} times") from None
                mid = 0.5 * (E_from + E_to)
                substeps += 1
                advance(E_from, mid, depth + 1)
                advance(mid, E_to, depth + 1)
                return
            S, D, Pi = Sn, Dn, Pin
            total_iters += its

        advance(E_prev, E_target, 0)
        E_prev = E_target
        records.append({"E": E_target.copy(), "D": D.copy(), "Pi": Pi.copy(),
                        "S": S.copy(), "iterations": total_iters,
                        "substeps": substeps})
    return records


def remanent_magnitude_after_poling(params: MaterialParams,
                                    steps: int = 40) -> float:
    """|P| left after a uniaxial ramp to 2 E0 and unloading to zero field."""
    e0 = params.coercive_field
    up = np.linspace(0.0, 2.0 * e0, steps + 1)[1:]
    down = np.linspace(2.0 * e0, 0.0, steps + 1)[1:]
    hist = [np.array([0.0, 0.0, e]) for e in np.concatenate([up, down])]
    rec = run_pointwise_driver(params, hist)
    return float(np.linalg.norm(rec[-1]["Pi"]))
