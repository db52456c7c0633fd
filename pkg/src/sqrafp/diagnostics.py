"""Discrete thermodynamic quantities and the one-step energy balance.

All sums run over the mesh's canonical facet order, so results are
reproducible bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import kernels
from .scheme import mass as _mass


#: Multiple of ``newton_tol * mass`` allowed as solver slack in the
#: one-step energy balance. A converged step leaves a weighted residual of
#: at most ``newton_tol * mass``; the balance multiplies it by ``log theta``
#: and adds rounding of the energy sums, which stays far below 100x.
EDI_SLACK = 100.0


def edi_tolerance(mass, newton_tol=1e-11):
    """Admissible excess ``EDI_SLACK * newton_tol * mass`` in the one-step EDI."""
    return EDI_SLACK * newton_tol * mass


@dataclass
class StepDiagnostics:
    """Per-step energy bookkeeping; energies refer to ``rho^{n+1}``."""

    t: float
    energy: float
    entropy: float
    d_psi: float
    r_psi: float
    delta: float
    mass: float
    rho_min: float
    newton_iters: int
    min_theta_ratio: float     # min over cells with rho^n > 0 of theta / rho^n
    release: float             # sum_K m_K r_K (<= 0)
    edi_gap: float             # E^{n+1} + tau (D + R) - E^n

    def as_dict(self):
        return asdict(self)


def discrete_entropy(mesh, rho):
    """``H_T(rho) = sum m_K H(rho_K)``."""
    return float(np.dot(mesh.areas, kernels.entropy(rho)))


def discrete_energy(mesh, pot, rho):
    """``E_T(rho) = sum m_K [H(rho_K) + V_K rho_K]``."""
    rho = np.asarray(rho, dtype=float)
    return float(np.dot(mesh.areas, kernels.entropy(rho) + pot.V * rho))


def energy_decrease(mesh, pot, rho_prev, rho_next):
    """``E(rho_prev) - E(rho_next)`` evaluated cellwise without cancellation.

    Uses ``H(b) - H(a) = (b - a) log Theta(a, b)``.
    """
    a = np.asarray(rho_prev, dtype=float)
    b = np.asarray(rho_next, dtype=float)
    diff = b - a
    th = kernels.theta_mean(a, b)
    moved = diff != 0
    terms = np.zeros_like(diff)
    terms[moved] = diff[moved] * (np.log(th[moved]) + pot.V[moved])
    return -float(np.dot(mesh.areas, terms))


def d_psi(mesh, theta, flux):
    """Kinetic dissipation ``sum (m theta_s / d) psi(d F / theta_s)``, ``theta_s = sqrt(theta_K theta_L)``.

    A facet with ``theta_s = 0`` contributes 0 if ``F = 0`` and ``+inf``
    otherwise.
    """
    theta = np.asarray(theta, dtype=float)
    flux = np.asarray(flux, dtype=float)
    ts = np.sqrt(theta[mesh.facet_left] * theta[mesh.facet_right])
    d = mesh.facet_dist
    pos = ts > 0
    if np.any(~pos & (flux != 0)):
        return math.inf
    vals = np.zeros_like(ts)
    vals[pos] = mesh.facet_length[pos] * ts[pos] / d[pos] * kernels.psi(d[pos] * flux[pos] / ts[pos])
    return float(vals.sum())


def r_psi(mesh, pot, theta):
    """Fisher dissipation ``2 sum w_sigma (sqrt(theta_K / pi_K) - sqrt(theta_L / pi_L))^2``."""
    u = np.sqrt(np.asarray(theta, dtype=float) / pot.pi)
    du = u[mesh.facet_left] - u[mesh.facet_right]
    return float(2.0 * np.dot(pot.weights, du * du))


def fisher_split(mesh, pot, rho):
    """Linear part ``I(rho)`` and squared seminorm ``|sqrt rho|_{1,T}^2``.

    Their sum is ``r_psi(rho) / 2``.
    """
    rho = np.asarray(rho, dtype=float)
    k, l = mesh.facet_left, mesh.facet_right
    t = mesh.transmissibility
    half = 0.5 * (pot.V[k] - pot.V[l])    # log sqrt(pi_L / pi_K)
    lin = t * (rho[k] * np.expm1(half) + rho[l] * np.expm1(-half))
    sq = np.sqrt(rho)
    semi = t * (sq[k] - sq[l]) ** 2
    return float(lin.sum()), float(semi.sum())


def fenchel_pairing(mesh, pot, theta, flux):
    """``sum m_sigma (phi_L - phi_K) F_K_sigma`` with ``phi = log(theta / pi)``."""
    phi = np.log(np.asarray(theta, dtype=float)) + pot.V
    dphi = phi[mesh.facet_right] - phi[mesh.facet_left]
    return float(np.dot(mesh.facet_length * dphi, flux))


def edi_residual(E_prev, E_next, d_psi_val, r_psi_val, tau):
    """Balance error as a rate: ``(E_prev - E_next) / tau - D - R``."""
    return (E_prev - E_next) / tau - d_psi_val - r_psi_val


def per_step_diagnostics(mesh, pot, rho_prev, step, tau, t=None, E_prev=None):
    """Aggregate one :class:`~sqrafp.scheme.StepResult` into :class:`StepDiagnostics`.

    ``Delta`` uses the cellwise energy decrease, which is exact up to
    rounding; ``E_prev`` is only used to report the raw EDI gap.
    """
    rho_prev = np.asarray(rho_prev, dtype=float)
    rho = step.rho_next
    D = d_psi(mesh, step.theta, step.flux)
    R = r_psi(mesh, pot, step.theta)
    dec = energy_decrease(mesh, pot, rho_prev, rho)
    E_next = discrete_energy(mesh, pot, rho)
    if E_prev is None:
        E_prev = E_next + dec
    occupied = rho_prev > 0
    with np.errstate(over="ignore"):
        ratio = float(np.min(step.theta[occupied] / rho_prev[occupied])) if occupied.any() else math.inf
    return StepDiagnostics(
        t=float(t) if t is not None else math.nan,
        energy=E_next,
        entropy=discrete_entropy(mesh, rho),
        d_psi=D,
        r_psi=R,
        delta=dec / tau - D - R,
        mass=_mass(mesh, rho),
        rho_min=float(rho.min()),
        newton_iters=int(step.newton_iters),
        min_theta_ratio=ratio,
        release=float(np.dot(mesh.areas, step.entropy_release)),
        edi_gap=E_next + tau * (D + R) - E_prev,
    )


def uniform_bound(mesh, pot, rho0):
    """Right-hand side ``H(rho0) + (max V - min V) mass`` of the a-priori bounds."""
    return discrete_entropy(mesh, rho0) + float(pot.V.max() - pot.V.min()) * _mass(mesh, rho0)
