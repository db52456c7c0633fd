"""Built-in test problems on the unit square and error norms.

``gravity`` has the potential ``V = -g x1`` and a closed-form solution;
``spiral`` has a steep spiral-shaped potential and a concentrated Gaussian
initial datum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import mpmath as mp
import numpy as np

from .errors import InputError

GRAVITY_T = 0.25
SPIRAL_T = 0.2


@dataclass(frozen=True)
class CaseSpec:
    """Problem data. ``V(x, y)``, ``rho0(x, y)`` and ``exact(t, x, y)`` are vectorised."""

    name: str
    V: Callable
    rho0: Callable
    T: float
    exact: Optional[Callable] = None
    params: dict = field(default_factory=dict)


def gravity_exact(g, delta):
    """Closed-form solution of the gravity case as a numpy function ``(t, x, y)``."""
    alpha = math.pi ** 2 + 0.25 * g * g

    def exact(t, x, y=None):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        transient = np.exp(-alpha * (t + delta) + 0.5 * g * x) * (
            math.pi * np.cos(math.pi * x) + 0.5 * g * np.sin(math.pi * x))
        return transient + math.pi * np.exp(g * (x - 0.5))

    return exact


def _gravity_exact_mp(g, delta):
    g, delta = mp.mpf(g), mp.mpf(delta)
    alpha = mp.pi ** 2 + g * g / 4

    def rho(t, x):
        return (mp.exp(-alpha * (t + delta) + g * x / 2) * (mp.pi * mp.cos(mp.pi * x) + g / 2 * mp.sin(mp.pi * x))
                + mp.pi * mp.exp(g * (x - mp.mpf(1) / 2)))

    return rho


def check_gravity_exact(g, delta, T, n=10, h=1e-5, tol=1e-8):
    """Residuals of the PDE and of the no-flux condition for the exact solution.

    The flux is ``F = -(rho grad V + grad rho) = g rho - d rho / dx1`` along
    ``x1``; derivatives use fourth-order central differences of step ``h``
    evaluated in 30-digit arithmetic. Returns ``(pde_residual, bc_residual)``
    and raises :class:`InputError` when either exceeds ``tol``.
    """
    rho = _gravity_exact_mp(g, delta)
    gm = mp.mpf(g)
    with mp.workdps(30):
        hm = mp.mpf(h)

        def d1(fun, z):
            return (-fun(z + 2 * hm) + 8 * fun(z + hm) - 8 * fun(z - hm) + fun(z - 2 * hm)) / (12 * hm)

        def flux(t, x):
            return gm * rho(t, x) - d1(lambda z: rho(t, z), x)

        pde = mp.mpf(0)
        for t in np.linspace(0.0, T, n):
            for x in np.linspace(0.05, 0.95, n):
                t_, x_ = mp.mpf(float(t)), mp.mpf(float(x))
                rt = d1(lambda z: rho(z, x_), t_)
                dF = d1(lambda z: flux(t_, z), x_)
                pde = max(pde, abs(rt + dF))
        bc = mp.mpf(0)
        for t in np.linspace(0.0, T, n):
            for x in (0, 1):
                bc = max(bc, abs(flux(mp.mpf(float(t)), mp.mpf(x))))
    # the sample is independent of x2, so a 10 x 10 (t, x1) grid covers the 10^3 set.
    pde, bc = float(pde), float(bc)
    if pde > tol or bc > tol:
        raise InputError(f"exact solution check failed: PDE residual {pde:.2e}, boundary flux {bc:.2e}")
    return pde, bc


def gravity_case(g=1.0, delta=0.001, T=GRAVITY_T, check=True):
    """Linear Fokker-Planck problem with ``V = -g x1`` and a known solution."""
    if delta < 0:
        raise InputError("delta must be nonnegative")
    if not math.isfinite(g):
        raise InputError("g must be finite")
    exact = gravity_exact(g, delta)
    if check:
        check_gravity_exact(g, delta, T)
    return CaseSpec(name="gravity", V=lambda x, y: -g * np.asarray(x, dtype=float),
                    rho0=lambda x, y: exact(0.0, x, y), T=T, exact=exact,
                    params={"g": g, "delta": delta, "alpha": math.pi ** 2 + 0.25 * g * g})


def spiral_potential(sigma):
    def V(x, y):
        dx = np.asarray(x, dtype=float) - 0.5
        dy = np.asarray(y, dtype=float) - 0.5
        r2 = dx * dx + dy * dy
        ang = np.arctan2(dy, dx)
        return 5.0 * (-np.expm1(-r2 / sigma ** 2)) * (1.0 - np.cos(20.0 * np.sqrt(r2) - ang) ** 6)

    return V


def spiral_case(sigma=1e-2, T=SPIRAL_T):
    """Steep spiral potential (polar angle from ``atan2``) with a Gaussian start."""
    if not sigma > 0:
        raise InputError("sigma must be positive")
    amp = 1.0 / (math.sqrt(2.0 * math.pi) * sigma)

    def rho0(x, y):
        dx = np.asarray(x, dtype=float) - 0.5
        dy = np.asarray(y, dtype=float) - 0.5
        return amp * np.exp(-(dx * dx + dy * dy) / sigma ** 2)

    return CaseSpec(name="spiral", V=spiral_potential(sigma), rho0=rho0, T=T, params={"sigma": sigma})


# -------------------------------------------------------------- error norms

class ErrorAccumulator:
    """Space-time errors of the cellwise constant, right-continuous reconstruction.

    Call :meth:`update` with ``rho^{n+1}`` for ``n = 0, 1, ...``; the exact
    solution is sampled at the cell centers and at ``t^{n+1}``.
    """

    def __init__(self, mesh, exact, tau):
        if exact is None:
            raise InputError("error norms need an exact solution")
        self.mesh = mesh
        self.exact = exact
        self.tau = float(tau)
        self.l1 = 0.0
        self.l2sq = 0.0
        self.linf = 0.0
        self.steps = 0

    def update(self, n, rho_next):
        t = (n + 1) * self.tau
        c = self.mesh.centers
        err = np.abs(np.asarray(rho_next) - self.exact(t, c[:, 0], c[:, 1]))
        self.l1 += self.tau * float(np.dot(self.mesh.areas, err))
        self.l2sq += self.tau * float(np.dot(self.mesh.areas, err * err))
        self.linf = max(self.linf, float(err.max()))
        self.steps += 1

    def norms(self):
        return {"L1": self.l1, "L2": math.sqrt(self.l2sq), "Linf": self.linf}


def error_norms(mesh, trajectory, exact, p=1, tau=None):
    """``L^1``, ``L^2`` or ``L^inf`` space-time error of a stored trajectory.

    ``trajectory`` is a :class:`sqrafp.scheme.Trajectory` (with all states
    retained) or a sequence ``rho^0, ..., rho^N`` together with ``tau``.
    ``p`` is 1, 2 or ``"inf"``.
    """
    if exact is None:
        raise InputError("error norms need an exact solution")
    if hasattr(trajectory, "rho"):
        states = trajectory.rho
        tau = trajectory.times[1] - trajectory.times[0] if len(trajectory.times) > 1 else tau
    else:
        states = list(trajectory)
    if tau is None:
        raise InputError("time step needed")
    acc = ErrorAccumulator(mesh, exact, tau)
    for n, rho in enumerate(states[1:]):
        acc.update(n, rho)
    key = {1: "L1", 2: "L2", "inf": "Linf", np.inf: "Linf"}.get(p)
    if key is None:
        raise ValueError(f"unknown norm selector {p!r}")
    return acc.norms()[key]


def rates(errors):
    """``log2`` of successive error ratios (first entry ``nan``)."""
    e = np.asarray(errors, dtype=float)
    out = np.full(e.shape, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[1:] = np.log2(e[:-1] / e[1:])
    return out
