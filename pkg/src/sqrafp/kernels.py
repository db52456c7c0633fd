"""Scalar kernels of the entropic midpoint scheme.

All functions are vectorised: they accept scalars or numpy arrays and
return numpy arrays (0-d for scalar input, convertible with ``float``).

The central objects are the logarithmic-type mean

    Theta(a, b) = exp((b log b - a log a) / (b - a) - 1),

its one-sided inverse Xi(a, .) built from g = f^{-1}, f(r) = Theta(1, r),
and the cosh dissipation pair psi / psi*.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .errors import DomainError, NumericalError

E = math.e
INV_E = math.exp(-1.0)


@dataclass(frozen=True)
class KernelConfig:
    """Numerical settings of the kernels.

    Attributes
    ----------
    xi_cut : float
        Cutoff of the reparametrisation, must exceed ``1/e``.
    near_equal_rel_tol : float
        ``Theta(a, b)`` uses a series when ``|a - b| <= tol * (a + b)``.
    inner_tol : float
        Convergence threshold of the ``g = f^{-1}`` root solve, applied as
        ``|f(g(s)) - s| <= inner_tol * max(1, s)``.
    inner_max_iters : int
        Iteration cap of the root solve.
    lam : float
        Derived speed ``g'(xi_cut)`` of the linear branch (not an argument).
    g_xi : float
        Derived value ``g(xi_cut)`` (not an argument).
    """

    xi_cut: float = 0.5
    near_equal_rel_tol: float = 1e-8
    inner_tol: float = 1e-14
    inner_max_iters: int = 200
    lam: float = field(init=False, repr=False)
    g_xi: float = field(init=False, repr=False)

    def __post_init__(self):
        if not self.xi_cut > INV_E:
            raise ValueError(f"xi_cut must exceed 1/e, got {self.xi_cut}")
        if not self.inner_tol > 0:
            raise ValueError("inner_tol must be positive")
        if self.inner_max_iters < 1:
            raise ValueError("inner_max_iters must be >= 1")
        if self.near_equal_rel_tol < 0:
            raise ValueError("near_equal_rel_tol must be nonnegative")
        g_xi = float(g_eval(self.xi_cut, self))
        lam = 1.0 / float(f_prime(g_xi, self))
        if not (np.isfinite(lam) and lam > 0):
            raise ValueError(f"degenerate reparametrisation speed {lam}")
        object.__setattr__(self, "g_xi", g_xi)
        object.__setattr__(self, "lam", lam)


def _nonneg(x, name):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError(f"{name} must be nonnegative")
    return x


# --------------------------------------------------------------------- entropy

def entropy(a):
    """Boltzmann entropy density ``H(a) = a log a - a + 1`` with ``H(0) = 1``."""
    a = _nonneg(a, "entropy argument")
    return xlogy(a, a) - a + 1.0


def entropy_prime(a):
    """``H'(a) = log a``; ``-inf`` at ``a = 0``."""
    a = _nonneg(a, "entropy argument")
    with np.errstate(divide="ignore"):
        return np.log(a)


def entropy_conjugate(p):
    """Legendre transform ``H*(p) = exp(p) - 1``."""
    return np.expm1(np.asarray(p, dtype=float))


# -------------------------------------------------------------- nonlinear mean

def _log_shape(t, tol):
    """``log(Theta(a, b) / m)`` as a function of ``t = |b - a| / (a + b)``.

    Both branches are accurate to a few ulps in absolute terms; the series
    only removes the 0/0 at t = 0.
    """
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    small = t <= tol
    ts = t[small]
    t2 = ts * ts
    out[small] = -t2 * (1.0 / 6.0 + t2 * (1.0 / 20.0 + t2 / 42.0))
    big = ~small
    tb = t[big]
    with np.errstate(divide="ignore", invalid="ignore"):
        num = (1.0 + tb) * np.log1p(tb) - (1.0 - tb) * np.log1p(-tb)
        val = num / (2.0 * tb) - 1.0
    val = np.where(tb >= 1.0, math.log(2.0) - 1.0, val)
    out[big] = val
    return out


def theta_mean(a, b, cfg: KernelConfig | None = None):
    """Nonlinear mean ``Theta(a, b)`` of two nonnegative numbers.

    Evaluated around the midpoint ``m = (a + b) / 2`` as ``m * exp(phi(t))``,
    ``t = |b - a| / (a + b)``, which is symmetric by construction and free of
    cancellation. ``Theta(a, a) = a`` and ``Theta(a, 0) = a / e``.
    """
    tol = (cfg or DEFAULT_CONFIG).near_equal_rel_tol
    a = _nonneg(a, "theta_mean argument")
    b = _nonneg(b, "theta_mean argument")
    a, b = np.broadcast_arrays(a, b)
    s = a + b
    out = np.zeros(s.shape)
    pos = s > 0
    t = np.abs(b[pos] - a[pos]) / s[pos]
    out[pos] = 0.5 * s[pos] * np.exp(_log_shape(t, tol))
    return out


def f_eval(r, cfg: KernelConfig | None = None):
    """``f(r) = Theta(1, r)``: concave, increasing, ``f(0) = 1/e``."""
    r = _nonneg(r, "f argument")
    return theta_mean(1.0, r, cfg)


def _slope_factor(r):
    # (u - log1p(u)) / u**2 with u = r - 1, so that f' = f * factor.
    u = np.asarray(r, dtype=float) - 1.0
    out = np.empty_like(u)
    small = np.abs(u) < 1e-2
    us = u[small]
    out[small] = 0.5 + us * (-1.0 / 3 + us * (0.25 + us * (-0.2 + us * (1.0 / 6 + us * (-1.0 / 7 + us * 0.125)))))
    ub = u[~small]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[~small] = (1.0 - np.log1p(ub) / ub) / ub
    return out


def f_prime(r, cfg: KernelConfig | None = None):
    """Derivative of ``f``; ``+inf`` at ``r = 0`` (vertical tangent)."""
    r = _nonneg(r, "f argument")
    fv = theta_mean(1.0, r, cfg)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = fv * _slope_factor(r)
    return np.where(r == 0, np.inf, out)


def g_eval(s, cfg: KernelConfig | None = None):
    """Extended inverse ``g`` of ``f``: ``f^{-1}(s)`` for ``s > 1/e``, else 0.

    Safeguarded Newton iteration on the bracket ``[max(0, 2s - 1), e s]``,
    which is valid because ``r / e <= f(r) <= (1 + r) / 2``. Newton steps
    leaving the bracket are replaced by bisection.

    Raises
    ------
    NumericalError
        If some entry does not reach ``|f(g) - s| <= inner_tol * max(1, s)``.
    """
    cfg = cfg or DEFAULT_CONFIG
    s = np.asarray(s, dtype=float)
    if np.any(np.isnan(s)):
        raise DomainError("g argument is NaN")
    out = np.zeros(s.shape)
    act = s > INV_E
    if not np.any(act):
        return out
    sv = s[act]
    lo = np.maximum(2.0 * sv - 1.0, 0.0)
    hi = E * sv
    # 2s - 1 is a lower bound; near 1/e it is useless and the root is tiny.
    r = np.where(lo > 0, lo, hi * 1e-3)
    scale = np.maximum(1.0, sv)
    tol = cfg.inner_tol * scale
    done = np.zeros(sv.shape, dtype=bool)
    res = np.full(sv.shape, np.inf)
    for _ in range(cfg.inner_max_iters):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        ri = r[idx]
        fi = theta_mean(1.0, ri, cfg)
        ei = fi - sv[idx]
        res[idx] = np.abs(ei)
        conv = res[idx] <= tol[idx]
        below = ei < 0
        lo[idx[below]] = ri[below]
        hi[idx[~below]] = ri[~below]
        lo_i, hi_i = lo[idx], hi[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            dfi = fi * _slope_factor(ri)
            rn = ri - ei / dfi
        bad = ~np.isfinite(rn) | (rn < lo_i) | (rn > hi_i)
        # Converged entries take one more Newton step (a polish that brings
        # the relative error of g to roundoff even where f' is large).
        mid = np.where(lo_i > 0, 0.5 * (lo_i + hi_i), 0.125 * hi_i)
        rn = np.where(bad, np.where(conv, ri, mid), rn)
        collapsed = hi_i - lo_i <= 4 * np.spacing(hi_i)
        done[idx[conv | collapsed]] = True
        r[idx] = rn
    if not np.all(done):
        worst = float(np.max(res[~done]))
        raise NumericalError(f"g = f^-1 solve did not converge (residual {worst:.3e})", residual=worst)
    out[act] = r
    return out


def g_prime(s, cfg: KernelConfig | None = None):
    """Derivative of ``g``; zero for ``s <= 1/e``."""
    gv = g_eval(s, cfg)
    pos = gv > 0
    out = np.zeros(gv.shape)
    out[pos] = 1.0 / f_prime(gv[pos], cfg)
    return out


def xi_extrapolate(a, c, cfg: KernelConfig | None = None):
    """Extrapolation ``Xi(a, c)``: the ``b`` with ``Theta(a, b) = c``.

    ``a g(c / a)`` for ``a > 0``; ``e c`` for ``a = 0, c >= 0``; 0 for
    ``a = 0, c < 0`` (continuous clamp, never reached at a solution).
    """
    a = _nonneg(a, "xi_extrapolate first argument")
    c = np.asarray(c, dtype=float)
    a, c = np.broadcast_arrays(a, c)
    out = np.empty(a.shape)
    pos = a > 0
    out[pos] = a[pos] * g_eval(c[pos] / a[pos], cfg)
    zero = ~pos
    out[zero] = E * np.maximum(c[zero], 0.0)
    return out


# ------------------------------------------------------ cosh dissipation pair

def psi(z):
    """``psi(z) = 2 z asinh(z/2) - 2 sqrt(4 + z^2) + 4``."""
    z = np.asarray(z, dtype=float)
    root = np.sqrt(4.0 + z * z)
    return 2.0 * z * np.arcsinh(0.5 * z) - 2.0 * z * z / (root + 2.0)


def psi_star(xi):
    """``psi*(xi) = 4 (cosh(xi/2) - 1)``, written as ``8 sinh(xi/4)^2``."""
    xi = np.asarray(xi, dtype=float)
    with np.errstate(over="ignore"):
        out = 8.0 * np.sinh(0.25 * xi) ** 2
    if not np.all(np.isfinite(out[np.isfinite(xi)])):
        raise NumericalError("psi_star overflow")
    return out


def psi_star_prime(xi):
    """``(psi*)'(xi) = 2 sinh(xi / 2)``."""
    xi = np.asarray(xi, dtype=float)
    with np.errstate(over="ignore"):
        out = 2.0 * np.sinh(0.5 * xi)
    if not np.all(np.isfinite(out[np.isfinite(xi)])):
        raise NumericalError("psi_star_prime overflow")
    return out


# ----------------------------------------------------------- reparametrisation

def reparam(a, s, cfg: KernelConfig | None = None):
    """Reparametrised unknowns of one cell.

    For a previous density ``a`` and a parameter ``s`` returns
    ``(X, Y, dX, dY)`` with ``X`` the new density, ``Y`` the midpoint
    density and ``Xi(a, Y) = X``.

    For ``a = 0``: ``X = s``, ``Y = s / e``. For ``a > 0`` the graph of
    ``g`` is traversed as ``(Y/a, X/a) = (s + xi, g(s + xi))`` for
    ``s <= 0`` and ``(f(lam s + g(xi)), lam s + g(xi))`` for ``s > 0``; only
    the first branch calls the inner root solve.
    """
    cfg = cfg or DEFAULT_CONFIG
    a = _nonneg(a, "reparam density")
    s = np.asarray(s, dtype=float)
    a, s = np.broadcast_arrays(a, s)
    X = np.empty(a.shape)
    Y = np.empty(a.shape)
    dX = np.empty(a.shape)
    dY = np.empty(a.shape)

    vac = a == 0
    X[vac] = s[vac]
    Y[vac] = s[vac] * INV_E
    dX[vac] = 1.0
    dY[vac] = INV_E

    low = ~vac & (s <= 0)
    if np.any(low):
        al = a[low]
        z = s[low] + cfg.xi_cut
        gz = g_eval(z, cfg)
        slope = np.zeros(gz.shape)
        p = gz > 0
        slope[p] = 1.0 / f_prime(gz[p], cfg)
        Y[low] = al * z
        X[low] = al * gz
        dY[low] = al
        dX[low] = al * slope

    high = ~vac & (s > 0)
    if np.any(high):
        ah = a[high]
        w = cfg.lam * s[high] + cfg.g_xi
        X[high] = ah * w
        dX[high] = ah * cfg.lam
        Y[high] = ah * f_eval(w, cfg)
        dY[high] = ah * cfg.lam * f_prime(w, cfg)
    return X, Y, dX, dY


def reparam_inverse(a, theta, cfg: KernelConfig | None = None):
    """Parameter ``s`` with ``Y(a; s) = theta`` (``theta > 0`` when ``a = 0``)."""
    cfg = cfg or DEFAULT_CONFIG
    a = _nonneg(a, "reparam density")
    theta = np.asarray(theta, dtype=float)
    a, theta = np.broadcast_arrays(a, theta)
    out = np.empty(a.shape)
    vac = a == 0
    out[vac] = E * theta[vac]
    pos = ~vac
    ratio = theta[pos] / a[pos]
    sp = np.empty(ratio.shape)
    low = ratio <= cfg.xi_cut
    sp[low] = ratio[low] - cfg.xi_cut
    # f(w) = ratio with w = lam s + g(xi)
    w = g_eval(ratio[~low], cfg)
    sp[~low] = (w - cfg.g_xi) / cfg.lam
    out[pos] = sp
    return out


DEFAULT_CONFIG = KernelConfig()
