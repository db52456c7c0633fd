"""Implicit SQRA finite volume scheme with nonlinear midpoint extrapolation.

One time step solves, for the midpoint densities ``theta`` and the new
densities ``rho_next = Xi(rho_prev, theta)``,

    m_K (rho_next_K - rho_prev_K) / tau + sum_sigma m_sigma F_K_sigma = 0,
    F_K_sigma = (pi_sigma / d_sigma) (theta_K / pi_K - theta_L / pi_L).

The pair ``(rho_next, theta)`` is parametrised per cell by one scalar ``s``
(see :func:`sqrafp.kernels.reparam`) and the resulting square system is
solved by a damped Newton method.

Cell fields are plain numpy arrays of length ``mesh.n_cells``; edge fields
are arrays over interior facets in the mesh's canonical orientation
(positive flux goes from ``facet_left`` to ``facet_right``).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import InputError, NumericalError
from .kernels import KernelConfig, DEFAULT_CONFIG


# ------------------------------------------------------------------ fields

def mass(mesh, rho):
    """Total mass ``sum_K m_K rho_K``."""
    return float(np.dot(mesh.areas, rho))


@dataclass(frozen=True, eq=False)
class PotentialField:
    """Cellwise potential ``V_K``, Gibbs weights ``pi_K`` and ``pi_sigma``.

    Also carries the mesh-dependent facet weights ``m_sigma pi_sigma / d_sigma``
    and the weighted Laplacian used by the residual and Jacobian.
    """

    mesh: object
    V: np.ndarray
    pi: np.ndarray
    pi_facet: np.ndarray

    @cached_property
    def weights(self):
        return self.mesh.facet_length * self.pi_facet / self.mesh.facet_dist

    @cached_property
    def laplacian(self):
        """``L`` with ``(L u)_K = sum_sigma w_sigma (u_K - u_L)``, CSC with full diagonal."""
        m = self.mesh
        n = m.n_cells
        w = self.weights
        i = np.concatenate([m.facet_left, m.facet_right, m.facet_left, m.facet_right, np.arange(n)])
        j = np.concatenate([m.facet_right, m.facet_left, m.facet_left, m.facet_right, np.arange(n)])
        v = np.concatenate([-w, -w, w, w, np.zeros(n)])
        L = sp.csc_matrix((v, (i, j)), shape=(n, n))
        L.sum_duplicates()
        L.sort_indices()
        return L

    @cached_property
    def _pattern(self):
        L = self.laplacian
        cols = np.repeat(np.arange(L.shape[1]), np.diff(L.indptr))
        diag_pos = np.flatnonzero(L.indices == cols)
        return cols, diag_pos


def discretize_potential(mesh, V):
    """Evaluate ``V`` at cell centers (``V`` callable ``V(x, y)`` or per-cell values)."""
    if callable(V):
        vals = np.asarray(V(mesh.centers[:, 0], mesh.centers[:, 1]), dtype=float)
        vals = np.broadcast_to(vals, (mesh.n_cells,)).copy()
    else:
        vals = np.array(V, dtype=float)
        if vals.shape != (mesh.n_cells,):
            raise InputError(f"potential has shape {vals.shape}, expected ({mesh.n_cells},)")
    if not np.all(np.isfinite(vals)):
        k = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise InputError(f"potential is not finite at cell {k}")
    pi = np.exp(-vals)
    if np.any(pi <= 0) or not np.all(np.isfinite(pi)):
        raise InputError("Gibbs weights exp(-V) under- or overflow")
    pif = np.exp(-0.5 * (vals[mesh.facet_left] + vals[mesh.facet_right]))
    for a in (vals, pi, pif):
        a.setflags(write=False)
    return PotentialField(mesh, vals, pi, pif)


def discretize_initial(mesh, rho0, rule="midpoint"):
    """Discrete initial density from ``rho0(x, y)`` or from per-cell values.

    ``rule="midpoint"`` approximates cell averages with the 3-point
    edge-midpoint rule (exact for quadratics). ``rule="center"`` samples
    ``rho0`` at the cell centers, which is the consistent choice when
    errors are measured at the centers: on meshes whose circumcenters are
    not centroids the two differ by O(h), and the midpoint-in-time scheme
    only damps that mesh-scale mismatch slowly.

    Negative values are clamped to 0 with a warning.
    """
    if callable(rho0):
        if rule == "midpoint":
            if mesh.triangles is None:
                raise InputError("quadrature needs triangle geometry; pass cell values instead")
            p = mesh.vertices[mesh.triangles]
            mids = 0.5 * (p + np.roll(p, -1, axis=1))
            vals = np.asarray(rho0(mids[..., 0], mids[..., 1]), dtype=float)
            out = np.broadcast_to(vals, mids.shape[:2]).mean(axis=1)
        elif rule == "center":
            c = mesh.centers
            out = np.broadcast_to(np.asarray(rho0(c[:, 0], c[:, 1]), dtype=float), (mesh.n_cells,)).copy()
        else:
            raise InputError(f"unknown initial discretisation rule {rule!r}")
    else:
        out = np.array(rho0, dtype=float)
        if out.shape != (mesh.n_cells,):
            raise InputError(f"initial density has shape {out.shape}, expected ({mesh.n_cells},)")
    if not np.all(np.isfinite(out)):
        raise InputError("initial density is not finite")
    neg = out < 0
    if np.any(neg):
        warnings.warn(f"{int(neg.sum())} negative initial cell averages clamped to 0", RuntimeWarning,
                      stacklevel=2)
        out = np.where(neg, 0.0, out)
    return out


# ------------------------------------------------------------------- fluxes

def sqra_flux(mesh, pot, theta):
    """SQRA fluxes ``(pi_sigma / d_sigma)(theta_K / pi_K - theta_L / pi_L)``."""
    u = np.asarray(theta, dtype=float) / pot.pi
    k, l = mesh.facet_left, mesh.facet_right
    return pot.pi_facet / mesh.facet_dist * (u[k] - u[l])


def sqra_flux_cosh(mesh, pot, theta):
    """Same fluxes as ``(theta_sigma / d_sigma) 2 sinh((phi_K - phi_L) / 2)``.

    Requires ``theta > 0``; ``theta_sigma = sqrt(theta_K theta_L)`` and
    ``phi = log(theta / pi)``.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise InputError("cosh form of the flux needs theta > 0")
    phi = np.log(theta) + pot.V
    k, l = mesh.facet_left, mesh.facet_right
    ts = np.sqrt(theta[k] * theta[l])
    return ts / mesh.facet_dist * kernels.psi_star_prime(phi[k] - phi[l])


def divergence(mesh, flux):
    """``sum_{sigma in Sigma_K} m_sigma F_K_sigma`` per cell."""
    q = mesh.facet_length * flux
    out = np.zeros(mesh.n_cells)
    np.add.at(out, mesh.facet_left, q)
    np.subtract.at(out, mesh.facet_right, q)
    return out


# ------------------------------------------------------------ nonlinear step

@dataclass(frozen=True)
class SchemeParams:
    """Time stepping and solver settings.

    ``newton_tol`` is relative to the mass: the Newton loop stops once
    ``tau * sum_K |R_K| <= newton_tol * mass``.
    """

    tau: float
    n_steps: int = 1
    kernel: KernelConfig = field(default_factory=lambda: DEFAULT_CONFIG)
    newton_tol: float = 1e-11
    newton_max_iters: int = 50
    max_halvings: int = 30
    linear_solver: str = "direct"

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise InputError(f"tau must be positive, got {self.tau}")
        if not self.newton_tol > 0:
            raise InputError("newton_tol must be positive")
        if self.n_steps < 0:
            raise InputError("n_steps must be nonnegative")
        if self.newton_max_iters < 1 or self.max_halvings < 0:
            raise InputError("invalid Newton iteration limits")
        if self.linear_solver not in ("direct", "krylov"):
            raise InputError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class StepResult:
    theta: np.ndarray
    rho_next: np.ndarray
    flux: np.ndarray
    newton_iters: int
    final_residual: float
    entropy_release: np.ndarray
    s: np.ndarray
    residual_history: list


def step_residual(mesh, pot, rho_prev, s, tau, cfg=None):
    """Residual of the discrete continuity equation in the parameter ``s``."""
    X, Y, _, _ = kernels.reparam(rho_prev, s, cfg)
    return mesh.areas * (X - rho_prev) / tau + pot.laplacian @ (Y / pot.pi)


def _residual_and_parts(mesh, pot, rho_prev, s, tau, cfg):
    X, Y, dX, dY = kernels.reparam(rho_prev, s, cfg)
    R = mesh.areas * (X - rho_prev) / tau + pot.laplacian @ (Y / pot.pi)
    return R, X, Y, dX, dY


def _jacobian_from_parts(mesh, pot, dX, dY, tau):
    L = pot.laplacian
    cols, diag_pos = pot._pattern
    data = L.data * (dY / pot.pi)[cols]
    data[diag_pos] += mesh.areas * dX / tau
    return sp.csc_matrix((data, L.indices, L.indptr), shape=L.shape)


def step_jacobian(mesh, pot, rho_prev, s, tau, cfg=None):
    """Exact Jacobian ``dR/ds`` (sparse CSC on the cell adjacency pattern)."""
    _, _, dX, dY = kernels.reparam(rho_prev, s, cfg)
    return _jacobian_from_parts(mesh, pot, dX, dY, tau)


def solve_linear(A, b, method="direct", rtol=1e-12):
    """Solve ``A x = b``; the normwise backward error is checked against ``rtol``.

    ``direct`` uses a sparse LU factorisation with COLAMD ordering (plus
    one refinement sweep if needed); ``krylov`` uses BiCGSTAB with a Jacobi
    preconditioner.
    """
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    bn = np.linalg.norm(b)
    if bn == 0:
        return np.zeros_like(b)
    if method == "direct":
        try:
            lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise NumericalError(f"sparse LU failed: {exc}") from exc
        x = lu.solve(b)
        r = b - A @ x
        if np.linalg.norm(r) > rtol * bn:
            x = x + lu.solve(r)
            r = b - A @ x
    elif method == "krylov":
        d = A.diagonal()
        if np.any(d == 0):
            raise NumericalError("zero diagonal entry, Jacobi preconditioner undefined")
        M = sp.diags(1.0 / d)
        x, info = spla.bicgstab(A, b, M=M, rtol=0.1 * rtol, atol=0.0, maxiter=20 * A.shape[0])
        if info < 0:
            raise NumericalError(f"BiCGSTAB breakdown (info={info})")
        r = b - A @ x
    else:
        raise ValueError(f"unknown linear solver {method!r}")
    # normwise backward error; ||r|| / ||b|| alone is not scale-free once
    # the Newton right-hand side becomes small
    a_norm = spla.norm(A, np.inf)
    rel = np.linalg.norm(r, np.inf) / (a_norm * np.linalg.norm(x, np.inf) + np.linalg.norm(b, np.inf))
    if not np.isfinite(rel) or rel > rtol:
        raise NumericalError(f"linear solve backward error {rel:.3e} above {rtol:.1e}", residual=float(rel))
    return x


def initial_guess(mesh, rho_prev, cfg=None):
    """``s`` with ``theta = rho_prev`` where ``rho_prev > 0``, a tiny positive value in vacuum."""
    cfg = cfg or DEFAULT_CONFIG
    s = np.full(mesh.n_cells, (1.0 - cfg.g_xi) / cfg.lam)
    vac = rho_prev == 0
    if np.any(vac):
        s[vac] = 1e-12 * mass(mesh, rho_prev) / mesh.domain_area
    return s


def entropy_release(rho_prev, rho_next, theta):
    """``H(rho_next) - H(rho_prev) - log(theta) (rho_next - rho_prev)`` per cell.

    Evaluated as ``(rho_next - rho_prev)(log Theta(rho_prev, rho_next) - log theta)``,
    which is the same quantity without cancellation.
    """
    a = np.asarray(rho_prev, dtype=float)
    b = np.asarray(rho_next, dtype=float)
    diff = b - a
    out = np.zeros_like(diff)
    moved = diff != 0
    th = kernels.theta_mean(a[moved], b[moved])
    out[moved] = diff[moved] * (np.log(th) - np.log(np.asarray(theta, dtype=float)[moved]))
    return out


_TINY = np.finfo(float).tiny


def solve_step(mesh, pot, rho_prev, params, s0=None):
    """Advance one time step.

    Damped Newton on ``s``: a step is halved (at most ``max_halvings``
    times) until the weighted residual ``tau * sum |R|`` decreases.
    Intermediate iterates may leave the positive cone; the converged
    midpoint density is checked for positivity.

    Raises
    ------
    InputError
        If ``rho_prev`` has a negative entry or zero mass.
    NumericalError
        If Newton does not converge within ``newton_max_iters``.
    """
    rho_prev = np.asarray(rho_prev, dtype=float)
    if rho_prev.shape != (mesh.n_cells,):
        raise InputError("density has the wrong shape")
    if np.any(rho_prev < 0) or not np.all(np.isfinite(rho_prev)):
        raise InputError("previous density must be finite and nonnegative")
    # Subnormal densities are exact vacuum for the scheme: their columns
    # in the Jacobian (proportional to rho_prev_K) would underflow.
    rho_prev = np.where(rho_prev < _TINY, 0.0, rho_prev)
    total = mass(mesh, rho_prev)
    if not total > 0:
        raise InputError("previous density has zero mass")
    cfg = params.kernel
    tau = params.tau
    target = params.newton_tol * total

    s = initial_guess(mesh, rho_prev, cfg) if s0 is None else np.array(s0, dtype=float)
    R, X, Y, dX, dY = _residual_and_parts(mesh, pot, rho_prev, s, tau, cfg)
    norm = tau * float(np.abs(R).sum())
    history = [norm]
    iters = 0
    while norm > target:
        if iters >= params.newton_max_iters:
            raise NumericalError(f"Newton did not converge in {iters} iterations "
                                 f"(residual {norm:.3e}, target {target:.3e})",
                                 residual=norm, history=history)
        J = _jacobian_from_parts(mesh, pot, dX, dY, tau)
        ds = solve_linear(J, -R, params.linear_solver)
        t = 1.0
        for _ in range(params.max_halvings + 1):
            s_try = s + t * ds
            R_t, X_t, Y_t, dX_t, dY_t = _residual_and_parts(mesh, pot, rho_prev, s_try, tau, cfg)
            n_t = tau * float(np.abs(R_t).sum())
            if n_t < norm:
                break
            t *= 0.5
        else:
            raise NumericalError(f"step halving failed after {params.max_halvings} halvings "
                                 f"(residual {norm:.3e})", residual=norm, history=history)
        s, R, X, Y, dX, dY, norm = s_try, R_t, X_t, Y_t, dX_t, dY_t, n_t
        history.append(norm)
        iters += 1

    if not np.all(Y > 0):
        raise NumericalError("converged midpoint density is not positive",
                             residual=norm, history=history)
    theta = Y
    rho_next = np.maximum(X, 0.0)
    return StepResult(theta=theta, rho_next=rho_next, flux=sqra_flux(mesh, pot, theta),
                      newton_iters=iters, final_residual=norm,
                      entropy_release=entropy_release(rho_prev, rho_next, theta),
                      s=s, residual_history=history)


def variational_gradient(mesh, pot, rho_prev, theta, tau, cfg=None):
    """Gradient of the one-step convex functional in ``u = theta / pi``.

    ``(m_K / tau)(Xi(rho_prev_K, theta_K) - rho_prev_K) + sum w_sigma (u_K - u_L)``;
    it vanishes exactly at the solution of the step.
    """
    theta = np.asarray(theta, dtype=float)
    b = kernels.xi_extrapolate(rho_prev, theta, cfg)
    return mesh.areas * (b - rho_prev) / tau + pot.laplacian @ (theta / pot.pi)


# -------------------------------------------------------------- trajectory

@dataclass
class Trajectory:
    times: np.ndarray
    rho: list           # rho^0 .. rho^N when retained, else [rho^0, rho^N]
    theta: list         # theta^{1/2} .. when retained, else [last theta]
    newton_iters: np.ndarray

    @property
    def final(self):
        return self.rho[-1]


def run_trajectory(mesh, pot, rho0, params, observer=None, keep=True):
    """Apply :func:`solve_step` ``params.n_steps`` times.

    ``observer(n, rho_prev, result)`` is called after every step. With
    ``keep=False`` only the initial and final states are stored.

    Raises
    ------
    NumericalError
        From the failing step, with ``step`` set to its index.
    """
    rho = np.asarray(rho0, dtype=float)
    rhos = [rho]
    thetas = []
    iters = np.zeros(params.n_steps, dtype=np.int64)
    for n in range(params.n_steps):
        try:
            res = solve_step(mesh, pot, rho, params)
        except NumericalError as exc:
            exc.step = n
            raise
        iters[n] = res.newton_iters
        if observer is not None:
            observer(n, rho, res)
        rho = res.rho_next
        if keep:
            rhos.append(rho)
            thetas.append(res.theta)
        else:
            thetas = [res.theta]
    if not keep and params.n_steps:
        rhos.append(rho)
    times = params.tau * np.arange(params.n_steps + 1)
    return Trajectory(times=times, rho=rhos, theta=thetas, newton_iters=iters)
