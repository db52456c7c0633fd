"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are
repeated in the terminal summary.
"""
import math
import time
import warnings

import mpmath as mp
import numpy as np
import pytest

from sqrafp import cli
from sqrafp import diagnostics as D
from sqrafp import kernels as K
from sqrafp import scheme as S
from sqrafp.cases import gravity_case, spiral_case
from sqrafp.mesh import load_mesh, refine, refine_subdivision

from test_scheme import two_cell_oracle, two_cells

# reference ladder (size, L1, L2, Linf) for delta = 0.001 under subdivision
REFERENCE_LADDER = np.array([[3.06e-01, 4.48e-03, 1.04e-02, 5.96e-02],
                             [1.53e-01, 9.84e-04, 2.44e-03, 3.65e-02],
                             [7.65e-02, 2.39e-04, 6.01e-04, 1.46e-02],
                             [3.82e-02, 5.95e-05, 1.48e-04, 4.94e-03],
                             [1.91e-02, 1.48e-05, 3.65e-05, 1.42e-03],
                             [9.56e-03, 3.67e-06, 9.05e-06, 3.38e-04]])


@pytest.fixture(scope="module")
def base():
    return load_mesh()


# ------------------------------------------------------------ criterion 1

def _mp_dH(a, b):
    with mp.workdps(40):
        a, b = mp.mpf(a), mp.mpf(b)
        return float(b * mp.log(b) - b - a * mp.log(a) + a)


def test_c1_kernel_identities(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 100_000
    a = rng.uniform(0, 1e3, n)
    b = rng.uniform(0, 1e3, n)
    a[a == 0] = 1e3
    b[b == 0] = 1e3
    ld = np.longdouble

    th = K.theta_mean(a, b)
    # chain rule, against a long double reference where it is well conditioned
    lhs = (b - a) * np.log(th)
    la, lb = a.astype(ld), b.astype(ld)
    ref = (lb * np.log(lb) - lb) - (la * np.log(la) - la)
    cond = (np.abs(la * np.log(la)) + np.abs(lb * np.log(lb)) + la + lb) / np.abs(ref)
    good = cond < 1e6
    chain_err = float(np.max(np.abs(lhs[good] - ref[good]) / np.abs(ref[good])))
    # near-equal pairs and the ill-conditioned rest in 40-digit arithmetic
    m = 2000
    an = rng.uniform(1e-3, 1e3, m)
    bn = an * (1 + rng.uniform(-1e-8, 1e-8, m))
    an = np.concatenate([an, a[~good]])
    bn = np.concatenate([bn, b[~good]])
    keep = an != bn
    an, bn = an[keep], bn[keep]
    lhs_n = (bn - an) * np.log(K.theta_mean(an, bn))
    ref_n = np.array([_mp_dH(x, y) for x, y in zip(an, bn)])
    chain_err = max(chain_err, float(np.max(np.abs(lhs_n - ref_n) / np.abs(ref_n))))

    inv1 = float(np.max(np.abs(K.xi_extrapolate(a, th) - b) / b))

    c = rng.uniform(0, 1e3, n)
    c[c == 0] = 1.0
    xi = K.xi_extrapolate(a, c)
    above = c >= a / math.e
    inv2 = float(np.max(np.abs(K.theta_mean(a[above], xi[above]) - c[above]) / c[above]))

    bound_theta = bool(np.all(th >= np.minimum(a, b)))
    bound_xi = bool(np.all(xi >= 2 * c - a))

    # upper chain rule in long double from the double inputs and kernel output
    lx, lc = xi.astype(ld), c.astype(ld)
    Hb = np.where(lx > 0, lx * np.log(np.where(lx > 0, lx, 1)) - lx + 1, ld(1))
    Ha = la * np.log(la) - la + 1
    gap = ((lx - la) * np.log(lc) - (Hb - Ha)).astype(float)
    upper_ineq = float(gap.min())
    upper_eq = float(np.max(np.abs(gap[above])))
    elapsed = time.perf_counter() - t0

    ok = (chain_err <= 1e-10 and inv1 <= 1e-10 and inv2 <= 1e-10 and bound_theta and bound_xi
          and upper_ineq >= -1e-10 and upper_eq <= 1e-10 and elapsed < 10)
    report(1, ok, f"chain rule {chain_err:.1e}, Xi(Theta) {inv1:.1e}, Theta(Xi) {inv2:.1e}, "
                  f"bounds {bound_theta and bound_xi}, upper chain rule min {upper_ineq:.1e} / "
                  f"equality {upper_eq:.1e}, {2 * n + 2 * m} pairs in {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ criterion 2

def _distance2_colors(mesh):
    nbr = [set() for _ in range(mesh.n_cells)]
    for k, l in zip(mesh.facet_left, mesh.facet_right):
        nbr[k].add(l)
        nbr[l].add(k)
    colors = -np.ones(mesh.n_cells, dtype=int)
    for k in range(mesh.n_cells):
        near = set(nbr[k])
        for j in nbr[k]:
            near |= nbr[j]
        used = {colors[j] for j in near if colors[j] >= 0}
        colors[k] = next(c for c in range(len(used) + 1) if c not in used)
    return colors


def test_c2_jacobian_finite_differences(report, base):
    mesh = refine(base, "subdivision", 2)
    assert mesh.n_cells == 128
    pot = S.discretize_potential(mesh, gravity_case(check=False).V)
    colors = _distance2_colors(mesh)
    rows = np.concatenate([mesh.facet_left, mesh.facet_right, np.arange(mesh.n_cells)])
    cols = np.concatenate([mesh.facet_right, mesh.facet_left, np.arange(mesh.n_cells)])
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        a = rng.uniform(0, 3, mesh.n_cells)
        a[rng.random(mesh.n_cells) < 0.1] = 0.0
        s = rng.uniform(-0.45, 2.0, mesh.n_cells)
        s[np.abs(s) < 1e-3] += 1e-2
        s[a == 0] = np.abs(s[a == 0]) + 0.01
        tau = rng.uniform(1e-3, 0.1)
        J = S.step_jacobian(mesh, pot, a, s, tau).toarray()
        h = 1e-6 * (1 + np.abs(s))
        F = np.zeros_like(J)
        for c in range(colors.max() + 1):
            sel = colors == c
            dp, dm = s.copy(), s.copy()
            dp[sel] += h[sel]
            dm[sel] -= h[sel]
            # R(s+) - R(s-) formed from the differences of X and Y: the same
            # quotient, without cancelling the large storage terms of R
            Xp, Yp, _, _ = K.reparam(a, dp)
            Xm, Ym, _, _ = K.reparam(a, dm)
            diff = mesh.areas * (Xp - Xm) / tau + pot.laplacian @ ((Yp - Ym) / pot.pi)
            pick = sel[cols]
            F[rows[pick], cols[pick]] = diff[rows[pick]] / (2 * h[cols[pick]])
        nz = J[rows, cols] != 0
        rel = np.abs(F[rows, cols][nz] - J[rows, cols][nz]) / np.abs(J[rows, cols][nz])
        worst = max(worst, float(rel.max()))
    ok = worst <= 1e-6
    report(2, ok, f"max relative Jacobian entry error {worst:.2e} over 100 states, 128 cells")
    assert ok


# ------------------------------------------------------------ criterion 3

def test_c3_two_cell_oracle(report):
    mesh = two_cells()
    pot = S.discretize_potential(mesh, np.zeros(2))
    res = S.solve_step(mesh, pot, np.array([2.0, 0.0]), S.SchemeParams(tau=0.1))
    theta, rho1 = two_cell_oracle()
    et = float(np.abs(res.theta - theta).max())
    er = float(np.abs(res.rho_next - rho1).max())
    ok = et <= 1e-10 and er <= 1e-10
    report(3, ok, f"|theta - oracle| {et:.1e}, |rho1 - oracle| {er:.1e}, {res.newton_iters} Newton iterations")
    assert ok


# ------------------------------------------------------------ criterion 4

def _check_run(mesh, V, rho0, tau, n_steps, newton_tol=1e-11):
    """Run and check every structural invariant on every step; returns a summary dict."""
    pot = S.discretize_potential(mesh, V)
    params = S.SchemeParams(tau=tau, n_steps=n_steps, newton_tol=newton_tol)
    st = {"mass": 0.0, "theta_min": math.inf, "rho_neg": 0, "sandwich": 0.0, "edi": -math.inf,
          "equality": 0.0, "equality_steps": 0, "max_iters": 0}
    E = [D.discrete_energy(mesh, pot, rho0)]

    def obs(n, rp, res):
        m = S.mass(mesh, rp)
        st["mass"] = max(st["mass"], abs(S.mass(mesh, res.rho_next) - m) / m)
        st["theta_min"] = min(st["theta_min"], float(res.theta.min()))
        st["rho_neg"] += int(np.sum(res.rho_next < 0))
        tol = 1e-10 * (1 + rp)
        lo = np.minimum(rp, res.rho_next) - tol - res.theta
        hi = res.theta - 0.5 * (rp + res.rho_next) - tol
        st["sandwich"] = max(st["sandwich"], float(np.max(lo)), float(np.max(hi)))
        d = D.per_step_diagnostics(mesh, pot, rp, res, tau, E_prev=E[0])
        st["edi"] = max(st["edi"], d.edi_gap / m)
        if d.min_theta_ratio >= 1 / math.e:
            st["equality_steps"] += 1
            st["equality"] = max(st["equality"], abs(d.edi_gap) / m)
        st["max_iters"] = max(st["max_iters"], res.newton_iters)
        E[0] = d.energy

    S.run_trajectory(mesh, pot, rho0, params, observer=obs, keep=False)
    st["ok"] = (st["mass"] <= 1e-10 and st["theta_min"] > 0 and st["rho_neg"] == 0 and st["sandwich"] <= 0
                and st["edi"] <= 1e-9 and st["equality"] <= 1e-9)
    return st


def test_c4_structural_invariants(report, base):
    lines, ok = [], True
    grav = gravity_case()
    spir = spiral_case()
    for level in (2, 3):
        mesh = refine(base, "subdivision", level)
        n = 12 * 2 ** (level - 2)
        st = _check_run(mesh, grav.V, S.discretize_initial(mesh, grav.rho0), grav.T / n, n)
        lines.append(f"gravity L{level}: edi {st['edi']:.1e}, eq {st['equality']:.1e}/{st['equality_steps']}")
        ok &= st["ok"]
        st = _check_run(mesh, spir.V, S.discretize_initial(mesh, spir.rho0), 2e-4, 1000)
        lines.append(f"spiral L{level}: edi {st['edi']:.1e}, theta_min {st['theta_min']:.1e}, "
                     f"mass {st['mass']:.1e}")
        ok &= st["ok"]
    report(4, ok, "; ".join(lines))
    assert ok


# ------------------------------------------------------------ criterion 5

def test_c5_gibbs_stationarity(report, base):
    mesh = refine(base, "subdivision", 3)
    pot = S.discretize_potential(mesh, gravity_case(g=1.0, check=False).V)
    worst = {"dev": 0.0, "diss": 0.0}

    def obs(n, rp, res):
        worst["diss"] = max(worst["diss"], D.d_psi(mesh, res.theta, res.flux), D.r_psi(mesh, pot, res.theta))

    traj = S.run_trajectory(mesh, pot, pot.pi.copy(), S.SchemeParams(tau=0.01, n_steps=100), observer=obs)
    worst["dev"] = max(float(np.abs(r - pot.pi).max()) for r in traj.rho)
    ok = worst["dev"] <= 1e-9 and worst["diss"] <= 1e-12
    report(5, ok, f"max |rho - pi| {worst['dev']:.1e}, max dissipation {worst['diss']:.1e} over 100 steps")
    assert ok


# ------------------------------------------------------------ criteria 6, 7

def _ladder(delta, levels=5, level0=2):
    cfg = cli.build_config(cli.build_parser().parse_args(
        ["convergence", "--delta", str(delta), "--level", str(level0), "--levels", str(levels)]))
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)   # tau / d_min is constant under joint halving
        rows = np.array(cli.convergence_table(cfg), dtype=float)
    return rows, time.perf_counter() - t0


def _fmt_rates(col):
    return ", ".join(f"{r:.2f}" for r in col[1:])


def test_c6_second_order_convergence(report):
    rows, elapsed = _ladder(0.001)
    l1, l2 = rows[:, 3], rows[:, 5]
    rate_ok = np.all((l1[2:] >= 1.85) & (l1[2:] <= 2.2)) and np.all((l2[2:] >= 1.8) & (l2[2:] <= 2.2))
    # absolute L1 errors against the reference column at equal size (log-log interpolation)
    ref = np.exp(np.interp(np.log(rows[:, 1]), np.log(REFERENCE_LADDER[::-1, 0]), np.log(REFERENCE_LADDER[::-1, 1])))
    factor = rows[:, 2] / ref
    ok = bool(rate_ok and np.all((factor >= 1 / 3) & (factor <= 3)) and elapsed <= 600)
    report(6, ok, f"L1 rates {_fmt_rates(l1)}; L2 rates {_fmt_rates(l2)}; L1 / reference "
                  f"{factor.min():.2f}..{factor.max():.2f}; finest size {rows[-1, 1]:.2e}, {elapsed:.0f}s")
    assert ok


def test_c7_vacuum_degradation(report):
    rows, elapsed = _ladder(0.0)
    l1, linf, rmin = rows[:, 3], rows[:, 7], rows[:, 8]
    ok = bool(np.all(l1[-2:] >= 1.9) and np.all(linf[1:] <= 1.2) and np.all(np.diff(rmin) < 0)
              and rmin[-1] < rmin[0] / 100)
    report(7, ok, f"L1 rates {_fmt_rates(l1)}; Linf rates {_fmt_rates(linf)}; "
                  f"rho_min {', '.join(f'{v:.2e}' for v in rmin)}")
    assert ok


# ------------------------------------------------------------ criteria 8, 9

def test_c8_fisher_decomposition(report, base):
    mesh = refine(base, "subdivision", 3)
    rng = np.random.default_rng(8)
    worst = 0.0
    for i in range(100):
        pot = S.discretize_potential(mesh, rng.uniform(-3, 3, mesh.n_cells))
        rho = rng.uniform(0, 5, mesh.n_cells) * (rng.random(mesh.n_cells) > 0.1)
        R = D.r_psi(mesh, pot, rho)
        I, semi = D.fisher_split(mesh, pot, rho)
        worst = max(worst, abs(R / 2 - I - semi) / (R / 2))
    ok = worst <= 1e-12
    report(8, ok, f"max |R/2 - I - |sqrt rho|^2| / (R/2) = {worst:.1e} on 100 fields")
    assert ok


def test_c9_fenchel_equality(report, base):
    mesh = refine(base, "subdivision", 3)
    rng = np.random.default_rng(9)
    worst = 0.0
    for i in range(100):
        pot = S.discretize_potential(mesh, rng.uniform(-3, 3, mesh.n_cells))
        th = np.exp(rng.uniform(-4, 3, mesh.n_cells))
        F = S.sqra_flux(mesh, pot, th)
        lhs = D.d_psi(mesh, th, F) + D.r_psi(mesh, pot, th)
        worst = max(worst, abs(lhs + D.fenchel_pairing(mesh, pot, th, F)) / lhs)
    ok = worst <= 1e-10
    report(9, ok, f"max relative Fenchel gap {worst:.1e} on 100 fields")
    assert ok


# ----------------------------------------------------------- criterion 10

def test_c10_spiral_robustness(report, base):
    mesh = refine_subdivision(base, 50)
    case = spiral_case(1e-2)
    t0 = time.perf_counter()
    st = _check_run(mesh, case.V, S.discretize_initial(mesh, case.rho0), 2e-4, 1000)
    elapsed = time.perf_counter() - t0
    ok = (mesh.n_cells >= 20_000 and st["max_iters"] <= 20 and st["theta_min"] > 0 and st["rho_neg"] == 0
          and st["edi"] <= 1e-9 and elapsed <= 900)
    report(10, ok, f"{mesh.n_cells} cells, 1000 steps, max {st['max_iters']} Newton iterations, "
                   f"theta_min {st['theta_min']:.1e}, max EDI excess {st['edi']:.1e} x mass, {elapsed:.0f}s")
    assert ok
