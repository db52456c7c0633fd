import math

import numpy as np
import pytest

from sqrafp import diagnostics as D
from sqrafp import kernels as K
from sqrafp import scheme as S
from sqrafp.cases import gravity_case
from sqrafp.mesh import Mesh, load_mesh, refine


@pytest.fixture(scope="module")
def mesh():
    return refine(load_mesh(), "subdivision", 2)


@pytest.fixture(scope="module")
def gravity(mesh):
    return S.discretize_potential(mesh, gravity_case(check=False).V)


def facet(d=1.0, V=(0.0, 0.0)):
    m = Mesh.from_tpfa([0.5, 0.5], [0], [1], [1.0], [d])
    return m, S.discretize_potential(m, np.array(V))


def test_energy_and_entropy_examples(mesh):
    zero = S.discretize_potential(mesh, lambda x, y: 0 * x)
    assert D.discrete_energy(mesh, zero, np.ones(mesh.n_cells)) == 0.0
    assert D.discrete_energy(mesh, zero, np.zeros(mesh.n_cells)) == pytest.approx(1.0, rel=1e-14)
    pot = S.discretize_potential(mesh, lambda x, y: -x)
    x1 = mesh.centers[:, 0]
    ref = np.sum(mesh.areas * (K.entropy(np.exp(x1)) - x1 * np.exp(x1)))
    assert D.discrete_energy(mesh, pot, pot.pi) == pytest.approx(ref, rel=1e-13)
    # the Gibbs energy is sum m_K (1 - pi_K): the continuous value is 2 - e
    assert D.discrete_energy(mesh, pot, pot.pi) == pytest.approx(2 - math.e, abs=2e-2)
    assert D.discrete_entropy(mesh, np.ones(mesh.n_cells)) == 0.0


def test_energy_decrease_matches_difference(mesh, gravity):
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 3, (2, mesh.n_cells))
    a[:5] = 0.0
    b[3:8] = 0.0
    direct = D.discrete_energy(mesh, gravity, a) - D.discrete_energy(mesh, gravity, b)
    assert D.energy_decrease(mesh, gravity, a, b) == pytest.approx(direct, rel=1e-12, abs=1e-14)


def test_d_psi_conventions_and_value():
    m, pot = facet()
    assert D.d_psi(m, np.array([1.0, 1.0]), np.array([0.0])) == 0.0
    assert D.d_psi(m, np.array([0.0, 1.0]), np.array([0.0])) == 0.0
    assert D.d_psi(m, np.array([0.0, 1.0]), np.array([1e-3])) == math.inf
    z = 2 * math.sinh(0.5)
    assert D.d_psi(m, np.array([1.0, 1.0]), np.array([z])) == pytest.approx(float(K.psi(z)), rel=1e-15)


def test_r_psi_examples(mesh, gravity):
    m, _ = facet(d=0.5)
    pot = S.discretize_potential(m, np.zeros(2))
    assert D.r_psi(m, pot, np.array([4.0, 1.0])) == pytest.approx(4.0, rel=1e-15)
    assert D.r_psi(mesh, gravity, gravity.pi) == pytest.approx(0.0, abs=1e-28)
    rng = np.random.default_rng(1)
    th = rng.uniform(0.1, 2, mesh.n_cells)
    zero = S.discretize_potential(mesh, lambda x, y: 0 * x)
    ref = 2 * np.sum(mesh.transmissibility * (np.sqrt(th[mesh.facet_left]) - np.sqrt(th[mesh.facet_right])) ** 2)
    assert D.r_psi(mesh, zero, th) == pytest.approx(ref, rel=1e-13)


def test_fisher_split_examples(mesh):
    m, pot = facet(V=(0.0, 1.0))
    I, semi = D.fisher_split(m, pot, np.array([1.0, 0.0]))
    assert I == pytest.approx(math.exp(-0.5) - 1, rel=1e-15)
    assert semi == pytest.approx(1.0)
    zero = S.discretize_potential(mesh, lambda x, y: 0 * x)
    I, _ = D.fisher_split(mesh, zero, np.random.default_rng(0).uniform(0, 1, mesh.n_cells))
    assert I == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_fisher_identity(mesh, gravity, seed):
    rho = np.random.default_rng(seed).uniform(0, 4, mesh.n_cells)
    R = D.r_psi(mesh, gravity, rho)
    I, semi = D.fisher_split(mesh, gravity, rho)
    assert abs(R / 2 - I - semi) <= 1e-12 * (1 + R)


@pytest.mark.parametrize("seed", range(5))
def test_fenchel_equality_at_sqra_fluxes(mesh, gravity, seed):
    th = np.random.default_rng(seed).uniform(1e-2, 5, mesh.n_cells)
    F = S.sqra_flux(mesh, gravity, th)
    lhs = D.d_psi(mesh, th, F) + D.r_psi(mesh, gravity, th)
    pair = D.fenchel_pairing(mesh, gravity, th, F)
    assert abs(lhs + pair) <= 1e-10 * lhs


def test_edi_residual():
    assert D.edi_residual(2.0, 1.0, 3.0, 4.0, 0.5) == pytest.approx(-5.0)
    assert D.edi_residual(1.0, 1.0, 0.0, 0.0, 0.1) == 0.0


def test_per_step_gibbs(mesh, gravity):
    res = S.solve_step(mesh, gravity, gravity.pi.copy(), S.SchemeParams(tau=0.1))
    d = D.per_step_diagnostics(mesh, gravity, gravity.pi, res, 0.1, t=0.1)
    assert d.d_psi <= 1e-24 and d.r_psi <= 1e-24 and abs(d.delta) <= 1e-12
    assert d.mass == pytest.approx(S.mass(mesh, gravity.pi), rel=1e-14)
    assert d.min_theta_ratio == pytest.approx(1.0)
    assert set(d.as_dict()) >= {"energy", "entropy", "d_psi", "r_psi", "delta", "mass", "rho_min", "newton_iters"}


@pytest.mark.parametrize("delta", [0.001, 0.0])
def test_gravity_edi_and_release_identity(mesh, gravity, delta):
    case = gravity_case(delta=delta, check=False)
    rho = S.discretize_initial(mesh, case.rho0)
    tau = 0.02
    m0 = S.mass(mesh, rho)
    slack = D.edi_tolerance(m0)
    E_prev = D.discrete_energy(mesh, gravity, rho)
    total = 0.0
    for n in range(8):
        res = S.solve_step(mesh, gravity, rho, S.SchemeParams(tau=tau))
        d = D.per_step_diagnostics(mesh, gravity, rho, res, tau, E_prev=E_prev)
        assert d.edi_gap <= slack
        assert d.energy < E_prev
        # delta equals the scaled entropy release
        assert abs(tau * d.delta + d.release) <= slack
        if d.min_theta_ratio >= 1 / math.e:
            assert abs(tau * d.delta) <= slack
        total += tau * (d.d_psi + d.r_psi)
        E_prev = d.energy
        rho = res.rho_next
    assert total <= D.uniform_bound(mesh, gravity, S.discretize_initial(mesh, case.rho0))
