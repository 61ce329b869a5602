import numpy as np
import pytest
import scipy.sparse.linalg as sla
from scipy.spatial.transform import Rotation

from hexadapt.beam import NeedleModel, beam_stiffness
from hexadapt.errors import InvalidArgumentError
from hexadapt.fem import Material

STEEL = Material(2e11, 0.3, density=7800.0)


def cantilever_tip(n, P=1.0, L=0.1, r=0.002, kappa=0.9):
    needle = NeedleModel.straight([0, 0, 0], [1, 0, 0], L, n, r, STEEL, shear_correction=kappa)
    K = needle.tangent_stiffness().tocsc()
    free = np.arange(6, 6 * needle.n_nodes)
    f = np.zeros(6 * needle.n_nodes)
    f[-6 + 1] = P
    u = sla.spsolve(K[free][:, free], f[free])
    return u[-6 + 1]


def timoshenko_tip(P=1.0, L=0.1, r=0.002, kappa=0.9):
    E, G = STEEL.young_modulus, STEEL.shear_modulus
    I = np.pi * r**4 / 4
    A = np.pi * r**2
    return P * L**3 / (3 * E * I) + P * L / (kappa * G * A)


def test_rejects_bad_geometry():
    with pytest.raises(InvalidArgumentError):
        beam_stiffness(0.0, 0.1, STEEL)
    with pytest.raises(InvalidArgumentError):
        NeedleModel([[0, 0, 0]], 0.1, STEEL)


def test_rigid_translation_zero_force():
    K = beam_stiffness(0.3, 0.01, STEEL)
    u = np.concatenate([[1.0, -2.0, 0.5, 0, 0, 0]] * 2)
    assert np.linalg.norm(K @ u) <= 1e-10 * np.linalg.norm(K)
    assert np.allclose(K, K.T)
    ev = np.linalg.eigvalsh(K)
    assert np.sum(ev < 1e-10 * ev.max()) == 6


def test_cantilever_tip_deflection():
    assert cantilever_tip(50) == pytest.approx(timoshenko_tip(), rel=0.02)


def test_cantilever_exact_at_every_resolution():
    # the shear-corrected element is nodally exact for end loads
    exact = timoshenko_tip()
    for n in (1, 10, 20, 40):
        assert cantilever_tip(n) == pytest.approx(exact, rel=1e-9)


def test_axial_stretch_force():
    L, r, d = 0.05, 0.001, 1e-6
    needle = NeedleModel.straight([0, 0, 0], [0, 0, 1], L, 1, r, STEEL)
    x = needle.rest.copy()
    x[1, 2] += d
    f = needle.internal_force(x)
    EA = STEEL.young_modulus * np.pi * r**2
    assert f[1, 2] == pytest.approx(EA * d / L, rel=1e-9)
    assert f[0, 2] == pytest.approx(-EA * d / L, rel=1e-9)


def test_undeformed_and_rigid_rotation_zero_force():
    needle = NeedleModel.straight([0.1, 0, 0], [1, 1, 0], 0.03, 8, 0.001, STEEL)
    assert np.allclose(needle.internal_force(), 0.0, atol=1e-12)
    Q = Rotation.from_rotvec([0, 0, np.pi / 2])
    x = Q.apply(needle.rest) + [0.2, -0.1, 0.3]
    q = np.tile(Q.as_quat(), (needle.n_nodes, 1))
    # deformed-state force scale for the relative bound
    xd = needle.rest.copy()
    xd[-1] += [0, 1e-4, 0]
    scale = np.linalg.norm(needle.internal_force(xd))
    assert np.linalg.norm(needle.internal_force(x, q)) <= 1e-8 * scale


def test_small_bend_matches_linear():
    needle = NeedleModel.straight([0, 0, 0], [1, 0, 0], 0.03, 6, 0.001, STEEL)
    rng = np.random.default_rng(3)
    u = 1e-9 * rng.normal(size=(needle.n_nodes, 6))
    u[:, 3:] *= 30.0
    x = needle.rest + u[:, :3]
    q = Rotation.from_rotvec(u[:, 3:]).as_quat()
    f = needle.internal_force(x, q).ravel()
    lin = needle.tangent_stiffness() @ u.ravel()
    assert np.linalg.norm(f - lin) <= 1e-6 * np.linalg.norm(lin)


def test_force_balance_under_deformation():
    needle = NeedleModel.straight([0, 0, 0], [1, 0, 0], 0.03, 6, 0.001, STEEL)
    x = needle.rest.copy()
    x[:, 1] += 1e-3 * (x[:, 0] / 0.03) ** 2
    q = Rotation.from_rotvec(np.outer(x[:, 0] / 0.03, [0, 0, 0.05])).as_quat()
    f = needle.internal_force(x, q)
    assert np.linalg.norm(f[:, :3].sum(axis=0)) <= 1e-9 * np.abs(f[:, :3]).max()
    moment = f[:, 3:].sum(axis=0) + np.cross(x, f[:, :3]).sum(axis=0)
    assert np.linalg.norm(moment) <= 1e-9 * np.abs(f).max()


def test_arc_position_and_mass():
    needle = NeedleModel.straight([0, 0, 0], [1, 0, 0], 1.0, 4, 0.1, STEEL)
    p, (i, j), (wi, wj) = needle.arc_position(0.6)
    assert (i, j) == (2, 3)
    assert np.allclose(p, [0.6, 0, 0])
    assert wi == pytest.approx(0.6) and wj == pytest.approx(0.4)
    m = needle.lumped_mass().reshape(-1, 6)[:, 0]
    assert m.sum() == pytest.approx(7800.0 * np.pi * 0.01, rel=1e-12)
