import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from spinfilter.errors import CapacityError, DimensionMismatch, DomainError
from spinfilter.spin import (
    SpinBasis, angles_from_bloch, bloch_from_angles, build_operators, diagnostics_batch, expect, fidelity_bloch,
    husimi_q, scs_state, squeezing_xi2,
)

angles = st.tuples(st.floats(0, np.pi), st.floats(0, 2 * np.pi))


def comm(a, b):
    return a @ b - b @ a


class TestOperators:
    def test_n1_is_half_pauli(self):
        ops = build_operators(1)
        np.testing.assert_allclose(ops.Jz, np.diag([0.5, -0.5]))
        np.testing.assert_allclose(ops.Jx, 0.5 * np.array([[0, 1], [1, 0]]))
        np.testing.assert_allclose(ops.Jy, 0.5 * np.array([[0, -1j], [1j, 0]]))

    def test_n2_jz(self):
        np.testing.assert_allclose(build_operators(2).Jz, np.diag([1.0, 0.0, -1.0]))

    @pytest.mark.parametrize("n", [1, 2, 7, 50, 100])
    def test_algebra(self, n):
        ops = build_operators(n)
        Jx, Jy, Jz = ops.as_tuple()
        tol = 1e-12 * np.linalg.norm(Jz, 2)
        assert np.linalg.norm(comm(Jx, Jy) - 1j * Jz, 2) <= tol
        assert np.linalg.norm(comm(Jy, Jz) - 1j * Jx, 2) <= tol
        assert np.linalg.norm(comm(Jz, Jx) - 1j * Jy, 2) <= tol
        J = n / 2
        assert np.abs(ops.Jsq - J * (J + 1) * np.eye(n + 1)).max() < 1e-12 * max(1, J * J)
        for A in (Jx, Jy, Jz):
            assert np.abs(A - A.conj().T).max() < 1e-12

    def test_capacity(self):
        with pytest.raises(CapacityError):
            SpinBasis(0)
        with pytest.raises(CapacityError):
            SpinBasis(10**7)

    def test_basis_fields(self):
        b = SpinBasis(5)
        assert b.dim == 6 and b.J == 2.5
        np.testing.assert_array_equal(b.m_values, [2.5, 1.5, 0.5, -0.5, -1.5, -2.5])


class TestCoherentStates:
    def test_north_pole(self):
        psi = scs_state(0.0, 1.234, 50)
        assert abs(psi[0]) == pytest.approx(1.0)
        assert np.abs(psi[1:]).max() == 0.0

    def test_n2_equator(self):
        np.testing.assert_allclose(np.abs(scs_state(np.pi / 2, 0.0, 2)), [0.5, 1 / np.sqrt(2), 0.5], atol=1e-15)

    def test_equator_variances_n50(self):
        ops = build_operators(50)
        psi = scs_state(np.pi / 2, 0.0, 50)
        vz = expect(ops.Jz @ ops.Jz, psi).real - expect(ops.Jz, psi).real ** 2
        vy = expect(ops.Jy @ ops.Jy, psi).real - expect(ops.Jy, psi).real ** 2
        assert vz == pytest.approx(12.5, abs=1e-9)
        assert vy == pytest.approx(12.5, abs=1e-9)
        assert vz * vy == pytest.approx(0.25 * expect(ops.Jx, psi).real ** 2, abs=1e-9)

    def test_moment_grid(self):
        n = 9
        ops = build_operators(n)
        for th in np.linspace(0, np.pi, 10):
            for ph in np.linspace(0, 2 * np.pi, 10, endpoint=False):
                psi = scs_state(th, ph, n)
                mean = [expect(A, psi).real for A in ops.as_tuple()]
                np.testing.assert_allclose(mean, n / 2 * bloch_from_angles(th, ph), atol=1e-9)

    @given(angles, st.integers(1, 60))
    def test_unit_norm(self, ang, n):
        psi = scs_state(*ang, n)
        assert abs(np.vdot(psi, psi).real - 1) <= 1e-9

    def test_large_n_exact(self):
        # lgamma binomials keep the state exact where Stirling-type shortcuts drift.
        n = 2000
        psi = scs_state(1.1, 0.3, n)
        m = SpinBasis(n).m_values
        assert np.dot(m, np.abs(psi) ** 2) == pytest.approx(n / 2 * np.cos(1.1), rel=1e-10)

    def test_angle_wrapping(self):
        a = scs_state(2 * np.pi - 0.4, 0.2, 6)
        b = scs_state(0.4, 0.2 + np.pi, 6)
        assert abs(abs(np.vdot(a, b)) - 1) < 1e-12


class TestExpect:
    def test_examples(self):
        ops4 = build_operators(4)
        assert expect(ops4.Jz, scs_state(0, 0, 4)).real == pytest.approx(2)
        assert expect(ops4.Jsq, scs_state(0.7, 2.1, 4)).real == pytest.approx(6)
        assert expect(build_operators(10).Jx, scs_state(np.pi / 2, 0, 10)).real == pytest.approx(5)

    def test_mismatch(self):
        with pytest.raises(DimensionMismatch):
            expect(build_operators(3).Jz, scs_state(0, 0, 4))


class TestSqueezing:
    def test_scs_is_zero_db(self):
        rep = squeezing_xi2(scs_state(0.9, 0.4, 50), 50)
        assert rep.xi2 == pytest.approx(1.0, abs=1e-6)
        assert abs(rep.xi2_db) < 1e-5
        np.testing.assert_allclose(rep.gamma, rep.gamma.T)

    def test_dicke_n2_brute(self):
        psi = np.array([0, 1, 0], complex)
        ops = build_operators(2)
        Js = ops.as_tuple()
        corr = np.array([[0.5 * expect(a @ b + b @ a, psi).real for b in Js] for a in Js])
        mean = np.array([expect(a, psi).real for a in Js])
        gamma = (2 - 1) * (corr - np.outer(mean, mean)) + corr
        lam = np.linalg.eigvalsh(gamma)[0]
        rep = squeezing_xi2(psi, 2)
        assert rep.lambda_min == pytest.approx(lam)
        assert rep.xi2 == pytest.approx(lam / (np.trace(corr) - 1))

    def test_n1_rejected(self):
        with pytest.raises(DomainError):
            squeezing_xi2(scs_state(0, 0, 1), 1)

    @given(angles, st.integers(2, 40))
    def test_product_states_not_squeezed(self, ang, n):
        assert squeezing_xi2(scs_state(*ang, n), n).xi2 >= 1 - 1e-9

    def test_batch_matches_single(self):
        n = 12
        ops = build_operators(n)
        rng = np.random.default_rng(1)
        states = rng.normal(size=(4, n + 1)) + 1j * rng.normal(size=(4, n + 1))
        states /= np.linalg.norm(states, axis=1)[:, None]
        out = diagnostics_batch(states, ops)
        for k, psi in enumerate(states):
            assert out["xi2_db"][k] == pytest.approx(squeezing_xi2(psi, n, ops).xi2_db, abs=1e-10)
            assert out["mean"][k, 2] == pytest.approx(expect(ops.Jz, psi).real)


class TestHusimi:
    def test_peak(self):
        psi = scs_state(0.8, 1.9, 50)
        assert husimi_q(psi, 0.8, 1.9, 50) == pytest.approx(51 / (4 * np.pi), rel=1e-12)
        assert 51 / (4 * np.pi) == pytest.approx(4.058, abs=1e-3)

    def test_antipode(self):
        assert husimi_q(scs_state(0, 0, 20), np.pi, 0.0, 20) < 1e-12

    @pytest.mark.parametrize("n", [1, 10, 50])
    def test_normalized(self, n):
        rng = np.random.default_rng(n)
        psi = rng.normal(size=n + 1) + 1j * rng.normal(size=n + 1)
        psi /= np.linalg.norm(psi)
        # Gauss-Legendre in cos(theta), trapezoid in phi (exact for the band-limited integrand).
        x, w = np.polynomial.legendre.leggauss(n + 2)
        phi = np.linspace(0, 2 * np.pi, 2 * n + 3, endpoint=False)
        th = np.arccos(x)
        q = husimi_q(psi, th[:, None], phi[None, :], n)
        total = np.sum(w[:, None] * q) * (2 * np.pi / len(phi))
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_normalized_scipy_quad(self):
        # The north-pole state is azimuthally symmetric, so one adaptive 1-D quadrature suffices.
        psi = scs_state(0.0, 0.0, 4)
        val, _ = quad(lambda th: 2 * np.pi * np.sin(th) * husimi_q(psi, th, 0.0, 4), 0, np.pi)
        assert val == pytest.approx(1.0, abs=1e-8)


class TestBloch:
    def test_fidelity_examples(self):
        e = np.eye(3)
        assert fidelity_bloch(e[2], e[2]) == 1.0
        assert fidelity_bloch(e[2], -e[2]) == 0.0
        assert fidelity_bloch(e[0], e[1]) == 0.5

    @given(angles)
    def test_angle_round_trip(self, ang):
        x = bloch_from_angles(*ang)
        back = bloch_from_angles(*angles_from_bloch(x))
        np.testing.assert_allclose(back, x, atol=1e-12)
