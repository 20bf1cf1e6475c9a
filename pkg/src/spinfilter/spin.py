"""Collective spin operators, spin coherent states and state diagnostics.

States live in the symmetric irrep J = n/2 with basis |J, m> ordered by
descending m, so index k carries m = J - k.  Half-integer J is never
stored as a float: everything is derived from the qubit count n.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import lgamma

import numpy as np

from .errors import CapacityError, DimensionMismatch, DomainError

# Dense J matrices cost 4 * (n+1)^2 complex doubles; this keeps them well
# under a gigabyte.
MAX_QUBITS = 4000


@dataclass(frozen=True)
class SpinBasis:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise CapacityError(f"qubit count must be a positive integer, got {self.n}", n=self.n)
        if self.n > MAX_QUBITS:
            raise CapacityError(f"n={self.n} exceeds the dense-operator budget", n=self.n, limit=MAX_QUBITS)

    @property
    def J(self) -> float:
        return self.n / 2

    @property
    def dim(self) -> int:
        return self.n + 1

    @property
    def m_values(self) -> np.ndarray:
        """Magnetic quantum numbers J, J-1, ..., -J."""
        return self.n / 2 - np.arange(self.n + 1)


@dataclass(frozen=True)
class CollectiveOperators:
    basis: SpinBasis
    Jx: np.ndarray
    Jy: np.ndarray
    Jz: np.ndarray
    Jsq: np.ndarray

    def as_tuple(self):
        return self.Jx, self.Jy, self.Jz


def ladder_coefficients(n: int) -> np.ndarray:
    """Matrix elements <m+1|J+|m> for m = J-1, ..., -J (length n).

    Entry k couples basis index k+1 (lower m) to index k.
    """
    J = n / 2
    m = J - np.arange(1, n + 1)
    return np.sqrt(J * (J + 1) - m * (m + 1))


def build_operators(basis: SpinBasis | int) -> CollectiveOperators:
    if not isinstance(basis, SpinBasis):
        basis = SpinBasis(int(basis))
    dim = basis.dim
    jp = np.zeros((dim, dim), dtype=complex)
    c = ladder_coefficients(basis.n)
    jp[np.arange(dim - 1), np.arange(1, dim)] = c
    jm = jp.conj().T
    Jx = 0.5 * (jp + jm)
    Jy = -0.5j * (jp - jm)
    Jz = np.diag(basis.m_values).astype(complex)
    Jsq = Jx @ Jx + Jy @ Jy + Jz @ Jz
    for a in (Jx, Jy, Jz, Jsq):
        a.setflags(write=False)
    return CollectiveOperators(basis, Jx, Jy, Jz, Jsq)


def _log_binomial(n: int, k: np.ndarray) -> np.ndarray:
    return np.array([lgamma(n + 1) - lgamma(kk + 1) - lgamma(n - kk + 1) for kk in k])


def _wrap_angles(theta: float, phi: float) -> tuple[float, float]:
    theta = float(np.mod(theta, 2 * np.pi))
    if theta > np.pi:
        theta = 2 * np.pi - theta
        phi = phi + np.pi
    return theta, float(np.mod(phi, 2 * np.pi))


def scs_amplitudes(theta: float, phi: float, n: int) -> np.ndarray:
    """Spin coherent state amplitudes in the m-descending basis.

    c_k = sqrt(C(n, k)) cos(theta/2)^(n-k) sin(theta/2)^k exp(+i k phi), with
    k = J - m, which puts <J> along the (theta, phi) direction.  Binomials
    go through lgamma so large n stays exact; the powers are evaluated in
    log space as well, guarding exact zeros at the poles.
    """
    theta, phi = _wrap_angles(theta, phi)
    k = np.arange(n + 1)
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    logmag = 0.5 * _log_binomial(n, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        lc, ls = np.log(abs(c)), np.log(abs(s))
        # 0 * log(0) must read as 1 (0^0), so split the exponent terms.
        pc = np.where(n - k == 0, 0.0, (n - k) * lc)
        ps = np.where(k == 0, 0.0, k * ls)
    mag = np.exp(logmag + pc + ps) * np.sign(c) ** (n - k)
    amps = mag * np.exp(1j * k * phi)
    return amps / np.linalg.norm(amps)


def scs_state(theta: float, phi: float, basis: SpinBasis | int) -> np.ndarray:
    n = basis.n if isinstance(basis, SpinBasis) else int(basis)
    return scs_amplitudes(theta, phi, n)


def expect(op: np.ndarray, psi: np.ndarray) -> complex:
    op = np.asarray(op)
    psi = np.asarray(psi)
    if op.shape != (psi.shape[-1], psi.shape[-1]):
        raise DimensionMismatch(f"operator {op.shape} does not act on state of length {psi.shape[-1]}")
    return complex(np.vdot(psi, op @ psi))


def _moments(psi_batch: np.ndarray, ops: CollectiveOperators):
    """First and symmetrized second moments for a batch of states (K, dim)."""
    psi_batch = np.atleast_2d(psi_batch)
    Js = ops.as_tuple()
    applied = [psi_batch @ J.T for J in Js]
    first = np.stack([np.einsum("kd,kd->k", psi_batch.conj(), a).real for a in applied], axis=-1)
    corr = np.empty(psi_batch.shape[:1] + (3, 3))
    for i in range(3):
        for j in range(i, 3):
            # <J_i J_j + J_j J_i>/2 = Re <J_i psi | J_j psi>
            v = np.einsum("kd,kd->k", applied[i].conj(), applied[j]).real
            corr[:, i, j] = corr[:, j, i] = v
    return first, corr


@dataclass(frozen=True)
class SqueezingReport:
    corr: np.ndarray
    covar: np.ndarray
    gamma: np.ndarray
    lambda_min: float
    xi2: float
    xi2_db: float = field(init=False)

    def __post_init__(self):
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "xi2_db", float(10 * np.log10(self.xi2)))


def squeezing_xi2(psi: np.ndarray, basis: SpinBasis | int, ops: CollectiveOperators | None = None) -> SqueezingReport:
    """Pairwise-entanglement squeezing parameter lambda_min(Gamma)/(<J^2> - n/2)."""
    if not isinstance(basis, SpinBasis):
        basis = SpinBasis(int(basis))
    n = basis.n
    if n < 2:
        raise DomainError("squeezing parameter needs n >= 2", n=n)
    ops = ops or build_operators(basis)
    first, corr = _moments(psi, ops)
    first, corr = first[0], corr[0]
    covar = corr - np.outer(first, first)
    gamma = (n - 1) * covar + corr
    gamma = 0.5 * (gamma + gamma.T)
    lam = float(np.linalg.eigvalsh(gamma)[0])
    jsq = float(np.trace(corr))
    return SqueezingReport(corr, covar, gamma, lam, lam / (jsq - n / 2))


def diagnostics_batch(states: np.ndarray, ops: CollectiveOperators) -> dict[str, np.ndarray]:
    """Means, variances and squeezing (dB) for a stack of states.

    Used for trajectory logs, where thousands of states are evaluated at once.
    """
    n = ops.basis.n
    states = np.atleast_2d(states)
    norms = np.einsum("kd,kd->k", states.conj(), states).real
    states = states / np.sqrt(norms)[:, None]
    first, corr = _moments(states, ops)
    var = np.einsum("kii->ki", corr) - first**2
    out = {"mean": first, "var": var}
    if n >= 2:
        covar = corr - first[:, :, None] * first[:, None, :]
        gamma = (n - 1) * covar + corr
        lam = np.linalg.eigvalsh(0.5 * (gamma + gamma.transpose(0, 2, 1)))[:, 0]
        jsq = np.einsum("kii->k", corr)
        out["xi2_db"] = 10 * np.log10(lam / (jsq - n / 2))
    else:
        out["xi2_db"] = np.full(len(states), np.nan)
    return out


def husimi_q(psi: np.ndarray, theta, phi, basis: SpinBasis | int) -> np.ndarray:
    """Husimi Q-function ((2J+1)/4pi) |<theta,phi|psi>|^2, vectorized over angles."""
    n = basis.n if isinstance(basis, SpinBasis) else int(basis)
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    k = np.arange(n + 1)
    half = theta[..., None] / 2
    logmag = 0.5 * _log_binomial(n, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        pc = np.where(n - k == 0, 0.0, (n - k) * np.log(np.abs(np.cos(half))))
        ps = np.where(k == 0, 0.0, k * np.log(np.abs(np.sin(half))))
    coh = np.exp(logmag + pc + ps) * np.exp(1j * k * phi[..., None])
    overlap = np.einsum("...k,k->...", coh.conj(), psi)
    return (n + 1) / (4 * np.pi) * np.abs(overlap) ** 2


def fidelity_bloch(r_true, r_est) -> float:
    """Qubit fidelity 0.5 (1 + r_true . r_est)."""
    return float(0.5 * (1 + np.dot(np.asarray(r_true, float), np.asarray(r_est, float))))


def bloch_from_angles(theta, phi, r=1.0) -> np.ndarray:
    theta, phi = np.asarray(theta, float), np.asarray(phi, float)
    return r * np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)


def angles_from_bloch(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    return float(np.arctan2(np.hypot(x[0], x[1]), x[2])), float(np.arctan2(x[1], x[0]))
