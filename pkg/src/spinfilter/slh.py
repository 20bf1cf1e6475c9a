"""Quantum stochastic coefficient algebra on a finite system space.

A propagator dU = (G_ij dLambda_ij + G_i0 dA_i^dag + G_0j dA_j + G_00 dt) U
is stored as a (d+1) x (d+1) grid of system matrices, index 0 being time.
Channel indices in the grid run 1..d; channel labels in ``ItoLabel`` run
1..d as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, DomainError, InvalidPropagator, NonInvertibleCoupling
from .spin import SpinBasis, build_operators

CONSTRAINT_TOL = 1e-8
_KINDS = ("dt", "dA", "dAdag", "dLambda")


@dataclass(frozen=True)
class ItoLabel:
    kind: str
    i: int = 0
    j: int = 0
    d: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DomainError(f"unknown differential {self.kind!r}")
        need = {"dt": (), "dA": ("i",), "dAdag": ("i",), "dLambda": ("i", "j")}[self.kind]
        for name in ("i", "j"):
            v = getattr(self, name)
            if name in need:
                if not 1 <= v <= self.d:
                    raise DomainError(f"channel index {name}={v} outside 1..{self.d}")
            elif v != 0:
                raise DomainError(f"{self.kind} takes no index {name}")

    def __str__(self):
        if self.kind == "dt":
            return "dt"
        if self.kind == "dLambda":
            return f"dLambda_{self.i}{self.j}"
        return f"{self.kind}_{self.i}"


def dt(d: int = 1) -> ItoLabel:
    return ItoLabel("dt", d=d)


def dA(i: int, d: int = 1) -> ItoLabel:
    return ItoLabel("dA", i, d=d)


def dAdag(i: int, d: int = 1) -> ItoLabel:
    return ItoLabel("dAdag", i, d=d)


def dLambda(i: int, j: int, d: int = 1) -> ItoLabel:
    return ItoLabel("dLambda", i, j, d=d)


def ito_product(a: ItoLabel, b: ItoLabel) -> ItoLabel | None:
    """Product of two quantum Ito differentials; None stands for zero."""
    if a.d != b.d:
        raise DimensionMismatch("differentials act on different channel counts", left=a.d, right=b.d)
    d = a.d
    if a.kind == "dA" and b.kind == "dAdag":
        return dt(d) if a.i == b.i else None
    if a.kind == "dA" and b.kind == "dLambda":
        return dA(b.j, d) if a.i == b.i else None
    if a.kind == "dLambda" and b.kind == "dAdag":
        return dAdag(a.i, d) if a.j == b.i else None
    if a.kind == "dLambda" and b.kind == "dLambda":
        return dLambda(a.i, b.j, d) if a.j == b.i else None
    return None


def all_labels(d: int) -> list[ItoLabel]:
    out = [dt(d)]
    out += [dA(i, d) for i in range(1, d + 1)]
    out += [dAdag(i, d) for i in range(1, d + 1)]
    out += [dLambda(i, j, d) for i in range(1, d + 1) for j in range(1, d + 1)]
    return out


# ---------------------------------------------------------------- coefficients

@dataclass(frozen=True)
class GCoefficients:
    G: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.G, dtype=complex)
        if G.ndim != 4 or G.shape[0] != G.shape[1] or G.shape[2] != G.shape[3] or G.shape[0] < 2:
            raise DimensionMismatch(f"G must have shape (d+1, d+1, dim, dim), got {G.shape}")
        if not np.all(np.isfinite(G)):
            raise DomainError("G has non-finite entries")
        object.__setattr__(self, "G", G)

    @property
    def d(self) -> int:
        return self.G.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.G.shape[2]


@dataclass(frozen=True)
class SLHTriple:
    S: np.ndarray  # (d, d, dim, dim)
    L: np.ndarray  # (d, dim, dim)
    H: np.ndarray  # (dim, dim)

    def __post_init__(self):
        S, L, H = (np.asarray(a, dtype=complex) for a in (self.S, self.L, self.H))
        dim = H.shape[0]
        d = L.shape[0]
        if H.shape != (dim, dim) or L.shape != (d, dim, dim) or S.shape != (d, d, dim, dim):
            raise DimensionMismatch("inconsistent S, L, H shapes", S=S.shape, L=L.shape, H=H.shape)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "H", H)

    @property
    def d(self) -> int:
        return self.L.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def scattering_block(self) -> np.ndarray:
        """S as a (d dim) x (d dim) matrix."""
        d, dim = self.d, self.dim
        return self.S.transpose(0, 2, 1, 3).reshape(d * dim, d * dim)

    def unitarity_residual(self) -> float:
        s = self.scattering_block()
        eye = np.eye(len(s))
        return float(max(np.abs(s.conj().T @ s - eye).max(), np.abs(s @ s.conj().T - eye).max()))

    def hermiticity_residual(self) -> float:
        return float(np.abs(self.H - self.H.conj().T).max())


def _dag(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a.conj(), -1, -2)


@dataclass(frozen=True)
class UnitarityReport:
    """Max-norm residuals of both constraint families per (alpha, beta) block.

    ``isometry[a, b]`` is |G_ab + G_ba^dag + sum_l G_la^dag G_lb| and
    ``coisometry[a, b]`` is |G_ab + G_ba^dag + sum_l G_al G_bl^dag|.
    """

    isometry: np.ndarray
    coisometry: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(max(self.isometry.max(), self.coisometry.max()))

    @property
    def worst_block(self) -> tuple[str, int, int]:
        fam, arr = max((("isometry", self.isometry), ("coisometry", self.coisometry)), key=lambda p: p[1].max())
        a, b = np.unravel_index(int(np.argmax(arr)), arr.shape)
        return fam, int(a), int(b)

    def as_dict(self) -> dict:
        return {"isometry": self.isometry.tolist(), "coisometry": self.coisometry.tolist(),
                "max_residual": self.max_residual, "worst_block": list(self.worst_block)}


def check_unitarity(G: GCoefficients) -> UnitarityReport:
    g = G.G
    ch = g[1:]  # rows l = 1..d
    sym = g + _dag(g).transpose(1, 0, 2, 3)
    iso = sym + np.einsum("lapq,lbqr->abpr", _dag(ch), ch)
    co = sym + np.einsum("alpq,blqr->abpr", g[:, 1:], _dag(g[:, 1:]))
    return UnitarityReport(np.abs(iso).max(axis=(2, 3)), np.abs(co).max(axis=(2, 3)))


def slh_from_g(G: GCoefficients, tol: float = CONSTRAINT_TOL) -> SLHTriple:
    """S_ij = G_ij + delta_ij, L_i = G_i0, H = Hermitian part of i (G_00 + 1/2 sum L^dag L)."""
    report = check_unitarity(G)
    if report.max_residual > tol:
        fam, a, b = report.worst_block
        raise InvalidPropagator(f"unitarity constraint violated in {fam} block ({a},{b})",
                                family=fam, alpha=a, beta=b, residual=report.max_residual)
    g = G.G
    eye = np.eye(G.dim)
    S = g[1:, 1:] + np.einsum("ij,pq->ijpq", np.eye(G.d), eye)
    L = g[1:, 0].copy()
    h = 1j * (g[0, 0] + 0.5 * np.einsum("lqp,lqr->pr", L.conj(), L))
    return SLHTriple(S, L, 0.5 * (h + h.conj().T))


def g_from_slh(slh: SLHTriple) -> GCoefficients:
    """Inverse map: G_0j = -sum_i L_i^dag S_ij and G_00 = -iH - 1/2 sum L^dag L."""
    d, dim = slh.d, slh.dim
    g = np.zeros((d + 1, d + 1, dim, dim), dtype=complex)
    g[1:, 1:] = slh.S - np.einsum("ij,pq->ijpq", np.eye(d), np.eye(dim))
    g[1:, 0] = slh.L
    g[0, 1:] = -np.einsum("iqp,ijqr->jpr", slh.L.conj(), slh.S)
    g[0, 0] = -1j * slh.H - 0.5 * np.einsum("lqp,lqr->pr", slh.L.conj(), slh.L)
    return GCoefficients(g)


def wong_zakai_limit(E: np.ndarray, hermitian_tol: float = 1e-10) -> GCoefficients:
    """Ito coefficients G_ab = -i E_ab - 1/2 E_ai [(1 + i E/2)^-1]_ij E_jb.

    ``E`` has shape (d+1, d+1, dim, dim) with E_ab = E_ba^dag.  The channel
    block inverse is a dense linear solve on the (d dim)-dimensional space.
    """
    E = np.asarray(E, dtype=complex)
    if E.ndim != 4 or E.shape[0] != E.shape[1] or E.shape[2] != E.shape[3]:
        raise DimensionMismatch(f"E must have shape (d+1, d+1, dim, dim), got {E.shape}")
    herm = np.abs(E - _dag(E).transpose(1, 0, 2, 3)).max()
    if herm > hermitian_tol:
        raise DomainError("coupling matrix is not Hermitian", residual=float(herm))
    d, dim = E.shape[0] - 1, E.shape[2]
    blk = lambda a: a.transpose(0, 2, 1, 3).reshape(a.shape[0] * dim, a.shape[1] * dim)
    M = np.eye(d * dim) + 0.5j * blk(E[1:, 1:])
    right = blk(E[1:, :])  # (d dim, (d+1) dim)
    if np.linalg.cond(M) > 1e12:
        raise NonInvertibleCoupling("1 + iE/2 is singular", condition=float(np.linalg.cond(M)))
    try:
        X = np.linalg.solve(M, right)
    except np.linalg.LinAlgError as exc:
        raise NonInvertibleCoupling("1 + iE/2 is singular") from exc
    left = blk(E[:, 1:])  # ((d+1) dim, d dim)
    corr = (left @ X).reshape(d + 1, dim, d + 1, dim).transpose(0, 2, 1, 3)
    return GCoefficients(-1j * E - 0.5 * corr)


# ---------------------------------------------------------------- Faraday example

@dataclass(frozen=True)
class FaradayParams:
    """Quadratic Faraday coupling; channels are ordered (time, r, l)."""

    chi0: float
    kappa_t: float
    basis: SpinBasis

    def __post_init__(self):
        if self.chi0 < 0:
            raise DomainError("chi0 must be nonnegative", chi0=self.chi0)
        if self.kappa_t < 0:
            raise DomainError("kappa must be nonnegative", kappa=self.kappa_t)
        if not isinstance(self.basis, SpinBasis):
            object.__setattr__(self, "basis", SpinBasis(int(self.basis)))

    @property
    def jz(self) -> np.ndarray:
        return self.basis.m_values


def faraday_E(p: FaradayParams) -> np.ndarray:
    dim = p.basis.dim
    Jz = np.real(build_operators(p.basis).Jz)
    g = np.sqrt(p.kappa_t / 2)
    E = np.zeros((3, 3, dim, dim), dtype=complex)
    E[1, 1] = p.chi0 / 3 * Jz
    E[2, 2] = -p.chi0 / 3 * Jz
    E[1, 0] = E[2, 0] = 1j * g * Jz
    E[0, 1] = E[0, 2] = -1j * g * Jz
    return E


def faraday_g_closed(p: FaradayParams) -> GCoefficients:
    """Closed-form coefficients, diagonal in the J_z basis."""
    m = p.jz
    a = p.chi0 / 6
    g = np.sqrt(p.kappa_t / 2)
    plus, minus = 1 + 1j * a * m, 1 - 1j * a * m
    diag = np.zeros((3, 3, len(m)), dtype=complex)
    diag[1, 1] = -1j * 2 * a * m / plus
    diag[2, 2] = 1j * 2 * a * m / minus
    diag[1, 0] = g * m / plus
    diag[2, 0] = g * m / minus
    diag[0, 1] = -diag[1, 0]
    diag[0, 2] = -diag[2, 0]
    diag[0, 0] = -(p.kappa_t / 2) * m**2 / (1 + (a * m) ** 2)
    G = np.zeros((3, 3, len(m), len(m)), dtype=complex)
    idx = np.arange(len(m))
    G[:, :, idx, idx] = diag
    return GCoefficients(G)


def faraday_slh_closed(p: FaradayParams) -> SLHTriple:
    m = p.jz
    a = p.chi0 / 6
    dim = len(m)
    s = (1 - 1j * a * m) / (1 + 1j * a * m)
    lr = np.sqrt(p.kappa_t / 2) * m / (1 + 1j * a * m)
    S = np.zeros((2, 2, dim, dim), dtype=complex)
    S[0, 0] = np.diag(s)
    S[1, 1] = np.diag(s.conj())
    L = np.stack([np.diag(lr), np.diag(lr.conj())])
    return SLHTriple(S, L, np.zeros((dim, dim), dtype=complex))


def lindblad_rhs(slh: SLHTriple, rho: np.ndarray) -> np.ndarray:
    """-i[H, rho] + sum_i (L_i rho L_i^dag - 1/2 {L_i^dag L_i, rho})."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (slh.dim, slh.dim):
        raise DimensionMismatch(f"density matrix {rho.shape} does not match system dimension {slh.dim}")
    out = -1j * (slh.H @ rho - rho @ slh.H)
    for L in slh.L:
        Ld = L.conj().T
        LdL = Ld @ L
        out += L @ rho @ Ld - 0.5 * (LdL @ rho + rho @ LdL)
    return out


def spectra(G: GCoefficients) -> dict[str, list]:
    """Eigenvalues of every G block, for reporting."""
    out = {}
    for a in range(G.d + 1):
        for b in range(G.d + 1):
            ev = np.linalg.eigvals(G.G[a, b])
            out[f"G{a}{b}"] = [[float(v.real), float(v.imag)] for v in ev]
    return out
