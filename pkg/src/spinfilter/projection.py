"""Separable projection filter on the Bloch ball.

The filter state is a single Bloch vector x describing the identical
product state rho(x)^{(x)n}.  Its Ito SDE is driven by the innovation
dv = dy - n sqrt(kappa) x3 dt:

    dx = a(x, t) dt + b(x) dv

The functions here are the reference (per-vector) implementation; the hot
loop over a whole record goes through ``kernels.filter_batch``.  Spherical
chart quantities exist for verification only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DomainError, IntegrationBlowup
from .sde import weak2_step

R_SQ_TOL = 1e-9


@dataclass(frozen=True)
class FilterParams:
    n: int
    kappa: float
    r_floor: float = 1e-12

    def __post_init__(self):
        if self.n < 1 or int(self.n) != self.n:
            raise DomainError("qubit count must be a positive integer", n=self.n)
        if not self.kappa > 0:
            raise DomainError("measurement rate must be positive", kappa=self.kappa)


def _check_r_sq(r_sq):
    r_sq = np.asarray(r_sq, float)
    if np.any(r_sq > 1 + R_SQ_TOL) or np.any(r_sq < 0):
        raise DomainError("squared radius outside [0, 1]", r_sq=float(np.max(r_sq)))
    return r_sq


def coeff_beta(r_sq, n):
    r_sq = _check_r_sq(r_sq)
    return n - 2.0 * (n - 1) / (1.0 + r_sq)


def coeff_gamma(r_sq, n):
    r_sq = _check_r_sq(r_sq)
    return (1.0 - r_sq) * (n * (n + 1) / (2.0 * (1.0 + n * r_sq)) - 1.0 / (1.0 + r_sq))


def coeff_alpha(r_sq, n):
    """Radial Stratonovich coefficient; vanishes on the pure-state sphere."""
    r_sq = _check_r_sq(r_sq)
    q = 1.0 + n * r_sq
    return (
        n * (r_sq - 1.0)
        + 2.0 * (n - 1) / q
        - n * (n - 1) * (1.0 + r_sq) * r_sq / (2.0 * q)
        + 2.0 * (n - 2) * (n - 1) * r_sq / ((1.0 + r_sq) * q)
    )


def _beta_gamma(x, n, pure):
    if pure:
        return 1.0, 0.0
    r2 = float(np.dot(x, x))
    return (n - 2.0 * (n - 1) / (1.0 + r2),
            (1.0 - r2) * (n * (n + 1) / (2.0 * (1.0 + n * r2)) - 1.0 / (1.0 + r2)))


def drift_ito(x, f, params: FilterParams, pure: bool = False) -> np.ndarray:
    """Ito drift a(x, t); ``pure`` uses the r = 1 form (beta = 1, gamma = 0)."""
    x1, x2, x3 = np.asarray(x, float)
    f1, f2, f3 = np.asarray(f, float)
    k = params.kappa
    beta, gamma = _beta_gamma(np.array([x1, x2, x3]), params.n, pure)
    return np.array([
        f2 * x3 - f3 * x2 - 0.5 * k * x1 + k * gamma * x1 * x3**2,
        f3 * x1 - f1 * x3 - 0.5 * k * x2 + k * gamma * x2 * x3**2,
        f1 * x2 - f2 * x1 + k * (beta - 1.0) * x3 + k * gamma * x3**3,
    ])


def drift_stratonovich(x, f, params: FilterParams) -> np.ndarray:
    """Stratonovich drift; (alpha + beta)/r^2 is written as 1 - gamma so r = 0 is regular."""
    x1, x2, x3 = np.asarray(x, float)
    f1, f2, f3 = np.asarray(f, float)
    k = params.kappa
    beta, gamma = _beta_gamma(np.array([x1, x2, x3]), params.n, False)
    s = k * (1.0 - gamma) * x3**2
    return np.array([
        f2 * x3 - f3 * x2 - s * x1,
        f3 * x1 - f1 * x3 - s * x2,
        f1 * x2 - f2 * x1 + k * beta * x3 - s * x3,
    ])


def diffusion(x, kappa: float) -> np.ndarray:
    x1, x2, x3 = np.asarray(x, float)
    sk = np.sqrt(kappa)
    return np.array([-sk * x1 * x3, -sk * x2 * x3, sk * (1.0 - x3 * x3)])


def diffusion_jacobian(x, kappa: float) -> np.ndarray:
    x1, x2, x3 = np.asarray(x, float)
    sk = np.sqrt(kappa)
    return sk * np.array([[-x3, 0.0, -x1], [0.0, -x3, -x2], [0.0, 0.0, -2.0 * x3]])


def ito_correction(x, kappa: float) -> np.ndarray:
    """Closed form of 0.5 b^j d_j b for the filter diffusion."""
    x1, x2, x3 = np.asarray(x, float)
    return kappa * np.array([x1 * (x3**2 - 0.5), x2 * (x3**2 - 0.5), x3 * (x3**2 - 1.0)])


def innovation(dy: float, x3: float, dt: float, params: FilterParams) -> float:
    return dy - params.n * np.sqrt(params.kappa) * x3 * dt


def filter_step(x, dy: float, dt: float, f, params: FilterParams, pure: bool = False):
    """One weak-2 filter step on a record increment.

    Returns (x', dv, clamped); ``clamped`` is True when the raw step left the
    ball by more than the clamp tolerance.
    """
    x = np.asarray(x, float)
    dv = innovation(dy, x[2], dt, params)
    k = params.kappa
    nxt = weak2_step(lambda y, t: drift_ito(y, f, params, pure), lambda y, t: diffusion(y, k), x, 0.0, dt, dv)
    r2 = float(np.dot(nxt, nxt))
    if not np.isfinite(r2):
        raise IntegrationBlowup(1)
    clamped = r2 > 1 + R_SQ_TOL
    if r2 > 1:
        nxt = nxt / np.sqrt(r2)
    return nxt, dv, clamped


@dataclass
class FilterRun:
    times: np.ndarray
    x: np.ndarray
    dv: np.ndarray
    clamps: int
    qv: float

    @property
    def clamp_rate(self) -> float:
        return self.clamps / max(len(self.dv), 1)

    def coarse(self, every: int = 100):
        return self.times[::every], self.x[::every]

    def to_csv(self, path, every: int = 1) -> None:
        dv = np.append(self.dv, np.nan)
        with open(path, "w") as fh:
            fh.write("t,x1,x2,x3,dv\n")
            for i in range(0, len(self.times), every):
                t, (a, b, c), d = self.times[i], self.x[i], dv[i]
                fh.write(f"{t:.17g},{a:.17g},{b:.17g},{c:.17g},{d:.17g}\n")


def run_filter(record, control, x0, params: FilterParams | None = None, pure: bool = False, backend=None) -> FilterRun:
    """Filter trajectory over a whole record at record resolution."""
    params = params or FilterParams(record.n, record.kappa)
    spg = control.steps_per_gate(record.dt) if control.gate_count else 0
    out = kernels.filter_batch(
        record.dy, control.fields if control.gate_count else None, spg, np.asarray(x0, float)[None, :],
        params.n, params.kappa, record.dt, pure=pure, keep_trajectory=True, backend=backend,
    )
    traj = out["trajectory"]
    if not np.all(np.isfinite(out["final"])):
        bad = np.flatnonzero(~np.all(np.isfinite(traj), axis=1))
        raise IntegrationBlowup(int(bad[0]) if len(bad) else record.steps)
    times = np.arange(record.steps + 1) * record.dt
    return FilterRun(times, traj, out["dv"], int(out["clamps"][0]), float(out["qv"][0, -1]))


# ----------------------------------------------------------- geometry

def metric_spherical(r: float, n: int) -> np.ndarray:
    """Trace metric on identical product states in the (r, theta, phi) frame."""
    if r <= 0:
        raise DomainError("spherical chart is singular at r = 0", r=r)
    r2 = r * r
    pref = n / 2.0**n * (1 + r2) ** (n - 1)
    return pref * np.diag([(1 + n * r2) / (1 + r2), 1.0, 1.0])


def metric_spherical_inverse(r: float, n: int) -> np.ndarray:
    if r <= 0:
        raise DomainError("spherical chart is singular at r = 0", r=r)
    r2 = r * r
    pref = 2.0**n / n * (1 + r2) ** (1 - n)
    return pref * np.diag([(1 + r2) / (1 + n * r2), 1.0, 1.0])


def spherical_frame(theta: float, phi: float) -> np.ndarray:
    """Rows e_r, e_theta, e_phi."""
    st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
    return np.array([[st * cp, st * sp, ct], [ct * cp, ct * sp, -st], [-sp, cp, 0.0]])


def spherical_fields(r: float, theta: float, phi: float, f, params: FilterParams):
    """Stratonovich drift and diffusion in the orthonormal (r, theta, phi) frame.

    These are the chart-level projections; the radial diffusion carries the
    sign that agrees with the Cartesian form (positive dw pushes the
    northern hemisphere outward).
    """
    f1, f2, f3 = np.asarray(f, float)
    k, sk = params.kappa, np.sqrt(params.kappa)
    r2 = min(max(r * r, 0.0), 1.0)
    alpha, beta = coeff_alpha(r2, params.n), coeff_beta(r2, params.n)
    st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
    h_theta = f2 * r * cp - f1 * r * sp
    h_phi = f3 * r * st - f1 * r * ct * cp - f2 * r * ct * sp
    a = np.array([-k * alpha * r * ct**2, h_theta - 0.5 * k * beta * r * np.sin(2 * theta), h_phi])
    b = np.array([sk * (1 - r2) * ct, -sk * st, 0.0])
    return a, b


def to_spherical_frame(vec, x) -> np.ndarray:
    x = np.asarray(x, float)
    r = np.linalg.norm(x)
    theta = np.arccos(np.clip(x[2] / r, -1, 1))
    phi = np.arctan2(x[1], x[0])
    return spherical_frame(theta, phi) @ np.asarray(vec, float)
