"""Initial-state tomography from a single continuous-measurement record.

Two Monte Carlo maximum-likelihood searches share the quadratic-variation
cost QV = sum_i (dy_i - 2 sqrt(kappa) dt <J_z>_{i-1})^2:

* ``estimate_separable`` runs projection filters from mixed candidates on
  a uniform shell, then pure candidates in a cap around the winner;
* ``estimate_backaction_free`` ignores measurement backaction, so the
  predicted signal is linear in the candidate Bloch vector and every
  candidate's cost is a quadratic form in three precomputed sums.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionMismatch, DomainError, EstimationFailed
from .sde import stream
from .spin import fidelity_bloch
from .trajectory import STREAM_FLAT, STREAM_STAGE1, STREAM_STAGE2, ControlWaveform, MeasurementRecord

CLAMP_RATE_FLAG = 1e-3


@dataclass(frozen=True)
class SamplerConfig:
    m: int = 250
    r_mixed: float = 0.75
    theta_max: float = np.pi / 4
    m_flat: int = 1700

    def __post_init__(self):
        if not 0 < self.r_mixed < 1:
            raise DomainError("mixed radius must lie in (0, 1)", r_mixed=self.r_mixed)
        if not 0 < self.theta_max <= np.pi:
            raise DomainError("cap half-angle must lie in (0, pi]", theta_max=self.theta_max)
        if self.m < 1 or self.m_flat < 1:
            raise DomainError("sample counts must be positive")


@dataclass
class EstimateResult:
    chosen: np.ndarray
    qv_values: np.ndarray
    qv_min: float
    fidelity: float | None = None
    stage1_axis: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self, n: int, seed: int) -> str:
        axis = None if self.stage1_axis is None else [float(v) for v in self.stage1_axis]
        return json.dumps({
            "chosen": [float(v) for v in self.chosen],
            "fidelity": None if self.fidelity is None else float(self.fidelity),
            "qv_min": float(self.qv_min),
            "stage1_axis": axis,
            "n": int(n),
            "seed": int(seed),
        })


def _rng(seed, *key) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return stream(seed, *key)


def sample_sphere(seed, m: int, r: float = 1.0) -> np.ndarray:
    """m Bloch vectors with directions uniform on the sphere and radius r."""
    if not 0 < r <= 1:
        raise DomainError("radius must lie in (0, 1]", r=r)
    rng = _rng(seed)
    z = rng.uniform(-1.0, 1.0, m)
    phi = rng.uniform(0.0, 2 * np.pi, m)
    s = np.sqrt(1.0 - z * z)
    return r * np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def _frame_with_axis(axis) -> np.ndarray:
    """Orthonormal columns (u, v, axis)."""
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, helper)
    u /= np.linalg.norm(u)
    return np.column_stack([u, np.cross(a, u), a])


def sample_cap(seed, m: int, axis, theta_max: float) -> np.ndarray:
    """m unit vectors uniform over the closed cap of half-angle theta_max about axis."""
    rng = _rng(seed)
    cos_min = np.cos(theta_max)
    z = rng.uniform(cos_min, 1.0, m)
    phi = rng.uniform(0.0, 2 * np.pi, m)
    s = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    local = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    pts = local @ _frame_with_axis(axis).T
    return pts / np.linalg.norm(pts, axis=1)[:, None]


def qv_cost(record: MeasurementRecord, jz_series) -> float:
    """Quadratic variation of the innovation for a predicted <J_z> series.

    ``jz_series[i]`` is the pre-step expectation used for increment i.
    """
    jz = np.asarray(jz_series, float)
    if jz.shape != record.dy.shape:
        raise DimensionMismatch("prediction and record lengths differ", record=record.steps, series=len(jz))
    v = record.dy - 2.0 * np.sqrt(record.kappa) * record.dt * jz
    return float(np.dot(v, v))


def optimum_bound(n: int) -> float:
    if n < 1:
        raise DomainError("n must be positive", n=n)
    return (n + 1) / (n + 2)


def _argmin_first(values: np.ndarray) -> int:
    finite = np.isfinite(values)
    if not finite.any():
        raise EstimationFailed("every candidate filter diverged", candidates=len(values))
    return int(np.argmin(np.where(finite, values, np.inf)))


def _control_args(control: ControlWaveform, dt: float):
    if control.gate_count:
        return control.fields, control.steps_per_gate(dt)
    return None, 0


def _checkpoints(record: MeasurementRecord, checkpoints) -> np.ndarray:
    if checkpoints is None:
        return np.array([record.steps], dtype=np.int64)
    cps = np.unique(np.asarray(checkpoints, dtype=np.int64))
    if cps[0] < 1 or cps[-1] > record.steps:
        raise DomainError("checkpoints must lie within the record")
    return cps


def margin_is_noise(margin: float, dt: float) -> bool:
    """Whether a QV gap between two candidates is within its own noise.

    For candidates whose predicted signals differ by delta(t), the gap has
    mean D = n^2 kappa dt int delta^2 dt and a cross-term with standard
    deviation 2 sqrt(D dt), so D falls below one standard deviation exactly
    when D < 4 dt.
    """
    return bool(margin < 4.0 * dt)


def _stage1(record, control, sampler, seed, cps, backend):
    cands = sample_sphere(_rng(seed, STREAM_STAGE1), sampler.m, sampler.r_mixed)
    fields, spg = _control_args(control, record.dt)
    out = kernels.filter_batch(record.dy[: cps[-1]], fields, spg, cands, record.n, record.kappa, record.dt,
                               pure=False, checkpoints=cps, backend=backend)
    return cands, out


def _stage2(record, control, sampler, seed, axis, full_sphere, upto, backend, cps):
    rng = _rng(seed, STREAM_STAGE2)
    if full_sphere:
        cands = sample_sphere(rng, sampler.m, 1.0)
    else:
        cands = sample_cap(rng, sampler.m, axis, sampler.theta_max)
    fields, spg = _control_args(control, record.dt)
    out = kernels.filter_batch(record.dy[:upto], fields, spg, cands, record.n, record.kappa, record.dt,
                               pure=True, checkpoints=cps, backend=backend)
    return cands, out


def estimate_separable(record: MeasurementRecord, control: ControlWaveform, sampler: SamplerConfig | None = None,
                       seed: int = 0, truth=None, backend=None) -> EstimateResult:
    """Two-stage Monte Carlo separable least-squares estimate.

    Stage 1 scores ``m`` mixed candidates of radius ``r_mixed`` with the
    general-n filter; stage 2 scores ``m`` pure candidates in the cap of
    half-angle ``theta_max`` around the stage-1 winner's direction with the
    pure-state filter.  When the stage-1 winner beats the median candidate
    by less than the noise of that gap, its direction carries no
    information and the cap is replaced by the full sphere.
    """
    sampler = sampler or SamplerConfig()
    cps = _checkpoints(record, None)
    c1, out1 = _stage1(record, control, sampler, seed, cps, backend)
    q1 = out1["qv"][:, -1]
    i1 = _argmin_first(q1)
    axis = c1[i1] / np.linalg.norm(c1[i1])
    finite = q1[np.isfinite(q1)]
    fallback = margin_is_noise(float(np.median(finite) - finite.min()), record.dt)
    c2, out2 = _stage2(record, control, sampler, seed, axis, fallback, record.steps, backend, cps)
    q2 = out2["qv"][:, -1]
    i2 = _argmin_first(q2)
    chosen = c2[i2]
    steps = max(record.steps, 1)
    diag = {
        "stage1_qv": q1,
        "stage1_index": i1,
        "stage2_index": i2,
        "full_sphere_fallback": fallback,
        "stage1_clamp_rate": out1["clamps"] / steps,
        "stage2_clamp_rate": out2["clamps"] / steps,
        "clamp_flag": bool(out2["clamps"][i2] / steps > CLAMP_RATE_FLAG or out1["clamps"][i1] / steps > CLAMP_RATE_FLAG),
        "stage2_candidates": c2,
    }
    fid = fidelity_bloch(truth, chosen) if truth is not None else None
    return EstimateResult(chosen, q2, float(q2[i2]), fid, axis, diag)


def separable_fidelity_curve(record: MeasurementRecord, control: ControlWaveform, truth, checkpoints,
                             sampler: SamplerConfig | None = None, seed: int = 0, backend=None) -> np.ndarray:
    """Fidelity of the separable estimate built from each record prefix.

    Stage 1 is run once with QV checkpoints; stage 2 is rerun for every
    distinct stage-1 winner, on the shortest record prefix it is needed for.
    """
    sampler = sampler or SamplerConfig()
    cps = _checkpoints(record, checkpoints)
    c1, out1 = _stage1(record, control, sampler, seed, cps, backend)
    winners = [_argmin_first(out1["qv"][:, k]) for k in range(len(cps))]
    fids = np.empty(len(cps))
    for w in sorted(set(winners)):
        ks = [k for k, v in enumerate(winners) if v == w]
        sub = cps[: max(ks) + 1]
        axis = c1[w] / np.linalg.norm(c1[w])
        c2, out2 = _stage2(record, control, sampler, seed, axis, False, int(sub[-1]), backend, sub)
        for k in ks:
            fids[k] = fidelity_bloch(truth, c2[_argmin_first(out2["qv"][:, k])])
    return fids


# ------------------------------------------------------------ backaction-free

def _rotation_matrix(axis, angle) -> np.ndarray:
    a = np.asarray(axis, float)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _gate_products(control: ControlWaveform) -> list[np.ndarray]:
    """Accumulated Bloch rotations P_g before gate g (P_0 = identity)."""
    P = [np.eye(3)]
    for a in control.axes:
        P.append(_rotation_matrix(a, np.pi / 2) @ P[-1])
    return P


def heisenberg_sigma_z(control: ControlWaveform, grid) -> np.ndarray:
    """Pauli coefficients c(t) with sigma_z(t) = c(t) . sigma under the control alone.

    Bloch vectors evolve as dx/dt = f x x, so x(t) = R(t) x(0) and
    c(t) = R(t)^T e_z, evaluated exactly per gate with Rodrigues rotations.
    """
    t = np.atleast_1d(np.asarray(grid, float))
    ez = np.array([0.0, 0.0, 1.0])
    if control.gate_count == 0:
        return np.tile(ez, (len(t), 1))
    P = _gate_products(control)
    w = control.amplitude
    g = np.floor(t / control.tau + 1e-9).astype(int)
    out = np.empty((len(t), 3))
    for gi in np.unique(g):
        sel = g == gi
        if gi >= control.gate_count or gi < 0:
            out[sel] = P[min(max(gi, 0), control.gate_count)].T @ ez if gi >= 0 else ez
            continue
        s = np.clip(t[sel] - gi * control.tau, 0.0, None)
        a = control.axes[gi]
        # c = P_g^T R(a, w s)^T e_z = P_g^T R(a, -w s) e_z
        ang = -w * s
        local = (ez[None, :] * np.cos(ang)[:, None] + np.cross(a, ez)[None, :] * np.sin(ang)[:, None]
                 + a[None, :] * a[2] * (1 - np.cos(ang))[:, None])
        out[sel] = local @ P[gi]
    return out


def sigma_z_series(control: ControlWaveform, dt: float, steps: int) -> np.ndarray:
    """c(t_k) at the pre-step times t_k = k dt, k = 0..steps-1, on the integer step grid."""
    ez = np.array([0.0, 0.0, 1.0])
    if control.gate_count == 0:
        return np.tile(ez, (steps, 1))
    spg = control.steps_per_gate(dt)
    P = _gate_products(control)
    w = control.amplitude
    k = np.arange(steps)
    g = k // spg
    out = np.empty((steps, 3))
    for gi in range(min(control.gate_count, int(g[-1]) + 1)):
        sel = slice(gi * spg, min((gi + 1) * spg, steps))
        ang = -w * (k[sel] - gi * spg) * dt
        a = control.axes[gi]
        local = (ez[None, :] * np.cos(ang)[:, None] + np.cross(a, ez)[None, :] * np.sin(ang)[:, None]
                 + a[None, :] * a[2] * (1 - np.cos(ang))[:, None])
        out[sel] = local @ P[gi]
    tail = control.gate_count * spg
    if tail < steps:
        out[tail:] = P[-1].T @ ez
    return out


@dataclass(frozen=True)
class BackactionFreeSums:
    """Prefix sums that make the unitary-model QV a quadratic in the Bloch vector."""

    checkpoints: np.ndarray
    yy: np.ndarray  # (K,)
    yc: np.ndarray  # (K, 3)
    cc: np.ndarray  # (K, 3, 3)
    gain: float

    def qv(self, x) -> np.ndarray:
        """QV for candidates x (M, 3) at every checkpoint, shape (M, K)."""
        x = np.atleast_2d(x)
        g = self.gain
        lin = x @ self.yc.T
        quad = np.einsum("mi,kij,mj->mk", x, self.cc, x)
        return self.yy[None, :] - 2 * g * lin + g * g * quad


def backaction_free_sums(record: MeasurementRecord, control: ControlWaveform, checkpoints=None) -> BackactionFreeSums:
    cps = _checkpoints(record, checkpoints)
    c = sigma_z_series(control, record.dt, record.steps)
    dy = record.dy
    bounds = np.concatenate([[0], cps])
    yy, yc, cc = [], [], []
    acc_y, acc_yc, acc_cc = 0.0, np.zeros(3), np.zeros((3, 3))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        seg_y, seg_c = dy[lo:hi], c[lo:hi]
        acc_y += float(seg_y @ seg_y)
        acc_yc = acc_yc + seg_y @ seg_c
        acc_cc = acc_cc + seg_c.T @ seg_c
        yy.append(acc_y)
        yc.append(acc_yc)
        cc.append(acc_cc)
    gain = record.n * np.sqrt(record.kappa) * record.dt
    return BackactionFreeSums(cps, np.array(yy), np.array(yc), np.array(cc), gain)


def estimate_backaction_free(record: MeasurementRecord, control: ControlWaveform,
                             sampler: SamplerConfig | None = None, seed: int = 0, truth=None,
                             checkpoints=None) -> EstimateResult:
    """Flat Monte Carlo search with a unitary-only (no backaction) signal model.

    With ``checkpoints`` the diagnostics also carry the winner for each record
    prefix (``prefix_chosen``) and, given ``truth``, its fidelity curve.
    """
    sampler = sampler or SamplerConfig()
    cands = sample_sphere(_rng(seed, STREAM_FLAT), sampler.m_flat, 1.0)
    cps = _checkpoints(record, checkpoints)
    if cps[-1] != record.steps:
        cps = np.append(cps, record.steps)
    sums = backaction_free_sums(record, control, cps)
    qv = sums.qv(cands)
    winners = [_argmin_first(qv[:, k]) for k in range(len(cps))]
    i = winners[-1]
    chosen = cands[i]
    diag = {"checkpoints": cps, "prefix_chosen": cands[winners]}
    if truth is not None:
        diag["prefix_fidelity"] = np.array([fidelity_bloch(truth, cands[w]) for w in winners])
    fid = fidelity_bloch(truth, chosen) if truth is not None else None
    return EstimateResult(chosen, qv[:, -1], float(qv[i, -1]), fid, None, diag)
