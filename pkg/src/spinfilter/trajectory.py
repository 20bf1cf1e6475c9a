"""Truth simulator: conditional Schrodinger trajectories and their records.

A truth run draws a Wiener path, integrates the pure spin state under the
collective J_z measurement with a piecewise-constant control field, and
emits the record increments dy_i = dw_i + 2 sqrt(kappa) <J_z> dt together
with a coarse diagnostic log.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionMismatch, DomainError
from .sde import IntegratorConfig, integrate_ito, stream, wiener_path
from .spin import CollectiveOperators, SpinBasis, build_operators, diagnostics_batch, scs_state

# Stream purposes mixed into the counter-based key of a trial.
STREAM_NOISE = 0
STREAM_CONTROL = 1
STREAM_TRUTH = 2
STREAM_STAGE1 = 3
STREAM_STAGE2 = 4
STREAM_FLAT = 5


def _g17(v) -> str:
    return f"{float(v):.17g}"


@dataclass(frozen=True)
class ControlWaveform:
    """Piecewise-constant control field of magnitude pi/(2 tau) per gate."""

    tau: float
    axes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        axes = np.asarray(self.axes, float).reshape(-1, 3)
        if len(axes) and np.max(np.abs(np.linalg.norm(axes, axis=1) - 1)) > 1e-12:
            raise DomainError("control axes must be unit vectors")
        axes.setflags(write=False)
        object.__setattr__(self, "axes", axes)

    @property
    def amplitude(self) -> float:
        return np.pi / (2 * self.tau)

    @property
    def gate_count(self) -> int:
        return len(self.axes)

    @property
    def fields(self) -> np.ndarray:
        return self.amplitude * self.axes

    def field_at(self, t: float) -> np.ndarray:
        g = int(np.floor(t / self.tau))
        if 0 <= g < self.gate_count:
            return self.fields[g]
        return np.zeros(3)

    def steps_per_gate(self, dt: float) -> int:
        k = self.tau / dt
        if self.gate_count and abs(k - round(k)) > 1e-6 * max(1.0, k):
            raise DomainError("time step must divide the gate period", tau=self.tau, dt=dt)
        return int(round(k))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"tau\n{_g17(self.tau)}\ngate,ax,ay,az\n")
            for g, a in enumerate(self.axes):
                fh.write(f"{g},{_g17(a[0])},{_g17(a[1])},{_g17(a[2])}\n")

    @classmethod
    def from_csv(cls, path) -> "ControlWaveform":
        with open(path) as fh:
            fh.readline()
            tau = float(fh.readline())
            fh.readline()
            rows = [line.split(",")[1:] for line in fh if line.strip()]
        return cls(tau, np.array(rows, float).reshape(-1, 3))

    @classmethod
    def none(cls, tau: float = 5e-3) -> "ControlWaveform":
        return cls(tau, np.zeros((0, 3)))


def sample_control(seed: int, gate_count: int, tau: float) -> ControlWaveform:
    """Isotropic gate axes: z uniform on [-1, 1], azimuth uniform on [0, 2 pi)."""
    if gate_count < 1:
        raise DomainError("need at least one gate", gate_count=gate_count)
    rng = stream(seed, STREAM_CONTROL)
    z = rng.uniform(-1.0, 1.0, gate_count)
    phi = rng.uniform(0.0, 2 * np.pi, gate_count)
    s = np.sqrt(1 - z * z)
    axes = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    return ControlWaveform(tau, axes / np.linalg.norm(axes, axis=1)[:, None])


@dataclass(frozen=True)
class MeasurementRecord:
    dt: float
    kappa: float
    n: int
    seed: int
    dy: np.ndarray

    def __post_init__(self):
        dy = np.array(self.dy, float)
        dy.setflags(write=False)
        object.__setattr__(self, "dy", dy)

    @property
    def steps(self) -> int:
        return len(self.dy)

    @property
    def t_f(self) -> float:
        return self.steps * self.dt

    def prefix(self, steps: int) -> "MeasurementRecord":
        return MeasurementRecord(self.dt, self.kappa, self.n, self.seed, self.dy[:steps])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("dt,kappa,n,seed\n")
        buf.write(f"{_g17(self.dt)},{_g17(self.kappa)},{self.n},{self.seed}\n")
        buf.write("i,dy\n")
        buf.writelines(f"{i},{v:.17g}\n" for i, v in enumerate(self.dy.tolist()))
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "MeasurementRecord":
        with open(path) as fh:
            fh.readline()
            dt, kappa, n, seed = fh.readline().strip().split(",")
            fh.readline()
            dy = np.loadtxt(fh, delimiter=",", usecols=1, ndmin=1)
        return cls(float(dt), float(kappa), int(n), int(seed), dy)


@dataclass
class TrajectoryLog:
    times: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    xi2_db: np.ndarray
    final_state: np.ndarray
    states: np.ndarray | None = None
    worst_norm_error: float = 0.0

    LOG_COLUMNS = ("t", "jx", "jy", "jz", "var_jx", "var_jy", "var_jz", "xi2_db")

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.times, self.mean, self.var, self.xi2_db])
        with open(path, "w") as fh:
            fh.write(",".join(self.LOG_COLUMNS) + "\n")
            for r in rows:
                fh.write(",".join(_g17(v) for v in r) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TrajectoryLog":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:4], data[:, 4:7], data[:, 7], np.zeros(0))


def cse_step(psi, increment: float, dt: float, f, kappa: float, ops: CollectiveOperators | int | None = None,
             record_driven: bool = False, renormalize: bool = True, exact_control: bool = True):
    """Advance the pure state by one step.

    ``increment`` is the truth innovation dw (default) or, with
    ``record_driven``, a record increment dy.  Returns (psi', dy) in truth
    mode and (psi', dv) in record mode.
    """
    psi = np.asarray(psi, complex)
    n = len(psi) - 1
    if ops is not None:
        dim = ops.basis.dim if isinstance(ops, CollectiveOperators) else int(ops) + 1
        if dim != len(psi):
            raise DimensionMismatch("state and operators disagree on dimension")
    f = np.asarray(f, float).reshape(1, 3)
    fields = f if np.any(f) else None
    out, incr, _, _ = kernels.cse_trajectory(
        psi, n, kappa, dt, fields, 1, [increment], record_driven=record_driven, renormalize=renormalize,
        log_every=0, exact_control=exact_control,
    )
    return out, float(incr[0])


def _log_from_states(states, dt, log_every, ops, final, keep_states, worst):
    diag = diagnostics_batch(states, ops)
    times = np.arange(len(states)) * log_every * dt
    return TrajectoryLog(times, diag["mean"], diag["var"], diag["xi2_db"], final,
                         states if keep_states else None, worst)


def _euler_cse(psi0, ops, control, kappa, dt, noise, config, log_every):
    # Slow generic route for the Euler scheme; kept for comparisons only.
    Jz = np.real(np.diag(ops.Jz))
    sk = np.sqrt(kappa)
    fields, spg = control.fields, control.steps_per_gate(dt) if control.gate_count else 0

    def ez(v):
        p = np.abs(v) ** 2
        return np.dot(Jz, p) / p.sum()

    def drift(v, t):
        i = int(round(t / dt))
        g = i // spg if spg else -1
        f = fields[g] if 0 <= g < len(fields) else np.zeros(3)
        H = f[0] * ops.Jx + f[1] * ops.Jy + f[2] * ops.Jz
        d = Jz - ez(v)
        return -1j * (H @ v) - 0.5 * kappa * d * d * v

    def diffusion(v, t):
        return sk * (Jz - ez(v)) * v

    from .sde import NoisePath

    traj = integrate_ito(drift, diffusion, psi0, NoisePath(0, dt, noise), config)
    e = np.array([ez(v) for v in traj[:-1]])
    dy = noise + 2 * sk * e * dt
    return traj[-1], dy, traj[::log_every] if log_every else traj[:0], 0.0


def simulate_truth(theta: float, phi: float, basis: SpinBasis | int, control: ControlWaveform, kappa: float,
                   t_f: float, config: IntegratorConfig | None = None, seed: int = 0, log_every: int = 100,
                   keep_states: bool = False, noise: np.ndarray | None = None, exact_control: bool = True):
    """Generate a synthetic record from an SCS(theta, phi) truth state.

    Returns (MeasurementRecord, TrajectoryLog).  The Wiener increments come
    from ``wiener_path(seed, steps, dt)`` unless ``noise`` is supplied.
    """
    if not t_f > 0:
        raise DomainError("final time must be positive", t_f=t_f)
    if not isinstance(basis, SpinBasis):
        basis = SpinBasis(int(basis))
    config = config or IntegratorConfig()
    dt = config.dt
    steps = int(round(t_f / dt))
    if noise is None:
        noise = wiener_path(seed, steps, dt).increments
    ops = build_operators(basis)
    psi0 = scs_state(theta, phi, basis)
    if config.scheme == "euler":
        final, dy, states, worst = _euler_cse(psi0, ops, control, kappa, dt, np.asarray(noise), config, log_every)
    else:
        spg = control.steps_per_gate(dt) if control.gate_count else 0
        final, dy, states, worst = kernels.cse_trajectory(
            psi0, basis.n, kappa, dt, control.fields if control.gate_count else None, spg, noise,
            renormalize=config.renormalize, log_every=log_every, exact_control=exact_control,
        )
    record = MeasurementRecord(dt, kappa, basis.n, int(seed), dy)
    return record, _log_from_states(states, dt, log_every, ops, final, keep_states, worst)


def conditional_bloch_trajectory(record: MeasurementRecord, control: ControlWaveform, psi0,
                                 config: IntegratorConfig | None = None, exact_control: bool = True):
    """Exact conditional state driven by an existing record (any n).

    Returns (states at every step, innovations).  Intended for small n, e.g.
    the two-level oracle the projection filter must reproduce at n = 1.
    """
    config = config or IntegratorConfig(dt=record.dt)
    spg = control.steps_per_gate(record.dt) if control.gate_count else 0
    _, dv, states, _ = kernels.cse_trajectory(
        psi0, record.n, record.kappa, record.dt, control.fields if control.gate_count else None, spg, record.dy,
        record_driven=True, renormalize=config.renormalize, log_every=1, exact_control=exact_control,
    )
    return states, dv


def truth_direction(master_seed: int, trial: int) -> tuple[float, float]:
    """Uniform random truth direction (theta, phi) for a trial."""
    rng = stream(master_seed, trial, STREAM_TRUTH)
    z = rng.uniform(-1.0, 1.0)
    return float(np.arccos(z)), float(rng.uniform(0.0, 2 * np.pi))
