"""Seeded Wiener paths, Ito integrators and Ito/Stratonovich helpers.

Random streams are counter based (Philox keyed through ``SeedSequence``), so
the stream for ``(master_seed, trial, purpose)`` is fixed no matter which
worker draws it or in what order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, IntegrationBlowup

RNG_ALGORITHM = "numpy.Philox4x64/SeedSequence"

SCHEMES = ("euler", "weak2-predictor-corrector")


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (master_seed, key...) tuple.

    Distinct keys give distinct Philox keys derived by SeedSequence hashing,
    which makes substreams non-overlapping by construction.
    """
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class NoisePath:
    seed: int
    dt: float
    increments: np.ndarray

    @property
    def count(self) -> int:
        return len(self.increments)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# seed={self.seed} dt={self.dt!r}\nindex,dw\n")
            for i, v in enumerate(np.atleast_1d(self.increments)):
                fh.write(f"{i},{v:.17g}\n")

    @classmethod
    def from_csv(cls, path) -> "NoisePath":
        with open(path) as fh:
            meta = dict(kv.split("=") for kv in fh.readline()[1:].split())
            fh.readline()
            vals = [float(line.split(",")[1]) for line in fh if line.strip()]
        return cls(int(meta["seed"]), float(meta["dt"]), np.array(vals))


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-6
    scheme: str = "weak2-predictor-corrector"
    renormalize: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("time step must be positive", dt=self.dt)
        if self.scheme not in SCHEMES:
            raise DomainError(f"unknown scheme {self.scheme!r}", allowed=SCHEMES)


def wiener_path(seed: int, count: int, dt: float, width: int | None = None, key: tuple[int, ...] = ()) -> NoisePath:
    """Gaussian increments N(0, dt), reproducible from (seed, key, count, dt).

    ``width`` draws that many independent paths side by side (shape
    (count, width)) for diagonal-noise systems.
    """
    if count < 1:
        raise DomainError("path needs at least one increment", count=count)
    shape = (count,) if width is None else (count, width)
    z = stream(seed, *key).standard_normal(shape)
    return NoisePath(int(seed), float(dt), z * np.sqrt(dt))


def weak2_step(drift, diffusion, y, t, dt, dw):
    """One derivative-free weak order-2 step (Platen's explicit scheme).

    With zero diffusion this is exactly Heun's method.  ``dw`` may be a
    scalar (one noise shared by all components) or match ``y`` elementwise.
    """
    sq = np.sqrt(dt)
    a = drift(y, t)
    b = diffusion(y, t)
    base = y + a * dt
    ybar = base + b * dw
    yp = base + b * sq
    ym = base - b * sq
    bp = diffusion(yp, t)
    bm = diffusion(ym, t)
    return (
        y
        + 0.5 * (drift(ybar, t + dt) + a) * dt
        + 0.25 * (bp + bm + 2 * b) * dw
        + 0.25 * (bp - bm) * (dw * dw - dt) / sq
    )


def euler_step(drift, diffusion, y, t, dt, dw):
    return y + drift(y, t) * dt + diffusion(y, t) * dw


def integrate_ito(
    drift: Callable,
    diffusion: Callable,
    x0,
    path: NoisePath,
    config: IntegratorConfig | None = None,
    t0: float = 0.0,
) -> np.ndarray:
    """Integrate dx = a(x,t) dt + b(x,t) dw along a stored noise path.

    Returns the trajectory with shape (count + 1, *x0.shape).  Raises
    IntegrationBlowup with the failing step index on a non-finite state.
    Without an explicit config the state is not renormalized.
    """
    config = config or IntegratorConfig(dt=path.dt, renormalize=False)
    dt = config.dt
    step = weak2_step if config.scheme == SCHEMES[1] else euler_step
    y = np.array(x0, dtype=np.result_type(np.asarray(x0), float), copy=True)
    out = np.empty((path.count + 1,) + y.shape, dtype=y.dtype)
    out[0] = y
    with np.errstate(over="ignore", invalid="ignore"):
        for i, dw in enumerate(path.increments):
            y = step(drift, diffusion, y, t0 + i * dt, dt, dw)
            if config.renormalize:
                y = y / np.linalg.norm(y)
            if not np.all(np.isfinite(y)):
                raise IntegrationBlowup(i + 1)
            out[i + 1] = y
    return out


def finite_difference_jacobian(field: Callable, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian J[i, j] = d field_i / d x_j."""
    x = np.asarray(x, float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        cols.append((np.asarray(field(x + e)) - np.asarray(field(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def stratonovich_drift_correction(b: Callable, x, jacobian: Callable | None = None, h: float = 1e-6) -> np.ndarray:
    """Ito minus Stratonovich drift, 0.5 * b^j d_j b^i, for scalar noise."""
    x = np.asarray(x, float)
    jac = jacobian(x) if jacobian is not None else finite_difference_jacobian(b, x, h)
    return 0.5 * np.atleast_2d(jac) @ np.atleast_1d(np.asarray(b(x), float))


def ito_to_stratonovich(a_ito: Callable, b: Callable, x, **kw) -> np.ndarray:
    return np.asarray(a_ito(x)) - stratonovich_drift_correction(b, x, **kw)


def stratonovich_to_ito(a_strat: Callable, b: Callable, x, **kw) -> np.ndarray:
    return np.asarray(a_strat(x)) + stratonovich_drift_correction(b, x, **kw)


def quadratic_variation(increments) -> float:
    v = np.asarray(increments, float)
    return float(np.dot(v, v))
