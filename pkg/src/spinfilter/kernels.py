"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting
``SPINFILTER_BACKEND=python`` forces the numpy fallback.  Both backends
expose ``run_filters`` and ``run_cse`` with identical signatures, wrapped
here with output allocation.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

_compiled = None
if os.environ.get("SPINFILTER_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def get_backend(name: str | None = None):
    name = name or BACKEND
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not available in this build")
        return _compiled
    if name == "python":
        return _pykernels
    raise ValueError(f"unknown backend {name!r}")


def _fields_array(fields) -> np.ndarray:
    if fields is None:
        return np.zeros((0, 3))
    return np.ascontiguousarray(np.asarray(fields, float).reshape(-1, 3))


def filter_batch(dy, fields, steps_per_gate, x0, n, kappa, dt, pure=False, checkpoints=None, keep_trajectory=False, backend=None):
    """Run one projection filter per row of ``x0`` on a shared record.

    Returns a dict with ``final`` (M, 3), ``qv`` (M, K) cumulative innovation
    QV at each checkpoint prefix, ``clamps`` (M,), and for
    ``keep_trajectory`` the first candidate's ``trajectory`` (N+1, 3) and
    innovations ``dv`` (N,).
    """
    dy = np.ascontiguousarray(dy, float)
    x0 = np.ascontiguousarray(np.atleast_2d(x0), float)
    N, M = dy.shape[0], x0.shape[0]
    cps = np.ascontiguousarray([N] if checkpoints is None else checkpoints, dtype=np.int64)
    if np.any(np.diff(cps) < 0) or (len(cps) and (cps[0] < 1 or cps[-1] > N)):
        raise ValueError("checkpoints must be sorted prefix lengths within the record")
    qv = np.zeros((M, len(cps)))
    final = np.zeros((M, 3))
    clamps = np.zeros(M, dtype=np.int64)
    traj = np.zeros((N + 1, 3) if keep_trajectory else (0, 3))
    dv = np.zeros(N if keep_trajectory else 0)
    get_backend(backend).run_filters(
        dy, _fields_array(fields), int(steps_per_gate), x0, float(n), float(kappa), float(dt), int(bool(pure)),
        cps, qv, final, clamps, traj, dv,
    )
    out = {"final": final, "qv": qv, "clamps": clamps, "checkpoints": cps}
    if keep_trajectory:
        out["trajectory"] = traj
        out["dv"] = dv
    return out


def control_unitaries(fields, n, dt):
    """Exact per-gate propagators exp(-i f.J dt/2) and exp(-i f.J dt).

    Returned as (half, full) complex stacks of shape (G, n+1, n+1), built
    from a Hermitian eigendecomposition of each gate Hamiltonian.
    """
    from .spin import build_operators

    fields = _fields_array(fields)
    ops = build_operators(n)
    half = np.empty((len(fields), n + 1, n + 1), complex)
    for g, f in enumerate(fields):
        H = f[0] * ops.Jx + f[1] * ops.Jy + f[2] * ops.Jz
        w, V = np.linalg.eigh(H)
        half[g] = (V * np.exp(-0.5j * w * dt)) @ V.conj().T
    return half, half @ half


def cse_trajectory(psi0, n, kappa, dt, fields, steps_per_gate, noise, record_driven=False, renormalize=True,
                   log_every=100, exact_control=True, backend=None):
    """Integrate the conditional Schrodinger equation for a spin J = n/2.

    ``exact_control`` applies the piecewise-constant control unitary exactly
    (Strang splitting around the measurement step); otherwise the control
    Hamiltonian is integrated inside the weak-2 drift.

    Returns (final_state, increments, logged_states, worst_norm_error) where
    ``increments`` are record dy (truth mode) or innovations (record mode).
    """
    from .spin import ladder_coefficients

    noise = np.ascontiguousarray(noise, float)
    N = noise.shape[0]
    fields = _fields_array(fields)
    psi0 = np.asarray(psi0, complex)
    re = np.ascontiguousarray(psi0.real)
    im = np.ascontiguousarray(psi0.imag)
    mz = np.ascontiguousarray(n / 2 - np.arange(n + 1), float)
    lad = np.ascontiguousarray(ladder_coefficients(n), float)
    if exact_control and len(fields) and steps_per_gate > 0:
        uh, uf = control_unitaries(fields, n, dt)
    else:
        uh = uf = np.zeros((0, n + 1, n + 1), complex)
    parts = [np.ascontiguousarray(u) for u in (uh.real, uh.imag, uf.real, uf.imag)]
    rows = len(range(0, N + 1, log_every)) if log_every > 0 else 0
    log_re = np.zeros((rows, n + 1))
    log_im = np.zeros((rows, n + 1))
    incr = np.zeros(N)
    worst = get_backend(backend).run_cse(
        re, im, mz, lad, float(kappa), float(dt), fields, int(steps_per_gate), *parts, noise,
        int(bool(record_driven)), int(bool(renormalize)), int(log_every), log_re, log_im, incr,
    )
    if worst < 0:
        from .errors import IntegrationBlowup

        raise IntegrationBlowup(int(-worst))
    return re + 1j * im, incr, log_re + 1j * log_im, float(worst)
