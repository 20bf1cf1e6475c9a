"""Pure numpy twin of the compiled kernels (same signatures, same arithmetic).

Filters are vectorized across candidates; the Schrodinger loop is a plain
Python loop over steps with tridiagonal numpy updates.
"""

from __future__ import annotations

import numpy as np


def _fields_per_step(fields, steps_per_gate, i):
    if fields.shape[0] == 0 or steps_per_gate <= 0:
        return 0.0, 0.0, 0.0
    g = i // steps_per_gate
    if g >= fields.shape[0]:
        return 0.0, 0.0, 0.0
    return fields[g, 0], fields[g, 1], fields[g, 2]


def _drift(x, f1, f2, f3, kappa, n, pure):
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    if pure:
        beta, gamma = 1.0, 0.0
    else:
        r2 = x1 * x1 + x2 * x2 + x3 * x3
        beta = n - 2.0 * (n - 1.0) / (1.0 + r2)
        gamma = (1.0 - r2) * (n * (n + 1.0) / (2.0 * (1.0 + n * r2)) - 1.0 / (1.0 + r2))
    x3s = x3 * x3
    return np.stack(
        [
            f2 * x3 - f3 * x2 - 0.5 * kappa * x1 + kappa * gamma * x1 * x3s,
            f3 * x1 - f1 * x3 - 0.5 * kappa * x2 + kappa * gamma * x2 * x3s,
            f1 * x2 - f2 * x1 + kappa * (beta - 1.0) * x3 + kappa * gamma * x3s * x3,
        ],
        axis=1,
    )


def _diffusion(x, sk):
    x3 = x[:, 2]
    return np.stack([-sk * x[:, 0] * x3, -sk * x[:, 1] * x3, sk * (1.0 - x3 * x3)], axis=1)


def run_filters(dy, fields, steps_per_gate, x0, n, kappa, dt, pure, checkpoints, qv_out, x_out, clamp_out, traj, dv_out):
    dy = np.asarray(dy)
    N = dy.shape[0]
    K = len(checkpoints)
    sk, sq = np.sqrt(kappa), np.sqrt(dt)
    gain = n * sk * dt
    x = np.array(x0, dtype=float)
    M = x.shape[0]
    qv = np.zeros(M)
    clamps = np.zeros(M, dtype=np.int64)
    alive = np.ones(M, dtype=bool)
    keep = traj.shape[0] > 0
    if keep:
        traj[0] = x[0]
    c = 0
    cps = list(checkpoints)
    for i in range(N):
        f1, f2, f3 = _fields_per_step(fields, steps_per_gate, i)
        dv = dy[i] - gain * x[:, 2]
        qv = qv + dv * dv
        a = _drift(x, f1, f2, f3, kappa, n, pure)
        b = _diffusion(x, sk)
        w = x + a * dt
        dvc = dv[:, None]
        ab = _drift(w + b * dvc, f1, f2, f3, kappa, n, pure)
        bp = _diffusion(w + b * sq, sk)
        bm = _diffusion(w - b * sq, sk)
        x = x + 0.5 * (ab + a) * dt + 0.25 * (bp + bm + 2.0 * b) * dvc + 0.25 * (bp - bm) * (dvc * dvc - dt) / sq
        r2 = np.einsum("mi,mi->m", x, x)
        over = r2 > 1.0
        clamps += r2 > 1.0 + 1e-9
        if over.any():
            x[over] /= np.sqrt(r2[over])[:, None]
        bad = ~np.isfinite(r2) & alive
        if bad.any():
            alive &= ~bad
            x[bad] = np.inf
        qv = np.where(alive, qv, np.inf)
        if keep:
            traj[i + 1] = x[0]
            dv_out[i] = dv[0]
        while c < K and cps[c] == i + 1:
            qv_out[:, c] = qv
            c += 1
    while c < K:
        qv_out[:, c] = qv
        c += 1
    x_out[:] = x
    clamp_out[:] = clamps


def _gate_of(i, steps_per_gate, G):
    if G == 0 or steps_per_gate <= 0:
        return -1
    g = i // steps_per_gate
    return g if g < G else -1


def run_cse(psr, psi, mz, lad, kappa, dt, fields, steps_per_gate, uh_re, uh_im, uf_re, uf_im, noise, record_driven, renormalize, log_every, log_re, log_im, incr_out):
    y = np.asarray(psr) + 1j * np.asarray(psi)
    mz = np.asarray(mz, float)
    lad = np.asarray(lad, float)
    G = uh_re.shape[0]
    split = G > 0
    if split:
        uh = np.asarray(uh_re) + 1j * np.asarray(uh_im)
        uf = np.asarray(uf_re) + 1j * np.asarray(uf_im)
    N = len(noise)
    sk, sq = np.sqrt(kappa), np.sqrt(dt)
    worst = 0.0
    row = 0
    f1 = f2 = f3 = 0.0

    def expz(v):
        p = v.real * v.real + v.imag * v.imag
        return np.dot(mz, p) / p.sum()

    def bvec(v, e):
        return sk * (mz - e) * v

    def avec(v, e, f1, f2, f3):
        d = mz - e
        out = -0.5 * kappa * d * d * v
        if f1 or f2 or f3:
            p = 0.5 * (f1 - 1j * f2)
            h = f3 * mz * v
            h[:-1] += p * lad * v[1:]
            h[1:] += np.conj(p) * lad * v[:-1]
            out = out - 1j * h
        return out

    g = _gate_of(0, steps_per_gate, G) if split else -1
    if g >= 0 and N > 0:
        y = uh[g] @ y
    for i in range(N):
        if split:
            g = _gate_of(i, steps_per_gate, G)
        if log_every > 0 and i % log_every == 0 and row < log_re.shape[0]:
            v = uh[g].conj().T @ y if (split and g >= 0) else y
            log_re[row] = v.real
            log_im[row] = v.imag
            row += 1
        if not split:
            f1, f2, f3 = _fields_per_step(fields, steps_per_gate, i)
        e0 = expz(y)
        if record_driven:
            dw = noise[i] - 2.0 * sk * e0 * dt
            incr_out[i] = dw
        else:
            dw = noise[i]
            incr_out[i] = dw + 2.0 * sk * e0 * dt
        a = avec(y, e0, f1, f2, f3)
        b = bvec(y, e0)
        w = y + a * dt
        ybar = w + b * dw
        yp = w + b * sq
        ym = w - b * sq
        ab = avec(ybar, expz(ybar), f1, f2, f3)
        bp = bvec(yp, expz(yp))
        bm = bvec(ym, expz(ym))
        y = y + 0.5 * (ab + a) * dt + 0.25 * (bp + bm + 2.0 * b) * dw + 0.25 * (bp - bm) * (dw * dw - dt) / sq
        nrm = float(np.vdot(y, y).real)
        if not np.isfinite(nrm):
            worst = -(i + 1.0)
            break
        worst = max(worst, abs(nrm - 1.0))
        if renormalize:
            y = y / np.sqrt(nrm)
        if split:
            gnext = _gate_of(i + 1, steps_per_gate, G) if i + 1 < N else -1
            if g >= 0 and gnext == g:
                y = uf[g] @ y
            else:
                if g >= 0:
                    y = uh[g] @ y
                if gnext >= 0:
                    y = uh[gnext] @ y
    if worst >= 0 and log_every > 0 and N % log_every == 0 and row < log_re.shape[0]:
        log_re[row] = y.real
        log_im[row] = y.imag
    psr[:] = y.real
    psi[:] = y.imag
    return worst
