# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: conditional Schrodinger trajectories and batched
projection filters.  Both use the derivative-free weak order-2 step; the
numpy twin in ``_pykernels`` implements the same arithmetic."""

from libc.math cimport sqrt, isfinite, INFINITY
from libc.stdlib cimport malloc, free

import numpy as np


cdef inline void _field_at(const double[:, ::1] fields, long steps_per_gate, long i,
                           double* f1, double* f2, double* f3) noexcept nogil:
    cdef long g
    if fields.shape[0] == 0 or steps_per_gate <= 0:
        f1[0] = 0.0; f2[0] = 0.0; f3[0] = 0.0
        return
    g = i // steps_per_gate
    if g >= fields.shape[0]:
        f1[0] = 0.0; f2[0] = 0.0; f3[0] = 0.0
        return
    f1[0] = fields[g, 0]; f2[0] = fields[g, 1]; f3[0] = fields[g, 2]


# ---------------------------------------------------------------- filter

cdef inline void _filter_drift(double x1, double x2, double x3,
                               double f1, double f2, double f3,
                               double kappa, double n, int pure,
                               double* a) noexcept nogil:
    cdef double r2, beta, gamma, x3s
    if pure:
        beta = 1.0
        gamma = 0.0
    else:
        r2 = x1 * x1 + x2 * x2 + x3 * x3
        beta = n - 2.0 * (n - 1.0) / (1.0 + r2)
        gamma = (1.0 - r2) * (n * (n + 1.0) / (2.0 * (1.0 + n * r2)) - 1.0 / (1.0 + r2))
    x3s = x3 * x3
    a[0] = f2 * x3 - f3 * x2 - 0.5 * kappa * x1 + kappa * gamma * x1 * x3s
    a[1] = f3 * x1 - f1 * x3 - 0.5 * kappa * x2 + kappa * gamma * x2 * x3s
    a[2] = f1 * x2 - f2 * x1 + kappa * (beta - 1.0) * x3 + kappa * gamma * x3s * x3


cdef inline void _filter_diffusion(double x1, double x2, double x3, double sk,
                                   double* b) noexcept nogil:
    b[0] = -sk * x1 * x3
    b[1] = -sk * x2 * x3
    b[2] = sk * (1.0 - x3 * x3)


def run_filters(const double[::1] dy, const double[:, ::1] fields, long steps_per_gate,
                const double[:, ::1] x0, double n, double kappa, double dt, int pure,
                const long[::1] checkpoints, double[:, ::1] qv_out, double[:, ::1] x_out,
                long[::1] clamp_out, double[:, ::1] traj, double[::1] dv_out):
    """Integrate one projection filter per row of ``x0`` over the record.

    Writes cumulative innovation QV at each checkpoint (a prefix length in
    steps), final states and clamp counts.  ``traj``/``dv_out`` are filled
    for the first candidate when they have nonzero length.
    """
    cdef long N = dy.shape[0]
    cdef long M = x0.shape[0]
    cdef long K = checkpoints.shape[0]
    cdef long m, i, c, j
    cdef double sk = sqrt(kappa)
    cdef double sq = sqrt(dt)
    cdef double gain = n * sk * dt
    cdef double x[3]
    cdef double a[3]
    cdef double b[3]
    cdef double yb[3]
    cdef double yp[3]
    cdef double ym[3]
    cdef double ab[3]
    cdef double bp[3]
    cdef double bm[3]
    cdef double f1, f2, f3, dv, qv, r2, inv, w
    cdef long clamps
    cdef int keep = traj.shape[0] > 0
    with nogil:
        for m in range(M):
            x[0] = x0[m, 0]; x[1] = x0[m, 1]; x[2] = x0[m, 2]
            if keep and m == 0:
                traj[0, 0] = x[0]; traj[0, 1] = x[1]; traj[0, 2] = x[2]
            qv = 0.0
            clamps = 0
            c = 0
            for i in range(N):
                _field_at(fields, steps_per_gate, i, &f1, &f2, &f3)
                dv = dy[i] - gain * x[2]
                qv = qv + dv * dv
                _filter_drift(x[0], x[1], x[2], f1, f2, f3, kappa, n, pure, a)
                _filter_diffusion(x[0], x[1], x[2], sk, b)
                for j in range(3):
                    w = x[j] + a[j] * dt
                    yb[j] = w + b[j] * dv
                    yp[j] = w + b[j] * sq
                    ym[j] = w - b[j] * sq
                _filter_drift(yb[0], yb[1], yb[2], f1, f2, f3, kappa, n, pure, ab)
                _filter_diffusion(yp[0], yp[1], yp[2], sk, bp)
                _filter_diffusion(ym[0], ym[1], ym[2], sk, bm)
                for j in range(3):
                    x[j] = (x[j] + 0.5 * (ab[j] + a[j]) * dt
                            + 0.25 * (bp[j] + bm[j] + 2.0 * b[j]) * dv
                            + 0.25 * (bp[j] - bm[j]) * (dv * dv - dt) / sq)
                r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2]
                if r2 > 1.0:
                    if r2 > 1.0 + 1e-9:
                        clamps += 1
                    inv = 1.0 / sqrt(r2)
                    x[0] *= inv; x[1] *= inv; x[2] *= inv
                if not isfinite(r2):
                    qv = INFINITY
                    x[0] = INFINITY; x[1] = INFINITY; x[2] = INFINITY
                    while c < K:
                        qv_out[m, c] = qv
                        c += 1
                    break
                if keep and m == 0:
                    traj[i + 1, 0] = x[0]; traj[i + 1, 1] = x[1]; traj[i + 1, 2] = x[2]
                    dv_out[i] = dv
                while c < K and checkpoints[c] == i + 1:
                    qv_out[m, c] = qv
                    c += 1
            while c < K:
                qv_out[m, c] = qv
                c += 1
            x_out[m, 0] = x[0]; x_out[m, 1] = x[1]; x_out[m, 2] = x[2]
            clamp_out[m] = clamps


# ---------------------------------------------------------------- CSE

cdef struct Cse:
    long D
    double* mz
    double* lad
    double kappa
    double sk


cdef inline double _expz(Cse* s, double* yr, double* yi) noexcept nogil:
    cdef long k
    cdef double p, num = 0.0, den = 0.0
    for k in range(s.D):
        p = yr[k] * yr[k] + yi[k] * yi[k]
        num += s.mz[k] * p
        den += p
    return num / den


cdef inline void _cse_b(Cse* s, double* yr, double* yi, double e,
                        double* outr, double* outi) noexcept nogil:
    cdef long k
    cdef double w
    for k in range(s.D):
        w = s.sk * (s.mz[k] - e)
        outr[k] = w * yr[k]
        outi[k] = w * yi[k]


cdef inline void _cse_a(Cse* s, double* yr, double* yi, double e,
                        double f1, double f2, double f3,
                        double* outr, double* outi) noexcept nogil:
    # a = -i H y - kappa/2 (Jz - e)^2 y,  H = f3 Jz + p J+ + conj(p) J-,  p = (f1 - i f2)/2
    cdef long k, D = s.D
    cdef double hr, hi, d, pr = 0.5 * f1, pi = -0.5 * f2, c
    for k in range(D):
        hr = f3 * s.mz[k] * yr[k]
        hi = f3 * s.mz[k] * yi[k]
        if k + 1 < D:
            c = s.lad[k]
            hr += c * (pr * yr[k + 1] - pi * yi[k + 1])
            hi += c * (pr * yi[k + 1] + pi * yr[k + 1])
        if k > 0:
            c = s.lad[k - 1]
            hr += c * (pr * yr[k - 1] + pi * yi[k - 1])
            hi += c * (pr * yi[k - 1] - pi * yr[k - 1])
        d = s.mz[k] - e
        d = 0.5 * s.kappa * d * d
        outr[k] = hi - d * yr[k]
        outi[k] = -hr - d * yi[k]


cdef inline int _gate_of(long i, long steps_per_gate, long G) noexcept nogil:
    cdef long g
    if G == 0 or steps_per_gate <= 0:
        return -1
    g = i // steps_per_gate
    return <int>g if g < G else -1


cdef inline void _matvec(const double[:, :, ::1] ur, const double[:, :, ::1] ui, int g, int adjoint,
                         double* yr, double* yi, double* tr, double* ti, long D) noexcept nogil:
    # y <- U_g y (or U_g^dagger y), using t as scratch
    cdef long j, k
    cdef double sr, si, a, b
    for j in range(D):
        sr = 0.0
        si = 0.0
        if adjoint:
            for k in range(D):
                a = ur[g, k, j]
                b = -ui[g, k, j]
                sr += a * yr[k] - b * yi[k]
                si += a * yi[k] + b * yr[k]
        else:
            for k in range(D):
                a = ur[g, j, k]
                b = ui[g, j, k]
                sr += a * yr[k] - b * yi[k]
                si += a * yi[k] + b * yr[k]
        tr[j] = sr
        ti[j] = si
    for j in range(D):
        yr[j] = tr[j]
        yi[j] = ti[j]


def run_cse(double[::1] psr, double[::1] psi, const double[::1] mz, const double[::1] lad,
            double kappa, double dt, const double[:, ::1] fields, long steps_per_gate,
            const double[:, :, ::1] uh_re, const double[:, :, ::1] uh_im,
            const double[:, :, ::1] uf_re, const double[:, :, ::1] uf_im,
            const double[::1] noise, int record_driven, int renormalize, long log_every,
            double[:, ::1] log_re, double[:, ::1] log_im, double[::1] incr_out):
    """Integrate the conditional Schrodinger equation in place.

    With ``record_driven`` false, ``noise`` holds the truth innovations dw and
    ``incr_out`` receives the record increments dy; otherwise ``noise`` is the
    record and ``incr_out`` receives the innovation.

    When per-gate half-step unitaries ``uh`` (and full steps ``uf``) are
    given, the control is applied exactly by Strang splitting around a
    measurement-only weak-2 step; otherwise the control Hamiltonian enters
    the weak-2 drift.  Returns the largest per-step |norm^2 - 1| of the
    stochastic sub-step, or -(step+1) on blowup.
    """
    cdef long D = psr.shape[0]
    cdef long N = noise.shape[0]
    cdef long G = uh_re.shape[0]
    cdef int split = G > 0
    cdef long i, k, row = 0
    cdef int g, gnext
    cdef double sq = sqrt(dt)
    cdef double e0, dw, f1 = 0.0, f2 = 0.0, f3 = 0.0, nrm, inv, worst = 0.0, q1, q2
    cdef Cse s
    cdef double* buf = <double*> malloc(20 * D * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double* ar = buf
    cdef double* ai = buf + D
    cdef double* br = buf + 2 * D
    cdef double* bi = buf + 3 * D
    cdef double* ybr = buf + 4 * D
    cdef double* ybi = buf + 5 * D
    cdef double* ypr = buf + 6 * D
    cdef double* ypi = buf + 7 * D
    cdef double* ymr = buf + 8 * D
    cdef double* ymi = buf + 9 * D
    cdef double* abr = buf + 10 * D
    cdef double* abi = buf + 11 * D
    cdef double* bpr = buf + 12 * D
    cdef double* bpi = buf + 13 * D
    cdef double* bmr = buf + 14 * D
    cdef double* bmi = buf + 15 * D
    cdef double* tr = buf + 16 * D
    cdef double* ti = buf + 17 * D
    cdef double* lr = buf + 18 * D
    cdef double* li = buf + 19 * D
    s.D = D
    s.mz = <double*> &mz[0]
    s.lad = <double*> &lad[0] if lad.shape[0] > 0 else NULL
    s.kappa = kappa
    s.sk = sqrt(kappa)
    cdef double* yr = &psr[0]
    cdef double* yi = &psi[0]
    try:
        with nogil:
            g = _gate_of(0, steps_per_gate, G) if split else -1
            if split and g >= 0 and N > 0:
                _matvec(uh_re, uh_im, g, 0, yr, yi, tr, ti, D)
            for i in range(N):
                if split:
                    g = _gate_of(i, steps_per_gate, G)
                if log_every > 0 and i % log_every == 0 and row < log_re.shape[0]:
                    for k in range(D):
                        lr[k] = yr[k]
                        li[k] = yi[k]
                    if split and g >= 0:
                        _matvec(uh_re, uh_im, g, 1, lr, li, tr, ti, D)
                    for k in range(D):
                        log_re[row, k] = lr[k]
                        log_im[row, k] = li[k]
                    row += 1
                if not split:
                    _field_at(fields, steps_per_gate, i, &f1, &f2, &f3)
                e0 = _expz(&s, yr, yi)
                if record_driven:
                    dw = noise[i] - 2.0 * s.sk * e0 * dt
                    incr_out[i] = dw
                else:
                    dw = noise[i]
                    incr_out[i] = dw + 2.0 * s.sk * e0 * dt
                _cse_a(&s, yr, yi, e0, f1, f2, f3, ar, ai)
                _cse_b(&s, yr, yi, e0, br, bi)
                for k in range(D):
                    q1 = yr[k] + ar[k] * dt
                    q2 = yi[k] + ai[k] * dt
                    ybr[k] = q1 + br[k] * dw
                    ybi[k] = q2 + bi[k] * dw
                    ypr[k] = q1 + br[k] * sq
                    ypi[k] = q2 + bi[k] * sq
                    ymr[k] = q1 - br[k] * sq
                    ymi[k] = q2 - bi[k] * sq
                _cse_a(&s, ybr, ybi, _expz(&s, ybr, ybi), f1, f2, f3, abr, abi)
                _cse_b(&s, ypr, ypi, _expz(&s, ypr, ypi), bpr, bpi)
                _cse_b(&s, ymr, ymi, _expz(&s, ymr, ymi), bmr, bmi)
                q1 = 0.25 * (dw * dw - dt) / sq
                nrm = 0.0
                for k in range(D):
                    yr[k] = (yr[k] + 0.5 * (abr[k] + ar[k]) * dt
                             + 0.25 * (bpr[k] + bmr[k] + 2.0 * br[k]) * dw
                             + (bpr[k] - bmr[k]) * q1)
                    yi[k] = (yi[k] + 0.5 * (abi[k] + ai[k]) * dt
                             + 0.25 * (bpi[k] + bmi[k] + 2.0 * bi[k]) * dw
                             + (bpi[k] - bmi[k]) * q1)
                    nrm += yr[k] * yr[k] + yi[k] * yi[k]
                if not isfinite(nrm):
                    worst = -(i + 1.0)
                    break
                if nrm - 1.0 > worst:
                    worst = nrm - 1.0
                elif 1.0 - nrm > worst:
                    worst = 1.0 - nrm
                if renormalize:
                    inv = 1.0 / sqrt(nrm)
                    for k in range(D):
                        yr[k] *= inv
                        yi[k] *= inv
                if split:
                    # close this step's half rotation and open the next one
                    gnext = _gate_of(i + 1, steps_per_gate, G) if i + 1 < N else -1
                    if g >= 0 and gnext == g:
                        _matvec(uf_re, uf_im, g, 0, yr, yi, tr, ti, D)
                    else:
                        if g >= 0:
                            _matvec(uh_re, uh_im, g, 0, yr, yi, tr, ti, D)
                        if gnext >= 0:
                            _matvec(uh_re, uh_im, gnext, 0, yr, yi, tr, ti, D)
            if worst >= 0 and log_every > 0 and N % log_every == 0 and row < log_re.shape[0]:
                for k in range(D):
                    log_re[row, k] = yr[k]
                    log_im[row, k] = yi[k]
    finally:
        free(buf)
    return worst
