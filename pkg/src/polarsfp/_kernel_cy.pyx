# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-track solver kernel.

Mirrors ``_kernel_py`` statement for statement; the GIL is released for the
whole batch so callers can run chunks on a thread pool.
"""
import numpy as np

from libc.math cimport atan, fabs, sin, sqrt, tan, M_PI

cdef enum:
    CONVERGED = 0
    MAX_ITER = 1
    DEGENERATE = 2
    INCONSISTENT = 3
    BISECT_STEPS = 200
    MAX_STARTS = 64

cdef double AMBIGUITY_GAP = 1e-4


cdef struct Params:
    double nlo
    double nhi
    int max_outer
    double tol
    double outer_tol
    double zfloor
    double zceil
    int starts
    double deg_dop
    bint refine
    int max_inner


cdef struct LMResult:
    double d
    double n
    double cost
    int iters
    bint ok


cdef inline double spec_dop(double t, double n) noexcept nogil:
    cdef double s = sin(t)
    cdef double tn = tan(t)
    cdef double s2 = s * s
    return 2.0 * s * tn * sqrt(n * n - s2) / (n * n - 2.0 * s2 + tn * tn)


cdef inline double spec_dop_dn(double t, double n) noexcept nogil:
    cdef double s = sin(t)
    cdef double tn = tan(t)
    cdef double s2 = s * s
    cdef double root = sqrt(n * n - s2)
    cdef double num = 2.0 * s * tn * root
    cdef double den = n * n - 2.0 * s2 + tn * tn
    return (2.0 * s * tn * n / root * den - num * 2.0 * n) / (den * den)


cdef double invert_spec_dop_c(double rho, double n, bint above) noexcept nogil:
    cdef double tb = atan(n)
    cdef double lo, hi, mid, v
    cdef int k
    if rho >= 1.0:
        return tb
    if above:
        if rho <= 0.0:
            return 0.5 * M_PI
        lo = tb
        hi = 0.5 * M_PI
    else:
        if rho <= 0.0:
            return 0.0
        lo = 0.0
        hi = tb
    for k in range(BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        v = spec_dop(mid, n)
        if (v < rho) != above:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def invert_spec_dop(double rho, double n, bint above):
    return invert_spec_dop_c(rho, n, above)


cdef inline double _cost(const double* I, const double* rho, const double* th, int N,
                         double d, double n) noexcept nogil:
    cdef double c = 0.0
    cdef double r
    cdef int i
    for i in range(N):
        r = d - I[i] + I[i] * rho[i] / spec_dop(th[i], n)
        c += r * r
    return c


cdef LMResult _lm(const double* I, const double* rho, const double* th, int N, double d, double n,
                  double dmax, const Params* p, int max_iter) noexcept nogil:
    cdef LMResult out
    cdef double cost = _cost(I, rho, th, N, d, n)
    cdef double lam = 1e-3
    cdef int it = 0
    cdef int i
    cdef double a, b, c, g0, g1, rs, r, jn, pg
    cdef double a11, a22, det, sd, sn, dn_, nn_, cn, step, gain, prev
    cdef bint free_d, free_n, accepted
    cdef double nlo = p.nlo
    cdef double nhi = p.nhi
    cdef double tol = p.tol
    out.ok = True
    while it < max_iter:
        it += 1
        a = 0.0; b = 0.0; c = 0.0; g0 = 0.0; g1 = 0.0
        for i in range(N):
            rs = spec_dop(th[i], n)
            r = d - I[i] + I[i] * rho[i] / rs
            jn = -I[i] * rho[i] * spec_dop_dn(th[i], n) / (rs * rs)
            a += 1.0
            b += jn
            c += jn * jn
            g0 += r
            g1 += jn * r
        free_d = not ((d <= 0.0 and g0 > 0.0) or (d >= dmax and g0 < 0.0))
        free_n = not ((n <= nlo and g1 > 0.0) or (n >= nhi and g1 < 0.0))
        pg = 0.0
        if free_d:
            pg += fabs(g0)
        if free_n:
            pg += fabs(g1) * (1.0 + fabs(n))
        if pg <= 1e-15 * (1.0 + cost):
            out.d = d; out.n = n; out.cost = cost; out.iters = it
            return out
        accepted = False
        while lam < 1e16:
            if free_d and free_n:
                a11 = a * (1.0 + lam)
                a22 = c * (1.0 + lam) + 1e-300
                det = a11 * a22 - b * b
                if det <= 0.0:
                    lam *= 4.0
                    continue
                sd = (-g0 * a22 + g1 * b) / det
                sn = (-g1 * a11 + g0 * b) / det
            elif free_d:
                sd = -g0 / (a * (1.0 + lam))
                sn = 0.0
            elif free_n:
                sd = 0.0
                sn = -g1 / (c * (1.0 + lam) + 1e-300)
            else:
                out.d = d; out.n = n; out.cost = cost; out.iters = it
                return out
            dn_ = min(max(d + sd, 0.0), dmax)
            nn_ = min(max(n + sn, nlo), nhi)
            cn = _cost(I, rho, th, N, dn_, nn_)
            if cn < cost:
                step = fabs(dn_ - d) + fabs(nn_ - n)
                gain = cost - cn
                d = dn_
                n = nn_
                prev = cost
                cost = cn
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if step <= 1e-14 * (1.0 + fabs(d) + fabs(n)) or gain <= 1e-15 * prev:
                    out.d = d; out.n = n; out.cost = cost; out.iters = it
                    return out
                break
            lam *= 4.0
        if not accepted:
            out.d = d; out.n = n; out.cost = cost; out.iters = it
            return out
    out.d = d; out.n = n; out.cost = cost; out.iters = it
    out.ok = cost <= tol
    return out


cdef int _solve_track(const double* I, const double* rho, const double* th0, double* th, int N,
                      const Params* p, double* result) noexcept nogil:
    """Solve one track in place; result = (diffuse, index, residual, iterations, ambiguous)."""
    cdef int i, k, outer
    cdef double dmax, s, d, n, n0, d0, tb, delta, spec, rt, t
    cdef int iters = 0
    cdef int status = MAX_ITER
    cdef bint degenerate, inner_ok, have_best, clamped
    cdef LMResult res, best
    cdef double roots[MAX_STARTS]
    cdef bint exact[MAX_STARTS]
    cdef bint ambiguous = False
    for i in range(N):
        th[i] = min(max(th0[i], p.zfloor), p.zceil)
    dmax = I[0]
    for i in range(1, N):
        if I[i] < dmax:
            dmax = I[i]
    degenerate = True
    for i in range(N):
        if rho[i] >= p.deg_dop:
            degenerate = False
    if degenerate or dmax <= 0.0:
        s = 0.0
        for i in range(N):
            s += I[i]
        result[0] = s / N
        result[1] = 0.5 * (p.nlo + p.nhi)
        result[2] = 0.0
        result[3] = 0
        result[4] = 0
        return DEGENERATE

    d = 0.0
    n = 0.5 * (p.nlo + p.nhi)
    best.d = d; best.n = n; best.cost = 0.0; best.iters = 0; best.ok = False
    inner_ok = True
    for outer in range(p.max_outer):
        if outer == 0:
            have_best = False
            for k in range(p.starts):
                n0 = p.nlo + (k + 0.5) * (p.nhi - p.nlo) / p.starts
                d0 = 0.0
                for i in range(N):
                    d0 += I[i] * (1.0 - rho[i] / spec_dop(th[i], n0))
                d0 = min(max(d0 / N, 0.0), dmax)
                res = _lm(I, rho, th, N, d0, n0, dmax, p, p.max_inner)
                iters += res.iters
                exact[k] = res.cost <= p.tol
                roots[k] = res.n
                if not have_best or res.cost < best.cost:
                    best = res
                    have_best = True
            d = best.d
            n = best.n
            inner_ok = best.ok
            for k in range(p.starts):
                if exact[k] and fabs(roots[k] - n) > AMBIGUITY_GAP:
                    ambiguous = True
        else:
            res = _lm(I, rho, th, N, d, n, dmax, p, p.max_inner)
            iters += res.iters
            d = res.d
            n = res.n
            inner_ok = res.ok
        if not p.refine:
            status = CONVERGED if inner_ok else MAX_ITER
            break
        tb = atan(n)
        delta = 0.0
        clamped = False
        for i in range(N):
            if rho[i] < p.deg_dop:
                continue
            spec = I[i] - d
            if spec > 0.0:
                rt = rho[i] * I[i] / spec
            else:
                rt = 2.0
            if rt > 1.0:
                rt = 1.0
                clamped = True
            t = invert_spec_dop_c(rt, n, th[i] > tb)
            if t < p.zfloor or t > p.zceil:
                t = min(max(t, p.zfloor), p.zceil)
                clamped = True
            if fabs(t - th[i]) > delta:
                delta = fabs(t - th[i])
            th[i] = t
        if delta < p.outer_tol:
            if not inner_ok:
                status = MAX_ITER
            elif clamped:
                status = INCONSISTENT
            else:
                status = CONVERGED
            break
    result[0] = d
    result[1] = n
    result[2] = _cost(I, rho, th, N, d, n)
    result[3] = iters
    result[4] = 1.0 if ambiguous else 0.0
    return status


def solve_tracks(I, rho, theta, double nlo, double nhi, int max_outer, double tol, double outer_tol,
                 double zfloor, double zceil, int starts, double deg_dop, bint refine, int max_inner):
    """Batch driver over arrays of shape (T, N); runs without the GIL."""
    cdef double[:, ::1] Iv = np.ascontiguousarray(I, dtype=np.float64)
    cdef double[:, ::1] rv = np.ascontiguousarray(rho, dtype=np.float64)
    cdef double[:, ::1] tv = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t T = Iv.shape[0]
    cdef int N = <int>Iv.shape[1]
    diffuse = np.empty(T)
    index = np.empty(T)
    residual = np.empty(T)
    iterations = np.empty(T, dtype=np.int64)
    status = np.empty(T, dtype=np.int64)
    zen = np.empty((T, N))
    ambiguous = np.zeros(T, dtype=np.uint8)
    cdef unsigned char[::1] av = ambiguous
    cdef double[::1] dv = diffuse
    cdef double[::1] nv = index
    cdef double[::1] resv = residual
    cdef long long[::1] itv = iterations
    cdef long long[::1] stv = status
    cdef double[:, ::1] zv = zen
    cdef Params p
    cdef double out[5]
    cdef Py_ssize_t k
    p.nlo = nlo; p.nhi = nhi; p.max_outer = max_outer; p.tol = tol; p.outer_tol = outer_tol
    p.zfloor = zfloor; p.zceil = zceil; p.starts = starts; p.deg_dop = deg_dop
    p.refine = refine; p.max_inner = max_inner
    if starts > MAX_STARTS:
        raise ValueError(f"at most {MAX_STARTS} starts are supported")
    if T == 0:
        return diffuse, index, zen, residual, iterations, status, ambiguous.view(bool)
    with nogil:
        for k in range(T):
            stv[k] = _solve_track(&Iv[k, 0], &rv[k, 0], &tv[k, 0], &zv[k, 0], N, &p, out)
            dv[k] = out[0]
            nv[k] = out[1]
            resv[k] = out[2]
            itv[k] = <long long>out[3]
            av[k] = out[4] != 0.0
    return diffuse, index, zen, residual, iterations, status, ambiguous.view(bool)
