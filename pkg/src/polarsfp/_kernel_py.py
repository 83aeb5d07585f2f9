"""Pure-Python per-track solver kernel.

Line-for-line twin of ``_kernel_cy.pyx``; used when the compiled module is
unavailable or ``POLARSFP_BACKEND=python`` is set. Scalar ``math`` code on
purpose: the Cython build compiles the same statements to C.
"""
import math

import numpy as np

CONVERGED = 0
MAX_ITER = 1
DEGENERATE = 2
INCONSISTENT = 3

_HALF_PI = 0.5 * math.pi
_BISECT_STEPS = 200
# index separation above which two zero-residual starts count as distinct roots
_AMBIGUITY_GAP = 1e-4


def spec_dop(t, n):
    s = math.sin(t)
    tn = math.tan(t)
    s2 = s * s
    return 2.0 * s * tn * math.sqrt(n * n - s2) / (n * n - 2.0 * s2 + tn * tn)


def spec_dop_dn(t, n):
    s = math.sin(t)
    tn = math.tan(t)
    s2 = s * s
    root = math.sqrt(n * n - s2)
    num = 2.0 * s * tn * root
    den = n * n - 2.0 * s2 + tn * tn
    return (2.0 * s * tn * n / root * den - num * 2.0 * n) / (den * den)


def invert_spec_dop(rho, n, above):
    """Zenith on one Brewster branch whose specular DoP equals ``rho``."""
    tb = math.atan(n)
    if rho >= 1.0:
        return tb
    if above:
        if rho <= 0.0:
            return _HALF_PI
        lo, hi = tb, _HALF_PI
    else:
        if rho <= 0.0:
            return 0.0
        lo, hi = 0.0, tb
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        v = spec_dop(mid, n)
        if (v < rho) != above:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _cost(I, rho, th, N, d, n):
    c = 0.0
    for i in range(N):
        r = d - I[i] + I[i] * rho[i] / spec_dop(th[i], n)
        c += r * r
    return c


def _lm(I, rho, th, N, d, n, dmax, nlo, nhi, tol, max_iter):
    """Box-projected Levenberg-Marquardt on (diffuse, index).

    Returns (d, n, cost, iterations, converged).
    """
    cost = _cost(I, rho, th, N, d, n)
    lam = 1e-3
    it = 0
    while it < max_iter:
        it += 1
        a = 0.0
        b = 0.0
        c = 0.0
        g0 = 0.0
        g1 = 0.0
        for i in range(N):
            rs = spec_dop(th[i], n)
            r = d - I[i] + I[i] * rho[i] / rs
            jn = -I[i] * rho[i] * spec_dop_dn(th[i], n) / (rs * rs)
            a += 1.0
            b += jn
            c += jn * jn
            g0 += r
            g1 += jn * r
        # free variables: a bound blocks the descent direction -g
        free_d = not ((d <= 0.0 and g0 > 0.0) or (d >= dmax and g0 < 0.0))
        free_n = not ((n <= nlo and g1 > 0.0) or (n >= nhi and g1 < 0.0))
        pg = (abs(g0) if free_d else 0.0) + (abs(g1) * (1.0 + abs(n)) if free_n else 0.0)
        if pg <= 1e-15 * (1.0 + cost):
            return d, n, cost, it, True
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
                return d, n, cost, it, True
            dn_ = min(max(d + sd, 0.0), dmax)
            nn_ = min(max(n + sn, nlo), nhi)
            cn = _cost(I, rho, th, N, dn_, nn_)
            if cn < cost:
                step = abs(dn_ - d) + abs(nn_ - n)
                gain = cost - cn
                d = dn_
                n = nn_
                prev = cost
                cost = cn
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if step <= 1e-14 * (1.0 + abs(d) + abs(n)) or gain <= 1e-15 * prev:
                    return d, n, cost, it, True
                break
            lam *= 4.0
        if not accepted:
            return d, n, cost, it, True
    return d, n, cost, it, cost <= tol


def solve_track(I, rho, th0, N, nlo, nhi, max_outer, tol, outer_tol, zfloor, zceil,
                starts, deg_dop, refine, max_inner, out_th):
    """Solve one track; writes refined zeniths into ``out_th``.

    Returns (diffuse, index, residual, iterations, status, ambiguous); the
    flag marks tracks where two starts reached different exact minimizers.
    """
    th = [min(max(th0[i], zfloor), zceil) for i in range(N)]
    dmax = I[0]
    for i in range(1, N):
        if I[i] < dmax:
            dmax = I[i]
    degenerate = True
    for i in range(N):
        if rho[i] >= deg_dop:
            degenerate = False
    if degenerate or dmax <= 0.0:
        s = 0.0
        for i in range(N):
            s += I[i]
            out_th[i] = th[i]
        return s / N, 0.5 * (nlo + nhi), 0.0, 0, DEGENERATE, False

    d = 0.0
    n = 0.5 * (nlo + nhi)
    iters = 0
    status = MAX_ITER
    inner_ok = True
    ambiguous = False
    for outer in range(max_outer):
        if outer == 0:
            best = None
            exact = [False] * starts
            roots = [0.0] * starts
            for k in range(starts):
                n0 = nlo + (k + 0.5) * (nhi - nlo) / starts
                d0 = 0.0
                for i in range(N):
                    d0 += I[i] * (1.0 - rho[i] / spec_dop(th[i], n0))
                d0 = min(max(d0 / N, 0.0), dmax)
                res = _lm(I, rho, th, N, d0, n0, dmax, nlo, nhi, tol, max_inner)
                iters += res[3]
                exact[k] = res[2] <= tol
                roots[k] = res[1]
                if best is None or res[2] < best[2]:
                    best = res
            d, n, cost, _, inner_ok = best
            for k in range(starts):
                if exact[k] and abs(roots[k] - n) > _AMBIGUITY_GAP:
                    ambiguous = True
        else:
            d, n, cost, it, inner_ok = _lm(I, rho, th, N, d, n, dmax, nlo, nhi, tol, max_inner)
            iters += it
        if not refine:
            status = CONVERGED if inner_ok else MAX_ITER
            break
        tb = math.atan(n)
        delta = 0.0
        clamped = False
        for i in range(N):
            if rho[i] < deg_dop:
                # no specular signal in this view; nothing to refine against
                continue
            spec = I[i] - d
            if spec > 0.0:
                rt = rho[i] * I[i] / spec
            else:
                rt = 2.0
            if rt > 1.0:
                rt = 1.0
                clamped = True
            t = invert_spec_dop(rt, n, th[i] > tb)
            if t < zfloor or t > zceil:
                t = min(max(t, zfloor), zceil)
                clamped = True
            if abs(t - th[i]) > delta:
                delta = abs(t - th[i])
            th[i] = t
        if delta < outer_tol:
            if not inner_ok:
                status = MAX_ITER
            elif clamped:
                status = INCONSISTENT
            else:
                status = CONVERGED
            break
    for i in range(N):
        out_th[i] = th[i]
    return d, n, _cost(I, rho, th, N, d, n), iters, status, ambiguous


def solve_tracks(I, rho, theta, nlo, nhi, max_outer, tol, outer_tol, zfloor, zceil,
                 starts, deg_dop, refine, max_inner):
    """Batch driver over arrays of shape (T, N)."""
    I = np.ascontiguousarray(I, dtype=np.float64)
    rho = np.ascontiguousarray(rho, dtype=np.float64)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    T, N = I.shape
    diffuse = np.empty(T)
    index = np.empty(T)
    residual = np.empty(T)
    iterations = np.empty(T, dtype=np.int64)
    status = np.empty(T, dtype=np.int64)
    zen = np.empty((T, N))
    ambiguous = np.zeros(T, dtype=bool)
    out_th = [0.0] * N
    Il = I.tolist()
    rl = rho.tolist()
    tl = theta.tolist()
    for k in range(T):
        d, n, res, it, st, amb = solve_track(Il[k], rl[k], tl[k], N, nlo, nhi, max_outer, tol, outer_tol,
                                        zfloor, zceil, starts, deg_dop, refine, max_inner, out_th)
        diffuse[k] = d
        index[k] = n
        residual[k] = res
        iterations[k] = it
        status[k] = st
        zen[k] = out_th
        ambiguous[k] = amb
    return diffuse, index, zen, residual, iterations, status, ambiguous
