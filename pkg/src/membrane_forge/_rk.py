"""Jitted Dormand-Prince integration kernel for the membrane equilibrium ODEs.

State vector y = (l1, l2, beta, z) integrated in the undeformed radius r.
The Gent partials are inlined so the whole stepper compiles under numba.
Status codes: 0 ok, 1 extension limit hit, 2 singular rhs, 3 step underflow,
4 node buffer overflow.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

OK = 0
EXTENSION_LIMIT = 1
SINGULAR = 2
STEP_UNDERFLOW = 3
BUFFER_FULL = 4

_GUARD = 1e-9


@njit(cache=True)
def _rhs(r, y, mu, jm, pt, out):
    """Fill out[0:4] with (dl1, dl2, dbeta, dz)/dr; return a status code."""
    l1 = y[0]
    l2 = y[1]
    beta = y[2]
    if l1 <= 0.0 or l2 <= 0.0:
        return SINGULAR
    c1 = l1 * l1 * l1 * l2 * l2
    c2 = l1 * l1 * l2 * l2 * l2
    i1 = l1 * l1 + l2 * l2 + 1.0 / (l1 * l1 * l2 * l2)
    a = 1.0 - (i1 - 3.0) / jm
    if a <= _GUARD:
        return EXTENSION_LIMIT
    half_mu = 0.5 * mu
    jma2 = jm * a * a
    i1_1 = 2.0 * l1 - 2.0 / c1
    i1_2 = 2.0 * l2 - 2.0 / c2
    w1 = half_mu * i1_1 / a
    w2 = half_mu * i1_2 / a
    w11 = half_mu * ((2.0 + 6.0 / (c1 * l1)) / a + i1_1 * i1_1 / jma2)
    w12 = half_mu * (4.0 / (l1 * c2) / a + i1_1 * i1_2 / jma2)
    if w11 <= 1e-14:
        return SINGULAR
    cosb = np.cos(beta)
    sinb = np.sin(beta)
    out[0] = ((w2 - l1 * w12) * cosb + (l2 * w12 - w1)) / (r * w11)
    out[1] = (l1 * cosb - l2) / r
    num_beta = pt * r * l1 * l2 - w2 * sinb
    if np.abs(w1) < 1e-14:
        if np.abs(num_beta) < 1e-12:
            out[2] = 0.0
        else:
            return SINGULAR
    else:
        out[2] = num_beta / (r * w1)
    out[3] = l1 * sinb
    return OK


@njit(cache=True)
def integrate_segment(y0, ra, rb, mu, jm, pt, rtol, atol, max_step, rs, ys):
    """Adaptive RK45 (Dormand-Prince) from ra to rb.

    Accepted nodes are written into rs (n,) and ys (n, 4); returns
    (status, n_nodes).  rs[0], ys[0] hold the initial state.
    """
    n_max = rs.shape[0]
    span = rb - ra
    y = y0.copy()
    r = ra
    rs[0] = r
    for i in range(4):
        ys[0, i] = y[i]
    n = 1

    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    k5 = np.empty(4)
    k6 = np.empty(4)
    k7 = np.empty(4)
    ytmp = np.empty(4)
    ynew = np.empty(4)

    h = min(span / 100.0, max_step)
    h_min = span * 1e-13
    st = _rhs(r, y, mu, jm, pt, k1)
    if st != OK:
        return st, n

    while r < rb:
        if h < h_min:
            return STEP_UNDERFLOW, n
        if r + h > rb:
            h = rb - r

        for i in range(4):
            ytmp[i] = y[i] + h * 0.2 * k1[i]
        st = _rhs(r + 0.2 * h, ytmp, mu, jm, pt, k2)
        if st == OK:
            for i in range(4):
                ytmp[i] = y[i] + h * (3.0 / 40.0 * k1[i] + 9.0 / 40.0 * k2[i])
            st = _rhs(r + 0.3 * h, ytmp, mu, jm, pt, k3)
        if st == OK:
            for i in range(4):
                ytmp[i] = y[i] + h * (44.0 / 45.0 * k1[i] - 56.0 / 15.0 * k2[i]
                                      + 32.0 / 9.0 * k3[i])
            st = _rhs(r + 0.8 * h, ytmp, mu, jm, pt, k4)
        if st == OK:
            for i in range(4):
                ytmp[i] = y[i] + h * (19372.0 / 6561.0 * k1[i]
                                      - 25360.0 / 2187.0 * k2[i]
                                      + 64448.0 / 6561.0 * k3[i]
                                      - 212.0 / 729.0 * k4[i])
            st = _rhs(r + 8.0 / 9.0 * h, ytmp, mu, jm, pt, k5)
        if st == OK:
            for i in range(4):
                ytmp[i] = y[i] + h * (9017.0 / 3168.0 * k1[i]
                                      - 355.0 / 33.0 * k2[i]
                                      + 46732.0 / 5247.0 * k3[i]
                                      + 49.0 / 176.0 * k4[i]
                                      - 5103.0 / 18656.0 * k5[i])
            st = _rhs(r + h, ytmp, mu, jm, pt, k6)
        if st == OK:
            for i in range(4):
                ynew[i] = y[i] + h * (35.0 / 384.0 * k1[i]
                                      + 500.0 / 1113.0 * k3[i]
                                      + 125.0 / 192.0 * k4[i]
                                      - 2187.0 / 6784.0 * k5[i]
                                      + 11.0 / 84.0 * k6[i])
            st = _rhs(r + h, ynew, mu, jm, pt, k7)

        if st != OK:
            # A trial stage left the admissible domain: retry with a
            # smaller step, or report the failure at the current point.
            h *= 0.5
            if h < h_min:
                return st, n
            continue

        err = 0.0
        for i in range(4):
            ei = h * (71.0 / 57600.0 * k1[i]
                      - 71.0 / 16695.0 * k3[i]
                      + 71.0 / 1920.0 * k4[i]
                      - 17253.0 / 339200.0 * k5[i]
                      + 22.0 / 525.0 * k6[i]
                      - 1.0 / 40.0 * k7[i])
            sc = atol + rtol * max(np.abs(y[i]), np.abs(ynew[i]))
            err += (ei / sc) ** 2
        err = np.sqrt(err / 4.0)

        if err <= 1.0:
            r += h
            for i in range(4):
                y[i] = ynew[i]
                k1[i] = k7[i]
            if n >= n_max:
                return BUFFER_FULL, n
            rs[n] = r
            for i in range(4):
                ys[n, i] = y[i]
            n += 1
            fac = 5.0 if err == 0.0 else min(5.0, 0.9 * err ** -0.2)
            h = min(h * fac, max_step)
        else:
            h *= max(0.2, 0.9 * err ** -0.2)

    return OK, n
