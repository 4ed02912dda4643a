"""Compiled inner loops for the planner: rollout, residuals, augmented objective.

Residuals are laid out flat as ``[collision (R * N), box (6 per step), goal (0 or 1)]``
with the convention ``residual <= 0`` means satisfied. The collision block holds
one residual per (tau, agent): ``min_j d_j - eps >= L C`` is the same set as
``d_j - eps >= L C`` for every ``j``, and the per-agent form is smooth where two
agents are equally near.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi


@njit(cache=True)
def wrap(theta):
    w = theta - TWO_PI * np.round(theta / TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    elif w > math.pi:
        w -= TWO_PI
    return w


@njit(cache=True)
def rollout(x0, u, dt, wb):
    m = u.shape[0]
    out = np.empty((m + 1, 4))
    out[0] = x0
    for k in range(m):
        x, y, th, v = out[k, 0], out[k, 1], out[k, 2], out[k, 3]
        out[k + 1, 0] = x + dt * v * math.cos(th)
        out[k + 1, 1] = y + dt * v * math.sin(th)
        out[k + 1, 2] = wrap(th + dt * (v / wb) * math.tan(u[k, 0]))
        out[k + 1, 3] = v + dt * u[k, 1]
    return out


@njit(cache=True)
def adjoint(states, u, gs, dt, wb):
    """Gradient w.r.t. controls of ``sum(gs * states)``; row 0 of ``gs`` is ignored."""
    m = u.shape[0]
    out = np.empty((m, 2))
    lx, ly, lth, lv = gs[m, 0], gs[m, 1], gs[m, 2], gs[m, 3]
    for k in range(m - 1, -1, -1):
        th, v, phi = states[k, 2], states[k, 3], u[k, 0]
        cp = math.cos(phi)
        out[k, 0] = lth * dt * v / (wb * cp * cp)
        out[k, 1] = lv * dt
        c, s = math.cos(th), math.sin(th)
        new_th = gs[k, 2] + lth - dt * v * s * lx + dt * v * c * ly
        new_v = gs[k, 3] + lv + dt * c * lx + dt * s * ly + dt * math.tan(phi) / wb * lth
        lx = gs[k, 0] + lx
        ly = gs[k, 1] + ly
        lth = new_th
        lv = new_v
    return out


@njit(cache=True)
def residuals(z, m, x0, dt, wb, rows, preds, rhs, eps, slack, goal, goal_r, hard_goal, box, vmax, w):
    """Cost, flat residuals, rollout, per-agent unit vectors, goal direction, raw c."""
    u = z[: 2 * m].reshape((m, 2))
    states = rollout(x0, u, dt, wb)
    nr = rows.shape[0]
    na = preds.shape[1]
    nc = nr * na
    ng = 1 if hard_goal else 0
    res = np.empty(nc + 6 * m + ng)
    unit = np.zeros((nr, na, 2))
    cval = np.empty(nr)
    cost = 0.0
    for k in range(m):
        v = states[k + 1, 3]
        cost += w[0] * v * v + w[2] * (u[k, 0] * u[k, 0] + u[k, 1] * u[k, 1])
    for r in range(nr):
        px, py = states[rows[r], 0], states[rows[r], 1]
        best = np.inf
        for j in range(na):
            dx = px - preds[r, j, 0]
            dy = py - preds[r, j, 1]
            d = math.hypot(dx, dy)
            if d > 0:
                unit[r, j, 0] = dx / d
                unit[r, j, 1] = dy / d
            best = min(best, d)
            res[r * na + j] = rhs[r] - (d - eps)
            if slack:
                res[r * na + j] -= z[2 * m + r]
        cval[r] = best - eps
    for k in range(m):
        x, y, v = states[k + 1, 0], states[k + 1, 1], states[k + 1, 3]
        b = nc + 6 * k
        res[b] = x - box[1]
        res[b + 1] = box[0] - x
        res[b + 2] = y - box[3]
        res[b + 3] = box[2] - y
        res[b + 4] = v - vmax
        res[b + 5] = -v
    gx = states[m, 0] - goal[0]
    gy = states[m, 1] - goal[1]
    gd = math.hypot(gx, gy)
    gdir = np.zeros(2)
    if gd > 0:
        gdir[0] = gx / gd
        gdir[1] = gy / gd
    if hard_goal:
        res[nc + 6 * m] = gd - goal_r
    else:
        cost += w[1] * gd * gd
    return cost, res, states, unit, gdir, cval


@njit(cache=True)
def augmented(z, lam, mu, margin, m, x0, dt, wb, rows, preds, rhs, eps, slack, slack_w,
              goal, goal_r, hard_goal, box, vmax, w):
    cost, res, states, unit, gdir, _ = residuals(
        z, m, x0, dt, wb, rows, preds, rhs, eps, slack, goal, goal_r, hard_goal, box, vmax, w
    )
    u = z[: 2 * m].reshape((m, 2))
    nr = rows.shape[0]
    na = preds.shape[1]
    nc = nr * na
    f = cost
    rk = np.empty(res.shape[0])
    for i in range(res.shape[0]):
        r = lam[i] + mu * (res[i] + margin[i])
        rk[i] = r if r > 0 else 0.0
        f += (rk[i] * rk[i] - lam[i] * lam[i]) / (2.0 * mu)
    gs = np.zeros((m + 1, 4))
    for k in range(m):
        gs[k + 1, 3] += 2.0 * w[0] * states[k + 1, 3]
    if not hard_goal:
        gs[m, 0] += 2.0 * w[1] * (states[m, 0] - goal[0])
        gs[m, 1] += 2.0 * w[1] * (states[m, 1] - goal[1])
    gz = np.zeros(z.shape[0])
    for r in range(nr):
        if slack:
            gz[2 * m + r] = slack_w
            f += slack_w * z[2 * m + r]
        for j in range(na):
            q = rk[r * na + j]
            gs[rows[r], 0] -= q * unit[r, j, 0]
            gs[rows[r], 1] -= q * unit[r, j, 1]
            if slack:
                gz[2 * m + r] -= q
    for k in range(m):
        b = nc + 6 * k
        gs[k + 1, 0] += rk[b] - rk[b + 1]
        gs[k + 1, 1] += rk[b + 2] - rk[b + 3]
        gs[k + 1, 3] += rk[b + 4] - rk[b + 5]
    if hard_goal:
        gs[m, 0] += rk[nc + 6 * m] * gdir[0]
        gs[m, 1] += rk[nc + 6 * m] * gdir[1]
    gu = adjoint(states, u, gs, dt, wb)
    for k in range(m):
        gz[2 * k] = gu[k, 0] + 2.0 * w[2] * u[k, 0]
        gz[2 * k + 1] = gu[k, 1] + 2.0 * w[2] * u[k, 1]
    return f, gz


@njit(cache=True)
def _project(x, lo, hi):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = min(max(x[i], lo[i]), hi[i])
    return out


@njit(cache=True)
def _pg_norm(x, g, lo, hi):
    # inf-norm of the projected gradient step P(x - g) - x
    n = 0.0
    for i in range(x.shape[0]):
        d = abs(min(max(x[i] - g[i], lo[i]), hi[i]) - x[i])
        if d > n:
            n = d
    return n


@njit(cache=True)
def projected_lbfgs(w0, lo, hi, sc, lam, mu, margin, max_iter, ftol, gtol, mem,
                    m, x0, dt, wb, rows, preds, rhs, eps, slack, slack_w,
                    goal, goal_r, hard_goal, box, vmax, w):
    """Minimize the augmented objective over box-bounded scaled variables ``z = w * sc``.

    Quasi-Newton directions from the two-loop recursion on the variables not
    held at a bound, then a backtracking search along the projected path.
    """
    n = w0.shape[0]
    x = _project(w0, lo, hi)
    f, gz = augmented(x * sc, lam, mu, margin, m, x0, dt, wb, rows, preds, rhs, eps, slack, slack_w,
                      goal, goal_r, hard_goal, box, vmax, w)
    g = gz * sc
    S = np.zeros((mem, n))
    Y = np.zeros((mem, n))
    rho = np.zeros(mem)
    alpha = np.zeros(mem)
    count = 0
    head = 0
    it = 0
    free = np.ones(n)
    while it < max_iter:
        if _pg_norm(x, g, lo, hi) <= gtol:
            break
        for i in range(n):
            at_lo = x[i] <= lo[i] and g[i] > 0
            at_hi = x[i] >= hi[i] and g[i] < 0
            free[i] = 0.0 if (at_lo or at_hi) else 1.0
        q = g * free
        k = head
        for _ in range(count):
            k = (k - 1) % mem
            alpha[k] = rho[k] * np.dot(S[k] * free, q)
            q -= alpha[k] * Y[k] * free
        if count > 0:
            last = (head - 1) % mem
            yy = np.dot(Y[last], Y[last])
            q *= np.dot(S[last], Y[last]) / yy if yy > 0 else 1.0
        for _ in range(count):
            b = rho[k] * np.dot(Y[k] * free, q)
            q += S[k] * free * (alpha[k] - b)
            k = (k + 1) % mem
        d = -q * free
        slope = np.dot(g, d)
        if not slope < 0:
            count = 0
            d = -g * free
            slope = np.dot(g, d)
            if not slope < 0:
                break
        step = 1.0
        if count == 0:
            dn = np.max(np.abs(d))
            if dn > 1.0:
                step = 1.0 / dn
        accepted = False
        for _ in range(40):
            xn = _project(x + step * d, lo, hi)
            fn, gzn = augmented(xn * sc, lam, mu, margin, m, x0, dt, wb, rows, preds, rhs, eps, slack,
                                slack_w, goal, goal_r, hard_goal, box, vmax, w)
            if fn <= f + 1e-4 * np.dot(g, xn - x):
                accepted = True
                break
            # near a minimizer f stalls at rounding level; fall back to the
            # approximate Wolfe test, which reads the slope instead
            if fn <= f + 1e-12 * abs(f):
                if np.dot(gzn * sc, xn - x) <= -0.8 * np.dot(g, xn - x):
                    accepted = True
                    break
            step *= 0.5
        it += 1
        if not accepted:
            break
        gn = gzn * sc
        s = xn - x
        y = gn - g
        sy = np.dot(s, y)
        if sy > 1e-12 * np.dot(y, y):
            S[head] = s
            Y[head] = y
            rho[head] = 1.0 / sy
            head = (head + 1) % mem
            count = min(count + 1, mem)
        small = ftol > 0 and f - fn <= ftol * max(abs(f), abs(fn), 1.0)
        x, f, g = xn, fn, gn
        if small:
            break
    return x, it
