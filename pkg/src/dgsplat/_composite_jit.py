"""Compiled per-pixel compositing loops (numba).

Sequential front-to-back sweep per pixel with genuine early exit; the
backward pass recomputes the sweep and chains cotangents to the projected
per-Gaussian quantities.  Threshold arguments < 0 mean "disabled".
Single-threaded on purpose: gradient accumulation order is then fixed,
keeping results bit-deterministic.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def composite_forward(px, py, mx, my, ia, ib, ic, op, colors,
                      alpha_clamp, skip_thr, exit_thr):
    p_count = px.shape[0]
    n_count = mx.shape[0]
    color = np.zeros((p_count, 3))
    total_log = np.zeros(p_count)
    for p in range(p_count):
        x = px[p]
        y = py[p]
        trans = 1.0
        tl = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for n in range(n_count):
            if exit_thr >= 0.0 and trans < exit_thr:
                break
            dx = x - mx[n]
            dy = y - my[n]
            q = ia[n] * dx * dx + 2.0 * ib[n] * dx * dy + ic[n] * dy * dy
            a = op[n] * math.exp(-0.5 * q)
            if alpha_clamp >= 0.0 and a > alpha_clamp:
                a = alpha_clamp
            if skip_thr >= 0.0 and a < skip_thr:
                continue
            at = a * trans
            c0 += colors[n, 0] * at
            c1 += colors[n, 1] * at
            c2 += colors[n, 2] * at
            keep = 1.0 - a
            tl += math.log(keep)
            trans *= keep
        color[p, 0] = c0
        color[p, 1] = c1
        color[p, 2] = c2
        total_log[p] = tl
    return color, total_log


@njit(cache=True)
def composite_backward(px, py, mx, my, ia, ib, ic, op, colors,
                       alpha_clamp, skip_thr, exit_thr, g_color, g_log):
    p_count = px.shape[0]
    n_count = mx.shape[0]
    mx_bar = np.zeros(n_count)
    my_bar = np.zeros(n_count)
    ia_bar = np.zeros(n_count)
    ib_bar = np.zeros(n_count)
    ic_bar = np.zeros(n_count)
    op_bar = np.zeros(n_count)
    col_bar = np.zeros((n_count, 3))

    a_buf = np.empty(n_count)
    t_buf = np.empty(n_count)
    g_buf = np.empty(n_count)       # exp(-q/2), pre-opacity
    clamped = np.empty(n_count, np.uint8)
    used = np.empty(n_count, np.uint8)

    for p in range(p_count):
        x = px[p]
        y = py[p]
        gl = g_log[p]
        gc0 = g_color[p, 0]
        gc1 = g_color[p, 1]
        gc2 = g_color[p, 2]

        # Forward sweep again, remembering per-Gaussian alpha and the
        # transmittance in front of it.
        trans = 1.0
        last = -1
        for n in range(n_count):
            used[n] = 0
            if exit_thr >= 0.0 and trans < exit_thr:
                break
            dx = x - mx[n]
            dy = y - my[n]
            q = ia[n] * dx * dx + 2.0 * ib[n] * dx * dy + ic[n] * dy * dy
            g = math.exp(-0.5 * q)
            a = op[n] * g
            was_clamped = alpha_clamp >= 0.0 and a > alpha_clamp
            if was_clamped:
                a = alpha_clamp
            if skip_thr >= 0.0 and a < skip_thr:
                continue
            used[n] = 1
            clamped[n] = 1 if was_clamped else 0
            a_buf[n] = a
            g_buf[n] = g
            t_buf[n] = trans
            trans *= 1.0 - a
            last = n

        # Reverse sweep: suffix accumulates sum_{m>n} wbar_m a_m T_m, the
        # contribution of later compositing terms through the transmittance.
        suffix = 0.0
        for n in range(last, -1, -1):
            if used[n] == 0:
                continue
            a = a_buf[n]
            tr = t_buf[n]
            wbar = gc0 * colors[n, 0] + gc1 * colors[n, 1] + gc2 * colors[n, 2]
            at = a * tr
            col_bar[n, 0] += gc0 * at
            col_bar[n, 1] += gc1 * at
            col_bar[n, 2] += gc2 * at
            one_minus = 1.0 - a
            a_bar = wbar * tr - (suffix + gl) / one_minus
            suffix += wbar * at
            if clamped[n] == 1:
                continue  # clamp plateau: no gradient into q / opacity
            dx = x - mx[n]
            dy = y - my[n]
            g = g_buf[n]
            op_bar[n] += a_bar * g
            q_bar = -0.5 * a_bar * op[n] * g
            ia_bar[n] += q_bar * dx * dx
            ib_bar[n] += 2.0 * q_bar * dx * dy
            ic_bar[n] += q_bar * dy * dy
            dx_bar = q_bar * (2.0 * ia[n] * dx + 2.0 * ib[n] * dy)
            dy_bar = q_bar * (2.0 * ic[n] * dy + 2.0 * ib[n] * dx)
            mx_bar[n] -= dx_bar
            my_bar[n] -= dy_bar
    return mx_bar, my_bar, ia_bar, ib_bar, ic_bar, op_bar, col_bar
