"""Hot numeric kernels: strided 2-D convolution and the binary hinge-SVM solver.

Each kernel has a numba loop implementation and a vectorized numpy
implementation. The public names dispatch on ``_accel.USE_NUMBA``; both
variants stay importable so tests and benchmarks can compare them.

Layouts: images are NHWC, conv weights are (kh, kw, c_in, c_out), convolution
uses valid padding.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel

_TAU = 1e-12


def conv_output_size(size, k, stride):
    return (size - k) // stride + 1


# --------------------------------------------------------------------------
# convolution


@_accel.njit
def _conv2d_forward_loops(x, w, b, stride):
    n_img, h, wd, c_in = x.shape
    kh, kw, _, c_out = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.empty((n_img, ho, wo, c_out), dtype=x.dtype)
    for n in range(n_img):
        for i in range(ho):
            for j in range(wo):
                for o in range(c_out):
                    out[n, i, j, o] = b[o]
                for p in range(kh):
                    for q in range(kw):
                        for c in range(c_in):
                            v = x[n, i * stride + p, j * stride + q, c]
                            for o in range(c_out):
                                out[n, i, j, o] += v * w[p, q, c, o]
    return out


@_accel.njit
def _conv2d_backward_loops(x, w, g, stride, need_input_grad):
    n_img, h, wd, c_in = x.shape
    kh, kw, _, c_out = w.shape
    ho = g.shape[1]
    wo = g.shape[2]
    gw = np.zeros(w.shape, dtype=w.dtype)
    gb = np.zeros(c_out, dtype=w.dtype)
    if need_input_grad:
        gx = np.zeros(x.shape, dtype=x.dtype)
    else:
        gx = np.zeros((0, 0, 0, 0), dtype=x.dtype)
    for n in range(n_img):
        for i in range(ho):
            for j in range(wo):
                for o in range(c_out):
                    gb[o] += g[n, i, j, o]
                for p in range(kh):
                    for q in range(kw):
                        for c in range(c_in):
                            v = x[n, i * stride + p, j * stride + q, c]
                            acc = 0.0
                            for o in range(c_out):
                                go = g[n, i, j, o]
                                gw[p, q, c, o] += v * go
                                acc += w[p, q, c, o] * go
                            if need_input_grad:
                                gx[n, i * stride + p, j * stride + q, c] += acc
    return gx, gw, gb


def _windows(x, kh, kw, stride):
    # (N, Ho, Wo, C, kh, kw) view, no copy
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _conv2d_forward_numpy(x, w, b, stride):
    kh, kw = w.shape[:2]
    win = _windows(x, kh, kw, stride)
    out = np.einsum("nijcpq,pqco->nijo", win, w, optimize=True)
    return (out + b).astype(x.dtype, copy=False)


def _conv2d_backward_numpy(x, w, g, stride, need_input_grad):
    kh, kw = w.shape[:2]
    ho, wo = g.shape[1:3]
    win = _windows(x, kh, kw, stride)
    gw = np.einsum("nijcpq,nijo->pqco", win, g, optimize=True).astype(w.dtype, copy=False)
    gb = g.sum(axis=(0, 1, 2)).astype(w.dtype, copy=False)
    if not need_input_grad:
        return np.zeros((0, 0, 0, 0), dtype=x.dtype), gw, gb
    gx = np.zeros_like(x)
    for p in range(kh):
        for q in range(kw):
            gx[:, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride, :] += (
                g @ w[p, q].T
            )
    return gx, gw, gb


def conv2d_forward(x, w, b, stride=1):
    x = np.ascontiguousarray(x)
    if _accel.USE_NUMBA:
        return _conv2d_forward_loops(x, np.ascontiguousarray(w), np.ascontiguousarray(b), stride)
    return _conv2d_forward_numpy(x, w, b, stride)


def conv2d_backward(x, w, g, stride=1, need_input_grad=True):
    """Return ``(grad_input, grad_weight, grad_bias)`` for a valid strided conv.

    ``grad_input`` is an empty array when ``need_input_grad`` is false.
    """
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    if _accel.USE_NUMBA:
        return _conv2d_backward_loops(x, np.ascontiguousarray(w), g, stride, need_input_grad)
    return _conv2d_backward_numpy(x, w, g, stride, need_input_grad)


# --------------------------------------------------------------------------
# binary hinge-loss SVM, dual solved by SMO with an unregularized bias
#
#   primal: min_w,b  0.5 |w|^2 + C sum_i max(0, 1 - y_i (w.x_i + b))
#   dual:   min_a    0.5 a'Qa - sum(a),  0 <= a <= C,  y'a = 0,  Q_ij = y_i y_j x_i.x_j
#
# One "sweep" is n pair updates. The dual objective is logged after every
# sweep and never increases.


@_accel.njit
def _smo_loops(X, y, C, tol, max_sweeps, alpha0):
    n, d = X.shape
    alpha = alpha0.copy()
    w = np.zeros(d)
    for t in range(n):
        for k in range(d):
            w[k] += y[t] * alpha[t] * X[t, k]
    G = np.empty(n)
    for t in range(n):
        s = 0.0
        for k in range(d):
            s += X[t, k] * w[k]
        G[t] = y[t] * s - 1.0
    kdiag = np.empty(n)
    for t in range(n):
        s = 0.0
        for k in range(d):
            s += X[t, k] * X[t, k]
        kdiag[t] = s
    ki = np.empty(n)
    trace = np.empty(max_sweeps + 1)
    f0 = 0.0
    for k in range(d):
        f0 += w[k] * w[k]
    f0 *= 0.5
    for t in range(n):
        f0 -= alpha[t]
    trace[0] = f0
    n_trace = 1
    converged = False
    sweeps = 0
    step = 0
    while sweeps < max_sweeps:
        gmax = -np.inf
        i = -1
        for t in range(n):
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                if -y[t] * G[t] > gmax:
                    gmax = -y[t] * G[t]
                    i = t
        gmax2 = -np.inf
        j = -1
        obj_min = np.inf
        if i >= 0:
            for t in range(n):
                s = 0.0
                for k in range(d):
                    s += X[t, k] * X[i, k]
                ki[t] = s
            for t in range(n):
                if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C):
                    yg = y[t] * G[t]
                    if yg > gmax2:
                        gmax2 = yg
                    grad_diff = gmax + yg
                    if grad_diff > 0:
                        quad = kdiag[i] + kdiag[t] - 2.0 * ki[t]
                        if quad <= 0:
                            quad = _TAU
                        obj = -(grad_diff * grad_diff) / quad
                        if obj < obj_min:
                            obj_min = obj
                            j = t
        if gmax + gmax2 < tol or j < 0:
            converged = True
            break

        quad = kdiag[i] + kdiag[j] - 2.0 * ki[j]
        if quad <= 0:
            quad = _TAU
        ai_old = alpha[i]
        aj_old = alpha[j]
        if y[i] != y[j]:
            delta = (-G[i] - G[j]) / quad
            diff = ai_old - aj_old
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            delta = (G[i] - G[j]) / quad
            total = ai_old + aj_old
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = total

        ci = y[i] * (alpha[i] - ai_old)
        cj = y[j] * (alpha[j] - aj_old)
        for k in range(d):
            w[k] += ci * X[i, k] + cj * X[j, k]
        for t in range(n):
            s = 0.0
            for k in range(d):
                s += X[t, k] * w[k]
            G[t] = y[t] * s - 1.0

        step += 1
        if step % n == 0:
            sweeps += 1
            f = 0.0
            for k in range(d):
                f += w[k] * w[k]
            f *= 0.5
            for t in range(n):
                f -= alpha[t]
            trace[n_trace] = f
            n_trace += 1
    return alpha, w, G, sweeps, converged, trace[:n_trace]


def _smo_numpy(X, y, C, tol, max_sweeps, alpha0):
    n, d = X.shape
    alpha = alpha0.copy()
    w = X.T @ (y * alpha)
    G = y * (X @ w) - 1.0
    kdiag = np.einsum("ij,ij->i", X, X)
    trace = [0.5 * float(w @ w) - float(alpha.sum())]
    converged = False
    sweeps = 0
    step = 0
    pos = y > 0
    neg = ~pos
    while sweeps < max_sweeps:
        up = (pos & (alpha < C)) | (neg & (alpha > 0))
        low = (pos & (alpha > 0)) | (neg & (alpha < C))
        if not up.any() or not low.any():
            converged = True
            break
        myg = -y * G
        cand = np.where(up, myg, -np.inf)
        i = int(np.argmax(cand))
        gmax = cand[i]
        yg = y * G
        gmax2 = np.max(np.where(low, yg, -np.inf))
        grad_diff = gmax + yg
        ok = low & (grad_diff > 0)
        if gmax + gmax2 < tol or not ok.any():
            converged = True
            break
        ki = X @ X[i]
        quad = kdiag[i] + kdiag - 2.0 * ki
        quad = np.where(quad <= 0, _TAU, quad)
        obj = np.where(ok, -(grad_diff * grad_diff) / quad, np.inf)
        j = int(np.argmin(obj))

        q = quad[j]
        ai_old, aj_old = alpha[i], alpha[j]
        if y[i] != y[j]:
            delta = (-G[i] - G[j]) / q
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
                if ai > C:
                    ai, aj = C, C - diff
            else:
                if ai < 0:
                    ai, aj = 0.0, -diff
                if aj > C:
                    aj, ai = C, C + diff
        else:
            delta = (G[i] - G[j]) / q
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
                if aj > C:
                    aj, ai = C, total - C
            else:
                if aj < 0:
                    aj, ai = 0.0, total
                if ai < 0:
                    ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        w += y[i] * (ai - ai_old) * X[i] + y[j] * (aj - aj_old) * X[j]
        G = y * (X @ w) - 1.0

        step += 1
        if step % n == 0:
            sweeps += 1
            trace.append(0.5 * float(w @ w) - float(alpha.sum()))
    return alpha, w, G, sweeps, converged, np.asarray(trace)


def smo_intercept(alpha, y, G, C):
    """Intercept from the KKT conditions; average over free vectors when any exist."""
    yg = y * G
    at_upper = alpha >= C
    at_lower = alpha <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        rho = float(yg[free].mean())
    else:
        ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2)
    return -rho


def smo_binary(X, y, C=1.0, tol=1e-3, max_sweeps=1000):
    """Solve one binary hinge-SVM. ``y`` must hold both +1 and -1.

    Converged means the maximal KKT violation is below ``tol`` and the
    duality gap is at most ``tol`` times the dual value, so the primal
    objective is within ``tol`` (relative) of the optimum. When the first
    condition holds but not the second, the solve resumes from the current
    point with a 10x tighter KKT threshold.

    Returns ``(w, b, sweeps, converged, dual_trace)``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    solver = _smo_loops if _accel.USE_NUMBA else _smo_numpy
    alpha = np.zeros(len(y))
    kkt_tol = float(tol)
    sweeps = 0
    traces = []
    while True:
        alpha, w, G, s, converged, trace = solver(X, y, float(C), kkt_tol, int(max_sweeps) - sweeps, alpha)
        sweeps += int(s)
        traces.append(trace if not traces else trace[1:])
        b = smo_intercept(alpha, y, G, C)
        if not converged:
            break
        dual = float(alpha.sum()) - 0.5 * float(w @ w)
        primal = 0.5 * float(w @ w) + C * float(np.maximum(1.0 - y * (X @ w + b), 0.0).sum())
        if primal - dual <= tol * dual or kkt_tol < 1e-12:
            break
        kkt_tol /= 10.0
    return w, b, sweeps, bool(converged), np.concatenate(traces)
