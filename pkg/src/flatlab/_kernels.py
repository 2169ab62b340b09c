"""Numba kernels on flat parameter vectors.

Every architecture is evaluated through the same calling convention:
``(theta, x, arch, act, m, d, depth, ln_eps, sbn_a, sbn_M, stop_grad)``.
``sbn_a``/``sbn_M`` are the simplified-BatchNorm statistics (ignored by the
other architectures, pass zero-length arrays).

Flat layout (canonical order):
    W1 (m*d, row-major) | b1 (m, absent for NoBias) | gamma (m, SimBN only)
    | W2 ... W_{D-1} (m*m each, Bias only) | W_D (m)
"""

import math

import numpy as np
from numba import njit

NOBIAS, BIAS, SIMBN, SIMLN = 0, 1, 2, 3
RELU, SOFTPLUS = 0, 1
MSE, TRUNCATED, LOGISTIC = 0, 1, 2


@njit(cache=True, nogil=True)
def n_params(arch, m, d, depth):
    n = m * d + m
    if arch != NOBIAS:
        n += m
    if arch == SIMBN:
        n += m
    if arch == BIAS:
        n += (depth - 2) * m * m
    return n


@njit(cache=True, nogil=True)
def _act(z, act):
    if act == RELU:
        return z if z > 0.0 else 0.0
    # log(1 + e^z) in the overflow-safe form
    return math.log1p(math.exp(-abs(z))) + (z if z > 0.0 else 0.0)


@njit(cache=True, nogil=True)
def _dact(z, act):
    if act == RELU:
        return 1.0 if z > 0.0 else 0.0
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def _offsets(arch, m, d):
    """Return (b1, gamma, first upper weight) offsets; -1 when absent."""
    off = m * d
    ob = -1
    og = -1
    if arch != NOBIAS:
        ob = off
        off += m
    if arch == SIMBN:
        og = off
        off += m
    return ob, og, off


@njit(cache=True, nogil=True)
def _preact(theta, x, arch, m, d, z):
    ob, og, ow = _offsets(arch, m, d)
    for j in range(m):
        s = 0.0
        base = j * d
        for k in range(d):
            s += theta[base + k] * x[k]
        if ob >= 0:
            s += theta[ob + j]
        z[j] = s


@njit(cache=True, nogil=True)
def sbn_stats(theta, X, arch, act, m, d, a, M):
    """Fill RMS denominators ``a`` (m) and moments ``M`` (m x (d+1)).

    ``M[j] = mean_k act(z_kj) act'(z_kj) [x_k, 1]`` is the derivative of
    ``a[j]**2 / 2`` with respect to the augmented first-layer row.
    """
    n = X.shape[0]
    z = np.empty(m)
    for j in range(m):
        a[j] = 0.0
        for k in range(d + 1):
            M[j, k] = 0.0
    for i in range(n):
        _preact(theta, X[i], arch, m, d, z)
        for j in range(m):
            h = _act(z[j], act)
            if h == 0.0:
                continue
            a[j] += h * h
            c = h * _dact(z[j], act)
            if c != 0.0:
                for k in range(d):
                    M[j, k] += c * X[i, k]
                M[j, d] += c
    for j in range(m):
        a[j] = math.sqrt(a[j] / n)
        for k in range(d + 1):
            M[j, k] /= n


@njit(cache=True, nogil=True)
def forward(theta, x, arch, act, m, d, depth, ln_eps, sbn_a):
    z = np.empty(m)
    _preact(theta, x, arch, m, d, z)
    ob, og, ow = _offsets(arch, m, d)
    h = np.empty(m)
    for j in range(m):
        h[j] = _act(z[j], act)
    if arch == BIAS and depth > 2:
        for layer in range(depth - 2):
            base = ow + layer * m * m
            h2 = np.empty(m)
            for j in range(m):
                s = 0.0
                for k in range(m):
                    s += theta[base + j * m + k] * h[k]
                h2[j] = _act(s, act)
            h = h2
        ow = ow + (depth - 2) * m * m
    out = 0.0
    if arch == SIMBN:
        for j in range(m):
            if sbn_a[j] > 0.0:
                out += theta[ow + j] * theta[og + j] * h[j] / sbn_a[j]
        return out
    for j in range(m):
        out += theta[ow + j] * h[j]
    if arch == SIMLN:
        nrm = 0.0
        for j in range(m):
            nrm += h[j] * h[j]
        nrm = math.sqrt(nrm)
        out /= nrm if nrm > ln_eps else ln_eps
    return out


@njit(cache=True, nogil=True)
def value_and_grad(theta, x, arch, act, m, d, depth, ln_eps, sbn_a, sbn_M,
                   stop_grad, g):
    """Network output at ``x``; writes d output / d theta into ``g``."""
    z = np.empty(m)
    _preact(theta, x, arch, m, d, z)
    ob, og, ow = _offsets(arch, m, d)
    h = np.empty(m)
    for j in range(m):
        h[j] = _act(z[j], act)
    gz = np.zeros(m)  # d out / d first-layer pre-activation
    out = 0.0

    if arch == BIAS and depth > 2:
        L = depth - 2
        acts = np.empty((L + 1, m))
        pre = np.empty((L, m))
        acts[0] = h
        for layer in range(L):
            base = ow + layer * m * m
            for j in range(m):
                s = 0.0
                for k in range(m):
                    s += theta[base + j * m + k] * acts[layer, k]
                pre[layer, j] = s
                acts[layer + 1, j] = _act(s, act)
        wD = ow + L * m * m
        for j in range(m):
            out += theta[wD + j] * acts[L, j]
            g[wD + j] = acts[L, j]
        delta = np.empty(m)  # d out / d acts[layer+1]
        for j in range(m):
            delta[j] = theta[wD + j]
        for layer in range(L - 1, -1, -1):
            base = ow + layer * m * m
            dz = np.empty(m)
            for j in range(m):
                dz[j] = delta[j] * _dact(pre[layer, j], act)
            nd = np.zeros(m)
            for j in range(m):
                for k in range(m):
                    g[base + j * m + k] = dz[j] * acts[layer, k]
                    nd[k] += theta[base + j * m + k] * dz[j]
            delta = nd
        for j in range(m):
            gz[j] = delta[j] * _dact(z[j], act)
    elif arch == SIMBN:
        for j in range(m):
            aj = sbn_a[j]
            if aj <= 0.0:
                g[ow + j] = 0.0
                g[og + j] = 0.0
                continue
            w2 = theta[ow + j]
            gm = theta[og + j]
            r = h[j] / aj
            out += w2 * gm * r
            g[ow + j] = gm * r
            g[og + j] = w2 * r
            gz[j] = w2 * gm * _dact(z[j], act) / aj
    elif arch == SIMLN:
        dot = 0.0
        nrm = 0.0
        for j in range(m):
            dot += theta[ow + j] * h[j]
            nrm += h[j] * h[j]
        nrm = math.sqrt(nrm)
        if nrm > ln_eps:
            out = dot / nrm
            for j in range(m):
                g[ow + j] = h[j] / nrm
                gh = theta[ow + j] / nrm - dot * h[j] / (nrm * nrm * nrm)
                gz[j] = gh * _dact(z[j], act)
        else:
            out = dot / ln_eps
            for j in range(m):
                g[ow + j] = h[j] / ln_eps
                gz[j] = theta[ow + j] / ln_eps * _dact(z[j], act)
    else:
        for j in range(m):
            out += theta[ow + j] * h[j]
            g[ow + j] = h[j]
            gz[j] = theta[ow + j] * _dact(z[j], act)

    for j in range(m):
        base = j * d
        for k in range(d):
            g[base + k] = gz[j] * x[k]
        if ob >= 0:
            g[ob + j] = gz[j]

    if arch == SIMBN and not stop_grad:
        # path through the batch statistic a[j]
        for j in range(m):
            aj = sbn_a[j]
            if aj <= 0.0 or h[j] == 0.0:
                continue
            c = theta[ow + j] * theta[og + j] * h[j] / (aj * aj * aj)
            base = j * d
            for k in range(d):
                g[base + k] -= c * sbn_M[j, k]
            g[ob + j] -= c * sbn_M[j, d]
    return out


@njit(cache=True, nogil=True)
def loss_terms(pred, target, loss, param):
    """(value, d/dpred, d^2/dpred^2) of the per-example loss."""
    if loss == MSE:
        r = pred - target
        return r * r, 2.0 * r, 2.0
    if loss == TRUNCATED:
        c = param
        r = pred - target
        ar = abs(r)
        sg = 1.0 if r >= 0.0 else -1.0
        if ar <= c:
            return r * r, 2.0 * r, 2.0
        if ar <= 2.0 * c:
            return -r * r + 4.0 * c * ar - 2.0 * c * c, -2.0 * r + 4.0 * c * sg, -2.0
        return 2.0 * c * c, 0.0, 0.0
    # logistic with label smoothing: observed label b weighted by 1 - p
    p = param
    t = (1.0 - p) * target + p * (1.0 - target)
    sp = math.log1p(math.exp(-abs(pred))) + (pred if pred > 0.0 else 0.0)
    if pred >= 0.0:
        s = 1.0 / (1.0 + math.exp(-pred))
    else:
        e = math.exp(pred)
        s = e / (1.0 + e)
    return sp - t * pred, s - t, s * (1.0 - s)


@njit(cache=True, nogil=True)
def batch_forward(theta, X, arch, act, m, d, depth, ln_eps, sbn_a):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = forward(theta, X[i], arch, act, m, d, depth, ln_eps, sbn_a)
    return out


@njit(cache=True, nogil=True)
def batch_jacobian(theta, X, arch, act, m, d, depth, ln_eps, sbn_a, sbn_M,
                   stop_grad):
    n = X.shape[0]
    P = theta.shape[0]
    J = np.zeros((n, P))
    out = np.empty(n)
    for i in range(n):
        out[i] = value_and_grad(theta, X[i], arch, act, m, d, depth, ln_eps,
                                sbn_a, sbn_M, stop_grad, J[i])
    return out, J


@njit(cache=True, nogil=True)
def _loss_grad(theta, X, Y, idx, arch, act, m, d, depth, ln_eps, loss,
               lparam, stop_grad, Xstat, grad):
    """Mean loss over rows ``idx``; gradient written into ``grad``.

    SimBN statistics are recomputed over ``Xstat`` at ``theta``.
    """
    P = theta.shape[0]
    a = np.zeros(m)
    M = np.zeros((m, d + 1))
    if arch == SIMBN:
        sbn_stats(theta, Xstat, arch, act, m, d, a, M)
    for p in range(P):
        grad[p] = 0.0
    g = np.zeros(P)
    total = 0.0
    nb = idx.shape[0]
    for t in range(nb):
        i = idx[t]
        f = value_and_grad(theta, X[i], arch, act, m, d, depth, ln_eps, a, M,
                           stop_grad, g)
        v, dl, _ = loss_terms(f, Y[i], loss, lparam)
        total += v
        for p in range(P):
            grad[p] += dl * g[p]
    for p in range(P):
        grad[p] /= nb
    return total / nb


@njit(cache=True, nogil=True)
def full_loss_grad(theta, X, Y, arch, act, m, d, depth, ln_eps, loss, lparam,
                   stop_grad, grad):
    idx = np.arange(X.shape[0])
    return _loss_grad(theta, X, Y, idx, arch, act, m, d, depth, ln_eps, loss,
                      lparam, stop_grad, X, grad)


@njit(cache=True, nogil=True)
def _project(theta, arch, m, d, radius):
    s = 0.0
    for p in range(m * d):
        s += theta[p] * theta[p]
    s = math.sqrt(s)
    if s > radius * (1.0 + 1e-12):
        c = radius / s
        for p in range(m * d):
            theta[p] *= c
    if arch != NOBIAS:
        ob = m * d
        s = 0.0
        for j in range(m):
            s += theta[ob + j] * theta[ob + j]
        s = math.sqrt(s)
        if s > radius * (1.0 + 1e-12):
            c = radius / s
            for j in range(m):
                theta[ob + j] *= c


@njit(cache=True, nogil=True)
def run_epoch(theta, X, Y, order, batch, lr, wd, rho, radius, arch, act, m, d,
              depth, ln_eps, loss, lparam, stop_grad):
    """One pass over ``order`` in minibatches; updates ``theta`` in place.

    ``rho > 0`` selects the SAM update (normalized ascent of radius rho,
    descent with the gradient taken at the perturbed point).  Returns -1 on
    success, otherwise the step index at which a non-finite value appeared.
    """
    n = order.shape[0]
    P = theta.shape[0]
    g = np.empty(P)
    gp = np.empty(P)
    probe = np.empty(P)
    step = 0
    start = 0
    while start < n:
        stop = min(start + batch, n)
        idx = order[start:stop]
        _loss_grad(theta, X, Y, idx, arch, act, m, d, depth, ln_eps, loss,
                   lparam, stop_grad, X, g)
        upd = g
        if rho > 0.0:
            nrm = 0.0
            for p in range(P):
                nrm += g[p] * g[p]
            nrm = math.sqrt(nrm)
            if nrm > 0.0:
                for p in range(P):
                    probe[p] = theta[p] + rho * g[p] / nrm
                _loss_grad(probe, X, Y, idx, arch, act, m, d, depth, ln_eps,
                           loss, lparam, stop_grad, X, gp)
                upd = gp
        ok = True
        for p in range(P):
            theta[p] -= lr * (upd[p] + wd * theta[p])
            if not math.isfinite(theta[p]):
                ok = False
        if not ok:
            return step
        if radius > 0.0:
            _project(theta, arch, m, d, radius)
        step += 1
        start = stop
    return -1
