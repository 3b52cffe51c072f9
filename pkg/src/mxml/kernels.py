"""Fused numeric kernels for the hot paths of the score and distance ops.

Every kernel exists twice: a numba ``@njit`` loop version and a plain numpy
version.  The numba path is used when numba imports and the environment
variable ``MXML_NUMBA`` is not set to ``0``.  Both paths are always importable
(``numpy_kernels`` / ``numba_kernels``) so tests can compare them directly.

Shapes used below: ``a`` is (n, d), ``b`` is (m, d); ``mu`` and ``logvar`` are
(N, d) class parameters; ``z`` is (L, d) query latents.
"""

import math
import os
from types import SimpleNamespace

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _np_sqdist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _np_sqdist_grad(a, b, g):
    rows = g.sum(axis=1)
    cols = g.sum(axis=0)
    ga = 2.0 * (rows[:, None] * a - g @ b)
    gb = 2.0 * (cols[:, None] * b - g.T @ a)
    return ga, gb


def _np_pairwise_kl(mu, logvar):
    # out[i, j] = KL(N_i || N_j)
    ratio = np.exp(logvar[:, None, :] - logvar[None, :, :])
    diff = mu[None, :, :] - mu[:, None, :]
    prec_j = np.exp(-logvar)[None, :, :]
    terms = ratio + diff * diff * prec_j - 1.0 + logvar[None, :, :] - logvar[:, None, :]
    return 0.5 * terms.sum(axis=2)


def _np_pairwise_kl_grad(mu, logvar, g):
    ratio = np.exp(logvar[:, None, :] - logvar[None, :, :])
    diff = mu[:, None, :] - mu[None, :, :]  # mu_i - mu_j
    prec_j = np.exp(-logvar)[None, :, :]
    gg = g[:, :, None]
    dmu_pair = gg * diff * prec_j
    gmu = dmu_pair.sum(axis=1) - dmu_pair.sum(axis=0)
    d_lv_i = 0.5 * (ratio - 1.0)
    d_lv_j = 0.5 * (1.0 - ratio - diff * diff * prec_j)
    glv = (gg * d_lv_i).sum(axis=1) + (gg * d_lv_j).sum(axis=0)
    return gmu, glv


def _np_gauss_logpdf(z, mu, logvar):
    prec = np.exp(-logvar)
    diff = z[:, None, :] - mu[None, :, :]
    quad = (diff * diff * prec[None, :, :]).sum(axis=2)
    return -0.5 * (z.shape[1] * LOG_2PI + logvar.sum(axis=1)[None, :] + quad)


def _np_gauss_logpdf_grad(z, mu, logvar, g):
    prec = np.exp(-logvar)[None, :, :]
    diff = z[:, None, :] - mu[None, :, :]
    scaled = diff * prec
    gg = g[:, :, None]
    gz = -(gg * scaled).sum(axis=1)
    gmu = (gg * scaled).sum(axis=0)
    glv = (gg * (-0.5) * (1.0 - diff * scaled)).sum(axis=0)
    return gz, gmu, glv


numpy_kernels = SimpleNamespace(
    sqdist=_np_sqdist,
    sqdist_grad=_np_sqdist_grad,
    pairwise_kl=_np_pairwise_kl,
    pairwise_kl_grad=_np_pairwise_kl_grad,
    gauss_logpdf=_np_gauss_logpdf,
    gauss_logpdf_grad=_np_gauss_logpdf_grad,
    name="numpy",
)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def sqdist(a, b):
        n, d = a.shape
        m = b.shape[0]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(d):
                    t = a[i, k] - b[j, k]
                    s += t * t
                out[i, j] = s
        return out

    @njit(cache=True)
    def sqdist_grad(a, b, g):
        n, d = a.shape
        m = b.shape[0]
        ga = np.zeros((n, d))
        gb = np.zeros((m, d))
        for i in range(n):
            for j in range(m):
                w = 2.0 * g[i, j]
                for k in range(d):
                    t = w * (a[i, k] - b[j, k])
                    ga[i, k] += t
                    gb[j, k] -= t
        return ga, gb

    # exp() is hoisted out of the pair loops: var and prec are O(n d), and
    # exp(lv_i - lv_j) == var_i * prec_j.  Equal log-variances take ratio = 1
    # exactly so identical Gaussians give KL == 0 without rounding.

    @njit(cache=True)
    def pairwise_kl(mu, logvar):
        n, d = mu.shape
        var = np.exp(logvar)
        prec = np.exp(-logvar)
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                s = 0.0
                for k in range(d):
                    dlv = logvar[i, k] - logvar[j, k]
                    ratio = 1.0 if dlv == 0.0 else var[i, k] * prec[j, k]
                    t = mu[j, k] - mu[i, k]
                    s += ratio - 1.0 - dlv + t * t * prec[j, k]
                out[i, j] = 0.5 * s
        return out

    @njit(cache=True)
    def pairwise_kl_grad(mu, logvar, g):
        n, d = mu.shape
        var = np.exp(logvar)
        prec = np.exp(-logvar)
        gmu = np.zeros((n, d))
        glv = np.zeros((n, d))
        for i in range(n):
            for j in range(n):
                w = g[i, j]
                if i == j or w == 0.0:
                    continue
                for k in range(d):
                    diff = mu[i, k] - mu[j, k]
                    ratio = 1.0 if logvar[i, k] == logvar[j, k] else var[i, k] * prec[j, k]
                    t = w * diff * prec[j, k]
                    gmu[i, k] += t
                    gmu[j, k] -= t
                    glv[i, k] += w * 0.5 * (ratio - 1.0)
                    glv[j, k] += 0.5 * (w * (1.0 - ratio) - diff * t)
        return gmu, glv

    @njit(cache=True)
    def gauss_logpdf(z, mu, logvar):
        L, d = z.shape
        n = mu.shape[0]
        prec = np.exp(-logvar)
        out = np.empty((L, n))
        for c in range(n):
            base = d * LOG_2PI
            for k in range(d):
                base += logvar[c, k]
            for q in range(L):
                s = base
                for k in range(d):
                    t = z[q, k] - mu[c, k]
                    s += t * t * prec[c, k]
                out[q, c] = -0.5 * s
        return out

    @njit(cache=True)
    def gauss_logpdf_grad(z, mu, logvar, g):
        L, d = z.shape
        n = mu.shape[0]
        prec = np.exp(-logvar)
        gz = np.zeros((L, d))
        gmu = np.zeros((n, d))
        glv = np.zeros((n, d))
        for q in range(L):
            for c in range(n):
                w = g[q, c]
                for k in range(d):
                    diff = z[q, k] - mu[c, k]
                    s = w * diff * prec[c, k]
                    gz[q, k] -= s
                    gmu[c, k] += s
                    glv[c, k] -= 0.5 * (w - diff * s)
        return gz, gmu, glv

    return SimpleNamespace(
        sqdist=sqdist,
        sqdist_grad=sqdist_grad,
        pairwise_kl=pairwise_kl,
        pairwise_kl_grad=pairwise_kl_grad,
        gauss_logpdf=gauss_logpdf,
        gauss_logpdf_grad=gauss_logpdf_grad,
        name="numba",
    )


try:
    numba_kernels = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_kernels = None


def _select():
    flag = os.environ.get("MXML_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or numba_kernels is None:
        return numpy_kernels
    return numba_kernels


active = _select()


def use_backend(name):
    """Switch the active kernel backend (``"numba"`` or ``"numpy"``)."""
    global active
    if name == "numba":
        if numba_kernels is None:
            raise RuntimeError("numba is not importable")
        active = numba_kernels
    elif name == "numpy":
        active = numpy_kernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return active


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def sqdist(a, b):
    return active.sqdist(_c(a), _c(b))


def sqdist_grad(a, b, g):
    return active.sqdist_grad(_c(a), _c(b), _c(g))


def pairwise_kl(mu, logvar):
    return active.pairwise_kl(_c(mu), _c(logvar))


def pairwise_kl_grad(mu, logvar, g):
    return active.pairwise_kl_grad(_c(mu), _c(logvar), _c(g))


def gauss_logpdf(z, mu, logvar):
    return active.gauss_logpdf(_c(z), _c(mu), _c(logvar))


def gauss_logpdf_grad(z, mu, logvar, g):
    return active.gauss_logpdf_grad(_c(z), _c(mu), _c(logvar), _c(g))
